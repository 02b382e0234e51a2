"""Bilevel flexibility solver: worst-case screening, single-level ideal case,
feasibility checking and the iterative driver tying them together.

The DSO wants the widest aggregate band [Δp-, Δp+] (plus inverter setpoints)
such that every adversarial follower keeps its node's voltage magnitude
inside [v_min, v_max].  Three steps:

1. ``worst_case_limits`` — per-node safe bounds under adversarial setpoints,
   found by bisection on the scalar band edge (the follower optimum is
   monotone in it);
2. ``assemble_single_level``/``solve_single_level`` — the ideal case for a
   subset of followers, reformulated through LP duality: follower primal
   rows + dual feasibility rows + a strong-duality row certify follower
   optimality inside a single maximization, with the products of upper-level
   decisions and follower quantities handled by McCormick + spatial
   branch-and-bound;
3. ``feasibility_check`` — re-screen all followers at the accepted decision,
   feeding violators back into step 2 (``run_iterative``).
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bnb import BilinearProgram, BnBResult, spatial_branch_and_bound
from .feeder import MODE_CONSTANT_PF, MODE_CONSTANT_Q, MODE_VOLT_VAR
from .follower import (
    ACTIVATIONS,
    MAX_V,
    MIN_V,
    NEGATIVE,
    POSITIVE,
    SLOT_DP_MINUS,
    SLOT_DP_PLUS,
    FlexContext,
    FollowerProblem,
    Scenario,
    all_scenarios,
    available_flexibility_bounds,
    build_follower,
    fix_worst_case_setpoints,
    slot_gamma,
    slot_qbar,
    slot_qset,
)
from .lp import EQ, GE, INFEASIBLE, LE, MAX, OPTIMAL, LinearProgram

BISECTION_TOL_REL = 1e-6
FEAS_TOL_PU = 1e-6
LAMBDA_CAP = 1e3
LAMBDA_ESCALATIONS = 3
VM_BOX = (0.0, 2.0)  # conservative |v| box for volt-var products

DIRECTIONS = ("both", "overvoltage", "undervoltage")


class BilevelError(RuntimeError):
    pass


def _direction_extrema(direction: str) -> tuple[str, ...]:
    try:
        return {
            "both": (MIN_V, MAX_V),
            "overvoltage": (MAX_V,),
            "undervoltage": (MIN_V,),
        }[direction]
    except KeyError:
        raise ValueError(f"unknown direction {direction!r}") from None


def check_anchor(ctx: FlexContext) -> None:
    """The iterative method assumes the current operating point is legal."""
    vm = ctx.anchor.vm
    if np.any(vm > ctx.v_max + 1e-9) or np.any(vm < ctx.v_min - 1e-9):
        k = int(np.argmax(np.maximum(vm - ctx.v_max, ctx.v_min - vm)))
        bus, phase = ctx.index.nodes[k]
        raise BilevelError(
            f"anchor voltage {vm[k]:.4f} p.u. at ({bus}, {phase}) violates "
            f"[{ctx.v_min}, {ctx.v_max}]; no flexibility band exists"
        )


# ---------------------------------------------------------------------------
# Step 1: worst-case screening by bisection
# ---------------------------------------------------------------------------

@dataclass
class WorstCaseLimits:
    """Per-node safe band edges under adversarial setpoints (all p.u.)."""

    upper: np.ndarray  # Δp+ limit per node (>= 0)
    lower: np.ndarray  # Δp- limit per node (<= 0)
    upper_family: list[str]  # extremum family attaining each upper limit
    lower_family: list[str]
    dp_box: tuple[float, float]  # (Δp_lower, Δp_upper) availability bounds
    direction: str

    @property
    def range_upper(self) -> float:
        return float(np.min(self.upper)) if self.upper.size else 0.0

    @property
    def range_lower(self) -> float:
        return float(np.max(self.lower)) if self.lower.size else 0.0

    @property
    def binding_upper(self) -> tuple[int, str]:
        k = int(np.argmin(self.upper))
        return k, self.upper_family[k]

    @property
    def binding_lower(self) -> tuple[int, str]:
        k = int(np.argmax(self.lower))
        return k, self.lower_family[k]


def _bisect_limit(
    mf, node: int, *, full: float, v_min: float, v_max: float,
    extremum: str, tol_abs: float,
) -> float:
    """Largest |band edge| keeping the follower's extreme |v| inside the band.

    ``full`` is the signed availability bound (bracket far end).  The value
    function is monotone in |edge|, so plain bisection is exact to tol_abs.
    """

    def ok(t: float) -> bool:
        cert = mf.solve(node=node, dp_bound=t)
        if cert.status == INFEASIBLE:
            raise BilevelError(
                "follower LP infeasible during screening; followers are "
                "feasible by construction at Δp = 0, so this signals an "
                "assembly bug or inconsistent device data"
            )
        vm = mf.problem.scenario.sigma * cert.objective
        if extremum == MAX_V:
            return vm <= v_max + 1e-9
        return vm >= v_min - 1e-9

    if full == 0.0:
        return 0.0
    if ok(full):
        return full
    if not ok(0.0):
        return 0.0
    sign = 1.0 if full > 0 else -1.0
    lo, hi = 0.0, abs(full)  # lo feasible, hi infeasible
    while hi - lo > tol_abs:
        mid = 0.5 * (lo + hi)
        if ok(sign * mid):
            lo = mid
        else:
            hi = mid
    return sign * lo


def _screen_family(
    ctx: FlexContext, mode: str, activation: str, extremum: str,
    nodes: list[int], tol_abs: float,
) -> list[float]:
    """Bisection limits for one (activation, extremum) family over ``nodes``."""
    scenario = Scenario(node=nodes[0], activation=activation, extremum=extremum)
    problem = build_follower(ctx, scenario, mode, fix_q=False)
    if mode == MODE_CONSTANT_Q:
        slots: dict[str, float] = {}
    else:
        slots = fix_worst_case_setpoints(ctx, mode, extremum)
    dp_lo, dp_up = available_flexibility_bounds(ctx.devices)
    full = dp_up if activation == POSITIVE else dp_lo
    slots[scenario.dp_slot] = full
    mf = problem.materialize(slots)
    return [
        _bisect_limit(
            mf, k, full=full, v_min=ctx.v_min, v_max=ctx.v_max,
            extremum=extremum, tol_abs=tol_abs,
        )
        for k in nodes
    ]


def _screen_family_star(args):
    ctx, mode, activation, extremum, nodes, tol_abs = args
    return activation, extremum, nodes, _screen_family(ctx, mode, activation, extremum, nodes, tol_abs)


def worst_case_limits(
    ctx: FlexContext,
    mode: str,
    *,
    direction: str = "both",
    workers: int = 1,
    tol_rel: float = BISECTION_TOL_REL,
) -> WorstCaseLimits:
    """Per-node worst-case band limits (step 1 of the iterative method).

    For every node and activation case, the follower is given adversarial
    setpoints (constant-Q leaves reactive power to the adversary outright)
    and the largest safe band edge is found by bisection; positive
    activations produce Δp+ limits, negative ones Δp- limits.  A node's
    limit is the tightest over the extremum families selected by
    ``direction``.  The global safe range is (max of lower, min of upper).
    """
    check_anchor(ctx)
    n = ctx.n
    dp_lo, dp_up = available_flexibility_bounds(ctx.devices)
    tol_abs = tol_rel * max(dp_up, -dp_lo, 1e-12)
    extrema = _direction_extrema(direction)

    upper = np.full(n, dp_up)
    lower = np.full(n, dp_lo)
    upper_family = [extrema[0]] * n
    lower_family = [extrema[0]] * n

    tasks = []
    for activation in ACTIVATIONS:
        for extremum in extrema:
            node_list = list(range(n))
            if workers > 1 and n > 1:
                chunk = max(1, math.ceil(n / workers))
                pieces = [node_list[i:i + chunk] for i in range(0, n, chunk)]
            else:
                pieces = [node_list]
            for piece in pieces:
                tasks.append((ctx, mode, activation, extremum, piece, tol_abs))

    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_screen_family_star, tasks))
    else:
        results = [_screen_family_star(t) for t in tasks]

    for activation, extremum, nodes, limits in results:
        for k, lim in zip(nodes, limits):
            if activation == POSITIVE:
                if lim < upper[k] - 1e-15:
                    upper[k] = lim
                    upper_family[k] = extremum
            else:
                if lim > lower[k] + 1e-15:
                    lower[k] = lim
                    lower_family[k] = extremum
    return WorstCaseLimits(
        upper=upper, lower=lower, upper_family=upper_family,
        lower_family=lower_family, dp_box=(dp_lo, dp_up), direction=direction,
    )


# ---------------------------------------------------------------------------
# Step 2: single-level reformulation of the ideal case
# ---------------------------------------------------------------------------

@dataclass
class UpperDecision:
    """A DSO offer: the band edges plus per-inverter setpoint slots (p.u.)."""

    dp_plus: float
    dp_minus: float
    setpoints: dict[str, float]
    mode: str

    def slots_for(self, scenario: Scenario) -> dict[str, float]:
        slots = dict(self.setpoints)
        slots[SLOT_DP_PLUS] = self.dp_plus
        slots[SLOT_DP_MINUS] = self.dp_minus
        return {k: v for k, v in slots.items()}


@dataclass
class FollowerBlock:
    scenario: Scenario
    problem: FollowerProblem
    x_offset: int  # first index of the follower primal block
    dual_offset: int  # first index of the row-dual block
    zl: dict[int, int] = field(default_factory=dict)  # follower var -> zl index
    zu: dict[int, int] = field(default_factory=dict)


@dataclass
class SingleLevelMap:
    ctx: FlexContext
    mode: str
    upper_vars: dict[str, int]  # slot name -> variable index (incl. dp slots)
    setpoint_slots: list[str]
    blocks: list[FollowerBlock]
    product_duals: list[int]  # dual variable indices that appear in products
    lam_cap: float


def setpoint_boxes(ctx: FlexContext, mode: str) -> dict[str, tuple[float, float]]:
    """Feasible boxes for the upper-level setpoint slots of ``mode``."""
    dev = ctx.devices
    boxes: dict[str, tuple[float, float]] = {}
    for k in dev.inverter_nodes:
        if mode == MODE_CONSTANT_PF:
            cap = float(dev.gamma_cap[k])
            boxes[slot_gamma(k)] = (-cap, cap)
        elif mode == MODE_VOLT_VAR:
            boxes[slot_qbar(k)] = (0.0, float(dev.s_cap[k]))
        elif mode == MODE_CONSTANT_Q:
            cap = float(dev.gamma_const[k] * min(dev.p_gen_max[k], dev.s_cap[k]))
            boxes[slot_qset(k)] = (-cap, cap)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return boxes


def neutral_setpoints(ctx: FlexContext, mode: str) -> dict[str, float]:
    """Setpoints that reproduce the anchor at zero activation (all zeros)."""
    return {name: 0.0 for name in setpoint_boxes(ctx, mode)}


def assemble_single_level(
    ctx: FlexContext,
    mode: str,
    followers: list[Scenario],
    *,
    lam_cap: float = LAMBDA_CAP,
    fixed_setpoints: dict[str, float] | None = None,
    vm_box: tuple[float, float] = VM_BOX,
) -> tuple[BilinearProgram, SingleLevelMap]:
    """Strong-duality reformulation of the ideal case for a follower subset.

    Per follower: its primal rows (upper-level slots entering linearly or as
    registered products), dual-feasibility rows over its variables, one
    strong-duality row tying primal to dual objective, and the voltage band
    on its optimal magnitude.  Upper-level objective: maximize Δp+ - Δp-.

    Products appear between a slot variable and either a follower variable
    (mode rows) or a row dual (dual rows and the strong-duality row's
    parametric right-hand side).  Only duals participating in products get
    the ±``lam_cap`` McCormick box.  ``fixed_setpoints`` pins chosen slots to
    constants (degenerate boxes), used for worst-case cross-checks.
    """
    if not followers:
        raise ValueError("need at least one follower scenario")
    dp_lo, dp_up = available_flexibility_bounds(ctx.devices)
    fixed_setpoints = fixed_setpoints or {}

    lp = LinearProgram(sense=MAX, name="single-level")
    bp = BilinearProgram(base=lp)

    upper_vars: dict[str, int] = {}
    upper_vars[SLOT_DP_PLUS] = lp.add_var("dp_plus", lb=0.0, ub=dp_up, obj=1.0)
    upper_vars[SLOT_DP_MINUS] = lp.add_var("dp_minus", lb=dp_lo, ub=0.0, obj=-1.0)
    sp_boxes = setpoint_boxes(ctx, mode)
    for name, (lo, hi) in sp_boxes.items():
        if name in fixed_setpoints:
            v = float(fixed_setpoints[name])
            if not (lo - 1e-12 <= v <= hi + 1e-12):
                raise ValueError(f"fixed setpoint {name}={v} outside its box [{lo}, {hi}]")
            lo = hi = v
        upper_vars[name] = lp.add_var(name, lb=lo, ub=hi)

    blocks: list[FollowerBlock] = []
    product_duals: list[int] = []
    fix_q = mode == MODE_CONSTANT_Q

    for scenario in followers:
        problem = build_follower(ctx, scenario, mode, fix_q=fix_q)
        n_x = problem.n_vars
        x0 = lp.n_vars
        tag = f"s{scenario.number}k{scenario.node}"
        for v in range(n_x):
            lo, hi = problem.lb[v], problem.ub[v]
            # Volt-var products need finite |v| boxes on the magnitude block.
            if mode == MODE_VOLT_VAR and 2 * problem.n <= v < 3 * problem.n:
                lo = max(lo, vm_box[0]) if math.isinf(lo) else lo
                hi = min(hi, vm_box[1]) if math.isinf(hi) else hi
            lp.add_var(f"{tag}.x{v}", lb=lo, ub=hi)
        d0 = lp.n_vars
        for r, row in enumerate(problem.rows):
            has_product = bool(row.coeff_slots or row.rhs_slots)
            if row.relation == LE:
                lo, hi = 0.0, lam_cap if has_product else math.inf
            elif row.relation == GE:
                lo, hi = -lam_cap if has_product else -math.inf, 0.0
            else:
                lim = lam_cap if has_product else math.inf
                lo, hi = -lim, lim
            d = lp.add_var(f"{tag}.lam[{row.name}]", lb=lo, ub=hi)
            if has_product:
                product_duals.append(d)
        block = FollowerBlock(
            scenario=scenario, problem=problem, x_offset=x0, dual_offset=d0
        )
        for v in range(n_x):
            if math.isfinite(problem.lb[v]):
                block.zl[v] = lp.add_var(f"{tag}.zl[{v}]", lb=0.0)
            if math.isfinite(problem.ub[v]):
                block.zu[v] = lp.add_var(f"{tag}.zu[{v}]", lb=0.0)
        blocks.append(block)

        # Primal rows: slot-linear terms move to the LHS, products registered.
        for r, row in enumerate(problem.rows):
            idx = list(x0 + row.idx)
            val = list(row.val)
            for slot, c in row.rhs_slots:
                idx.append(upper_vars[slot])
                val.append(-c)
            rid = lp.add_row(
                (np.array(idx, dtype=np.int64), np.array(val)),
                row.relation, row.rhs, name=f"{tag}.{row.name}",
            )
            for var, slot, c in row.coeff_slots:
                bp.add_term(rid, c, upper_vars[slot], x0 + var)

        # Column view of the follower matrix for the dual-feasibility rows.
        col_lin: list[list[tuple[int, float]]] = [[] for _ in range(n_x)]
        col_slot: list[list[tuple[int, str, float]]] = [[] for _ in range(n_x)]
        for r, row in enumerate(problem.rows):
            for j, a in zip(row.idx, row.val):
                col_lin[int(j)].append((r, float(a)))
            for var, slot, c in row.coeff_slots:
                col_slot[var].append((r, slot, c))
        c_obj = problem.objective
        for v in range(n_x):
            idx = [d0 + r for r, _ in col_lin[v]]
            val = [a for _, a in col_lin[v]]
            if v in block.zu:
                idx.append(block.zu[v])
                val.append(1.0)
            if v in block.zl:
                idx.append(block.zl[v])
                val.append(-1.0)
            rid = lp.add_row(
                (np.array(idx, dtype=np.int64), np.array(val)),
                EQ, float(c_obj[v]), name=f"{tag}.dual[{v}]",
            )
            for r, slot, c in col_slot[v]:
                bp.add_term(rid, c, upper_vars[slot], d0 + r)

        # Strong duality: primal objective >= dual objective (weak duality
        # provides <=, so the pair pins equality).
        sd_idx: list[int] = []
        sd_val: list[float] = []
        nz = np.nonzero(c_obj)[0]
        for v in nz:
            sd_idx.append(x0 + int(v))
            sd_val.append(float(c_obj[v]))
        for r, row in enumerate(problem.rows):
            if row.rhs != 0.0:
                sd_idx.append(d0 + r)
                sd_val.append(-row.rhs)
        for v, zi in block.zu.items():
            if problem.ub[v] != 0.0:
                sd_idx.append(zi)
                sd_val.append(-problem.ub[v])
        for v, zi in block.zl.items():
            if problem.lb[v] != 0.0:
                sd_idx.append(zi)
                sd_val.append(problem.lb[v])
        rid = lp.add_row(
            (np.array(sd_idx, dtype=np.int64), np.array(sd_val)),
            GE, 0.0, name=f"{tag}.strong_duality",
        )
        for r, row in enumerate(problem.rows):
            for slot, c in row.rhs_slots:
                bp.add_term(rid, -c, upper_vars[slot], d0 + r)

        # Voltage band on this follower's optimal magnitude.
        vm_var = x0 + problem.i_vm(scenario.node)
        lp.add_row({vm_var: 1.0}, LE, ctx.v_max, name=f"{tag}.band_hi")
        lp.add_row({vm_var: 1.0}, GE, ctx.v_min, name=f"{tag}.band_lo")

    slmap = SingleLevelMap(
        ctx=ctx, mode=mode, upper_vars=upper_vars,
        setpoint_slots=list(sp_boxes), blocks=blocks,
        product_duals=product_duals, lam_cap=lam_cap,
    )
    return bp, slmap


def _decision_from_x(slmap: SingleLevelMap, x: np.ndarray) -> UpperDecision:
    up = slmap.upper_vars
    setpoints = {name: float(x[up[name]]) for name in slmap.setpoint_slots}
    return UpperDecision(
        dp_plus=float(x[up[SLOT_DP_PLUS]]),
        dp_minus=float(x[up[SLOT_DP_MINUS]]),
        setpoints=setpoints,
        mode=slmap.mode,
    )


def _complete_point(
    slmap: SingleLevelMap,
    decision_slots: dict[str, float],
    flags: dict,
    lb: np.ndarray,
    ub: np.ndarray,
) -> np.ndarray | None:
    """Assemble a full single-level point from fixed upper-level values.

    With the upper level pinned, every follower is an ordinary LP; its
    optimal primal/dual pair satisfies the primal, dual and strong-duality
    rows by construction, so a full single-level point can be assembled
    exactly.  Returns None when a follower leaves the voltage band or fails
    to solve (the candidate would be rejected anyway).
    """
    ctx = slmap.ctx
    x = np.zeros(lb.shape[0])
    for name, vi in slmap.upper_vars.items():
        x[vi] = decision_slots[name]
    for block in slmap.blocks:
        cert = block.problem.solve(
            {s: decision_slots[s] for s in block.problem.slot_names}
        )
        if cert.status != OPTIMAL:
            return None
        vm = block.problem.worst_voltage(cert)
        if vm > ctx.v_max + 1e-9 or vm < ctx.v_min - 1e-9:
            return None
        nx = block.problem.n_vars
        lo = lb[block.x_offset:block.x_offset + nx]
        hi = ub[block.x_offset:block.x_offset + nx]
        if np.any(cert.x < lo - 1e-9) or np.any(cert.x > hi + 1e-9):
            flags["vm_overflow"] = True
        x[block.x_offset:block.x_offset + nx] = np.clip(cert.x, lo, hi)
        duals = cert.row_duals
        x[block.dual_offset:block.dual_offset + len(block.problem.rows)] = duals
        if np.any(np.abs(duals) > slmap.lam_cap):
            flags["dual_overflow"] = True
        # Bound duals in the z >= 0 convention of the assembly.
        zl = -cert.lower_duals
        zu = cert.upper_duals
        for v, zi in block.zl.items():
            x[zi] = max(zl[v], 0.0)
        for v, zi in block.zu.items():
            x[zi] = max(zu[v], 0.0)
    return x


def _bisected_decision(
    slmap: SingleLevelMap,
    setpoints: dict[str, float],
    lb: np.ndarray,
    ub: np.ndarray,
    tol_abs: float,
) -> dict[str, float] | None:
    """Largest feasible band edges for fixed setpoints, by bisection.

    Feasibility decomposes by direction: positive followers only see the
    upper edge and negative followers the lower one, so each edge is the
    tightest per-follower bisection limit.  Returns None when a follower is
    infeasible outright at these setpoints (a constant-Q setpoint outside
    the cone reachable under the activation's sign rules does that).
    """
    ctx = slmap.ctx
    up = slmap.upper_vars
    dp_up = float(ub[up[SLOT_DP_PLUS]])
    dp_lo = float(lb[up[SLOT_DP_MINUS]])
    t_pos, t_neg = dp_up, dp_lo
    try:
        for block in slmap.blocks:
            sc = block.scenario
            full = dp_up if sc.activation == POSITIVE else dp_lo
            slots = {
                s: v for s, v in setpoints.items()
                if s in block.problem.slot_names
            }
            if sc.dp_slot in block.problem.slot_names:
                slots[sc.dp_slot] = full
            mf = block.problem.materialize(slots)
            lim = _bisect_limit(
                mf, sc.node, full=full, v_min=ctx.v_min, v_max=ctx.v_max,
                extremum=sc.extremum, tol_abs=tol_abs,
            )
            if sc.activation == POSITIVE:
                t_pos = min(t_pos, lim)
            else:
                t_neg = max(t_neg, lim)
    except BilevelError:
        return None
    out = dict(setpoints)
    out[SLOT_DP_PLUS] = max(t_pos, 0.0)
    out[SLOT_DP_MINUS] = min(t_neg, 0.0)
    return out


def _candidate_setpoint_sets(
    slmap: SingleLevelMap, lb: np.ndarray, ub: np.ndarray
) -> list[dict[str, float]]:
    """Bang-bang heuristic setpoints: neutral, full-absorb, full-boost.

    Droop authority boxes start at zero, so "absorb" means full authority
    there; degenerate (fixed) boxes collapse all three to the same point.
    """
    up = slmap.upper_vars
    cands: list[dict[str, float]] = []
    for kind in ("neutral", "absorb", "boost"):
        c: dict[str, float] = {}
        for name in slmap.setpoint_slots:
            vi = up[name]
            lo, hi = float(lb[vi]), float(ub[vi])
            if kind == "neutral":
                v = min(max(0.0, lo), hi)
            elif kind == "absorb":
                v = hi if name.startswith("qbar[") else lo
            else:
                v = hi
            c[name] = v
        if c not in cands:
            cands.append(c)
    # A constant-Q setpoint deeper than the cone at anchor generation makes
    # negative-activation followers infeasible (no curtailment can restore
    # the cone), so also try the deepest hold the cone admits either way.
    if slmap.mode == MODE_CONSTANT_Q:
        dev = slmap.ctx.devices
        for sign in (-1.0, 1.0):
            c = {}
            for k in dev.inverter_nodes:
                name = slot_qset(k)
                vi = up[name]
                hold = sign * float(dev.gamma_const[k] * dev.p_gen0[k])
                c[name] = min(max(hold, float(lb[vi])), float(ub[vi]))
            if c and c not in cands:
                cands.append(c)
    return cands


def _presolve_points(
    slmap: SingleLevelMap,
    flags: dict,
    lb: np.ndarray,
    ub: np.ndarray,
    tol_abs: float,
) -> list[np.ndarray]:
    """Heuristic incumbents: bang-bang setpoints with bisected band edges.

    Each candidate also gets a zero-band fallback, so whenever any setpoint
    choice keeps every follower in band at zero deviation the search starts
    with an incumbent in hand instead of hunting for one through the tree.
    """
    points: list[np.ndarray] = []
    for sp in _candidate_setpoint_sets(slmap, lb, ub):
        dec = _bisected_decision(slmap, sp, lb, ub, tol_abs)
        trials = [dec]
        if dec is None or (dec[SLOT_DP_PLUS], dec[SLOT_DP_MINUS]) != (0.0, 0.0):
            trials.append(dict(sp, **{SLOT_DP_PLUS: 0.0, SLOT_DP_MINUS: 0.0}))
        for d in trials:
            if d is None:
                continue
            x = _complete_point(slmap, d, flags, lb, ub)
            if x is not None:
                points.append(x)
    return points


def _completion_hook(
    slmap: SingleLevelMap,
    flags: dict,
    lb: np.ndarray,
    ub: np.ndarray,
    tol_abs: float,
):
    """Candidate generator for the B&B: fix the upper level, solve followers.

    Tries the relaxation's own upper-level values first; when a follower
    leaves the band at those values (the usual case early on, while the
    product envelopes still let the relaxation pair loose setpoints with
    full band edges), retries with the edges bisected back to the largest
    pair feasible for the relaxation's setpoints, which turns nearly every
    node into a producer of genuine incumbents.
    """

    def hook(x_rel: np.ndarray):
        up = slmap.upper_vars
        # Clamp upper-level values into their boxes to kill LP roundoff.
        decision_slots = {
            name: float(min(max(x_rel[vi], lb[vi]), ub[vi]))
            for name, vi in up.items()
        }
        x = _complete_point(slmap, decision_slots, flags, lb, ub)
        if x is not None:
            return x
        setpoints = {name: decision_slots[name] for name in slmap.setpoint_slots}
        dec = _bisected_decision(slmap, setpoints, lb, ub, tol_abs)
        if dec is None:
            return None
        return _complete_point(slmap, dec, flags, lb, ub)

    return hook


@dataclass
class SingleLevelResult:
    decision: UpperDecision
    objective: float
    bnb: BnBResult
    lam_cap: float
    escalations: int


def solve_single_level(
    ctx: FlexContext,
    mode: str,
    followers: list[Scenario],
    *,
    epsilon: float = 1e-4,
    lam_cap: float = LAMBDA_CAP,
    fixed_setpoints: dict[str, float] | None = None,
    node_limit: int = 5000,
) -> SingleLevelResult:
    """Solve the ideal case for a follower subset to global optimality.

    Re-solves with doubled dual boxes (up to three times) whenever the
    incumbent leans on a λ box, so the cap never silently binds.
    """
    cap = lam_cap
    last_exc: BilevelError | None = None
    for attempt in range(LAMBDA_ESCALATIONS + 1):
        bp, slmap = assemble_single_level(
            ctx, mode, followers, lam_cap=cap, fixed_setpoints=fixed_setpoints
        )
        lb = np.array(bp.base.lb)
        ub = np.array(bp.base.ub)
        up = slmap.upper_vars
        dp_span = float(ub[up[SLOT_DP_PLUS]]) - float(lb[up[SLOT_DP_MINUS]])
        tol_abs = BISECTION_TOL_REL * max(dp_span, 1e-12)
        flags: dict = {}
        warm = _presolve_points(slmap, flags, lb, ub, tol_abs)
        hook = _completion_hook(slmap, flags, lb, ub, tol_abs)
        res = spatial_branch_and_bound(
            bp, epsilon=epsilon, node_limit=node_limit,
            incumbent_hook=hook, initial_points=warm,
        )
        if res.status == INFEASIBLE or res.x is None:
            detail = "no incumbent found" if res.x is None else "program infeasible"
            last_exc = BilevelError(
                f"single-level solve failed ({detail}); either the upper-level "
                "setpoints force a follower out of the voltage band at zero "
                "deviation, or the dual boxes are too tight"
                + ("; a follower voltage left the McCormick box"
                   if flags.get("vm_overflow") else "")
            )
            if flags.get("dual_overflow"):
                cap *= 2.0
                continue
            raise last_exc
        x = res.x
        # An incumbent at the availability ceiling cannot be improved by any
        # relaxation of the dual boxes: the objective is capped by the
        # deviation boxes alone.
        at_ceiling = res.objective >= dp_span - 1e-9 * (1.0 + dp_span)
        box_active = any(
            abs(x[d]) >= 0.999 * cap for d in slmap.product_duals
        )
        if (
            not at_ceiling
            and (flags.get("dual_overflow") or box_active)
            and attempt < LAMBDA_ESCALATIONS
        ):
            cap *= 2.0
            continue
        return SingleLevelResult(
            decision=_decision_from_x(slmap, x),
            objective=res.objective,
            bnb=res,
            lam_cap=cap,
            escalations=attempt,
        )
    raise last_exc or BilevelError("dual box escalation exhausted")


# ---------------------------------------------------------------------------
# Step 3: feasibility re-screening
# ---------------------------------------------------------------------------

@dataclass
class Violation:
    scenario: Scenario
    worst_vm: float
    amount: float  # p.u. beyond the band


@dataclass
class FeasibilityReport:
    violations: list[Violation]
    worst_vm: dict[tuple[int, str, str], float]  # (node, activation, extremum) -> |v|

    @property
    def ok(self) -> bool:
        return not self.violations


def feasibility_check(
    ctx: FlexContext,
    mode: str,
    decision: UpperDecision,
    *,
    direction: str = "both",
    tol: float = FEAS_TOL_PU,
) -> FeasibilityReport:
    """Screen every follower at a fixed decision.

    Solves the 4n (or direction-filtered 2n) follower LPs with the decision's
    band edges and setpoints and reports scenarios whose extreme voltage
    leaves [v_min - tol, v_max + tol].  A follower reported infeasible by the
    LP engine is an assembly bug: at Δp = 0 every follower admits the
    zero-deviation point.
    """
    extrema = _direction_extrema(direction)
    fix_q = mode == MODE_CONSTANT_Q
    violations: list[Violation] = []
    worst: dict[tuple[int, str, str], float] = {}
    for activation in ACTIVATIONS:
        for extremum in extrema:
            proto = Scenario(node=0, activation=activation, extremum=extremum)
            problem = build_follower(ctx, proto, mode, fix_q=fix_q)
            slots = {
                s: v for s, v in decision.slots_for(proto).items()
                if s in problem.slot_names
            }
            missing = [s for s in problem.slot_names if s not in slots]
            if missing:
                raise BilevelError(f"decision lacks slots required by followers: {missing}")
            mf = problem.materialize(slots)
            for k in range(ctx.n):
                cert = mf.solve(node=k)
                if cert.status != OPTIMAL:
                    raise BilevelError(
                        f"follower (node {k}, {activation}/{extremum}) reported "
                        f"{cert.status}; followers are feasible by construction"
                    )
                vm = proto.sigma * cert.objective
                worst[(k, activation, extremum)] = vm
                over = vm - ctx.v_max
                under = ctx.v_min - vm
                amount = max(over, under)
                if amount > tol:
                    violations.append(
                        Violation(
                            scenario=Scenario(node=k, activation=activation, extremum=extremum),
                            worst_vm=vm,
                            amount=float(amount),
                        )
                    )
    violations.sort(key=lambda v: (-v.amount, v.scenario.node, v.scenario.number))
    return FeasibilityReport(violations=violations, worst_vm=worst)


# ---------------------------------------------------------------------------
# The iterative driver
# ---------------------------------------------------------------------------

@dataclass
class FlexibilityResult:
    mode: str
    direction: str
    decision: UpperDecision
    iterations: int
    converged: bool
    worst_case: WorstCaseLimits
    followers: list[Scenario]
    objective_history: list[float]
    feasibility: FeasibilityReport
    single_level: SingleLevelResult

    @property
    def dp_plus(self) -> float:
        return self.decision.dp_plus

    @property
    def dp_minus(self) -> float:
        return self.decision.dp_minus


def run_iterative(
    ctx: FlexContext,
    mode: str,
    *,
    direction: str = "both",
    workers: int = 1,
    epsilon: float = 1e-4,
    max_iterations: int | None = None,
    node_limit: int = 5000,
) -> FlexibilityResult:
    """Worst-case screening, then ideal-case solves with feasibility cuts.

    Seeds the ideal case with the followers that bound the worst-case range
    (ties broken toward the lowest node index), solves the single-level
    program, re-screens all followers at the accepted decision, and folds any
    violators back in.  The active set only grows, so the objective history
    is nonincreasing; the iteration cap defaults to the number of available
    scenarios (4n, direction-filtered 2n).
    """
    check_anchor(ctx)
    if ctx.n == 0:
        raise BilevelError("feeder has no non-slack nodes")
    wc = worst_case_limits(ctx, mode, direction=direction, workers=workers)
    scenarios_all = all_scenarios(ctx.n, direction=direction)
    cap = max_iterations if max_iterations is not None else len(scenarios_all)
    cap = max(cap, 1)

    k_up, fam_up = wc.binding_upper
    k_lo, fam_lo = wc.binding_lower
    active: list[Scenario] = [Scenario(node=k_up, activation=POSITIVE, extremum=fam_up)]
    seed_lo = Scenario(node=k_lo, activation=NEGATIVE, extremum=fam_lo)
    if seed_lo not in active:
        active.append(seed_lo)

    history: list[float] = []
    result: SingleLevelResult | None = None
    report: FeasibilityReport | None = None
    converged = False
    iterations = 0
    for iterations in range(1, cap + 1):
        result = solve_single_level(
            ctx, mode, active, epsilon=epsilon, node_limit=node_limit
        )
        history.append(result.objective)
        report = feasibility_check(
            ctx, mode, result.decision, direction=direction
        )
        if report.ok:
            converged = True
            break
        added = False
        for v in report.violations:
            if v.scenario not in active:
                active.append(v.scenario)
                added = True
        if not added:
            # Same violators as before: tolerance knife-edge; stop rather than loop.
            break
    assert result is not None and report is not None
    return FlexibilityResult(
        mode=mode,
        direction=direction,
        decision=result.decision,
        iterations=iterations,
        converged=converged,
        worst_case=wc,
        followers=list(active),
        objective_history=history,
        feasibility=report,
        single_level=result,
    )
