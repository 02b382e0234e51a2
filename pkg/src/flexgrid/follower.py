"""Adversarial follower problems: one LP per (node, activation, extremum).

Each follower models an aggregator that redispatches flexible devices against
the DSO's offered band to push one node's voltage magnitude to an extreme.
The LP couples, per single-phase node: the linearized power flow, the
first-order magnitude relation, constant-power-factor load reactive power,
the inverter capability outer approximation, the inverter control-mode rows
and the aggregate activation row, under the activation sign rules (positive
activation: loads may only shed, inverters may only raise; negative mirrored).

Upper-level quantities (the offered band Δp±, per-inverter setpoints γ, q̄ or
q_set) enter as named *slots*: every row stores its follower-variable
coefficients plus optional slot-linear contributions to coefficients and
right-hand side.  Fixing all slots yields an ordinary LP; leaving them
symbolic is what the single-level reformulation consumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .feeder import (
    MODE_CONSTANT_PF,
    MODE_CONSTANT_Q,
    MODE_VOLT_VAR,
    BusPhaseIndex,
    FeederModel,
    index_nodes,
)
from .lp import (
    EQ,
    GE,
    LE,
    MAX,
    DualCertificate,
    LinearProgram,
    MaterializedLP,
    solve_materialized,
)
from .powerflow import (
    LinearPFModel,
    MagnitudeTaylor,
    OperatingPoint,
    build_fixed_point_model,
    magnitude_taylor,
    solve_nonlinear_pf,
)

POSITIVE = "positive"
NEGATIVE = "negative"
ACTIVATIONS = (POSITIVE, NEGATIVE)

MIN_V = "min"
MAX_V = "max"
EXTREMA = (MIN_V, MAX_V)

# Table ordering of the four scenario families per node.
_SCENARIO_NUMBER = {
    (POSITIVE, MIN_V): 1,
    (POSITIVE, MAX_V): 2,
    (NEGATIVE, MIN_V): 3,
    (NEGATIVE, MAX_V): 4,
}

SLOT_DP_PLUS = "dp_plus"
SLOT_DP_MINUS = "dp_minus"


def slot_gamma(node: int) -> str:
    return f"gamma[{node}]"


def slot_qbar(node: int) -> str:
    return f"qbar[{node}]"


def slot_qset(node: int) -> str:
    return f"qset[{node}]"


@dataclass(frozen=True)
class Scenario:
    node: int
    activation: str  # POSITIVE | NEGATIVE
    extremum: str  # MIN_V | MAX_V

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"bad activation {self.activation!r}")
        if self.extremum not in EXTREMA:
            raise ValueError(f"bad extremum {self.extremum!r}")

    @property
    def sigma(self) -> float:
        """Objective sign: +1 maximizes |v|, -1 minimizes it."""
        return 1.0 if self.extremum == MAX_V else -1.0

    @property
    def number(self) -> int:
        return _SCENARIO_NUMBER[(self.activation, self.extremum)]

    @property
    def dp_slot(self) -> str:
        return SLOT_DP_PLUS if self.activation == POSITIVE else SLOT_DP_MINUS


@dataclass
class NodeDevices:
    """Per-node device data in p.u. (zeros where a device is absent)."""

    p_load0: np.ndarray
    p_load_min: np.ndarray
    p_load_max: np.ndarray
    beta_load: np.ndarray  # sqrt(1-pf^2)/pf, reactive per unit of load draw
    p_gen0: np.ndarray
    p_gen_min: np.ndarray
    p_gen_max: np.ndarray
    s_cap: np.ndarray
    gamma_cap: np.ndarray  # constant-pf mode: |gamma| bound from the pf rating
    gamma_const: np.ndarray  # constant-q mode: fixed cone half-width
    inverter_nodes: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.p_load0.shape[0]


def build_devices(model: FeederModel, index: BusPhaseIndex | None = None) -> NodeDevices:
    """Aggregate device fleets into per-node totals (p.u.).

    Co-located devices sum their power quantities; the parser guarantees
    their reactive couplings (load pf, inverter pf and cone width) agree, so
    the Minkowski sum of their capability sets is the same shape scaled.
    """
    if index is None:
        index = index_nodes(model)
    n = index.n
    z = lambda: np.zeros(n)
    dev = NodeDevices(
        p_load0=z(), p_load_min=z(), p_load_max=z(), beta_load=z(),
        p_gen0=z(), p_gen_min=z(), p_gen_max=z(), s_cap=z(),
        gamma_cap=z(), gamma_const=z(), inverter_nodes=(),
    )
    base = model.base_kva
    for ld in model.loads:
        k = index.of(ld.bus, ld.phase)
        dev.p_load0[k] += ld.p_kw / base
        dev.p_load_min[k] += ld.p_min_kw / base
        dev.p_load_max[k] += ld.p_max_kw / base
        dev.beta_load[k] = math.sqrt(1.0 - ld.pf**2) / ld.pf
    inv_nodes = set()
    for g in model.inverters:
        k = index.of(g.bus, g.phase)
        inv_nodes.add(k)
        dev.p_gen0[k] += g.p_kw / base
        dev.p_gen_min[k] += g.p_min_kw / base
        dev.p_gen_max[k] += g.p_max_kw / base
        dev.s_cap[k] += g.s_kva / base
        dev.gamma_cap[k] = math.sqrt(1.0 - g.pf**2) / g.pf
        dev.gamma_const[k] = g.gamma
    dev.inverter_nodes = tuple(sorted(inv_nodes))
    return dev


@dataclass
class FlexContext:
    """Everything the flexibility problems need about one feeder state."""

    feeder: FeederModel
    index: BusPhaseIndex
    anchor: OperatingPoint
    lpf: LinearPFModel
    taylor: MagnitudeTaylor
    devices: NodeDevices
    v_min: float
    v_max: float

    @property
    def n(self) -> int:
        return self.index.n


def build_context(
    model: FeederModel,
    *,
    v_min: float = 0.9,
    v_max: float = 1.1,
    anchor: OperatingPoint | None = None,
) -> FlexContext:
    """Solve the anchor power flow and assemble the linearized models."""
    if not v_min < v_max:
        raise ValueError("need v_min < v_max")
    index = index_nodes(model)
    if anchor is None:
        anchor = solve_nonlinear_pf(model, index=index)
    lpf = build_fixed_point_model(model, anchor)
    taylor = magnitude_taylor(anchor)
    devices = build_devices(model, index)
    return FlexContext(
        feeder=model, index=index, anchor=anchor, lpf=lpf,
        taylor=taylor, devices=devices, v_min=v_min, v_max=v_max,
    )


def available_flexibility_bounds(devices: NodeDevices) -> tuple[float, float]:
    """Aggregate offer-band limits (Δp_lower, Δp_upper) in p.u.

    Upper: sum of device upper bounds minus current operation; lower the
    mirror with lower bounds.  These cap the band the DSO may offer, and the
    band always contains zero.
    """
    up = float(
        np.sum(devices.p_gen_max - devices.p_gen0)
        + np.sum(devices.p_load_max - devices.p_load0)
    )
    dn = float(
        np.sum(devices.p_gen_min - devices.p_gen0)
        + np.sum(devices.p_load_min - devices.p_load0)
    )
    return min(dn, 0.0), max(up, 0.0)


def fix_worst_case_setpoints(ctx: FlexContext, mode: str, extremum: str) -> dict[str, float]:
    """Adversarial setpoint choice for the worst-case screening step.

    Maximum-voltage scenarios get full boost (γ at +cap, volt-var curve
    disabled with q̄ = 0); minimum-voltage scenarios the mirror (γ at -cap,
    q̄ at the apparent-power cap).  Constant-Q keeps its reactive output as a
    follower variable, so there is nothing to fix.
    """
    if extremum not in EXTREMA:
        raise ValueError(f"bad extremum {extremum!r}")
    if mode == MODE_CONSTANT_Q:
        raise ValueError("constant-q mode has no worst-case setpoints to fix")
    dev = ctx.devices
    slots: dict[str, float] = {}
    for k in dev.inverter_nodes:
        if mode == MODE_CONSTANT_PF:
            cap = dev.gamma_cap[k]
            slots[slot_gamma(k)] = cap if extremum == MAX_V else -cap
        elif mode == MODE_VOLT_VAR:
            slots[slot_qbar(k)] = 0.0 if extremum == MAX_V else dev.s_cap[k]
        else:
            raise ValueError(f"unknown mode {mode!r}")
    return slots


@dataclass
class ParamRow:
    """One follower constraint with optional upper-level slot dependences.

    Effective coefficient on follower variable v:
        sum of (idx, val) entries for v  +  sum coeff_slots c * slot_value
    Effective rhs: rhs + sum rhs_slots c * slot_value.
    """

    name: str
    relation: str
    idx: np.ndarray
    val: np.ndarray
    rhs: float = 0.0
    coeff_slots: list[tuple[int, str, float]] = field(default_factory=list)
    rhs_slots: list[tuple[str, float]] = field(default_factory=list)


class FollowerProblem:
    """The adversary's LP for one scenario, with upper-level slots symbolic.

    Variable layout (n = number of single-phase nodes): blocks of length n in
    order v_d, v_q, |v|, Δp_gen, Δp_load, q_load, q_gen — 7n variables total.
    """

    def __init__(self, ctx: FlexContext, scenario: Scenario, mode: str, *, fix_q: bool = False):
        if mode not in (MODE_CONSTANT_PF, MODE_CONSTANT_Q, MODE_VOLT_VAR):
            raise ValueError(f"unknown mode {mode!r}")
        self.ctx = ctx
        self.scenario = scenario
        self.mode = mode
        self.fix_q = fix_q
        n = ctx.n
        self.n = n
        self.n_vars = 7 * n
        self.lb = np.full(self.n_vars, -np.inf)
        self.ub = np.full(self.n_vars, np.inf)
        self.rows: list[ParamRow] = []
        self.slot_names: list[str] = []
        self._slot_seen: set[str] = set()
        self._build()

    # --- variable layout -------------------------------------------------
    def i_vd(self, k: int) -> int:
        return k

    def i_vq(self, k: int) -> int:
        return self.n + k

    def i_vm(self, k: int) -> int:
        return 2 * self.n + k

    def i_dpg(self, k: int) -> int:
        return 3 * self.n + k

    def i_dpl(self, k: int) -> int:
        return 4 * self.n + k

    def i_ql(self, k: int) -> int:
        return 5 * self.n + k

    def i_qg(self, k: int) -> int:
        return 6 * self.n + k

    @property
    def objective(self) -> np.ndarray:
        c = np.zeros(self.n_vars)
        c[self.i_vm(self.scenario.node)] = self.scenario.sigma
        return c

    def _slot(self, name: str) -> str:
        if name not in self._slot_seen:
            self._slot_seen.add(name)
            self.slot_names.append(name)
        return name

    def _add_row(self, row: ParamRow) -> None:
        self.rows.append(row)

    # --- assembly --------------------------------------------------------
    def _build(self) -> None:
        ctx, n = self.ctx, self.n
        dev = ctx.devices
        sc = self.scenario
        positive = sc.activation == POSITIVE

        # Device deviation bounds with the activation sign rules folded in.
        dpg_lo = np.maximum(dev.p_gen_min, 0.0) - dev.p_gen0
        dpg_hi = np.minimum(dev.p_gen_max, dev.s_cap) - dev.p_gen0
        dpl_lo = dev.p_load_min - dev.p_load0
        dpl_hi = dev.p_load_max - dev.p_load0
        if positive:
            dpg_lo = np.maximum(dpg_lo, 0.0)
            dpl_hi = np.minimum(dpl_hi, 0.0)
        else:
            dpg_hi = np.minimum(dpg_hi, 0.0)
            dpl_lo = np.maximum(dpl_lo, 0.0)
        no_inv = dev.s_cap <= 0.0
        no_load = (dev.p_load0 == 0) & (dev.p_load_min == 0) & (dev.p_load_max == 0)
        dpg_lo[no_inv] = dpg_hi[no_inv] = 0.0
        dpl_lo[no_load] = dpl_hi[no_load] = 0.0
        bad = (dpg_lo > dpg_hi + 1e-12) | (dpl_lo > dpl_hi + 1e-12)
        if np.any(bad):
            raise ValueError(
                f"empty deviation box at node(s) {np.flatnonzero(bad).tolist()}: "
                "device bounds exclude the current operating point"
            )
        for k in range(n):
            self.lb[self.i_dpg(k)], self.ub[self.i_dpg(k)] = dpg_lo[k], max(dpg_lo[k], dpg_hi[k])
            self.lb[self.i_dpl(k)], self.ub[self.i_dpl(k)] = dpl_lo[k], max(dpl_lo[k], dpl_hi[k])
            self.lb[self.i_qg(k)], self.ub[self.i_qg(k)] = -dev.s_cap[k], dev.s_cap[k]

        # Magnitude linearization: alpha_d v_d + alpha_q v_q - |v| = 0.
        t = ctx.taylor
        for k in range(n):
            self._add_row(ParamRow(
                name=f"mag[{k}]", relation=EQ,
                idx=np.array([self.i_vd(k), self.i_vq(k), self.i_vm(k)]),
                val=np.array([t.alpha_d[k], t.alpha_q[k], -1.0]),
            ))

        # Load reactive coupling: q_load = beta * (p_load0 + Δp_load).
        for k in range(n):
            self._add_row(ParamRow(
                name=f"loadq[{k}]", relation=EQ,
                idx=np.array([self.i_ql(k), self.i_dpl(k)]),
                val=np.array([1.0, -dev.beta_load[k]]),
                rhs=dev.beta_load[k] * dev.p_load0[k],
            ))

        # Linearized power flow, rectangular components.  Injections are
        # P = p_gen0 + Δp_gen - p_load0 - Δp_load, Q = q_gen - q_load.
        z2 = ctx.lpf.z2
        z1 = ctx.lpf.z1
        p0 = dev.p_gen0 - dev.p_load0
        re2, im2 = z2.real, z2.imag
        all_dpg = np.arange(3 * n, 4 * n)
        all_dpl = np.arange(4 * n, 5 * n)
        all_ql = np.arange(5 * n, 6 * n)
        all_qg = np.arange(6 * n, 7 * n)
        for k in range(n):
            idx = np.concatenate([[self.i_vd(k)], all_dpg, all_dpl, all_qg, all_ql])
            val = np.concatenate([[1.0], -re2[k], re2[k], -im2[k], im2[k]])
            self._add_row(ParamRow(
                name=f"pf_d[{k}]", relation=EQ, idx=idx, val=val,
                rhs=float(z1[k].real + re2[k] @ p0),
            ))
        for k in range(n):
            idx = np.concatenate([[self.i_vq(k)], all_dpg, all_dpl, all_qg, all_ql])
            val = np.concatenate([[1.0], -im2[k], im2[k], re2[k], -re2[k]])
            self._add_row(ParamRow(
                name=f"pf_q[{k}]", relation=EQ, idx=idx, val=val,
                rhs=float(z1[k].imag + im2[k] @ p0),
            ))

        # Inverter capability outer approximation (box part is in the bounds).
        root2 = math.sqrt(2.0)
        for k in dev.inverter_nodes:
            cap = root2 * dev.s_cap[k] - dev.p_gen0[k]
            self._add_row(ParamRow(
                name=f"cap_hi[{k}]", relation=LE,
                idx=np.array([self.i_dpg(k), self.i_qg(k)]),
                val=np.array([1.0, 1.0]), rhs=cap,
            ))
            self._add_row(ParamRow(
                name=f"cap_lo[{k}]", relation=LE,
                idx=np.array([self.i_dpg(k), self.i_qg(k)]),
                val=np.array([1.0, -1.0]), rhs=cap,
            ))

        # Control-mode rows.
        vband = ctx.v_max - ctx.v_min
        for k in dev.inverter_nodes:
            if self.mode == MODE_CONSTANT_PF:
                g = self._slot(slot_gamma(k))
                self._add_row(ParamRow(
                    name=f"pfq[{k}]", relation=EQ,
                    idx=np.array([self.i_qg(k)]), val=np.array([1.0]),
                    coeff_slots=[(self.i_dpg(k), g, -1.0)],
                    rhs_slots=[(g, dev.p_gen0[k])],
                ))
            elif self.mode == MODE_CONSTANT_Q:
                gc = dev.gamma_const[k]
                self._add_row(ParamRow(
                    name=f"cq_hi[{k}]", relation=LE,
                    idx=np.array([self.i_qg(k), self.i_dpg(k)]),
                    val=np.array([1.0, -gc]), rhs=gc * dev.p_gen0[k],
                ))
                self._add_row(ParamRow(
                    name=f"cq_lo[{k}]", relation=LE,
                    idx=np.array([self.i_qg(k), self.i_dpg(k)]),
                    val=np.array([-1.0, -gc]), rhs=gc * dev.p_gen0[k],
                ))
                if self.fix_q:
                    q = self._slot(slot_qset(k))
                    self._add_row(ParamRow(
                        name=f"qfix[{k}]", relation=EQ,
                        idx=np.array([self.i_qg(k)]), val=np.array([1.0]),
                        rhs_slots=[(q, 1.0)],
                    ))
            else:  # volt-var droop through the linearized magnitude
                qb = self._slot(slot_qbar(k))
                self._add_row(ParamRow(
                    name=f"vv[{k}]", relation=EQ,
                    idx=np.array([self.i_qg(k)]), val=np.array([1.0]),
                    coeff_slots=[(self.i_vm(k), qb, 2.0 / vband)],
                    rhs_slots=[(qb, (ctx.v_max + ctx.v_min) / vband)],
                ))

        # Aggregate activation row: one-sided per activation case.
        dp = self._slot(sc.dp_slot)
        agg_idx = np.concatenate([all_dpg, all_dpl])
        agg_val = np.concatenate([np.ones(n), -np.ones(n)])
        self._add_row(ParamRow(
            name="agg", relation=LE if positive else GE,
            idx=agg_idx, val=agg_val, rhs_slots=[(dp, 1.0)],
        ))

    # --- materialization and solving -------------------------------------
    def row_index(self, name: str) -> int:
        for i, r in enumerate(self.rows):
            if r.name == name:
                return i
        raise KeyError(name)

    def to_lp(self, slots: dict[str, float]) -> LinearProgram:
        """Instantiate as a plain LP with all slots fixed (builder path)."""
        missing = [s for s in self.slot_names if s not in slots]
        if missing:
            raise KeyError(f"missing slot values: {missing}")
        lp = LinearProgram(sense=MAX, name=f"follower[s{self.scenario.number},k{self.scenario.node}]")
        c = self.objective
        for v in range(self.n_vars):
            lp.add_var(lb=self.lb[v], ub=self.ub[v], obj=c[v])
        for row in self.rows:
            idx, val, rhs = _instantiate(row, slots)
            lp.add_row((idx, val), row.relation, rhs, name=row.name)
        return lp

    def materialize(self, slots: dict[str, float]) -> "MaterializedFollower":
        return MaterializedFollower(self, slots)

    def solve(self, slots: dict[str, float], *, node: int | None = None) -> DualCertificate:
        return self.materialize(slots).solve(node=node)

    def worst_voltage(self, cert: DualCertificate) -> float:
        """Optimal |v| at the scenario's node (undo the min-objective sign)."""
        return self.scenario.sigma * cert.objective


def _instantiate(row: ParamRow, slots: dict[str, float]) -> tuple[np.ndarray, np.ndarray, float]:
    idx, val, rhs = row.idx, row.val, row.rhs
    if row.coeff_slots:
        extra_i = np.array([v for v, _, _ in row.coeff_slots], dtype=np.int64)
        extra_v = np.array([c * slots[s] for _, s, c in row.coeff_slots])
        idx = np.concatenate([idx, extra_i])
        val = np.concatenate([val, extra_v])
    for s, c in row.rhs_slots:
        rhs += c * slots[s]
    return idx, val, float(rhs)


class MaterializedFollower:
    """HiGHS-ready arrays for one follower at fixed slots.

    Supports the two cheap mutations the screening loops need: swapping the
    target node (objective) and moving the aggregate-row bound (rhs).
    """

    def __init__(self, problem: FollowerProblem, slots: dict[str, float]):
        self.problem = problem
        self.slots = dict(slots)
        lp = problem.to_lp(self.slots)
        self.mat: MaterializedLP = lp.materialize()
        agg = problem.row_index("agg")
        self._agg_row = agg
        # Position of the aggregate row inside the folded <= block.
        pos = np.flatnonzero(self.mat.ub_rows == agg)
        self._agg_pos = int(pos[0]) if pos.size else None
        self._b_orig = self.mat.ub_sign * self.mat.b_ub  # original-convention rhs

    def solve(self, *, node: int | None = None, dp_bound: float | None = None) -> DualCertificate:
        p = self.problem
        c = None
        if node is not None and node != p.scenario.node:
            c = np.zeros(p.n_vars)
            c[p.i_vm(node)] = p.scenario.sigma
        b_ub = None
        if dp_bound is not None:
            if self._agg_pos is None:
                raise RuntimeError("aggregate row is not an inequality row")
            b_ub = self._b_orig.copy()
            b_ub[self._agg_pos] = dp_bound
        return solve_materialized(self.mat, c=c, b_ub=b_ub)

    def agg_dual(self, cert: DualCertificate) -> float:
        """Sensitivity of the objective to the aggregate bound."""
        return float(cert.row_duals[self._agg_row])


def build_follower(
    ctx: FlexContext, scenario: Scenario, mode: str, *, fix_q: bool = False
) -> FollowerProblem:
    """Assemble the follower LP structure for one scenario.

    ``fix_q`` adds the q_gen = q_set binding rows used when a constant-Q
    DSO setpoint is an upper-level decision (ideal case); the worst-case
    screening leaves constant-Q reactive power to the adversary.
    """
    return FollowerProblem(ctx, scenario, mode, fix_q=fix_q)


def all_scenarios(
    n: int, *, direction: str = "both"
) -> list[Scenario]:
    """Enumerate follower scenarios for every node, honoring a direction filter.

    ``direction`` is one of "both", "overvoltage" (only max-|v| scenarios) or
    "undervoltage" (only min-|v| scenarios).
    """
    extrema = {
        "both": (MIN_V, MAX_V),
        "overvoltage": (MAX_V,),
        "undervoltage": (MIN_V,),
    }.get(direction)
    if extrema is None:
        raise ValueError(f"unknown direction {direction!r}")
    out = []
    for k in range(n):
        for act in ACTIVATIONS:
            for ext in extrema:
                out.append(Scenario(node=k, activation=act, extremum=ext))
    return out
