"""Linear programming layer: problem container, exact solves, dual certificates.

Problems are built row-by-row with free-form relations (<=, >=, =) and
per-variable bounds, then handed to HiGHS (via scipy) for the actual solve.
Duals come back in a single sensitivity convention that makes the strong
duality identity read the same for both senses:

    objective = sum(row_duals * rhs) + sum(lower_duals * lb) + sum(upper_duals * ub)

where bound terms run over finite bounds only, and the reduced cost of a
variable is lower_duals + upper_duals.  ``verify_strong_duality`` checks that
identity plus complementary slackness on a returned certificate.

The materialized form (split <=/=/ arrays) is exposed so hot loops that
re-solve the same structure with a mutated objective or right-hand side can
skip the row-building cost.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import csr_matrix

LE = "<="
GE = ">="
EQ = "="
_RELATIONS = (LE, GE, EQ)

MAX = "max"
MIN = "min"

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"

DEFAULT_METHOD = "highs"


class LPEngineError(RuntimeError):
    """Raised when the backend fails for reasons other than infeasible/unbounded."""


class LinearProgram:
    """Growable LP: variables with bounds and an objective, rows with relations."""

    def __init__(self, sense: str = MAX, name: str = ""):
        if sense not in (MAX, MIN):
            raise ValueError(f"sense must be {MAX!r} or {MIN!r}")
        self.sense = sense
        self.name = name
        self.obj: list[float] = []
        self.lb: list[float] = []
        self.ub: list[float] = []
        self.var_names: list[str] = []
        self._row_idx: list[np.ndarray] = []
        self._row_val: list[np.ndarray] = []
        self.relations: list[str] = []
        self.rhs: list[float] = []
        self.row_names: list[str] = []

    @property
    def n_vars(self) -> int:
        return len(self.obj)

    @property
    def n_rows(self) -> int:
        return len(self.rhs)

    def add_var(
        self,
        name: str = "",
        lb: float = -math.inf,
        ub: float = math.inf,
        obj: float = 0.0,
    ) -> int:
        if lb > ub:
            raise ValueError(f"variable {name or self.n_vars}: lb {lb} > ub {ub}")
        self.var_names.append(name or f"x{self.n_vars}")
        self.lb.append(float(lb))
        self.ub.append(float(ub))
        self.obj.append(float(obj))
        return self.n_vars - 1

    def set_objective(self, var: int, coeff: float) -> None:
        self.obj[var] = float(coeff)

    def add_row(self, coeffs, relation: str, rhs: float, name: str = "") -> int:
        """Add a constraint row.  ``coeffs`` is a {var: coeff} dict or an
        (indices, values) pair; zero coefficients may be included."""
        if relation not in _RELATIONS:
            raise ValueError(f"unknown relation {relation!r}")
        if isinstance(coeffs, dict):
            idx = np.fromiter(coeffs.keys(), dtype=np.int64, count=len(coeffs))
            val = np.fromiter(coeffs.values(), dtype=float, count=len(coeffs))
        else:
            idx, val = coeffs
            idx = np.asarray(idx, dtype=np.int64)
            val = np.asarray(val, dtype=float)
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_vars):
            raise ValueError("row references an unknown variable index")
        self._row_idx.append(idx)
        self._row_val.append(val)
        self.relations.append(relation)
        self.rhs.append(float(rhs))
        self.row_names.append(name or f"r{self.n_rows - 1}")
        return self.n_rows - 1

    def row_coeffs(self, row: int) -> tuple[np.ndarray, np.ndarray]:
        return self._row_idx[row], self._row_val[row]

    def row_dense(self, row: int) -> np.ndarray:
        a = np.zeros(self.n_vars)
        idx, val = self._row_idx[row], self._row_val[row]
        np.add.at(a, idx, val)
        return a

    def materialize(self) -> "MaterializedLP":
        """Split rows into the <= / = arrays HiGHS consumes (>= rows are negated)."""
        n = self.n_vars
        ub_rows: list[int] = []
        eq_rows: list[int] = []
        ub_sign: list[float] = []
        for r, rel in enumerate(self.relations):
            if rel == EQ:
                eq_rows.append(r)
            else:
                ub_rows.append(r)
                ub_sign.append(1.0 if rel == LE else -1.0)

        def build(rows: list[int], signs: list[float] | None) -> tuple[csr_matrix, np.ndarray]:
            data, ri, ci = [], [], []
            b = np.empty(len(rows))
            for out_i, r in enumerate(rows):
                s = 1.0 if signs is None else signs[out_i]
                idx, val = self._row_idx[r], self._row_val[r]
                ri.append(np.full(idx.shape, out_i, dtype=np.int64))
                ci.append(idx)
                data.append(s * val)
                b[out_i] = s * self.rhs[r]
            if rows:
                mat = csr_matrix(
                    (np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))),
                    shape=(len(rows), n),
                )
            else:
                mat = csr_matrix((0, n))
            return mat, b

        A_ub, b_ub = build(ub_rows, ub_sign)
        A_eq, b_eq = build(eq_rows, None)
        return MaterializedLP(
            sense=self.sense,
            c=np.array(self.obj, dtype=float),
            A_ub=A_ub,
            b_ub=b_ub,
            A_eq=A_eq,
            b_eq=b_eq,
            lb=np.array(self.lb, dtype=float),
            ub=np.array(self.ub, dtype=float),
            ub_rows=np.array(ub_rows, dtype=np.int64),
            ub_sign=np.array(ub_sign, dtype=float),
            eq_rows=np.array(eq_rows, dtype=np.int64),
            n_rows=self.n_rows,
        )


@dataclass
class MaterializedLP:
    """HiGHS-ready arrays plus the bookkeeping to map duals back to row order."""

    sense: str
    c: np.ndarray
    A_ub: csr_matrix
    b_ub: np.ndarray
    A_eq: csr_matrix
    b_eq: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    ub_rows: np.ndarray  # original row index of each <= row (after sign folding)
    ub_sign: np.ndarray  # +1 for <= rows, -1 for >= rows folded to <=
    eq_rows: np.ndarray
    n_rows: int


@dataclass
class DualCertificate:
    """Solve outcome with primal point and dual sensitivities.

    ``row_duals[i]`` is d(objective)/d(rhs_i) in the problem's own sense;
    ``lower_duals``/``upper_duals`` are the matching bound sensitivities
    (zero for infinite bounds).  For non-optimal statuses only ``status``
    is meaningful.
    """

    status: str
    objective: float | None = None
    x: np.ndarray | None = None
    row_duals: np.ndarray | None = None
    lower_duals: np.ndarray | None = None
    upper_duals: np.ndarray | None = None
    method: str = DEFAULT_METHOD

    @property
    def is_optimal(self) -> bool:
        return self.status == OPTIMAL


def solve_materialized(
    mat: MaterializedLP,
    *,
    c: np.ndarray | None = None,
    b_ub: np.ndarray | None = None,
    b_eq: np.ndarray | None = None,
    method: str = DEFAULT_METHOD,
) -> DualCertificate:
    """Solve a materialized LP, optionally overriding objective or right-hand sides.

    Overrides are in the *original* row convention (the >= sign folding is
    applied here), so callers can mutate rhs values without tracking signs.
    """
    cc = mat.c if c is None else np.asarray(c, dtype=float)
    bub = mat.b_ub
    if b_ub is not None:
        bub = mat.ub_sign * np.asarray(b_ub, dtype=float)
    beq = mat.b_eq if b_eq is None else np.asarray(b_eq, dtype=float)

    sign = -1.0 if mat.sense == MAX else 1.0
    bounds = [
        (None if not math.isfinite(l) else l, None if not math.isfinite(u) else u)
        for l, u in zip(mat.lb, mat.ub)
    ]
    res = linprog(
        sign * cc,
        A_ub=mat.A_ub if mat.b_ub.size else None,
        b_ub=bub if mat.b_ub.size else None,
        A_eq=mat.A_eq if mat.b_eq.size else None,
        b_eq=beq if mat.b_eq.size else None,
        bounds=bounds,
        method=method,
    )
    if res.status == 2:
        return DualCertificate(status=INFEASIBLE, method=method)
    if res.status == 3:
        return DualCertificate(status=UNBOUNDED, method=method)
    if res.status != 0:
        raise LPEngineError(f"LP backend failure (status {res.status}): {res.message}")

    x = np.asarray(res.x, dtype=float)
    objective = float(cc @ x)
    row_duals = np.zeros(mat.n_rows)
    lower_duals = np.zeros(mat.c.shape[0])
    upper_duals = np.zeros(mat.c.shape[0])
    # scipy marginals are sensitivities of the minimized objective; undo the
    # sense flip and the >=-row negation to get sensitivities of ours.  For a
    # maximize problem the minimized objective is the negative of ours, and
    # folding a >= row negates its rhs, so both corrections multiply in.
    if mat.b_ub.size and res.ineqlin is not None:
        row_duals[mat.ub_rows] = sign * mat.ub_sign * np.asarray(res.ineqlin.marginals)
    if mat.b_eq.size and res.eqlin is not None:
        row_duals[mat.eq_rows] = sign * np.asarray(res.eqlin.marginals)
    if res.lower is not None:
        lower_duals = sign * np.asarray(res.lower.marginals)
    if res.upper is not None:
        upper_duals = sign * np.asarray(res.upper.marginals)
    lower_duals = np.where(np.isfinite(mat.lb), lower_duals, 0.0)
    upper_duals = np.where(np.isfinite(mat.ub), upper_duals, 0.0)
    return DualCertificate(
        status=OPTIMAL,
        objective=objective,
        x=x,
        row_duals=row_duals,
        lower_duals=lower_duals,
        upper_duals=upper_duals,
        method=method,
    )


def solve_lp(lp: LinearProgram, *, method: str = DEFAULT_METHOD) -> DualCertificate:
    """Solve an LP exactly and return the primal point with dual sensitivities."""
    return solve_materialized(lp.materialize(), method=method)


@dataclass
class DualityReport:
    ok: bool
    gap: float  # |primal - dual| objective gap
    max_slackness: float  # worst complementary-slackness residual
    primal_objective: float
    dual_objective: float


def verify_strong_duality(
    lp: LinearProgram,
    cert: DualCertificate,
    *,
    gap_tol: float = 1e-6,
    slack_tol: float = 1e-6,
) -> DualityReport:
    """Check the duality identity and complementary slackness for a certificate.

    The gap test is relative (tol * (1 + |primal|)); slackness multiplies each
    row dual by its row slack and each bound dual by its bound slack.  The
    identity is basis-independent, so degenerate problems with multiple optima
    still verify regardless of which optimal vertex the backend returned.
    """
    if not cert.is_optimal:
        raise ValueError("strong duality can only be verified on an optimal certificate")
    x = cert.x
    primal = float(np.dot(lp.obj, x))
    dual = 0.0
    max_slack = 0.0
    for r in range(lp.n_rows):
        idx, val = lp.row_coeffs(r)
        ax = float(val @ x[idx])
        dual += cert.row_duals[r] * lp.rhs[r]
        max_slack = max(max_slack, abs(cert.row_duals[r] * (lp.rhs[r] - ax)))
    lb = np.array(lp.lb)
    ub = np.array(lp.ub)
    fin_l = np.isfinite(lb)
    fin_u = np.isfinite(ub)
    dual += float(cert.lower_duals[fin_l] @ lb[fin_l])
    dual += float(cert.upper_duals[fin_u] @ ub[fin_u])
    if fin_l.any():
        max_slack = max(
            max_slack, float(np.max(np.abs(cert.lower_duals[fin_l] * (x - lb)[fin_l])))
        )
    if fin_u.any():
        max_slack = max(
            max_slack, float(np.max(np.abs(cert.upper_duals[fin_u] * (ub - x)[fin_u])))
        )
    gap = abs(primal - dual)
    scale = 1.0 + abs(primal)
    ok = gap <= gap_tol * scale and max_slack <= slack_tol * scale
    return DualityReport(
        ok=ok,
        gap=gap,
        max_slackness=max_slack,
        primal_objective=primal,
        dual_objective=dual,
    )
