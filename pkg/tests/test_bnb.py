"""McCormick envelopes and the spatial branch-and-bound loop."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flexgrid.bnb import (
    OBJ_ROW,
    BilinearProgram,
    mccormick_relax,
    mccormick_rows,
    spatial_branch_and_bound,
)
from flexgrid.lp import GE, LE, MAX, MIN, LinearProgram, solve_lp

from lpgen import grid_oracle, random_bilinear

unit = st.floats(0.0, 1.0, allow_nan=False)
bound = st.floats(-5.0, 5.0, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(l1=bound, w1=st.floats(0.0, 4.0), l2=bound, w2=st.floats(0.0, 4.0), t1=unit, t2=unit)
def test_mccormick_rows_contain_the_true_product(l1, w1, l2, w2, t1, t2):
    u1, u2 = l1 + w1, l2 + w2
    x = l1 + t1 * w1
    y = l2 + t2 * w2
    w = x * y
    slop = 1e-9 * (1 + abs(w))
    for a_w, a_x, a_y, rel, rhs in mccormick_rows(l1, u1, l2, u2):
        lhs = a_w * w + a_x * x + a_y * y
        if rel == LE:
            assert lhs <= rhs + slop
        else:
            assert lhs >= rhs - slop


@settings(max_examples=200, deadline=None)
@given(lo=bound, width=st.floats(0.0, 4.0), t=unit)
def test_square_envelope_brackets_the_parabola(lo, width, t):
    hi = lo + width
    x = lo + t * width
    # tangents at the box edges sit under x^2, the secant sits above
    assert x * x >= 2 * lo * x - lo * lo - 1e-9
    assert x * x >= 2 * hi * x - hi * hi - 1e-9
    assert x * x <= (lo + hi) * x - lo * hi + 1e-9 * (1 + x * x)


def _product_bp():
    # max x*y  s.t.  x + y <= 3,  x in [0,2], y in [0,3]
    base = LinearProgram(sense=MAX)
    x = base.add_var("x", lb=0.0, ub=2.0)
    y = base.add_var("y", lb=0.0, ub=3.0)
    base.add_row({x: 1.0, y: 1.0}, LE, 3.0)
    bp = BilinearProgram(base)
    bp.add_term(OBJ_ROW, 1.0, x, y)
    return bp


def test_product_maximum_on_a_budget_line():
    # the product is maximized at the balanced split x = y = 1.5
    res = spatial_branch_and_bound(_product_bp(), epsilon=1e-6)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(2.25, abs=1e-4)
    assert res.x[0] == pytest.approx(1.5, abs=2e-2)
    assert res.x[1] == pytest.approx(1.5, abs=2e-2)
    assert res.gap <= 1e-6 * (1 + 2.25)


def test_concave_square_objective():
    # max x - x^2 on [-1, 2] -> 1/4 at x = 1/2
    base = LinearProgram(sense=MAX)
    x = base.add_var("x", lb=-1.0, ub=2.0, obj=1.0)
    bp = BilinearProgram(base)
    bp.add_term(OBJ_ROW, -1.0, x, x)
    res = spatial_branch_and_bound(bp, epsilon=1e-6)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(0.25, abs=1e-4)
    assert res.x[0] == pytest.approx(0.5, abs=2e-2)


def test_nonconvex_feasible_set_row_product():
    # min x + y  s.t.  x*y >= 1, boxes [0.1, 4]; AM-GM puts the optimum at (1, 1)
    base = LinearProgram(sense=MIN)
    x = base.add_var("x", lb=0.1, ub=4.0, obj=1.0)
    y = base.add_var("y", lb=0.1, ub=4.0, obj=1.0)
    r = base.add_row({}, GE, 1.0)
    bp = BilinearProgram(base)
    bp.add_term(r, 1.0, x, y)
    res = spatial_branch_and_bound(bp, epsilon=1e-6)
    assert res.status == "optimal"
    assert res.objective == pytest.approx(2.0, abs=1e-3)
    assert res.x[0] * res.x[1] >= 1.0 - 1e-6


def test_degenerate_box_is_exact_in_one_node():
    # pinning x to 2 collapses the envelope to w = 2*y: no branching needed
    bp = _product_bp()
    relax = mccormick_relax(bp, {0: (2.0, 2.0), 1: (0.0, 3.0)})
    cert = solve_lp(relax.lp)
    # relaxation optimum: max 2*y with x + y <= 3, x = 2  ->  y = 1, w = 2
    assert cert.objective == pytest.approx(2.0, abs=1e-9)
    w = cert.x[relax.product_var[(0, 1)]]
    assert w == pytest.approx(cert.x[0] * cert.x[1], abs=1e-9)


def test_relaxation_bounds_the_true_optimum():
    rng = np.random.default_rng(7)
    for _ in range(6):
        bp = random_bilinear(rng)
        root = solve_lp(mccormick_relax(bp).lp)
        res = spatial_branch_and_bound(bp, epsilon=1e-6)
        assert root.is_optimal and res.status == "optimal"
        sigma = 1.0 if bp.base.sense == MAX else -1.0
        assert sigma * root.objective >= sigma * res.objective - 1e-9
        assert bp.max_row_violation(res.x) <= 1e-6


def test_matches_dense_grid_search():
    rng = np.random.default_rng(2024)
    for _ in range(6):
        bp = random_bilinear(rng)
        res = spatial_branch_and_bound(bp, epsilon=5e-5)
        ref = grid_oracle(bp)
        assert res.status == "optimal" and ref is not None
        assert abs(res.objective - ref) <= 1e-4 * (1 + abs(ref))


def test_infinite_product_box_is_rejected():
    base = LinearProgram(sense=MAX)
    x = base.add_var("x", lb=0.0)  # no upper bound
    bp = BilinearProgram(base)
    bp.add_term(OBJ_ROW, -1.0, x, x)
    with pytest.raises(ValueError, match="finite boxes"):
        mccormick_relax(bp)


def test_initial_points_are_screened_and_used():
    bp = _product_bp()
    good = np.array([1.5, 1.5])
    bad = np.array([2.0, 3.0])  # violates x + y <= 3
    res = spatial_branch_and_bound(
        bp, epsilon=1e-6, initial_points=[bad, good]
    )
    assert res.status == "optimal"
    assert res.objective == pytest.approx(2.25, abs=1e-6)
    # the infeasible seed must not become the incumbent
    assert bp.max_row_violation(res.x) <= 1e-6

    # with the optimum handed over and a zero node budget, the answer survives
    res0 = spatial_branch_and_bound(
        bp, epsilon=1e-6, node_limit=0, initial_points=[good]
    )
    assert res0.status == "node_limit"
    assert res0.objective == pytest.approx(2.25, abs=1e-9)
    assert res0.nodes == 0


def test_node_limit_without_incumbent():
    res = spatial_branch_and_bound(_product_bp(), node_limit=0)
    assert res.status == "node_limit"
    assert res.x is None and res.objective is None
    assert res.nodes == 0


def test_incumbent_hook_candidates_are_adopted():
    calls = []

    def hook(x_rel):
        calls.append(np.array(x_rel))
        return np.array([1.5, 1.5])

    res = spatial_branch_and_bound(_product_bp(), epsilon=1e-6, incumbent_hook=hook)
    assert res.status == "optimal"
    assert calls, "hook was never consulted"
    assert res.objective == pytest.approx(2.25, abs=1e-6)


def test_structure_helpers():
    base = LinearProgram(sense=MAX)
    x = base.add_var("x", lb=0.0, ub=1.0, obj=2.0)
    y = base.add_var("y", lb=0.0, ub=1.0)
    z = base.add_var("z", lb=-1.0, ub=1.0)
    r = base.add_row({x: 1.0, z: -1.0}, LE, 0.5)
    bp = BilinearProgram(base)
    bp.add_term(r, 2.0, y, x)
    bp.add_term(OBJ_ROW, 0.5, x, y)
    bp.add_term(OBJ_ROW, -1.0, z, z)

    assert bp.products() == [(0, 1), (2, 2)]
    assert bp.product_vars() == [0, 1, 2]

    pt = np.array([0.5, 0.8, -0.5])
    assert bp.true_objective(pt) == pytest.approx(2 * 0.5 + 0.5 * 0.5 * 0.8 - 1.0 * 0.25)
    # row r: x - z + 2*y*x = 0.5 + 0.5 + 0.8 = 1.8 vs rhs 0.5 -> violation 1.3
    assert bp.max_row_violation(pt) == pytest.approx(1.3)
    # bound violations are included
    assert bp.max_row_violation(np.array([-0.2, 0.0, 0.0])) == pytest.approx(0.2)
