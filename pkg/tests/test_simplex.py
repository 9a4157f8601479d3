import numpy as np
import pytest
from scipy.optimize import linprog

from gridems import simplex as sx


def make_random_lp(rng, n=8, m=5):
    lp = sx.LinearProgram()
    lo = rng.uniform(-5, 0, n)
    hi = lo + rng.uniform(0.5, 10, n)
    c = rng.uniform(-5, 5, n)
    for j in range(n):
        lp.add_var(f"x{j}", c[j], lo[j], hi[j])
    A = rng.uniform(-2, 2, (m, n))
    x_feas = rng.uniform(lo, hi)
    b = A @ x_feas
    senses = rng.choice(["<=", ">=", "="], m)
    for i in range(m):
        rhs = b[i] + (1.0 if senses[i] == "<=" else -1.0 if senses[i] == ">=" else 0.0) * abs(rng.normal())
        lp.add_row({j: A[i, j] for j in range(n)}, senses[i], rhs)
    return lp, A, senses


def scipy_solve(lp):
    A = lp.matrix()
    res = linprog(
        c=np.array(lp.cost),
        A_eq=A, b_eq=lp.b,
        bounds=list(zip(lp.lower, [u if np.isfinite(u) else None for u in lp.upper])),
        method="highs",
    )
    return res


def test_single_variable_min():
    lp = sx.LinearProgram()
    lp.add_var("x", cost=2.0, lower=1.0, upper=5.0)
    res = sx.solve(lp)
    assert res.x[0] == pytest.approx(1.0)
    assert res.objective == pytest.approx(2.0)


def test_merit_order_dispatch():
    lp = sx.LinearProgram()
    g1 = lp.add_var("g1", 20.0, 0.0, 100.0)
    g2 = lp.add_var("g2", 30.0, 0.0, 100.0)
    lp.add_row({g1: 1.0, g2: 1.0}, "=", 120.0)
    res = sx.solve(lp)
    assert res.x[g1] == pytest.approx(100.0)
    assert res.x[g2] == pytest.approx(20.0)
    assert res.objective == pytest.approx(2600.0)


def test_infeasible_detected():
    lp = sx.LinearProgram()
    x = lp.add_var("x", 1.0, 0.0, 1.0)
    lp.add_row({x: 1.0}, ">=", 5.0)
    with pytest.raises(sx.Infeasible):
        sx.solve(lp)


def test_unbounded_detected():
    lp = sx.LinearProgram()
    x = lp.add_var("x", -1.0, 0.0, np.inf)
    y = lp.add_var("y", 0.0, 0.0, np.inf)
    lp.add_row({x: 1.0, y: -1.0}, "<=", 1.0)
    with pytest.raises(sx.Unbounded):
        sx.solve(lp)


@pytest.mark.parametrize("seed", range(20))
def test_random_lps_match_highs(seed):
    rng = np.random.default_rng(seed)
    lp, _, _ = make_random_lp(rng)
    ours = sx.solve(lp)
    ref = scipy_solve(lp)
    assert ref.status == 0
    assert ours.objective == pytest.approx(ref.fun, rel=1e-7, abs=1e-7)
    # feasibility of our solution
    A = lp.matrix()
    assert np.max(np.abs(A @ ours.x - lp.b)) < 1e-7
    assert np.all(ours.x >= np.array(lp.lower) - 1e-8)
    assert np.all(ours.x <= np.array(lp.upper) + 1e-8)


@pytest.mark.parametrize("seed", range(10))
def test_strong_duality(seed):
    rng = np.random.default_rng(100 + seed)
    lp, _, _ = make_random_lp(rng, n=10, m=6)
    res = sx.solve(lp)
    gap = abs(res.objective - res.dual_objective(lp))
    assert gap <= 1e-8 * max(1.0, abs(res.objective))


@pytest.mark.parametrize("seed", range(20))
def test_complementary_slackness(seed):
    rng = np.random.default_rng(300 + seed)
    lp, _, _ = make_random_lp(rng, n=9, m=5)
    res = sx.solve(lp)
    lo = np.array(lp.lower)
    hi = np.array(lp.upper)
    for j in range(lp.n):
        d = res.reduced_costs[j]
        interior = lo[j] + 1e-6 < res.x[j] < hi[j] - 1e-6
        if interior:
            assert abs(d) < 1e-6
        if d > 1e-6:
            assert res.x[j] == pytest.approx(lo[j], abs=1e-7)
        if d < -1e-6:
            assert res.x[j] == pytest.approx(hi[j], abs=1e-7)
