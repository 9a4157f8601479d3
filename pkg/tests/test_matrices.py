import numpy as np
import pytest

from gridems.matrices import build_matrices
from gridems.model import build_linknet, find_radial_branches

from oracles import dc_solve, oracle_injections


def test_b_prime_two_bus(case2):
    idx = build_linknet(case2)
    mats = build_matrices(case2, idx)
    bp = mats.b_prime.toarray()
    assert bp[0, 1] == pytest.approx(-10.0)
    assert bp[0, 0] == pytest.approx(10.0)
    assert bp[1, 1] == pytest.approx(10.0)


def test_b_prime_symmetric(case14_ctx):
    _, _, mats = case14_ctx
    bp = mats.b_prime.toarray()
    assert np.allclose(bp, bp.T)


def test_ptdf_radial_two_bus(case2):
    idx = build_linknet(case2)
    mats = build_matrices(case2, idx)
    # injection at non-slack bus 2 flows entirely over the single branch
    assert mats.ptdf[0, case2.bus_pos(2)] == pytest.approx(-1.0)
    assert mats.ptdf[0, case2.bus_pos(1)] == 0.0


def test_ptdf_triangle_split(case3ring):
    idx = build_linknet(case3ring)
    mats = build_matrices(case3ring, idx)
    # equal reactances, slack at bus 1, unit injection at bus 2:
    # direct path 2->1 takes 2/3, path 2->3->1 takes 1/3
    j = case3ring.bus_pos(2)
    assert mats.ptdf[case3ring.branch_pos(1), j] == pytest.approx(-2.0 / 3.0)  # branch 1-2
    assert mats.ptdf[case3ring.branch_pos(2), j] == pytest.approx(1.0 / 3.0)   # branch 2-3
    assert mats.ptdf[case3ring.branch_pos(3), j] == pytest.approx(1.0 / 3.0)   # branch 3-1


def test_ptdf_slack_column_zero(case14_ctx):
    case, idx, mats = case14_ctx
    ref = mats.reference[0]
    assert np.all(mats.ptdf[:, case.bus_pos(ref)] == 0.0)


def test_ptdf_reproduces_dc_solve(case14_ctx):
    case, idx, mats = case14_ctx
    ref = mats.reference[0]
    p, _ = oracle_injections(case)
    flows = mats.ptdf @ (p * case.base_mva)
    oracle = dc_solve(case, ref)
    for i, br in enumerate(case.branches):
        assert flows[i] == pytest.approx(oracle[br.id], abs=1e-9 * case.base_mva)


def test_lodf_diagonal(case14_ctx):
    _, _, mats = case14_ctx
    assert np.allclose(np.diag(mats.lodf), -1.0)


def test_lodf_consistency_with_refactorized_dc(case14_ctx):
    case, idx, mats = case14_ctx
    ref = mats.reference[0]
    radial = find_radial_branches(idx)
    p, _ = oracle_injections(case)
    base = mats.ptdf @ (p * case.base_mva)
    for k, brk in enumerate(case.branches):
        if brk.id in radial:
            continue
        post = dc_solve(case.with_branch_out(brk.id), ref)
        for l, brl in enumerate(case.branches):
            if l == k:
                continue
            predicted = base[l] + mats.lodf[l, k] * base[k]
            assert predicted == pytest.approx(post[brl.id], abs=1e-8 * case.base_mva)
