import math

import numpy as np
import pytest
from scipy.optimize import linprog

from gridems import powerflow as pf
from gridems import sced
from gridems.matrices import build_matrices
from gridems.model import build_linknet
from gridems.rtca import RtcaOptions, RtcaReport, run_rtca


def highs_solve(lp):
    A = lp.matrix()
    return linprog(
        c=np.array(lp.cost),
        A_eq=A, b_eq=lp.b,
        bounds=list(zip(lp.lower, [u if np.isfinite(u) else None for u in lp.upper])),
        method="highs",
    )


@pytest.fixture(scope="module")
def pipeline14(case14):
    idx = build_linknet(case14)
    mats = build_matrices(case14, idx)
    base = pf.solve(case14, mats, pf.PowerFlowOptions(), idx)
    assert base.converged
    report = run_rtca(case14, base, idx=idx)
    return case14, idx, mats, base, report


# --- derating ---------------------------------------------------------------

def test_derate_pythagorean():
    limit, floored = sced.derate_branch(100.0, 60.0, 0.0)
    assert limit == pytest.approx(80.0)
    assert not floored


def test_derate_uses_worse_end():
    limit, _ = sced.derate_branch(100.0, 30.0, -60.0)
    assert limit == pytest.approx(80.0)


def test_derate_floor_engages():
    limit, floored = sced.derate_branch(50.0, 55.0, 10.0)
    assert floored
    assert limit == pytest.approx(2.5)


def test_derate_zero_q_keeps_full_rating():
    limit, floored = sced.derate_branch(80.0, 0.0, 0.0)
    assert limit == pytest.approx(80.0)
    assert not floored


def test_derate_rejects_nonpositive_rating():
    with pytest.raises(sced.ScedError):
        sced.derate_branch(0.0, 1.0, 1.0)


# --- loss distribution -------------------------------------------------------

@pytest.mark.parametrize("option", sced.LOSS_OPTIONS)
def test_losses_conserved(pipeline14, option):
    case, idx, mats, base, _ = pipeline14
    adj = sced.distribute_losses(base, case, option)
    assert adj.sum() == pytest.approx(base.total_loss_mw, abs=1e-9)


def test_losses_unknown_option(pipeline14):
    case, _, _, base, _ = pipeline14
    with pytest.raises(sced.ScedError):
        sced.distribute_losses(base, case, "everywhere")


def test_losses_load_buses_proportional(pipeline14):
    case, _, _, base, _ = pipeline14
    adj = sced.distribute_losses(base, case, "load_buses")
    total_load = sum(d.p for d in case.loads)
    for d in case.loads:
        expected = base.total_loss_mw * d.p / total_load
        assert adj[case.bus_pos(d.bus)] == pytest.approx(expected, rel=1e-9)


def test_losses_branch_half_half_nonnegative(pipeline14):
    case, _, _, base, _ = pipeline14
    adj = sced.distribute_losses(base, case, "branch_half_half")
    # every series branch dissipates, so each placement is nonnegative
    assert np.all(adj >= -1e-12)


# --- cost segments -----------------------------------------------------------

def test_cost_segments_cover_capability(case14):
    for g in case14.generators:
        segs = sced.cost_segments(g)
        assert sum(w for w, _ in segs) == pytest.approx(g.p_max)
        mcs = [mc for _, mc in segs]
        assert mcs == sorted(mcs)  # convex curves in the bundled case


# --- the LP itself -----------------------------------------------------------

def test_lp_matches_highs(pipeline14):
    case, idx, mats, base, report = pipeline14
    prob = sced.build_problem(case, base, report, mats, idx=idx)
    ours = sced.solve_lp(prob)
    ref = highs_solve(prob.lp)
    assert ref.status == 0
    assert ours.objective == pytest.approx(ref.fun, rel=1e-7)


def test_anchor_is_exact_at_zero_delta(pipeline14):
    """With the dispatch pinned at the AC operating point, every modeled
    flow equals the AC flow exactly."""
    case, idx, mats, base, report = pipeline14
    prob = sced.build_problem(case, base, report, mats, idx=idx)
    x = np.zeros(prob.lp.n)
    for gid, v in prob.var_gen_p.items():
        x[v] = prob.gen_p0[gid]
    for k, (coeffs, const) in prob.flow_exprs.items():
        modeled = const + sum(x[v] * c for v, c in coeffs.items())
        assert modeled == pytest.approx(base.p_from[k], abs=1e-9)


def test_clean_dispatch_no_slack(pipeline14):
    case, idx, mats, base, report = pipeline14
    plan, realized = sced.dispatch_pipeline(case, base, report, mats, idx=idx)
    assert plan.clean
    assert plan.ac_feasible
    assert all(v == pytest.approx(0.0, abs=1e-7) for v in plan.shed_base.values())


def test_dispatch_respects_ramp(pipeline14):
    case, idx, mats, base, report = pipeline14
    plan, _ = sced.dispatch_pipeline(case, base, report, mats, idx=idx)
    for i, g in enumerate(case.generators):
        if not g.status:
            continue
        assert abs(plan.gen_p[g.id] - base.gen_p[i]) <= g.ramp_rate + 1e-7


def test_reserves_cover_any_single_unit(pipeline14):
    case, idx, mats, base, report = pipeline14
    plan, _ = sced.dispatch_pipeline(case, base, report, mats, idx=idx)
    for g in case.generators:
        others = sum(r for gid, r in plan.gen_reserve.items() if gid != g.id)
        assert others >= plan.gen_p[g.id] - 1e-6


def test_reserve_within_headroom_and_ramp(pipeline14):
    case, idx, mats, base, report = pipeline14
    plan, _ = sced.dispatch_pipeline(case, base, report, mats, idx=idx)
    opts = sced.ScedOptions()
    for g in case.generators:
        r = plan.gen_reserve[g.id]
        assert r <= g.p_max - plan.gen_p[g.id] + 1e-7
        assert r <= g.ramp_rate * opts.reserve_window / opts.dispatch_interval + 1e-7


def test_balance_holds(pipeline14):
    """Single-pass balance: generation covers load plus the anchor's losses."""
    case, idx, mats, base, report = pipeline14
    plan, _ = sced.dispatch_pipeline(case, base, report, mats, idx=idx,
                                     max_passes=1)
    total_gen = sum(plan.gen_p.values())
    total_load = sum(d.p for d in case.loads) - sum(plan.shed_base.values())
    assert total_gen == pytest.approx(total_load + base.total_loss_mw, abs=1e-6)


def test_predicted_flows_within_limits(pipeline14):
    case, idx, mats, base, report = pipeline14
    plan, _ = sced.dispatch_pipeline(case, base, report, mats, idx=idx)
    prob = sced.build_problem(case, base, report, mats, idx=idx)
    limits = {case.branches[k].id: lim for k, lim, _ in prob.base_limits}
    for bid, f in plan.predicted_base_flows.items():
        assert abs(f) <= limits[bid] + 1e-6


def test_realized_flows_close_to_predicted(pipeline14):
    """The PTDF model tracks the verifying AC solve to within a couple of
    MW on this case (losses shift with the dispatch)."""
    case, idx, mats, base, report = pipeline14
    plan, realized = sced.dispatch_pipeline(case, base, report, mats, idx=idx)
    assert realized.converged
    for bid, f in plan.predicted_base_flows.items():
        assert abs(f - plan.realized_flows[bid]) < 3.0


def test_determinism(pipeline14):
    case, idx, mats, base, report = pipeline14
    p1, _ = sced.dispatch_pipeline(case, base, report, mats, idx=idx)
    p2, _ = sced.dispatch_pipeline(case, base, report, mats, idx=idx)
    assert p1.gen_p == p2.gen_p
    assert p1.objective == p2.objective


def test_duals_strong_duality(pipeline14):
    case, idx, mats, base, report = pipeline14
    prob = sced.build_problem(case, base, report, mats, idx=idx)
    from gridems import simplex as sx
    res = sx.solve(prob.lp)
    gap = abs(res.objective - res.dual_objective(prob.lp))
    assert gap <= 1e-7 * max(1.0, abs(res.objective))


# --- stressed cases ----------------------------------------------------------

def tighten(case, factor):
    """Scale every branch rating down by factor."""
    import dataclasses
    branches = tuple(dataclasses.replace(b, s_max=b.s_max * factor,
                                         s_max_emergency=(b.s_max_emergency * factor
                                                          if b.s_max_emergency else None))
                     for b in case.branches)
    return dataclasses.replace(case, branches=branches)


def test_infeasible_network_sheds_load(case14):
    squeezed = tighten(case14, 0.25)
    idx = build_linknet(squeezed)
    mats = build_matrices(squeezed, idx)
    base = pf.solve(squeezed, mats, pf.PowerFlowOptions(), idx)
    report = RtcaReport(contingency_list=[], results=[], base=base)
    plan, _ = sced.dispatch_pipeline(squeezed, base, report, mats, idx=idx,
                                     max_passes=1)
    assert not plan.clean
    assert sum(plan.shed_base.values()) > 1.0
    ref = highs_solve(sced.build_problem(squeezed, base, report, mats, idx=idx).lp)
    assert plan.objective == pytest.approx(ref.fun, rel=1e-7)


def test_contingency_blocks_change_dispatch(pipeline14):
    """Feeding RTCA criticals into the LP adds post-outage constraints;
    verify they are honored on the LP's own model."""
    case, idx, mats, base, _ = pipeline14
    tight = tighten(case, 0.62)
    tidx = build_linknet(tight)
    tmats = build_matrices(tight, tidx)
    tbase = pf.solve(tight, tmats, pf.PowerFlowOptions(), tidx)
    assert tbase.converged
    report = run_rtca(tight, tbase, idx=tidx)
    assert report.critical, "stressed case should produce criticals"
    prob = sced.build_problem(tight, tbase, report, tmats, idx=tidx)
    plan = sced.solve_lp(prob)
    ref = highs_solve(prob.lp)
    assert ref.status == 0
    assert plan.objective == pytest.approx(ref.fun, rel=1e-6)
    # modeled post-contingency flows at the solution respect their limits
    for block in prob.cont_blocks:
        flows = plan.predicted_cont_flows[block["outage"]]
        for row in block["rows"]:
            bid = tight.branches[row["branch_pos"]].id
            assert abs(flows[bid]) <= row["limit"] + 1e-6


def test_closed_loop_reaches_secure_point(case14):
    """On a rating-tightened case the dispatch-verify loop ends with a
    violation-free post-dispatch contingency screen."""
    tight = tighten(case14, 0.8)
    idx = build_linknet(tight)
    mats = build_matrices(tight, idx)
    base = pf.solve(tight, mats, pf.PowerFlowOptions(), idx)
    report = run_rtca(tight, base, idx=idx)
    plan, realized = sced.dispatch_pipeline(tight, base, report, mats, idx=idx)
    assert plan.clean
    assert realized.converged
    assert all(not r.violations for r in plan.post_rtca.results)


def test_secure_case_post_dispatch_rtca_clean(pipeline14):
    case, idx, mats, base, report = pipeline14
    plan, realized = sced.dispatch_pipeline(case, base, report, mats, idx=idx)
    assert plan.clean
    assert plan.post_rtca is not None
    assert all(not r.violations for r in plan.post_rtca.results)


def test_penalty_guard(pipeline14):
    case, idx, mats, base, report = pipeline14
    with pytest.raises(sced.ScedError):
        sced.build_problem(case, base, report, mats,
                           sced.ScedOptions(penalty_load_shed=10.0), idx=idx)


def test_fixed_reserve_requirement(pipeline14):
    case, idx, mats, base, report = pipeline14
    opts = sced.ScedOptions(reserve_requirement_mw=50.0)
    plan, _ = sced.dispatch_pipeline(case, base, report, mats, opts, idx=idx)
    assert sum(plan.gen_reserve.values()) >= 50.0 - 1e-7


def test_reserves_can_be_disabled(pipeline14):
    case, idx, mats, base, report = pipeline14
    opts = sced.ScedOptions(include_reserves=False)
    plan, _ = sced.dispatch_pipeline(case, base, report, mats, opts, idx=idx)
    assert plan.gen_reserve == {}
    assert plan.clean
