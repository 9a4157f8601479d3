"""DC security-constrained economic dispatch with AC anchoring.

Branch flows are modeled as the pre-dispatch AC flow plus PTDF-approximated
changes from the re-dispatch; contingency-case flows compose PTDF with LODF
for the outaged branch. MVA ratings are derated to MW limits from the
reactive flows of the anchoring AC solution, with a floored limit (and a
flag) where reactive flow alone exceeds the rating. AC real losses enter
the balance as virtual bus loads under one of five placement options. Load
shedding, contingency load shedding and generator-minimum slack variables
keep the LP feasible by construction; penalty prices dominate every
marginal generation cost so all slacks are zero whenever physical
feasibility is attainable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import powerflow as pf
from . import simplex as sx
from .matrices import NetworkMatrices, build_matrices
from .model import GridCase, LinkNetIndex, build_linknet
from .rtca import RtcaOptions, RtcaReport, run_rtca

LOSS_OPTIONS = ("load_buses", "gen_buses", "branch_receiving",
                "branch_sending", "branch_half_half")

DERATE_FLOOR_FRAC = 0.05


class ScedError(Exception):
    pass


@dataclass(frozen=True)
class ScedOptions:
    loss_option: str = "branch_half_half"
    penalty_load_shed: float = 5000.0
    penalty_gen_min_slack: float = 10000.0
    reserve_requirement_mw: float | str = "largest-online-unit"
    dispatch_interval: float = 10.0   # minutes
    reserve_window: float = 10.0      # minutes of ramp usable as spin
    derate_floor_frac: float = DERATE_FLOOR_FRAC
    include_reserves: bool = True
    # fractional shave on contingency limits, covering the DC-AC gap when a
    # screened outage keeps violating (grown adaptively by the pipeline)
    contingency_margin: float = 0.0

    def __post_init__(self):
        if self.loss_option not in LOSS_OPTIONS:
            raise ScedError(f"unknown loss option {self.loss_option!r}")


def derate_branch(s_max: float, q_from: float, q_to: float,
                  floor_frac: float = DERATE_FLOOR_FRAC) -> tuple[float, bool]:
    """MW limit from an MVA rating and the anchoring reactive flows:
    sqrt(smax^2 - max(qf^2, qt^2)), floored at floor_frac*smax (flagged)
    when the reactive flow alone meets or exceeds the rating."""
    if s_max <= 0:
        raise ScedError("s_max must be positive")
    qq = max(q_from * q_from, q_to * q_to)
    if qq >= s_max * s_max:
        return floor_frac * s_max, True
    return math.sqrt(s_max * s_max - qq), False


def distribute_losses(sol: pf.PowerFlowSolution, case: GridCase,
                      option: str) -> np.ndarray:
    """Per-bus virtual loads (MW, bus-position order) accounting for the AC
    real losses of the anchoring solution; always sums to total_loss_mw."""
    if option not in LOSS_OPTIONS:
        raise ScedError(f"unknown loss option {option!r}")
    n = case.n_bus
    adj = np.zeros(n)
    if option in ("branch_receiving", "branch_sending", "branch_half_half"):
        for i, br in enumerate(case.branches):
            if not br.status:
                continue
            loss = sol.p_from[i] + sol.p_to[i]
            if loss == 0.0:
                continue
            f = case.bus_pos(br.from_bus)
            t = case.bus_pos(br.to_bus)
            # receiving end is where power arrives (negative p_to means power
            # flows from -> to, arriving at the to end)
            if sol.p_from[i] >= 0:
                send, recv = f, t
            else:
                send, recv = t, f
            if option == "branch_receiving":
                adj[recv] += loss
            elif option == "branch_sending":
                adj[send] += loss
            else:
                adj[send] += loss / 2.0
                adj[recv] += loss / 2.0
        # branch flows reproduce gen - load only to the solver tolerance;
        # rescale so the virtual loads carry the loss balance exactly
        s = adj.sum()
        if s != 0.0:
            adj *= sol.total_loss_mw / s
        return adj

    total = sol.total_loss_mw
    if option == "load_buses":
        weights = np.zeros(n)
        for d in case.loads:
            weights[case.bus_pos(d.bus)] += max(d.p, 0.0)
    else:  # gen_buses
        weights = np.zeros(n)
        for g in case.generators:
            if g.status:
                weights[case.bus_pos(g.bus)] += g.p_max
    s = weights.sum()
    if s <= 0:
        # degenerate: park all loss at the first bus rather than lose it
        adj[0] = total
        return adj
    return total * weights / s


def cost_segments(gen) -> list[tuple[float, float]]:
    """(width MW, marginal cost) per piecewise-linear segment, covering
    0..p_max."""
    segs = []
    prev = 0.0
    for bp, mc in gen.cost_curve:
        width = min(bp, gen.p_max) - prev
        if width > 1e-9:
            segs.append((width, mc))
            prev = min(bp, gen.p_max)
    if prev < gen.p_max - 1e-9:
        segs.append((gen.p_max - prev, gen.cost_curve[-1][1]))
    return segs


@dataclass
class ScedProblem:
    lp: sx.LinearProgram
    case: GridCase
    opts: ScedOptions
    var_gen_p: dict[int, int]
    var_gen_reserve: dict[int, int]
    var_gen_min_slack: dict[int, int]
    var_shed_base: dict[int, int]
    var_shed_cont: dict[tuple[int, int], int]   # (outage, load id) -> var
    base_anchor: np.ndarray                     # AC MW from-flows at anchor
    base_limits: list[tuple[int, float, bool]]  # (branch pos, MW limit, floored)
    flow_exprs: dict[int, tuple[dict[int, float], float]]  # pos -> (coeffs, const)
    cont_blocks: list[dict]                     # one per critical contingency
    gen_p0: dict[int, float]
    bus_net_load: np.ndarray                    # load + virtual loss, MW
    notes: list[str] = field(default_factory=list)


def build_problem(case: GridCase, base: pf.PowerFlowSolution,
                  rtca_report: RtcaReport, mats: NetworkMatrices,
                  opts: ScedOptions | None = None,
                  idx: LinkNetIndex | None = None,
                  p_prev: dict[int, float] | None = None) -> ScedProblem:
    opts = opts or ScedOptions()
    idx = idx or build_linknet(case)
    lp = sx.LinearProgram()
    notes: list[str] = []

    gens = [g for g in case.generators if g.status]
    max_mc = max(mc for g in gens for _, mc in g.cost_curve)
    if opts.penalty_load_shed <= max_mc or opts.penalty_gen_min_slack <= max_mc:
        raise ScedError("penalties must strictly exceed all marginal costs")

    # anchor generation: realized AC outputs of the base solve
    gen_p0 = {g.id: float(base.gen_p[i]) for i, g in enumerate(case.generators)
              if g.status}
    if p_prev is None:
        p_prev = dict(gen_p0)

    # --- variables
    var_gen_p: dict[int, int] = {}
    var_gen_reserve: dict[int, int] = {}
    var_gen_min_slack: dict[int, int] = {}
    seg_vars: dict[int, list[int]] = {}
    for g in gens:
        pvar = lp.add_var(f"p_g{g.id}", 0.0, 0.0, g.p_max)
        var_gen_p[g.id] = pvar
        segs = cost_segments(g)
        svars = []
        for si, (width, mc) in enumerate(segs):
            svars.append(lp.add_var(f"p_g{g.id}_s{si}", mc, 0.0, width))
        seg_vars[g.id] = svars
        lp.add_row({pvar: 1.0, **{v: -1.0 for v in svars}}, "=", 0.0,
                   f"segsum_g{g.id}")
        if g.p_min > 0:
            mvar = lp.add_var(f"minslack_g{g.id}", opts.penalty_gen_min_slack,
                              0.0, g.p_min)
            var_gen_min_slack[g.id] = mvar
            lp.add_row({pvar: 1.0, mvar: 1.0}, ">=", g.p_min, f"pmin_g{g.id}")
        # ramp against the previous operating point
        anchor_p = p_prev.get(g.id, gen_p0[g.id])
        ramp = g.ramp_rate
        lp.add_row({pvar: 1.0}, "<=", anchor_p + ramp, f"rampup_g{g.id}")
        lp.add_row({pvar: 1.0}, ">=", max(anchor_p - ramp, 0.0) if g.p_min >= 0
                   else anchor_p - ramp, f"rampdn_g{g.id}")
        if opts.include_reserves:
            ramp10 = g.ramp_rate * opts.reserve_window / opts.dispatch_interval
            rvar = lp.add_var(f"r_g{g.id}", g.reserve_cost, 0.0,
                              min(ramp10, g.p_max))
            var_gen_reserve[g.id] = rvar
            lp.add_row({pvar: 1.0, rvar: 1.0}, "<=", g.p_max,
                       f"headroom_g{g.id}")

    var_shed_base: dict[int, int] = {}
    for d in case.loads:
        if d.sheddable and d.p > 0:
            var_shed_base[d.id] = lp.add_var(
                f"shed_d{d.id}", opts.penalty_load_shed, 0.0, d.p)

    # --- loss virtual loads and net bus load
    loss_adj = distribute_losses(base, case, opts.loss_option)
    bus_net_load = loss_adj.copy()
    for d in case.loads:
        bus_net_load[case.bus_pos(d.bus)] += d.p

    # --- base power balance (per energized island)
    live_islands = {r.island for r in base.islands if not r.dead}
    for island in live_islands:
        buses = set(idx.island_buses(island))
        coeffs: dict[int, float] = {}
        rhs = 0.0
        for g in gens:
            if g.bus in buses:
                coeffs[var_gen_p[g.id]] = 1.0
        for d in case.loads:
            if d.bus in buses and d.id in var_shed_base:
                coeffs[var_shed_base[d.id]] = 1.0
        rhs = float(sum(bus_net_load[case.bus_pos(b)] for b in buses))
        lp.add_row(coeffs, "=", rhs, f"balance_island{island}")

    # --- injection-delta expression per bus, as LP coefficient maps
    def delta_coeffs(*shed_maps: dict[int, int]) -> dict[int, dict[int, float]]:
        """bus position -> {var: coeff} for the injection change there.
        Shedding a load raises the net injection at its bus."""
        out: dict[int, dict[int, float]] = {}
        for g in gens:
            p = case.bus_pos(g.bus)
            out.setdefault(p, {})[var_gen_p[g.id]] = 1.0
        for shed_map in shed_maps:
            for d in case.loads:
                if d.id in shed_map:
                    p = case.bus_pos(d.bus)
                    bucket = out.setdefault(p, {})
                    v = shed_map[d.id]
                    bucket[v] = bucket.get(v, 0.0) + 1.0
        return out

    def delta_const() -> np.ndarray:
        """Constant part of the injection change: -p0 at generator buses."""
        c = np.zeros(case.n_bus)
        for g in gens:
            c[case.bus_pos(g.bus)] -= gen_p0[g.id]
        return c

    base_delta = delta_coeffs(var_shed_base)
    const0 = delta_const()

    # --- base-case branch flow limits
    base_limits: list[tuple[int, float, bool]] = []
    flow_rows: dict[int, tuple[dict[int, float], float]] = {}
    for k, br in enumerate(case.branches):
        if not br.status:
            continue
        limit, floored = derate_branch(br.s_max, base.q_from[k], base.q_to[k],
                                       opts.derate_floor_frac)
        if floored:
            notes.append(f"branch {br.id}: base derate floored to {limit:.2f} MW")
        base_limits.append((k, limit, floored))
        sens = mats.ptdf[k, :]
        coeffs: dict[int, float] = {}
        const = float(base.p_from[k]) + float(sens @ const0)
        for p, varmap in base_delta.items():
            if sens[p] == 0.0:
                continue
            for v, cf in varmap.items():
                coeffs[v] = coeffs.get(v, 0.0) + sens[p] * cf
        flow_rows[k] = (coeffs, const)
        lp.add_row(coeffs, "<=", limit - const, f"flowhi_b{br.id}")
        lp.add_row(coeffs, ">=", -limit - const, f"flowlo_b{br.id}")

    # --- contingency blocks for RTCA criticals
    var_shed_cont: dict[tuple[int, int], int] = {}
    cont_blocks: list[dict] = []
    known = {br.id for br in case.branches}
    for res in rtca_report.critical:
        if res.outage not in known:
            raise ScedError(f"RTCA report references unknown branch {res.outage}")
        o = case.branch_pos(res.outage)
        lodf_col = mats.lodf[:, o]
        if np.any(~np.isfinite(lodf_col)):
            notes.append(f"contingency {res.outage}: radial, skipped in SCED")
            continue
        # contingency shed variables
        shed_map: dict[int, int] = {}
        for d in case.loads:
            if d.sheddable and d.p > 0:
                v = lp.add_var(f"shed_d{d.id}_c{res.outage}",
                               opts.penalty_load_shed, 0.0, d.p)
                var_shed_cont[(res.outage, d.id)] = v
                shed_map[d.id] = v
                if d.id in var_shed_base:
                    lp.add_row({var_shed_base[d.id]: 1.0, v: 1.0}, "<=", d.p,
                               f"shedcap_d{d.id}_c{res.outage}")
        cont_delta = delta_coeffs(var_shed_base, shed_map)

        if res.converged and res.p_from is not None:
            anchor = res.p_from
            qf, qt = res.q_from, res.q_to
        else:
            # no AC anchor available: compose the base AC flows with LODF
            anchor = rtca_report.base.p_from + lodf_col * rtca_report.base.p_from[o]
            qf, qt = rtca_report.base.q_from, rtca_report.base.q_to
            notes.append(f"contingency {res.outage}: LODF-composed anchor "
                         "(post-outage AC solve unavailable)")

        rows = []
        for k, br in enumerate(case.branches):
            if not br.status or k == o:
                continue
            limit, floored = derate_branch(br.emergency_rating, qf[k], qt[k],
                                           opts.derate_floor_frac)
            limit *= 1.0 - opts.contingency_margin
            if floored:
                notes.append(f"branch {br.id} (cont {res.outage}): derate floored")
            sens = mats.ptdf[k, :] + lodf_col[k] * mats.ptdf[o, :]
            coeffs: dict[int, float] = {}
            const = float(anchor[k]) + float(sens @ const0)
            for p, varmap in cont_delta.items():
                if sens[p] == 0.0:
                    continue
                for v, cf in varmap.items():
                    coeffs[v] = coeffs.get(v, 0.0) + sens[p] * cf
            lp.add_row(coeffs, "<=", limit - const, f"cflowhi_b{br.id}_c{res.outage}")
            lp.add_row(coeffs, ">=", -limit - const, f"cflowlo_b{br.id}_c{res.outage}")
            rows.append({"branch_pos": k, "limit": limit,
                         "coeffs": coeffs, "const": const})
        cont_blocks.append({"outage": res.outage, "rows": rows,
                            "shed_map": shed_map})

    # --- reserve requirement
    if opts.include_reserves and var_gen_reserve:
        if opts.reserve_requirement_mw == "largest-online-unit":
            for g in gens:
                coeffs = {var_gen_reserve[h.id]: 1.0 for h in gens if h.id != g.id}
                if coeffs:
                    coeffs[var_gen_p[g.id]] = -1.0
                    lp.add_row(coeffs, ">=", 0.0, f"reserve_cover_g{g.id}")
        else:
            req = float(opts.reserve_requirement_mw)
            lp.add_row({v: 1.0 for v in var_gen_reserve.values()}, ">=", req,
                       "reserve_requirement")

    # --- interface limits on modeled base flows
    for itf in case.interfaces:
        coeffs: dict[int, float] = {}
        const = 0.0
        skip = False
        for bid, sign in itf.branches:
            k = case.branch_pos(bid)
            if k not in flow_rows:
                skip = True
                break
            rc, rconst = flow_rows[k]
            for v, cf in rc.items():
                coeffs[v] = coeffs.get(v, 0.0) + sign * cf
            const += sign * rconst
        if skip:
            continue
        lp.add_row(coeffs, "<=", itf.limit_mw - const, f"interface_hi_{itf.id}")
        lp.add_row(coeffs, ">=", -itf.limit_mw - const, f"interface_lo_{itf.id}")

    return ScedProblem(
        lp=lp, case=case, opts=opts,
        var_gen_p=var_gen_p, var_gen_reserve=var_gen_reserve,
        var_gen_min_slack=var_gen_min_slack, var_shed_base=var_shed_base,
        var_shed_cont=var_shed_cont, base_anchor=base.p_from.copy(),
        base_limits=base_limits, flow_exprs=flow_rows, cont_blocks=cont_blocks,
        gen_p0=gen_p0, bus_net_load=bus_net_load, notes=notes,
    )


@dataclass
class DispatchPlan:
    gen_p: dict[int, float]
    gen_reserve: dict[int, float]
    objective: float
    shed_base: dict[int, float]
    shed_cont: dict[tuple[int, int], float]
    gen_min_slack: dict[int, float]
    binding: list[dict]
    predicted_base_flows: dict[int, float]          # branch id -> MW
    predicted_cont_flows: dict[int, dict[int, float]]  # outage -> branch -> MW
    notes: list[str]
    duals: dict[str, float]
    iterations: int = 0
    ac_feasible: bool | None = None
    realized_flows: dict[int, float] | None = None
    post_rtca: RtcaReport | None = None
    passes: int = 1

    @property
    def clean(self) -> bool:
        eps = 1e-6
        return (all(v <= eps for v in self.shed_base.values())
                and all(v <= eps for v in self.shed_cont.values())
                and all(v <= eps for v in self.gen_min_slack.values()))

    def report(self) -> dict:
        return {
            "objective": self.objective,
            "clean": self.clean,
            "gen_p": {str(k): v for k, v in self.gen_p.items()},
            "gen_reserve": {str(k): v for k, v in self.gen_reserve.items()},
            "shed_base": {str(k): v for k, v in self.shed_base.items()},
            "shed_cont": {f"{o}:{d}": v for (o, d), v in self.shed_cont.items()},
            "gen_min_slack": {str(k): v for k, v in self.gen_min_slack.items()},
            "binding": self.binding,
            "predicted_base_flows": {str(k): v for k, v in self.predicted_base_flows.items()},
            "predicted_cont_flows": {
                str(o): {str(k): v for k, v in flows.items()}
                for o, flows in self.predicted_cont_flows.items()},
            "ac_feasible": self.ac_feasible,
            "realized_flows": ({str(k): v for k, v in self.realized_flows.items()}
                               if self.realized_flows else None),
            "notes": list(self.notes),
        }


def solve_lp(prob: ScedProblem) -> DispatchPlan:
    res = sx.solve(prob.lp)
    case = prob.case
    x = res.x

    predicted = {}
    for k, (coeffs, const) in prob.flow_exprs.items():
        predicted[case.branches[k].id] = \
            const + sum(x[v] * c for v, c in coeffs.items())
    cont_pred: dict[int, dict[int, float]] = {}
    for block in prob.cont_blocks:
        flows = {}
        for row in block["rows"]:
            flows[case.branches[row["branch_pos"]].id] = \
                row["const"] + sum(x[v] * c for v, c in row["coeffs"].items())
        cont_pred[block["outage"]] = flows

    binding = []
    duals = {}
    for i, name in enumerate(prob.lp.row_names):
        duals[name] = float(res.duals[i])
        if name.startswith(("flowhi", "flowlo", "cflowhi", "cflowlo",
                            "interface", "reserve")):
            if abs(res.duals[i]) > 1e-7:
                binding.append({"row": name, "dual": float(res.duals[i])})

    return DispatchPlan(
        gen_p={gid: float(x[v]) for gid, v in prob.var_gen_p.items()},
        gen_reserve={gid: float(x[v]) for gid, v in prob.var_gen_reserve.items()},
        objective=res.objective,
        shed_base={did: float(x[v]) for did, v in prob.var_shed_base.items()},
        shed_cont={key: float(x[v]) for key, v in prob.var_shed_cont.items()},
        gen_min_slack={gid: float(x[v]) for gid, v in prob.var_gen_min_slack.items()},
        binding=binding,
        predicted_base_flows=predicted,
        predicted_cont_flows=cont_pred,
        notes=list(prob.notes),
        duals=duals,
        iterations=res.iterations,
    )


def replace_opts_margin(opts: ScedOptions, margin: float) -> ScedOptions:
    import dataclasses
    return dataclasses.replace(opts, contingency_margin=min(margin, 0.2))


def apply_plan(case: GridCase, plan: DispatchPlan) -> GridCase:
    """Case with the plan's set-points applied; base shed reduces load."""
    new_case = case.with_dispatch(plan.gen_p)
    if any(v > 1e-6 for v in plan.shed_base.values()):
        new_loads = {}
        for d in case.loads:
            shed = plan.shed_base.get(d.id, 0.0)
            if shed > 1e-6:
                new_loads[d.id] = d.p - shed
        new_case = new_case.with_loads(new_loads)
    return new_case


def dispatch_pipeline(case: GridCase, base: pf.PowerFlowSolution,
                      rtca_report: RtcaReport, mats: NetworkMatrices,
                      opts: ScedOptions | None = None,
                      idx: LinkNetIndex | None = None,
                      p_prev: dict[int, float] | None = None,
                      max_passes: int = 4) -> tuple[DispatchPlan, pf.PowerFlowSolution]:
    """Closed dispatch-and-verify loop.

    Each pass derates, places losses, builds and solves the LP anchored at
    the current AC operating point, applies the set-points, re-solves AC and
    re-runs contingency analysis. Outages that violate at the new point join
    the constraint set of the next pass; the loop stops once the post-dispatch
    screen is violation-free (or the pass budget runs out). Ramp limits stay
    anchored at the original operating point throughout.
    """
    opts = opts or ScedOptions()
    idx = idx or build_linknet(case)
    if p_prev is None:
        p_prev = {g.id: float(base.gen_p[i])
                  for i, g in enumerate(case.generators) if g.status}

    anchor = base
    report = rtca_report
    critical_ids = {r.outage for r in report.critical}
    plan = None
    realized = base
    for pass_no in range(1, max_passes + 1):
        merged = RtcaReport(
            contingency_list=report.contingency_list,
            results=[r for r in report.results if r.outage in critical_ids],
            base=anchor)
        prob = build_problem(case, anchor, merged, mats, opts, idx, p_prev)
        plan = solve_lp(prob)
        plan.passes = pass_no

        new_case = apply_plan(case, plan)
        realized = pf.solve(new_case, mats, pf.PowerFlowOptions(), idx)
        plan.ac_feasible = realized.converged
        if not realized.converged:
            plan.notes.append("post-dispatch AC power flow did not converge")
            return plan, realized
        plan.realized_flows = {br.id: float(realized.p_from[i])
                               for i, br in enumerate(new_case.branches)}

        post = run_rtca(new_case, realized, RtcaOptions(), idx)
        plan.post_rtca = post
        violating = {r.outage for r in post.results if r.violations
                     or not r.converged}
        if not violating:
            return plan, realized
        # re-anchor and keep going: even without new criticals, a fresh
        # anchor tightens the DC approximation around the violating point.
        # Persistent violators also grow a security margin sized to the
        # worst observed overshoot.
        if violating <= critical_ids:
            overshoot = max(
                ((s.percent - 100.0) / 100.0
                 for r in post.results if r.outage in violating
                 for s in r.violations), default=0.005)
            opts = replace_opts_margin(
                opts, opts.contingency_margin + overshoot + 0.002)
        critical_ids |= violating
        anchor = realized
        report = post
    plan.notes.append(
        f"dispatch-verify loop hit its {max_passes}-pass cap with "
        f"violating outages still present")
    return plan, realized
