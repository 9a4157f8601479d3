"""Load-redistribution false-data-injection attacks and their consequences.

An attack is a sparse angle perturbation u; the falsified telemetry reads
zbar = h(x + u) + e, which a weighted-least-squares estimator with a
chi-square bad-data test cannot distinguish from clean data. The apparent
injection changes B'u land only on buses adjacent to the support of u, and
construction requires every such bus to carry load, so the operator sees a
plausible redistribution of load with unchanged total. Attack design is a
projected coordinate-ascent heuristic that solves the defender's dispatch
problem exactly at every iterate; it is validated against brute force on
tiny cases and makes no claim of worst-case optimality. Consequence
evaluation runs the entire cyber pipeline (forge, estimate, contingency
screen, re-dispatch) and then applies the resulting set-points to the true
system, reporting both worlds side by side.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from . import estimation as se
from . import powerflow as pf
from . import sced
from . import simplex as sx
from .matrices import NetworkMatrices, build_matrices
from .model import GridCase, LinkNetIndex, build_linknet
from .rtca import RtcaOptions, RtcaReport, run_rtca

NET_ZERO_TOL = 1e-9
OBJECTIVES = ("max_base_flow", "max_postcontingency_flow", "max_cost")
RESPONSES = ("dcopf", "sced")


class AttackError(Exception):
    pass


class AttackInfeasibleError(AttackError):
    pass


@dataclass(frozen=True)
class StateAttack:
    """Angle perturbation with its implied apparent load redistribution."""
    u: tuple[float, ...]                 # radians, bus-position order
    support: frozenset[int]              # bus ids where u is nonzero
    load_shifts: dict[int, float]        # load id -> apparent change, MW

    @property
    def net_load_change(self) -> float:
        return sum(self.load_shifts.values())

    def u_array(self) -> np.ndarray:
        return np.array(self.u)

    @property
    def is_null(self) -> bool:
        return not self.support


def reference_bus_of(case: GridCase) -> int:
    for b in case.buses:
        if b.type == "slack":
            return b.id
    return min(b.id for b in case.buses)


def state_attack(case: GridCase, mats: NetworkMatrices,
                 u_by_bus: dict[int, float]) -> StateAttack:
    """Validate and package an angle perturbation.

    The implied injection change B'u (converted to MW) must fall entirely on
    load-carrying buses, sum to zero, and leave the reference angle alone.
    The apparent change at a bus is split over its loads pro rata.
    """
    ref = reference_bus_of(case)
    if abs(u_by_bus.get(ref, 0.0)) > 0.0:
        raise AttackError(f"perturbation touches the reference bus {ref}")
    u = np.zeros(case.n_bus)
    for bus, val in u_by_bus.items():
        u[case.bus_pos(bus)] = val
    dinj = np.asarray(mats.b_prime @ u).ravel() * case.base_mva
    loads_at_bus: dict[int, list] = {}
    for d in case.loads:
        loads_at_bus.setdefault(d.bus, []).append(d)
    shifts: dict[int, float] = {}
    for i, b in enumerate(case.buses):
        if abs(dinj[i]) <= NET_ZERO_TOL:
            continue
        here = loads_at_bus.get(b.id)
        if not here:
            raise AttackError(
                f"implied load change of {dinj[i]:+.4f} MW at bus {b.id}, "
                "which carries no load")
        total_p = sum(d.p for d in here)
        for d in here:
            w = d.p / total_p if total_p > 0 else 1.0 / len(here)
            # injection up means apparent load down
            shifts[d.id] = shifts.get(d.id, 0.0) - dinj[i] * w
    if abs(sum(shifts.values())) > NET_ZERO_TOL:
        raise AttackError("implied load changes do not conserve total load")
    support = frozenset(b for b, v in u_by_bus.items() if v != 0.0)
    return StateAttack(u=tuple(u), support=support, load_shifts=shifts)


def max_shift_fraction(case: GridCase, atk: StateAttack) -> float:
    worst = 0.0
    for d in case.loads:
        dv = atk.load_shifts.get(d.id, 0.0)
        if dv and d.p > 0:
            worst = max(worst, abs(dv) / d.p)
        elif dv:
            return np.inf
    return worst


# ---------------------------------------------------------------------------
# forging

def attack_footprint(case: GridCase, idx: LinkNetIndex,
                     atk: StateAttack) -> tuple[set[int], set[int]]:
    """(branch ids, bus ids) whose measurements the attack may change:
    branches incident to the support and the support's closed neighborhood."""
    branches: set[int] = set()
    buses: set[int] = set(atk.support)
    for bus in atk.support:
        for br_id, far in idx.adjacency[bus]:
            branches.add(br_id)
            buses.add(far)
    return branches, buses


def count_footprint_measurements(case: GridCase, idx: LinkNetIndex,
                                 atk_or_support) -> int:
    """Measurements an attacker must control for a given support, under the
    bundled full metering plan (4 per branch, 2 injections per bus)."""
    if isinstance(atk_or_support, StateAttack):
        support = atk_or_support.support
    else:
        support = frozenset(atk_or_support)
    branches: set[int] = set()
    buses: set[int] = set(support)
    for bus in support:
        for br_id, far in idx.adjacency[bus]:
            branches.add(br_id)
            buses.add(far)
    return 4 * len(branches) + 2 * len(buses)


def forge_measurements(z: se.MeasurementSet, case: GridCase,
                       mats: NetworkMatrices, idx: LinkNetIndex,
                       sol: pf.PowerFlowSolution,
                       atk: StateAttack) -> se.MeasurementSet:
    """zbar = h(x+u) + e, realized as z plus the exact model shift
    h(x+u) - h(x); measurements outside the footprint are untouched
    bit for bit, so the original noise draw is preserved everywhere."""
    if atk.is_null:
        return z
    branches, buses = attack_footprint(case, idx, atk)
    va2 = sol.v_ang + atk.u_array()
    h0 = se.h_eval(case, mats, z, sol.v_mag, sol.v_ang)
    h1 = se.h_eval(case, mats, z, sol.v_mag, va2)
    out = []
    for i, m in enumerate(z.active):
        touched = ((m.kind in se.BRANCH_KINDS and m.element in branches)
                   or (m.kind in (se.MeasKind.BUS_P_INJ, se.MeasKind.BUS_Q_INJ)
                       and m.element in buses))
        if touched:
            out.append(replace(m, value=m.value + (h1[i] - h0[i])))
        else:
            out.append(m)
    inactive = tuple(m for m in z.measurements if m.status != "active")
    return se.MeasurementSet(tuple(out) + inactive, timestamp=z.timestamp)


# ---------------------------------------------------------------------------
# defender model

def defender_dispatch(case: GridCase, response: str,
                      p_prev: dict[int, float] | None = None,
                      max_passes: int = 4
                      ) -> tuple[sced.DispatchPlan, pf.PowerFlowSolution, RtcaReport]:
    """Solve the defender's problem on a (possibly falsified) case.

    'dcopf' is an economic dispatch against base-case limits only; 'sced'
    runs contingency analysis first and honors its criticals and reserves.
    """
    if response not in RESPONSES:
        raise AttackError(f"unknown response model {response!r}")
    idx = build_linknet(case)
    mats = build_matrices(case, idx)
    base = pf.solve(case, mats, pf.PowerFlowOptions(), idx)
    if not base.converged:
        raise AttackError("defender base power flow did not converge")
    if response == "sced":
        report = run_rtca(case, base, idx=idx)
        opts = sced.ScedOptions()
        plan, _ = sced.dispatch_pipeline(case, base, report, mats, opts, idx,
                                         p_prev, max_passes=max_passes)
    else:
        # a naive economic dispatch: base-case limits only, no verification
        report = RtcaReport(contingency_list=[], results=[], base=base)
        opts = sced.ScedOptions(include_reserves=False)
        plan, _ = sced.dispatch_pipeline(case, base, report, mats, opts, idx,
                                         p_prev, max_passes=1)
    return plan, base, plan.post_rtca or report


# ---------------------------------------------------------------------------
# consequence evaluation

@dataclass
class AttackOutcome:
    attack: StateAttack
    forged: se.MeasurementSet
    bdd_pass: bool
    predicted_target_flow: float | None
    realized_target_flow: float | None
    cyber_rtca: RtcaReport | None
    physical_rtca: RtcaReport | None
    cyber_plan: sced.DispatchPlan | None
    physical_violations: list[dict] = field(default_factory=list)
    cyber_violations: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def report(self) -> dict:
        def screenings(rep):
            if rep is None:
                return None
            return [
                {"outage": r.outage, "branch": s.branch,
                 "flow_mva": s.flow_mva, "rating": s.rating,
                 "percent": s.percent}
                for r in rep.results for s in r.violations
            ]
        return {
            "support": sorted(self.attack.support),
            "load_shifts": {str(k): v for k, v in self.attack.load_shifts.items()},
            "bdd_pass": self.bdd_pass,
            "predicted_target_flow": self.predicted_target_flow,
            "realized_target_flow": self.realized_target_flow,
            "cyber_violations": screenings(self.cyber_rtca),
            "physical_violations": screenings(self.physical_rtca),
            "notes": list(self.notes),
        }


def apparent_case(case: GridCase, atk: StateAttack) -> GridCase:
    """The case the operator believes in: loads moved by the implied shifts."""
    if atk.is_null:
        return case
    new_loads = {d.id: d.p + atk.load_shifts.get(d.id, 0.0) for d in case.loads}
    return case.with_loads(new_loads)


def evaluate_consequence(case: GridCase, atk: StateAttack,
                         defender_response: str = "sced",
                         target_branch: int | None = None,
                         attacker_assumption: str | None = None,
                         noise_seed: int = 0) -> AttackOutcome:
    """Run the attack through the full closed loop.

    Cyber side: forge telemetry, estimate, screen contingencies, re-dispatch.
    Physical side: apply the resulting set-points to the true system and
    screen again. The predicted flow is what the attacker expects under its
    own assumed defender model; the realized flow is what actually happens.
    """
    attacker_assumption = attacker_assumption or defender_response
    idx = build_linknet(case)
    mats = build_matrices(case, idx)
    true_sol = pf.solve(case, mats, pf.PowerFlowOptions(), idx)
    if not true_sol.converged:
        raise AttackError("true-system base power flow did not converge")

    z = se.generate_telemetry(true_sol, case, mats, noise_seed=noise_seed)
    zbar = forge_measurements(z, case, mats, idx, true_sol, atk)
    est = se.wls_estimate(zbar, case, idx, mats)
    notes: list[str] = []
    if not est.converged:
        notes.append("state estimation on forged telemetry did not converge")

    cyber = apparent_case(case, atk)

    # defender acts on the apparent system
    try:
        plan, cyber_base, cyber_rtca = defender_dispatch(cyber, defender_response)
    except (AttackError, sced.ScedError, sx.SimplexError) as exc:
        return AttackOutcome(
            attack=atk, forged=zbar, bdd_pass=est.bdd_pass,
            predicted_target_flow=None, realized_target_flow=None,
            cyber_rtca=None, physical_rtca=None, cyber_plan=None,
            notes=notes + [f"defender pipeline failed: {exc}"])

    # apply the cyber dispatch (and any shed, in apparent terms) to the truth
    true_dispatched = case.with_dispatch(plan.gen_p)
    if any(v > 1e-6 for v in plan.shed_base.values()):
        shed = {d.id: d.p - plan.shed_base.get(d.id, 0.0) for d in case.loads}
        true_dispatched = true_dispatched.with_loads(shed)
        notes.append("defender shed load based on falsified telemetry")
    pidx = build_linknet(true_dispatched)
    pmats = build_matrices(true_dispatched, pidx)
    phys = pf.solve(true_dispatched, pmats, pf.PowerFlowOptions(), pidx)
    physical_rtca = None
    realized = None
    if phys.converged:
        physical_rtca = run_rtca(true_dispatched, phys, idx=pidx)
        if target_branch is not None:
            realized = float(phys.p_from[case.branch_pos(target_branch)])
    else:
        notes.append("physical power flow diverged after the attack")

    predicted = None
    if target_branch is not None:
        if attacker_assumption == defender_response:
            pred_plan = plan
        else:
            pred_plan, _, _ = defender_dispatch(cyber, attacker_assumption)
        # the attacker knows the true loads; it predicts the physical flow
        # under the dispatch it expects the defender to issue
        pred_case = case.with_dispatch(pred_plan.gen_p)
        pred_sol = pf.solve(pred_case, pmats, pf.PowerFlowOptions(), pidx)
        if pred_sol.converged:
            predicted = float(pred_sol.p_from[case.branch_pos(target_branch)])

    phys_viol = []
    if physical_rtca is not None:
        phys_viol = [
            {"outage": r.outage, "branch": s.branch, "percent": s.percent}
            for r in physical_rtca.results for s in r.violations]
    cyber_viol = [
        {"outage": r.outage, "branch": s.branch, "percent": s.percent}
        for r in cyber_rtca.results for s in r.violations]

    return AttackOutcome(
        attack=atk, forged=zbar, bdd_pass=est.bdd_pass,
        predicted_target_flow=predicted, realized_target_flow=realized,
        cyber_rtca=cyber_rtca, physical_rtca=physical_rtca, cyber_plan=plan,
        physical_violations=phys_viol, cyber_violations=cyber_viol,
        notes=notes)


# ---------------------------------------------------------------------------
# attack design

@dataclass(frozen=True)
class AttackScenario:
    target_branch: int
    objective: str = "max_base_flow"
    load_shift_limit: float = 0.10
    measurement_budget: int = 60
    assumed_response: str = "sced"
    seed: int = 0
    u_cost: dict[int, float] = field(default_factory=dict)  # per-bus cost on u

    def __post_init__(self):
        if not (0.0 < self.load_shift_limit < 1.0):
            raise AttackError("load shift limit must lie in (0, 1)")
        if self.objective not in OBJECTIVES:
            raise AttackError(f"unknown objective {self.objective!r}")
        if self.assumed_response not in RESPONSES:
            raise AttackError(f"unknown response model {self.assumed_response!r}")


def eligible_support_buses(case: GridCase, idx: LinkNetIndex) -> list[int]:
    """Buses where a one-bus perturbation keeps the implied load changes on
    load-carrying buses: the bus and its whole neighborhood must have load,
    and the reference bus stays out."""
    ref = reference_bus_of(case)
    load_buses = {d.bus for d in case.loads if d.p > 0}
    out = []
    for b in case.buses:
        if b.id == ref or b.id not in load_buses:
            continue
        if all(far in load_buses and far != ref
               for _, far in idx.adjacency[b.id]):
            out.append(b.id)
    return sorted(out)


def _design_objective(case: GridCase, scenario: AttackScenario,
                      atk: StateAttack, base_true: pf.PowerFlowSolution,
                      mats: NetworkMatrices) -> float | None:
    """Upper-level value of a candidate attack: the physical consequence the
    attacker expects, using exact lower-level dispatch solves and a PTDF
    model of the true network (the truth's loads never change)."""
    cyber = apparent_case(case, atk)
    try:
        # two verification passes keep candidate scoring affordable; the
        # final evaluation uses the full defender loop
        plan, _, _ = defender_dispatch(cyber, scenario.assumed_response,
                                       max_passes=2)
    except (AttackError, sced.ScedError, sx.SimplexError):
        return None
    if not plan.clean:
        return None  # dispatches that shed load get noticed; skip them
    k = case.branch_pos(scenario.target_branch)
    dgen = np.zeros(case.n_bus)
    for i, g in enumerate(case.generators):
        if g.status:
            dgen[case.bus_pos(g.bus)] += plan.gen_p[g.id] - base_true.gen_p[i]
    if scenario.objective == "max_cost":
        val = plan.objective
    else:
        flow = base_true.p_from[k] + float(mats.ptdf[k, :] @ dgen)
        if scenario.objective == "max_postcontingency_flow":
            worst = abs(flow)
            col = mats.lodf[k, :]
            for o in range(case.n_branch):
                if o == k or not np.isfinite(col[o]) or not case.branches[o].status:
                    continue
                fo = base_true.p_from[o] + float(mats.ptdf[o, :] @ dgen)
                worst = max(worst, abs(flow + col[o] * fo))
            val = worst
        else:
            val = abs(flow)
    if scenario.u_cost:
        val -= sum(scenario.u_cost.get(b, 0.0) * abs(atk.u[case.bus_pos(b)])
                   for b in atk.support)
    return val


def design_attack(case: GridCase, scenario: AttackScenario,
                  base_true: pf.PowerFlowSolution | None = None,
                  max_rounds: int = 6) -> StateAttack:
    """Projected coordinate ascent over sparse angle perturbations.

    Support buses are picked greedily under the measurement budget; each
    coordinate is then nudged with a shrinking step, keeping moves that stay
    within the load-shift bound and improve the exact lower-level objective.
    Deterministic under the scenario seed.
    """
    idx = build_linknet(case)
    mats = build_matrices(case, idx)
    if base_true is None:
        base_true = pf.solve(case, mats, pf.PowerFlowOptions(), idx)
        if not base_true.converged:
            raise AttackError("base power flow did not converge")

    eligible = eligible_support_buses(case, idx)
    affordable = [b for b in eligible
                  if count_footprint_measurements(case, idx, {b})
                  <= scenario.measurement_budget]
    if not affordable:
        raise AttackInfeasibleError(
            "measurement budget too small to cover any eligible load cluster")

    # per-bus angle scale: the largest single-bus |u| that stays inside the
    # load-shift bound (the implied shifts are linear in u)
    scale: dict[int, float] = {}
    for b in affordable:
        try:
            unit = state_attack(case, mats, {b: 1e-3})
        except AttackError:
            continue
        frac = max_shift_fraction(case, unit)
        if frac > 0 and np.isfinite(frac):
            scale[b] = 1e-3 * scenario.load_shift_limit / frac
    if not scale:
        raise AttackInfeasibleError("no eligible bus admits a nonzero shift")

    rng = np.random.default_rng(scenario.seed)
    null_atk = state_attack(case, mats, {})
    base_val = _design_objective(case, scenario, null_atk, base_true, mats)
    if base_val is None:
        raise AttackError("defender dispatch failed on the unattacked case")

    # greedy support: rank single buses by their half-scale objective gain
    gains = []
    for b, sc in sorted(scale.items()):
        best = 0.0
        for s in (0.5 * sc, -0.5 * sc):
            try:
                cand = state_attack(case, mats, {b: s})
            except AttackError:
                continue
            if max_shift_fraction(case, cand) > scenario.load_shift_limit:
                continue
            v = _design_objective(case, scenario, cand, base_true, mats)
            if v is not None:
                best = max(best, v - base_val)
        gains.append((best, b))
    gains.sort(key=lambda t: (-t[0], t[1]))

    support: list[int] = []
    for _, b in gains:
        trial = support + [b]
        if count_footprint_measurements(case, idx, trial) \
                <= scenario.measurement_budget:
            support = trial
        if len(support) >= 4:
            break
    if not support:
        raise AttackInfeasibleError("no support fits the measurement budget")

    u = {b: 0.0 for b in support}
    best_val = base_val
    best_u = dict(u)
    factor = 0.5
    order = list(support)
    for _ in range(max_rounds):
        improved = False
        rng.shuffle(order)
        for b in order:
            for sgn in (1.0, -1.0):
                cand_u = dict(u)
                cand_u[b] = cand_u[b] + sgn * factor * scale[b]
                try:
                    cand = state_attack(case, mats, cand_u)
                except AttackError:
                    continue
                if max_shift_fraction(case, cand) > scenario.load_shift_limit:
                    continue
                v = _design_objective(case, scenario, cand, base_true, mats)
                if v is not None and v > best_val + 1e-9:
                    best_val = v
                    u = cand_u
                    best_u = dict(cand_u)
                    improved = True
        if not improved:
            factor /= 2.0
            if factor < 0.02:
                break
    return state_attack(case, mats, {b: v for b, v in best_u.items() if v != 0.0})
