"""Fast-decoupled Newton-Raphson AC power flow.

Alternates P-theta and Q-V half-iterations with constant B'/B'' factors
(XB variant); B'' is refactorized only when a generator VAR-limit switch
changes the PQ set. Each energized island is solved independently; islands
without generation are reported unsolved rather than raising. Slack
mismatch can be redistributed across generators proportionally to p_max in
an outer loop around the solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .matrices import NetworkMatrices, build_matrices
from .model import CaseError, GridCase, LinkNetIndex, build_linknet

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 60
MAX_VAR_SWITCHES = 3
MAX_SLACK_PASSES = 5


class SlackInfeasibleError(CaseError):
    """All generators saturated while absorbing the slack mismatch."""

    def __init__(self, unabsorbed_mw: float):
        super().__init__(f"slack distribution infeasible: {unabsorbed_mw:.3f} MW unabsorbed")
        self.unabsorbed_mw = unabsorbed_mw


@dataclass(frozen=True)
class PowerFlowOptions:
    tol: float = DEFAULT_TOL          # pu mismatch threshold
    max_iter: int = DEFAULT_MAX_ITER  # half-iteration pairs
    distribute_slack: bool = True
    slack_share_rule: str = "proportional_pmax"
    var_limits: bool = True
    flat_start: bool = True

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class IslandResult:
    island: int
    reference_bus: int | None
    converged: bool
    iterations: int
    max_mismatch: float
    dead: bool = False
    switch_events: list = field(default_factory=list)


@dataclass
class PowerFlowSolution:
    case: GridCase
    v_mag: np.ndarray          # pu, bus-position order
    v_ang: np.ndarray          # rad
    p_from: np.ndarray         # MW, branch-position order
    q_from: np.ndarray
    p_to: np.ndarray
    q_to: np.ndarray
    gen_p: np.ndarray          # MW, generator order
    gen_q: np.ndarray
    islands: list[IslandResult]
    total_loss_mw: float
    slack_shares: dict[int, float] = field(default_factory=dict)  # gen id -> MW added
    iteration_log: list = field(default_factory=list)

    @property
    def converged(self) -> bool:
        live = [r for r in self.islands if not r.dead]
        return bool(live) and all(r.converged for r in live)

    def branch_mva(self, pos: int) -> float:
        sf = np.hypot(self.p_from[pos], self.q_from[pos])
        st = np.hypot(self.p_to[pos], self.q_to[pos])
        return max(sf, st)

    def report(self) -> dict:
        case = self.case
        return {
            "converged": bool(self.converged),
            "total_loss_mw": self.total_loss_mw,
            "islands": [
                {
                    "island": r.island,
                    "reference_bus": r.reference_bus,
                    "converged": r.converged,
                    "dead": r.dead,
                    "iterations": r.iterations,
                    "max_mismatch": r.max_mismatch,
                    "switch_events": list(r.switch_events),
                }
                for r in self.islands
            ],
            "iteration_log": list(self.iteration_log),
            "slack_shares": dict(self.slack_shares),
            "buses": [
                {"id": b.id, "v_mag": float(self.v_mag[i]), "v_ang_deg": float(np.degrees(self.v_ang[i]))}
                for i, b in enumerate(case.buses)
            ],
            "branches": [
                {
                    "id": br.id,
                    "p_from": float(self.p_from[i]), "q_from": float(self.q_from[i]),
                    "p_to": float(self.p_to[i]), "q_to": float(self.q_to[i]),
                    "loading_pct": float(100.0 * self.branch_mva(i) / br.s_max),
                }
                for i, br in enumerate(case.branches)
            ],
            "generators": [
                {"id": g.id, "p": float(self.gen_p[i]), "q": float(self.gen_q[i])}
                for i, g in enumerate(case.generators)
            ],
        }


def scheduled_injections(case: GridCase):
    """Per-bus scheduled P and Q (pu): generation minus load."""
    n = case.n_bus
    p = np.zeros(n)
    q = np.zeros(n)
    for g in case.generators:
        if g.status:
            p[case.bus_pos(g.bus)] += g.p / case.base_mva
    for d in case.loads:
        p[case.bus_pos(d.bus)] -= d.p / case.base_mva
        q[case.bus_pos(d.bus)] -= d.q / case.base_mva
    return p, q


def _complex_voltage(v_mag, v_ang):
    return v_mag * np.exp(1j * v_ang)


def branch_flows(case: GridCase, mats: NetworkMatrices, v_mag, v_ang):
    """Branch MW/MVar flows at both ends from a voltage state."""
    V = _complex_voltage(v_mag, v_ang)
    nb = case.n_branch
    p_from = np.zeros(nb); q_from = np.zeros(nb)
    p_to = np.zeros(nb); q_to = np.zeros(nb)
    for i, br in enumerate(case.branches):
        if not br.status:
            continue
        f = case.bus_pos(br.from_bus)
        t = case.bus_pos(br.to_bus)
        sf = V[f] * np.conj(mats.yff[i] * V[f] + mats.yft[i] * V[t])
        st = V[t] * np.conj(mats.ytf[i] * V[f] + mats.ytt[i] * V[t])
        p_from[i] = sf.real * case.base_mva
        q_from[i] = sf.imag * case.base_mva
        p_to[i] = st.real * case.base_mva
        q_to[i] = st.imag * case.base_mva
    return p_from, q_from, p_to, q_to


def bus_injections(mats: NetworkMatrices, v_mag, v_ang):
    """Complex calculated bus injections (pu)."""
    V = _complex_voltage(v_mag, v_ang)
    return V * np.conj(mats.ybus @ V)


def solve(case: GridCase, mats: NetworkMatrices | None = None,
          opts: PowerFlowOptions | None = None,
          idx: LinkNetIndex | None = None,
          warm: tuple[np.ndarray, np.ndarray] | None = None) -> PowerFlowSolution:
    """Solve the AC power flow; with distribute_slack enabled this wraps the
    core solve in an outer slack-redistribution loop."""
    opts = opts or PowerFlowOptions()
    idx = idx or build_linknet(case)
    mats = mats if mats is not None else build_matrices(case, idx)

    sol = _solve_once(case, mats, opts, idx, warm)
    if not opts.distribute_slack or not sol.converged:
        return sol

    shares_total: dict[int, float] = {}
    work = case
    for _ in range(MAX_SLACK_PASSES):
        deviation = _slack_deviation(work, sol, mats, idx)
        if all(abs(d) <= 10.0 * opts.tol * case.base_mva for d in deviation.values()):
            break
        new_p = {g.id: g.p for g in work.generators}
        for island, dev in deviation.items():
            gens = [g for g in work.generators
                    if g.status and idx.island_of[g.bus] == island]
            shares = slack_shares(dev, gens)
            for gid, mw in shares.items():
                new_p[gid] += mw
                shares_total[gid] = shares_total.get(gid, 0.0) + mw
        work = work.with_dispatch(new_p)
        sol = _solve_once(work, mats, opts, idx, warm=(sol.v_ang, sol.v_mag))
        if not sol.converged:
            break
    sol.slack_shares = shares_total
    return sol


def slack_shares(deviation_mw: float, gens) -> dict[int, float]:
    """Split a slack deviation across generators proportionally to p_max,
    saturating at generator limits and re-proportioning the remainder.

    Raises SlackInfeasibleError when every generator is at its limit with
    deviation left over.
    """
    shares = {g.id: 0.0 for g in gens}
    if abs(deviation_mw) < 1e-12:
        return shares
    headroom = {}
    for g in gens:
        headroom[g.id] = (g.p_max - g.p) if deviation_mw > 0 else (g.p - g.p_min)
    remaining = deviation_mw
    active = [g for g in gens if headroom[g.id] > 1e-12]
    for _ in range(len(gens) + 1):
        if abs(remaining) < 1e-12 or not active:
            break
        total_pmax = sum(g.p_max for g in active)
        if total_pmax <= 0:
            break
        saturated = []
        allocated = 0.0
        for g in active:
            want = remaining * g.p_max / total_pmax
            room = headroom[g.id] - abs(shares[g.id])
            if abs(want) >= room:
                take = np.sign(remaining) * room
                saturated.append(g)
            else:
                take = want
            shares[g.id] += take
            allocated += take
        remaining -= allocated
        active = [g for g in active if g not in saturated]
    if abs(remaining) > 1e-9:
        raise SlackInfeasibleError(remaining)
    return shares


def distribute_slack(sol: PowerFlowSolution, case: GridCase,
                     mats: NetworkMatrices, idx: LinkNetIndex,
                     opts: PowerFlowOptions | None = None) -> PowerFlowSolution:
    """One explicit slack-redistribution pass followed by a re-solve."""
    opts = opts or PowerFlowOptions(distribute_slack=False)
    deviation = _slack_deviation(case, sol, mats, idx)
    new_p = {g.id: g.p for g in case.generators}
    all_shares: dict[int, float] = {}
    for island, dev in deviation.items():
        gens = [g for g in case.generators if g.status and idx.island_of[g.bus] == island]
        shares = slack_shares(dev, gens)
        for gid, mw in shares.items():
            new_p[gid] += mw
            all_shares[gid] = all_shares.get(gid, 0.0) + mw
    resolved = solve(case.with_dispatch(new_p), mats, opts, idx,
                     warm=(sol.v_ang, sol.v_mag))
    resolved.slack_shares = all_shares
    return resolved


def _slack_deviation(case: GridCase, sol: PowerFlowSolution,
                     mats: NetworkMatrices, idx: LinkNetIndex) -> dict[int, float]:
    """Per-island difference between realized reference-bus generation and
    its scheduled value (MW)."""
    out = {}
    inj = bus_injections(mats, sol.v_mag, sol.v_ang)
    for res in sol.islands:
        if res.dead or not res.converged or res.reference_bus is None:
            continue
        ref = res.reference_bus
        pos = case.bus_pos(ref)
        load_p = sum(d.p for d in case.loads_at(ref))
        actual = inj[pos].real * case.base_mva + load_p
        scheduled = sum(g.p for g in case.gens_at(ref))
        out[res.island] = actual - scheduled
    return out


def _solve_once(case: GridCase, mats: NetworkMatrices, opts: PowerFlowOptions,
                idx: LinkNetIndex, warm=None) -> PowerFlowSolution:
    n = case.n_bus
    if warm is not None:
        v_ang = warm[0].copy(); v_mag = warm[1].copy()
    else:
        v_ang = np.array([b.v_ang for b in case.buses]) * 0.0
        v_mag = np.ones(n)
    # generator buses hold their voltage set-point
    gen_buses = sorted({g.bus for g in case.generators if g.status})
    for b in gen_buses:
        v_mag[case.bus_pos(b)] = case.bus(b).v_mag

    p_sched, q_sched = scheduled_injections(case)
    results: list[IslandResult] = []
    log: list = []

    for island in range(idx.n_islands):
        res = _solve_island(case, mats, opts, idx, island, v_ang, v_mag,
                            p_sched, q_sched, log)
        results.append(res)

    p_from, q_from, p_to, q_to = branch_flows(case, mats, v_mag, v_ang)
    gen_p, gen_q = _allocate_generation(case, mats, idx, results, v_mag, v_ang)
    total_gen = float(np.sum(gen_p))
    total_load = 0.0
    dead_labels = {r.island for r in results if r.dead}
    for d in case.loads:
        if idx.island_of[d.bus] not in dead_labels:
            total_load += d.p
    return PowerFlowSolution(
        case=case, v_mag=v_mag, v_ang=v_ang,
        p_from=p_from, q_from=q_from, p_to=p_to, q_to=q_to,
        gen_p=gen_p, gen_q=gen_q, islands=results,
        total_loss_mw=total_gen - total_load,
        iteration_log=log,
    )


def _solve_island(case, mats, opts, idx, island, v_ang, v_mag,
                  p_sched, q_sched, log) -> IslandResult:
    from .model import DeadIslandError, select_reference_bus

    buses = idx.island_buses(island)
    try:
        ref = select_reference_bus(idx, case, island)
    except DeadIslandError:
        return IslandResult(island, None, False, 0, np.inf, dead=True)

    gen_buses = {g.bus for g in case.generators if g.status}
    pv = sorted(b for b in buses if b in gen_buses and b != ref)
    pq = sorted(b for b in buses if b not in gen_buses and b != ref)
    pos = {b: case.bus_pos(b) for b in buses}

    # aggregate VAR limits per PV bus (pu)
    qlim = {}
    for b in pv:
        gens = case.gens_at(b)
        qlim[b] = (sum(g.q_min for g in gens) / case.base_mva,
                   sum(g.q_max for g in gens) / case.base_mva)
    setpoint = {b: case.bus(b).v_mag for b in pv}
    # load-side scheduled Q at PV buses (needed when clamping)
    q_load = {b: q_sched[pos[b]] for b in pv}

    clamped: dict[int, float] = {}   # bus -> clamped Q injection (pu)
    switch_count: dict[int, int] = {}
    events: list = []

    bp = mats.b_prime.toarray()
    pvpq = pv + pq
    pvpq_pos = [pos[b] for b in pvpq]
    bp_fac = sla.lu_factor(bp[np.ix_(pvpq_pos, pvpq_pos)]) if pvpq else None
    bpp_dense = mats.b_double_prime.toarray()

    def pq_list():
        return pq + sorted(clamped)

    def factor_bpp():
        cur = [pos[b] for b in pq_list()]
        if not cur:
            return None, cur
        return sla.lu_factor(bpp_dense[np.ix_(cur, cur)]), cur

    bpp_fac, pq_pos = factor_bpp()

    def mismatches():
        inj = bus_injections(mats, v_mag, v_ang)
        dp = np.array([p_sched[pos[b]] - inj[pos[b]].real for b in pvpq])
        q_targets = []
        for b in pq_list():
            tgt = clamped.get(b, q_sched[pos[b]])
            q_targets.append(tgt - inj[pos[b]].imag)
        dq = np.array(q_targets)
        return dp, dq, inj

    converged = False
    it = 0
    max_mis = np.inf
    for it in range(opts.max_iter + 1):
        dp, dq, inj = mismatches()
        max_dp = float(np.max(np.abs(dp))) if dp.size else 0.0
        max_dq = float(np.max(np.abs(dq))) if dq.size else 0.0
        max_mis = max(max_dp, max_dq)
        log.append({"island": island, "iter": it, "max_dp": max_dp, "max_dq": max_dq})
        if max_mis <= opts.tol:
            converged = True
            break
        if it == opts.max_iter:
            break
        # P-theta half-iteration
        if pvpq:
            vv = v_mag[pvpq_pos]
            dtheta = sla.lu_solve(bp_fac, dp / vv)
            v_ang[pvpq_pos] += dtheta
        # Q-V half-iteration
        _, dq, inj = mismatches()
        if pq_pos:
            vv = v_mag[pq_pos]
            dv = sla.lu_solve(bpp_fac, dq / vv)
            v_mag[pq_pos] += dv
        # VAR limit enforcement after the Q-V half-iteration
        if opts.var_limits:
            switched = _enforce_var_limits(
                case, mats, pv, clamped, switch_count, qlim, setpoint, q_load,
                v_mag, v_ang, pos, events, it)
            if switched:
                bpp_fac, pq_pos = factor_bpp()

    return IslandResult(island, ref, converged, it, max_mis, switch_events=events)


def _enforce_var_limits(case, mats, pv, clamped, switch_count, qlim, setpoint,
                        q_load, v_mag, v_ang, pos, events, it) -> bool:
    """Clamp PV buses whose generator VARs exceed limits; release clamped
    buses whose voltage error indicates relief. Returns True when the PQ
    set changed (B'' must be refactorized)."""
    inj = bus_injections(mats, v_mag, v_ang)
    changed = False
    for b in pv:
        if switch_count.get(b, 0) >= MAX_VAR_SWITCHES:
            continue
        lo, hi = qlim[b]
        if b not in clamped:
            q_gen = inj[pos[b]].imag - q_load[b]
            if q_gen > hi + 1e-9:
                clamped[b] = hi + q_load[b]
            elif q_gen < lo - 1e-9:
                clamped[b] = lo + q_load[b]
            else:
                continue
            switch_count[b] = switch_count.get(b, 0) + 1
            events.append({"iter": it, "bus": b, "event": "pv_to_pq",
                           "q_clamped": float(clamped[b] - q_load[b])})
            changed = True
        else:
            at_max = clamped[b] >= hi + q_load[b] - 1e-12
            v = v_mag[pos[b]]
            relief = (at_max and v > setpoint[b] + 1e-7) or \
                     (not at_max and v < setpoint[b] - 1e-7)
            if relief:
                del clamped[b]
                v_mag[pos[b]] = setpoint[b]
                switch_count[b] = switch_count.get(b, 0) + 1
                events.append({"iter": it, "bus": b, "event": "pq_to_pv"})
                changed = True
    return changed


def _allocate_generation(case, mats, idx, results, v_mag, v_ang):
    """Per-generator P/Q from the solved state: reference-bus generation is
    whatever balances its island; PV-bus VARs split proportionally to the
    generator Q ranges."""
    inj = bus_injections(mats, v_mag, v_ang)
    gen_p = np.zeros(len(case.generators))
    gen_q = np.zeros(len(case.generators))
    refs = {r.island: r.reference_bus for r in results if r.reference_bus is not None}
    dead = {r.island for r in results if r.dead}
    for i, g in enumerate(case.generators):
        if not g.status or idx.island_of[g.bus] in dead:
            continue
        p = case.bus_pos(g.bus)
        bus_gens = case.gens_at(g.bus)
        load_p = sum(d.p for d in case.loads_at(g.bus))
        load_q = sum(d.q for d in case.loads_at(g.bus))
        q_total = inj[p].imag * case.base_mva + load_q
        ranges = [max(gg.q_max - gg.q_min, 1e-9) for gg in bus_gens]
        my = bus_gens.index(next(gg for gg in bus_gens if gg.id == g.id))
        gen_q[i] = q_total * ranges[my] / sum(ranges)
        if refs.get(idx.island_of[g.bus]) == g.bus:
            p_total = inj[p].real * case.base_mva + load_p
            pmaxes = [gg.p_max for gg in bus_gens]
            gen_p[i] = p_total * pmaxes[my] / sum(pmaxes)
        else:
            gen_p[i] = g.p
    return gen_p, gen_q
