"""Telemetry model, observability analysis, WLS state estimation with
Givens-rotation factorization, chi-square bad-data detection and
largest-normalized-residual elimination.

Measurement values and sigmas are in per-unit. The estimator runs per
observable island with the island angle referenced to zero at its reference
bus; the Gauss-Newton step solves the weighted linear least-squares problem
by row-wise Givens rotations on the weighted Jacobian, never forming an
explicit gain-matrix inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.stats import chi2 as chi2_dist

from .matrices import NetworkMatrices
from .model import GridCase, LinkNetIndex

SIGMA_FLOW = 0.008   # pu, branch flows and bus injections
SIGMA_VMAG = 0.004   # pu, voltage magnitudes

WLS_TOL = 1e-6
WLS_MAX_ITER = 30
CHI2_CONFIDENCE = 0.99


class EstimationError(Exception):
    pass


class InsufficientRedundancyError(EstimationError):
    pass


class BadDataUnresolvableError(EstimationError):
    pass


class MeasKind(str, Enum):
    BRANCH_P_FROM = "branch_p_from"
    BRANCH_Q_FROM = "branch_q_from"
    BRANCH_P_TO = "branch_p_to"
    BRANCH_Q_TO = "branch_q_to"
    BUS_P_INJ = "bus_p_inj"
    BUS_Q_INJ = "bus_q_inj"
    BUS_V_MAG = "bus_v_mag"


BRANCH_KINDS = {MeasKind.BRANCH_P_FROM, MeasKind.BRANCH_Q_FROM,
                MeasKind.BRANCH_P_TO, MeasKind.BRANCH_Q_TO}
P_KINDS = {MeasKind.BRANCH_P_FROM, MeasKind.BRANCH_P_TO, MeasKind.BUS_P_INJ}


@dataclass(frozen=True)
class Measurement:
    id: int
    kind: MeasKind
    element: int        # branch id or bus id
    value: float        # pu
    sigma: float        # pu
    status: str = "active"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"measurement {self.id}: sigma must be positive")


@dataclass(frozen=True)
class MeasurementSet:
    measurements: tuple[Measurement, ...]
    timestamp: int = 0

    def __post_init__(self):
        ids = [m.id for m in self.measurements]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate measurement ids")

    @property
    def active(self) -> tuple[Measurement, ...]:
        return tuple(m for m in self.measurements if m.status == "active")

    def eliminate(self, meas_id: int) -> "MeasurementSet":
        return MeasurementSet(
            tuple(replace(m, status="eliminated") if m.id == meas_id else m
                  for m in self.measurements),
            timestamp=self.timestamp,
        )

    def to_rows(self) -> str:
        lines = ["id\tkind\telement\tvalue\tsigma\tstatus"]
        for m in self.measurements:
            lines.append(f"{m.id}\t{m.kind.value}\t{m.element}\t{m.value:.17g}\t{m.sigma:.17g}\t{m.status}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_rows(cls, text: str, timestamp: int = 0) -> "MeasurementSet":
        out = []
        for line in text.splitlines()[1:]:
            if not line.strip():
                continue
            i, kind, el, val, sig, status = line.split("\t")
            out.append(Measurement(int(i), MeasKind(kind), int(el),
                                   float(val), float(sig), status))
        return cls(tuple(out), timestamp=timestamp)


# ---------------------------------------------------------------------------
# measurement placement and synthetic telemetry

@dataclass(frozen=True)
class MeasurementPlan:
    entries: tuple[tuple[MeasKind, int, float], ...]  # kind, element, sigma


def full_plan(case: GridCase, sigma_flow: float = SIGMA_FLOW,
              sigma_v: float = SIGMA_VMAG) -> MeasurementPlan:
    """Every in-service branch metered at both ends, every bus injection and
    every bus voltage."""
    entries = []
    for br in case.branches:
        if not br.status:
            continue
        for kind in (MeasKind.BRANCH_P_FROM, MeasKind.BRANCH_Q_FROM,
                     MeasKind.BRANCH_P_TO, MeasKind.BRANCH_Q_TO):
            entries.append((kind, br.id, sigma_flow))
    for b in case.buses:
        entries.append((MeasKind.BUS_P_INJ, b.id, sigma_flow))
        entries.append((MeasKind.BUS_Q_INJ, b.id, sigma_flow))
    for b in case.buses:
        entries.append((MeasKind.BUS_V_MAG, b.id, sigma_v))
    return MeasurementPlan(tuple(entries))


def true_values(case: GridCase, mats: NetworkMatrices, plan: MeasurementPlan,
                v_mag: np.ndarray, v_ang: np.ndarray) -> np.ndarray:
    mset = MeasurementSet(tuple(
        Measurement(i + 1, kind, el, 0.0, sigma)
        for i, (kind, el, sigma) in enumerate(plan.entries)))
    return h_eval(case, mats, mset, v_mag, v_ang)


def generate_telemetry(sol, case: GridCase, mats: NetworkMatrices,
                       plan: MeasurementPlan | None = None,
                       noise_seed: int = 0, timestamp: int = 0) -> MeasurementSet:
    """Synthetic SCADA snapshot: true values from a solved power flow plus
    independent Gaussian noise per measurement, deterministic under seed."""
    plan = plan or full_plan(case)
    truth = true_values(case, mats, plan, sol.v_mag, sol.v_ang)
    rng = np.random.default_rng(noise_seed)
    noise = rng.standard_normal(len(plan.entries))
    out = []
    for i, (kind, el, sigma) in enumerate(plan.entries):
        out.append(Measurement(i + 1, kind, el, truth[i] + sigma * noise[i], sigma))
    return MeasurementSet(tuple(out), timestamp=timestamp)


# ---------------------------------------------------------------------------
# measurement model and Jacobian

def h_eval(case: GridCase, mats: NetworkMatrices, mset: MeasurementSet,
           v_mag: np.ndarray, v_ang: np.ndarray) -> np.ndarray:
    """Model values of the active measurements at a voltage state (pu)."""
    V = v_mag * np.exp(1j * v_ang)
    ybus = mats.ybus
    inj = V * np.conj(ybus @ V)
    vals = np.zeros(len(mset.active))
    for i, m in enumerate(mset.active):
        if m.kind in BRANCH_KINDS:
            k = case.branch_pos(m.element)
            br = case.branches[k]
            f = case.bus_pos(br.from_bus)
            t = case.bus_pos(br.to_bus)
            if m.kind in (MeasKind.BRANCH_P_FROM, MeasKind.BRANCH_Q_FROM):
                s = V[f] * np.conj(mats.yff[k] * V[f] + mats.yft[k] * V[t])
            else:
                s = V[t] * np.conj(mats.ytf[k] * V[f] + mats.ytt[k] * V[t])
            vals[i] = s.real if m.kind in P_KINDS else s.imag
        elif m.kind is MeasKind.BUS_P_INJ:
            vals[i] = inj[case.bus_pos(m.element)].real
        elif m.kind is MeasKind.BUS_Q_INJ:
            vals[i] = inj[case.bus_pos(m.element)].imag
        else:
            vals[i] = v_mag[case.bus_pos(m.element)]
    return vals


def measurement_jacobian(case: GridCase, mats: NetworkMatrices,
                         mset: MeasurementSet, v_mag: np.ndarray,
                         v_ang: np.ndarray, ang_col: dict[int, int],
                         v_col: dict[int, int], n_states: int) -> np.ndarray:
    """Analytic Jacobian of the active measurements with respect to the
    state columns given by ang_col (bus id -> angle column) and v_col
    (bus id -> magnitude column)."""
    V = v_mag * np.exp(1j * v_ang)
    Y = mats.ybus.toarray()
    I = Y @ V
    H = np.zeros((len(mset.active), n_states))

    def add(row, ds_dth: dict, ds_dvm: dict, imag: bool):
        for bus, d in ds_dth.items():
            if bus in ang_col:
                H[row, ang_col[bus]] = d.imag if imag else d.real
        for bus, d in ds_dvm.items():
            if bus in v_col:
                H[row, v_col[bus]] = d.imag if imag else d.real

    for i, m in enumerate(mset.active):
        if m.kind in BRANCH_KINDS:
            k = case.branch_pos(m.element)
            br = case.branches[k]
            f = case.bus_pos(br.from_bus)
            t = case.bus_pos(br.to_bus)
            ef = np.exp(1j * v_ang[f])
            et = np.exp(1j * v_ang[t])
            if m.kind in (MeasKind.BRANCH_P_FROM, MeasKind.BRANCH_Q_FROM):
                yaa, yab = mats.yff[k], mats.yft[k]
                a, b = f, t
                ea, eb = ef, et
            else:
                yaa, yab = mats.ytt[k], mats.ytf[k]
                a, b = t, f
                ea, eb = et, ef
            Ia = yaa * V[a] + yab * V[b]
            s = V[a] * np.conj(Ia)
            ds_dth = {
                case.buses[a].id: 1j * (s - v_mag[a] ** 2 * np.conj(yaa)),
                case.buses[b].id: -1j * V[a] * np.conj(yab * V[b]),
            }
            ds_dvm = {
                case.buses[a].id: ea * np.conj(Ia) + v_mag[a] * np.conj(yaa),
                case.buses[b].id: V[a] * np.conj(yab) * np.conj(eb),
            }
            add(i, ds_dth, ds_dvm, imag=m.kind not in P_KINDS)
        elif m.kind in (MeasKind.BUS_P_INJ, MeasKind.BUS_Q_INJ):
            p = case.bus_pos(m.element)
            s = V[p] * np.conj(I[p])
            ds_dth = {}
            ds_dvm = {}
            for kpos in np.nonzero(Y[p, :])[0]:
                bus_k = case.buses[kpos].id
                if kpos == p:
                    ds_dth[bus_k] = 1j * (s - v_mag[p] ** 2 * np.conj(Y[p, p]))
                    ds_dvm[bus_k] = np.exp(1j * v_ang[p]) * np.conj(I[p]) + v_mag[p] * np.conj(Y[p, p])
                else:
                    ds_dth[bus_k] = -1j * V[p] * np.conj(Y[p, kpos] * V[kpos])
                    ds_dvm[bus_k] = V[p] * np.conj(Y[p, kpos]) * np.exp(-1j * v_ang[kpos])
            add(i, ds_dth, ds_dvm, imag=m.kind is MeasKind.BUS_Q_INJ)
        else:
            bus = m.element
            if bus in v_col:
                H[i, v_col[bus]] = 1.0
    return H


# ---------------------------------------------------------------------------
# Givens-rotation least squares

def givens_solve(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve min ||Ax - b||_2 by row-wise Givens QR. A is m x n with m >= n
    and full column rank."""
    m, n = A.shape
    R = np.zeros((n, n))
    qtb = np.zeros(n)
    for i in range(m):
        row = A[i, :].copy()
        rhs = b[i]
        for j in range(n):
            if row[j] == 0.0:
                continue
            if R[j, j] == 0.0:
                R[j, j:] = row[j:]
                qtb[j] = rhs
                row[:] = 0.0
                break
            r = np.hypot(R[j, j], row[j])
            c = R[j, j] / r
            s = row[j] / r
            Rj = R[j, j:].copy()
            R[j, j:] = c * Rj + s * row[j:]
            row[j:] = -s * Rj + c * row[j:]
            new_qtb = c * qtb[j] + s * rhs
            rhs = -s * qtb[j] + c * rhs
            qtb[j] = new_qtb
    diag = np.abs(np.diag(R))
    if np.any(diag < 1e-10 * max(1.0, diag.max())):
        raise EstimationError("rank-deficient least-squares system (unobservable state)")
    x = np.zeros(n)
    for j in range(n - 1, -1, -1):
        x[j] = (qtb[j] - R[j, j + 1:] @ x[j + 1:]) / R[j, j]
    return x


# ---------------------------------------------------------------------------
# observability analysis

@dataclass(frozen=True)
class ObservableIsland:
    buses: frozenset[int]
    reference: int
    has_voltage: bool


def observability_analysis(mset: MeasurementSet, case: GridCase,
                           idx: LinkNetIndex) -> list[ObservableIsland]:
    """Numerical observability on the decoupled DC model: states in the
    null space of the P-measurement Jacobian identify unobservable branches;
    the remaining network's components are the observable islands."""
    n = case.n_bus
    rows = []
    for m in mset.active:
        if m.kind in (MeasKind.BRANCH_P_FROM, MeasKind.BRANCH_P_TO):
            br = case.branch(m.element)
            if not br.status:
                continue
            row = np.zeros(n)
            w = 1.0 / br.x
            row[case.bus_pos(br.from_bus)] = w
            row[case.bus_pos(br.to_bus)] = -w
            rows.append(row)
        elif m.kind is MeasKind.BUS_P_INJ:
            p = case.bus_pos(m.element)
            row = np.zeros(n)
            for br_id, far in idx.adjacency[m.element]:
                br = case.branch(br_id)
                w = 1.0 / br.x
                row[p] += w
                row[case.bus_pos(far)] -= w
            rows.append(row)
    # pin one angle per physical island
    for island in range(idx.n_islands):
        buses = idx.island_buses(island)
        row = np.zeros(n)
        row[case.bus_pos(min(buses))] = 1.0
        rows.append(row)

    H = np.array(rows) if rows else np.zeros((0, n))
    _, s, vt = np.linalg.svd(H, full_matrices=True)
    tol = max(H.shape) * (s[0] if s.size else 1.0) * 1e-10
    rank = int(np.sum(s > tol))
    null = vt[rank:, :]  # rows span the null space

    unobservable: set[int] = set()
    for br in case.branches:
        if not br.status:
            continue
        f = case.bus_pos(br.from_bus)
        t = case.bus_pos(br.to_bus)
        if null.shape[0] and np.any(np.abs(null[:, f] - null[:, t]) > 1e-7):
            unobservable.add(br.id)

    # components of the observable subnetwork
    label: dict[int, int] = {}
    k = 0
    for bus in (b.id for b in case.buses):
        if bus in label:
            continue
        stack = [bus]
        label[bus] = k
        while stack:
            u = stack.pop()
            for br_id, far in idx.adjacency[u]:
                if br_id in unobservable or far in label:
                    continue
                label[far] = k
                stack.append(far)
        k += 1

    v_buses = {m.element for m in mset.active if m.kind is MeasKind.BUS_V_MAG}
    out = []
    for lab in range(k):
        buses = frozenset(b for b, l in label.items() if l == lab)
        out.append(ObservableIsland(
            buses=buses,
            reference=min(buses),
            has_voltage=bool(buses & v_buses),
        ))
    return out


# ---------------------------------------------------------------------------
# WLS estimation

@dataclass
class StateEstimate:
    v_mag: np.ndarray
    v_ang: np.ndarray
    estimated: np.ndarray            # bool mask, bus-position order
    residuals: np.ndarray            # z - h(x_hat), active measurements
    normalized_residuals: np.ndarray
    objective: float
    dof: int
    chi2_threshold: float
    bdd_pass: bool
    observable_islands: list[ObservableIsland]
    eliminated: list[int] = field(default_factory=list)
    converged: bool = True
    iterations: int = 0
    active_ids: list[int] = field(default_factory=list)

    def report(self, mset: MeasurementSet | None = None) -> dict:
        rows = []
        for j, mid in enumerate(self.active_ids):
            rows.append({
                "id": mid,
                "residual": float(self.residuals[j]),
                "normalized_residual": float(self.normalized_residuals[j]),
            })
        return {
            "converged": self.converged,
            "objective": self.objective,
            "dof": self.dof,
            "chi2_threshold": self.chi2_threshold,
            "bdd_pass": self.bdd_pass,
            "eliminated": list(self.eliminated),
            "observable_islands": [sorted(i.buses) for i in self.observable_islands],
            "residual_table": rows,
        }


def _island_measurements(mset: MeasurementSet, case: GridCase,
                         idx: LinkNetIndex, island: ObservableIsland):
    """Measurements usable for one observable island: internal branch flows,
    injections whose whole neighborhood is internal, and island voltages."""
    out = []
    for m in mset.active:
        if m.kind in BRANCH_KINDS:
            br = case.branch(m.element)
            if br.status and br.from_bus in island.buses and br.to_bus in island.buses:
                out.append(m)
        elif m.kind in (MeasKind.BUS_P_INJ, MeasKind.BUS_Q_INJ):
            if m.element in island.buses and all(
                    far in island.buses for _, far in idx.adjacency[m.element]):
                out.append(m)
        else:
            if m.element in island.buses:
                out.append(m)
    return out


def wls_estimate(mset: MeasurementSet, case: GridCase, idx: LinkNetIndex,
                 mats: NetworkMatrices,
                 islands: list[ObservableIsland] | None = None) -> StateEstimate:
    islands = islands if islands is not None else observability_analysis(mset, case, idx)
    n = case.n_bus
    v_mag = np.full(n, np.nan)
    v_ang = np.full(n, np.nan)
    estimated = np.zeros(n, bool)

    all_res: list[float] = []
    all_norm: list[float] = []
    active_ids: list[int] = []
    total_m = 0
    total_states = 0
    objective = 0.0
    converged = True
    iterations = 0

    for island in islands:
        meas = _island_measurements(mset, case, idx, island)
        if len(island.buses) < 1 or not island.has_voltage or not meas:
            continue
        sub = MeasurementSet(tuple(meas), timestamp=mset.timestamp)
        buses = sorted(island.buses, key=case.bus_pos)
        ang_col = {}
        v_col = {}
        col = 0
        for b in buses:
            if b != island.reference:
                ang_col[b] = col
                col += 1
        for b in buses:
            v_col[b] = col
            col += 1
        ns = col
        if len(meas) < ns:
            continue  # not actually solvable, leave unestimated

        vm = np.ones(n)
        va = np.zeros(n)
        z = np.array([m.value for m in sub.active])
        sig = np.array([m.sigma for m in sub.active])
        it = 0
        ok = False
        for it in range(1, WLS_MAX_ITER + 1):
            hx = h_eval(case, mats, sub, vm, va)
            H = measurement_jacobian(case, mats, sub, vm, va, ang_col, v_col, ns)
            dz = (z - hx) / sig
            Hw = H / sig[:, None]
            try:
                dx = givens_solve(Hw, dz)
            except EstimationError:
                ok = False
                break
            for b, c in ang_col.items():
                va[case.bus_pos(b)] += dx[c]
            for b, c in v_col.items():
                vm[case.bus_pos(b)] += dx[c]
            if np.max(np.abs(dx)) < WLS_TOL:
                ok = True
                break
        iterations = max(iterations, it)
        if not ok:
            converged = False
            continue

        hx = h_eval(case, mats, sub, vm, va)
        res = z - hx
        objective += float(np.sum((res / sig) ** 2))
        H = measurement_jacobian(case, mats, sub, vm, va, ang_col, v_col, ns)
        norm_res = _normalized_residuals(H, sig, res)
        all_res.extend(res.tolist())
        all_norm.extend(norm_res.tolist())
        active_ids.extend(m.id for m in sub.active)
        total_m += len(meas)
        total_states += ns
        for b in buses:
            p = case.bus_pos(b)
            v_mag[p] = vm[p]
            v_ang[p] = va[p]
            estimated[p] = True

    dof = total_m - total_states
    threshold = float(chi2_dist.ppf(CHI2_CONFIDENCE, dof)) if dof > 0 else np.inf
    eliminated = [m.id for m in mset.measurements if m.status == "eliminated"]
    return StateEstimate(
        v_mag=v_mag, v_ang=v_ang, estimated=estimated,
        residuals=np.array(all_res), normalized_residuals=np.array(all_norm),
        objective=objective, dof=dof, chi2_threshold=threshold,
        bdd_pass=bool(objective <= threshold) if dof > 0 else True,
        observable_islands=islands, eliminated=eliminated,
        converged=converged, iterations=iterations, active_ids=active_ids,
    )


def _normalized_residuals(H: np.ndarray, sig: np.ndarray, res: np.ndarray) -> np.ndarray:
    """|r_i| / sqrt(Omega_ii) with Omega = R - H G^-1 H^T (exact residual
    covariance; critical measurements get Omega_ii ~ 0 and are reported 0)."""
    R = np.diag(sig ** 2)
    W = np.diag(1.0 / sig ** 2)
    G = H.T @ W @ H
    try:
        Ginv = np.linalg.inv(G)
    except np.linalg.LinAlgError:
        return np.abs(res) / sig
    omega = R - H @ Ginv @ H.T
    d = np.diag(omega).copy()
    out = np.zeros_like(res)
    mask = d > 1e-12
    out[mask] = np.abs(res[mask]) / np.sqrt(d[mask])
    return out


def chi2_bdd(est: StateEstimate) -> tuple[bool, float]:
    """Chi-square test on the WLS objective at 99% confidence."""
    if est.dof <= 0:
        raise InsufficientRedundancyError(
            f"degrees of freedom {est.dof}: not enough redundancy for a chi-square test")
    return est.objective <= est.chi2_threshold, est.chi2_threshold


def eliminate_worst(est: StateEstimate, mset: MeasurementSet) -> MeasurementSet:
    """Mark the measurement with the largest normalized residual eliminated."""
    if not len(est.normalized_residuals):
        raise BadDataUnresolvableError("no residuals available")
    order = np.argsort(-est.normalized_residuals)
    worst = order[0]
    if est.normalized_residuals[worst] <= 0.0:
        raise BadDataUnresolvableError(
            "largest-residual measurement is critical; bad data unresolvable")
    return mset.eliminate(est.active_ids[worst])


def estimate_with_bde(mset: MeasurementSet, case: GridCase, idx: LinkNetIndex,
                      mats: NetworkMatrices,
                      max_eliminations: int = 20) -> tuple[StateEstimate, MeasurementSet]:
    """Full SE loop: OA + WLS + chi-square BDD, eliminating the largest
    normalized residual until the test passes or elimination would break
    observability."""
    work = mset
    baseline = observability_analysis(mset, case, idx)
    base_observable = {b for i in baseline for b in i.buses if len(i.buses) > 1}
    for _ in range(max_eliminations + 1):
        islands = observability_analysis(work, case, idx)
        now_observable = {b for i in islands for b in i.buses if len(i.buses) > 1}
        if now_observable < base_observable:
            raise BadDataUnresolvableError(
                "elimination would drop below initial observability")
        est = wls_estimate(work, case, idx, mats, islands)
        if est.dof <= 0:
            raise InsufficientRedundancyError("redundancy exhausted during elimination")
        if est.bdd_pass:
            return est, work
        work = eliminate_worst(est, work)
    raise BadDataUnresolvableError("elimination loop exceeded its cap")
