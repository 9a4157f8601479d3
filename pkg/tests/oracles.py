"""Independent test oracles.

Everything here is deliberately written from scratch against the textbook
definitions (dense algebra, finite-difference Jacobians, brute-force graph
search) and never calls into the solver paths it is used to check.
"""

import numpy as np
import scipy.linalg as sla


def oracle_ybus(case):
    n = case.n_bus
    pos = {b.id: i for i, b in enumerate(case.buses)}
    Y = np.zeros((n, n), complex)
    for br in case.branches:
        if not br.status:
            continue
        y = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charging / 2.0
        t = br.tap_ratio or 1.0
        f, k = pos[br.from_bus], pos[br.to_bus]
        Y[f, f] += (y + bc) / t**2
        Y[f, k] += -y / t
        Y[k, f] += -y / t
        Y[k, k] += y + bc
    return Y


def oracle_injections(case):
    """Scheduled per-bus P and Q in pu, straight from the case records."""
    n = case.n_bus
    pos = {b.id: i for i, b in enumerate(case.buses)}
    p = np.zeros(n)
    q = np.zeros(n)
    for g in case.generators:
        if g.status:
            p[pos[g.bus]] += g.p / case.base_mva
    for d in case.loads:
        p[pos[d.bus]] -= d.p / case.base_mva
        q[pos[d.bus]] -= d.q / case.base_mva
    return p, q


def newton_pf(case, ref_bus, tol=1e-10, max_iter=50, var_limits=False):
    """Full Newton-Raphson power flow with a finite-difference Jacobian.

    Single-island cases only. Returns (v_mag, v_ang, converged). When
    var_limits is set, PV buses exceeding their aggregate generator Q range
    are clamped to PQ after each iteration (same rule as the solver under
    test, independently coded)."""
    n = case.n_bus
    pos = {b.id: i for i, b in enumerate(case.buses)}
    Y = oracle_ybus(case)
    p_sched, q_sched = oracle_injections(case)

    gen_buses = sorted({g.bus for g in case.generators if g.status})
    pv = [b for b in gen_buses if b != ref_bus]
    pq = [b.id for b in case.buses if b.id not in gen_buses and b.id != ref_bus]

    v_mag = np.ones(n)
    v_ang = np.zeros(n)
    for b in gen_buses:
        v_mag[pos[b]] = case.bus(b).v_mag

    qlim = {}
    qload = {}
    for b in pv:
        gens = [g for g in case.generators if g.status and g.bus == b]
        qlim[b] = (sum(g.q_min for g in gens) / case.base_mva,
                   sum(g.q_max for g in gens) / case.base_mva)
        qload[b] = q_sched[pos[b]]
    clamped = {}

    def mismatch(va, vm, pv_now, pq_now):
        V = vm * np.exp(1j * va)
        S = V * np.conj(Y @ V)
        rows = []
        for b in pv_now + pq_now:
            rows.append(p_sched[pos[b]] - S[pos[b]].real)
        for b in pq_now:
            tgt = clamped.get(b, q_sched[pos[b]])
            rows.append(tgt - S[pos[b]].imag)
        return np.array(rows)

    converged = False
    for _ in range(max_iter):
        pv_now = [b for b in pv if b not in clamped]
        pq_now = pq + sorted(clamped)
        f0 = mismatch(v_ang, v_mag, pv_now, pq_now)
        if np.max(np.abs(f0)) < tol if f0.size else True:
            converged = True
            if not var_limits:
                break
            if not _oracle_clamp(case, Y, pos, pv, clamped, qlim, qload, v_mag, v_ang):
                break
            converged = False
            continue
        m = len(pv_now) + len(pq_now)
        nq = len(pq_now)
        J = np.zeros((m + nq, m + nq))
        h = 1e-7
        for j, b in enumerate(pv_now + pq_now):
            va = v_ang.copy(); va[pos[b]] += h
            J[:, j] = (f0 - mismatch(va, v_mag, pv_now, pq_now)) / h
        for j, b in enumerate(pq_now):
            vm = v_mag.copy(); vm[pos[b]] += h
            J[:, m + j] = (f0 - mismatch(v_ang, vm, pv_now, pq_now)) / h
        dx = np.linalg.solve(J, -f0)
        for j, b in enumerate(pv_now + pq_now):
            v_ang[pos[b]] -= dx[j]
        for j, b in enumerate(pq_now):
            v_mag[pos[b]] -= dx[m + j]
        if var_limits:
            _oracle_clamp(case, Y, pos, pv, clamped, qlim, qload, v_mag, v_ang)
    return v_mag, v_ang, converged


def _oracle_clamp(case, Y, pos, pv, clamped, qlim, qload, v_mag, v_ang):
    V = v_mag * np.exp(1j * v_ang)
    S = V * np.conj(Y @ V)
    changed = False
    for b in pv:
        if b in clamped:
            continue
        lo, hi = qlim[b]
        q_gen = S[pos[b]].imag - qload[b]
        if q_gen > hi + 1e-9:
            clamped[b] = hi + qload[b]
            changed = True
        elif q_gen < lo - 1e-9:
            clamped[b] = lo + qload[b]
            changed = True
    return changed


def brute_force_islands(case):
    """Island partition by BFS over in-service branches, dict bus -> label."""
    adj = {b.id: set() for b in case.buses}
    for br in case.branches:
        if br.status:
            adj[br.from_bus].add(br.to_bus)
            adj[br.to_bus].add(br.from_bus)
    label = {}
    k = 0
    for b in adj:
        if b in label:
            continue
        stack = [b]
        label[b] = k
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in label:
                    label[v] = k
                    stack.append(v)
        k += 1
    return label, k


def brute_force_bridges(case):
    """Bridges by removing each in-service branch and recounting islands."""
    _, base = brute_force_islands(case)
    out = set()
    for br in case.branches:
        if not br.status:
            continue
        _, k = brute_force_islands(case.with_branch_out(br.id))
        if k > base:
            out.add(br.id)
    return out


def dc_solve(case, ref_bus):
    """Direct DC power flow: solve B theta = P with the reference removed,
    return per-branch MW flows keyed by branch id."""
    pos = {b.id: i for i, b in enumerate(case.buses)}
    n = case.n_bus
    B = np.zeros((n, n))
    for br in case.branches:
        if not br.status:
            continue
        b = 1.0 / br.x
        f, t = pos[br.from_bus], pos[br.to_bus]
        B[f, f] += b; B[t, t] += b; B[f, t] -= b; B[t, f] -= b
    p, _ = oracle_injections(case)
    keep = [i for i in range(n) if i != pos[ref_bus]]
    theta = np.zeros(n)
    theta[keep] = np.linalg.solve(B[np.ix_(keep, keep)], p[keep])
    flows = {}
    for br in case.branches:
        if not br.status:
            continue
        flows[br.id] = (theta[pos[br.from_bus]] - theta[pos[br.to_bus]]) / br.x * case.base_mva
    return flows


def wls_cholesky(H, r_diag, dz):
    """One weighted least-squares step via explicit normal equations and a
    Cholesky factor: solves (H^T R^-1 H) dx = H^T R^-1 dz."""
    W = np.diag(1.0 / r_diag)
    G = H.T @ W @ H
    L = sla.cholesky(G, lower=True)
    rhs = H.T @ W @ dz
    return sla.cho_solve((L, True), rhs)
