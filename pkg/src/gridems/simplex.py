"""Bounded-variable revised simplex.

Solves  min c^T x  subject to  A x = b,  l <= x <= u  with a two-phase
method. Nonbasic variables rest at a finite bound; the basis inverse is
maintained by product-form updates with periodic refactorization. Dantzig
pricing with a Bland's-rule fallback after a run of degenerate pivots
guards against cycling. Dense algebra throughout: instances here are
desk-scale dispatch problems, not production-size LPs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PIVOT_TOL = 1e-9
FEAS_TOL = 1e-8
DEGENERATE_CAP = 1000
REFACTOR_EVERY = 60
MAX_ITER = 20000


class SimplexError(Exception):
    pass


class Unbounded(SimplexError):
    pass


class Infeasible(SimplexError):
    pass


@dataclass
class LpResult:
    x: np.ndarray
    objective: float
    duals: np.ndarray          # one per equality row
    reduced_costs: np.ndarray
    iterations: int
    basis: list[int]

    def dual_objective(self, lp: "LinearProgram") -> float:
        """Lagrangian dual value at the returned duals: b^T y plus the bound
        contributions of the nonbasic reduced costs."""
        g = float(self.duals @ lp.b)
        for j in range(lp.n):
            d = self.reduced_costs[j]
            if d > PIVOT_TOL and np.isfinite(lp.lower[j]):
                g += d * lp.lower[j]
            elif d < -PIVOT_TOL and np.isfinite(lp.upper[j]):
                g += d * lp.upper[j]
        return g


@dataclass
class LinearProgram:
    """Equality-standard-form container with variable bounds. Use add_row
    with a sense to get slack variables added automatically."""
    names: list[str] = field(default_factory=list)
    cost: list[float] = field(default_factory=list)
    lower: list[float] = field(default_factory=list)
    upper: list[float] = field(default_factory=list)
    rows: list[dict[int, float]] = field(default_factory=list)
    rhs: list[float] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)

    def add_var(self, name: str, cost: float = 0.0,
                lower: float = 0.0, upper: float = np.inf) -> int:
        if lower > upper:
            raise SimplexError(f"variable {name}: lower bound above upper")
        self.names.append(name)
        self.cost.append(cost)
        self.lower.append(lower)
        self.upper.append(upper)
        return len(self.names) - 1

    def add_row(self, coeffs: dict[int, float], sense: str, rhs: float,
                name: str = "") -> int:
        """sense is one of '<=', '>=', '='. Inequalities get a bounded slack."""
        row = dict(coeffs)
        if sense == "<=":
            s = self.add_var(f"_slack{len(self.rows)}", 0.0, 0.0, np.inf)
            row[s] = 1.0
        elif sense == ">=":
            s = self.add_var(f"_surplus{len(self.rows)}", 0.0, 0.0, np.inf)
            row[s] = -1.0
        elif sense != "=":
            raise SimplexError(f"unknown sense {sense!r}")
        self.rows.append(row)
        self.rhs.append(rhs)
        self.row_names.append(name or f"row{len(self.rows) - 1}")
        return len(self.rows) - 1

    @property
    def n(self) -> int:
        return len(self.names)

    @property
    def m(self) -> int:
        return len(self.rows)

    @property
    def b(self) -> np.ndarray:
        return np.array(self.rhs)

    def matrix(self) -> np.ndarray:
        A = np.zeros((self.m, self.n))
        for i, row in enumerate(self.rows):
            for j, v in row.items():
                A[i, j] = v
        return A


def solve(lp: LinearProgram) -> LpResult:
    """Two-phase bounded revised simplex."""
    A = lp.matrix()
    b = lp.b.copy()
    c = np.array(lp.cost, float)
    lo = np.array(lp.lower, float)
    hi = np.array(lp.upper, float)
    m, n = A.shape
    if m == 0:
        x = np.where(c >= 0, np.where(np.isfinite(lo), lo, 0.0),
                     np.where(np.isfinite(hi), hi, 0.0))
        return LpResult(x, float(c @ x), np.zeros(0), c.copy(), 0, [])

    # start nonbasic variables at the finite bound nearest zero
    x = np.zeros(n)
    at_upper = np.zeros(n, bool)
    for j in range(n):
        if np.isfinite(lo[j]) and np.isfinite(hi[j]):
            if abs(hi[j]) < abs(lo[j]):
                x[j] = hi[j]
                at_upper[j] = True
            else:
                x[j] = lo[j]
        elif np.isfinite(lo[j]):
            x[j] = lo[j]
        elif np.isfinite(hi[j]):
            x[j] = hi[j]
            at_upper[j] = True
        else:
            x[j] = 0.0  # free variable; rests at zero until it enters the basis

    # phase 1: artificials with sign matching the residual
    resid = b - A @ x
    A1 = np.hstack([A, np.diag(np.where(resid >= 0, 1.0, -1.0))])
    lo1 = np.concatenate([lo, np.zeros(m)])
    hi1 = np.concatenate([hi, np.full(m, np.inf)])
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    x1 = np.concatenate([x, np.abs(resid)])
    at_upper1 = np.concatenate([at_upper, np.zeros(m, bool)])
    basis = list(range(n, n + m))

    it1 = _iterate(A1, b, c1, lo1, hi1, x1, at_upper1, basis, phase=1)
    if float(c1 @ x1) > 1e-7:
        raise Infeasible(f"phase 1 objective {float(c1 @ x1):.3e} nonzero")

    # pin artificials at zero for phase 2 (some may linger in a degenerate basis)
    lo1[n:] = 0.0
    hi1[n:] = 0.0
    c2 = np.concatenate([c, np.zeros(m)])
    it2 = _iterate(A1, b, c2, lo1, hi1, x1, at_upper1, basis, phase=2)

    xval = x1[:n]
    Ab = A1[:, basis]
    y = np.linalg.solve(Ab.T, c2[basis])
    d = c - y @ A
    return LpResult(
        x=xval, objective=float(c @ xval), duals=y,
        reduced_costs=d, iterations=it1 + it2, basis=[j for j in basis if j < n],
    )


def _iterate(A, b, c, lo, hi, x, at_upper, basis, phase) -> int:
    m = A.shape[0]
    basic = np.zeros(A.shape[1], bool)
    basic[basis] = True
    binv = np.linalg.inv(A[:, basis])
    degenerate_run = 0
    bland = False
    iters = 0

    for iters in range(1, MAX_ITER + 1):
        if iters % REFACTOR_EVERY == 0:
            binv = np.linalg.inv(A[:, basis])
            x[basis] = binv @ (b - A[:, ~basic] @ x[~basic])
        y = c[basis] @ binv
        d = c - y @ A
        # candidate entering variables (vectorized pricing)
        movable = ~basic & (lo != hi)
        score = np.where(movable & ~at_upper, -d, -np.inf)
        score = np.maximum(score, np.where(movable & at_upper, d, -np.inf))
        viable = score > PIVOT_TOL
        if not viable.any():
            return iters - 1
        if bland:
            j_in = int(np.nonzero(viable)[0][0])
        else:
            j_in = int(np.argmax(score))
        direction = -1.0 if at_upper[j_in] else +1.0

        w = binv @ (A[:, j_in] * direction)
        # ratio test (vectorized over the basis)
        bidx = np.asarray(basis)
        t_max = hi[j_in] - lo[j_in]  # bound flip distance
        leave = -1
        leave_to_upper = False
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = np.where(w > PIVOT_TOL, (x[bidx] - lo[bidx]) / w, np.inf)
            t_hi = np.where((w < -PIVOT_TOL) & np.isfinite(hi[bidx]),
                            (hi[bidx] - x[bidx]) / (-w), np.inf)
        i_lo = int(np.argmin(t_lo))
        i_hi = int(np.argmin(t_hi))
        if t_lo[i_lo] < t_max - 1e-12 and t_lo[i_lo] <= t_hi[i_hi]:
            t_max, leave, leave_to_upper = t_lo[i_lo], i_lo, False
        elif t_hi[i_hi] < t_max - 1e-12:
            t_max, leave, leave_to_upper = t_hi[i_hi], i_hi, True
        if not np.isfinite(t_max):
            if phase == 1:
                raise SimplexError("phase-1 subproblem unbounded (internal error)")
            raise Unbounded(f"entering variable {j_in} unbounded")
        t_max = max(t_max, 0.0)

        x[j_in] += direction * t_max
        x[bidx] -= t_max * w

        if t_max <= 1e-12:
            degenerate_run += 1
            if degenerate_run > DEGENERATE_CAP:
                bland = True
        else:
            degenerate_run = 0

        if leave == -1:
            at_upper[j_in] = not at_upper[j_in]
            continue

        j_out = basis[leave]
        x[j_out] = hi[j_out] if leave_to_upper else lo[j_out]
        at_upper[j_out] = leave_to_upper
        basis[leave] = j_in
        basic[j_out] = False
        basic[j_in] = True
        at_upper[j_in] = False
        # product-form update of binv (w holds binv @ (A_in * direction))
        wt = w * direction
        piv = wt[leave]
        if abs(piv) < 1e-11:
            binv = np.linalg.inv(A[:, basis])
        else:
            row = binv[leave, :] / piv
            binv -= np.outer(wt, row)
            binv[leave, :] = row
    raise SimplexError("iteration limit exceeded")
