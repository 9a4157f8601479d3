"""Linear network matrices: Ybus, fast-decoupled B' / B'', PTDF and LODF.

All matrices are built from in-service elements only. PTDF/LODF are stored
dense (desk-scale systems; O(branches x buses) memory) with one slack
reference per island; PTDF columns of reference buses are zero and the LODF
diagonal is -1 by convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .model import CaseError, GridCase, LinkNetIndex, select_reference_bus


class DegenerateIslandError(CaseError):
    """B' is singular after removing the reference row/column."""


@dataclass(frozen=True)
class NetworkMatrices:
    ybus: sp.csr_matrix                 # complex, n_bus x n_bus
    b_prime: sp.csr_matrix              # series susceptance Laplacian
    b_double_prime: sp.csr_matrix       # -Im(Ybus)
    ptdf: np.ndarray                    # n_branch x n_bus, slack-referenced
    lodf: np.ndarray                    # n_branch x n_branch, diag = -1
    reference: dict[int, int]           # island label -> reference bus id
    # per-branch admittance blocks used by flow equations (0 for dead branches)
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray


def branch_admittances(case: GridCase):
    """Two-port admittance blocks per branch (tap on the from side)."""
    nb = case.n_branch
    yff = np.zeros(nb, complex)
    yft = np.zeros(nb, complex)
    ytf = np.zeros(nb, complex)
    ytt = np.zeros(nb, complex)
    for i, br in enumerate(case.branches):
        if not br.status:
            continue
        y = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_charging / 2.0
        t = br.tap_ratio if br.tap_ratio != 0.0 else 1.0
        yff[i] = (y + bc) / (t * t)
        yft[i] = -y / t
        ytf[i] = -y / t
        ytt[i] = y + bc
    return yff, yft, ytf, ytt


def build_ybus(case: GridCase) -> sp.csr_matrix:
    n = case.n_bus
    yff, yft, ytf, ytt = branch_admittances(case)
    rows, cols, vals = [], [], []
    for i, br in enumerate(case.branches):
        if not br.status:
            continue
        f = case.bus_pos(br.from_bus)
        t = case.bus_pos(br.to_bus)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff[i], yft[i], ytf[i], ytt[i]]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)


def build_b_prime(case: GridCase) -> sp.csr_matrix:
    """DC Laplacian from series reactance only (XB fast-decoupled variant)."""
    n = case.n_bus
    rows, cols, vals = [], [], []
    for br in case.branches:
        if not br.status:
            continue
        b = 1.0 / br.x
        f = case.bus_pos(br.from_bus)
        t = case.bus_pos(br.to_bus)
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [b, -b, -b, b]
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def build_matrices(case: GridCase, idx: LinkNetIndex) -> NetworkMatrices:
    ybus = build_ybus(case)
    b_prime = build_b_prime(case)
    b_double_prime = sp.csr_matrix(-ybus.imag)
    yff, yft, ytf, ytt = branch_admittances(case)

    n = case.n_bus
    nb = case.n_branch
    ptdf = np.zeros((nb, n))
    reference: dict[int, int] = {}
    bp = b_prime.toarray()

    for island in range(idx.n_islands):
        buses = idx.island_buses(island)
        try:
            ref = select_reference_bus(idx, case, island)
        except CaseError:
            continue  # dead island: no PTDF block, flagged downstream
        reference[island] = ref
        others = [b for b in buses if b != ref]
        if not others:
            continue
        pos = [case.bus_pos(b) for b in others]
        b_red = bp[np.ix_(pos, pos)]
        try:
            x_red = np.linalg.inv(b_red)
        except np.linalg.LinAlgError:
            raise DegenerateIslandError(f"island {island}: singular B' at reference {ref}")
        cond = np.linalg.cond(b_red)
        if not np.isfinite(cond) or cond > 1e12:
            raise DegenerateIslandError(f"island {island}: B' numerically singular")
        col_of = {b: j for j, b in enumerate(others)}
        for i, br in enumerate(case.branches):
            if not br.status or idx.island_of[br.from_bus] != island:
                continue
            b = 1.0 / br.x
            row = np.zeros(len(others))
            if br.from_bus != ref:
                row += b * x_red[col_of[br.from_bus], :]
            if br.to_bus != ref:
                row -= b * x_red[col_of[br.to_bus], :]
            ptdf[i, pos] = row

    lodf = _lodf_from_ptdf(case, idx, ptdf)
    return NetworkMatrices(
        ybus=ybus,
        b_prime=b_prime,
        b_double_prime=b_double_prime,
        ptdf=ptdf,
        lodf=lodf,
        reference=reference,
        yff=yff, yft=yft, ytf=ytf, ytt=ytt,
    )


def _lodf_from_ptdf(case: GridCase, idx: LinkNetIndex, ptdf: np.ndarray) -> np.ndarray:
    """LODF(l, k): fraction of branch k's pre-outage flow that shifts onto l
    when k is outaged. Radial outages have no valid redistribution; their
    off-diagonal entries are NaN so accidental use is loud."""
    nb = case.n_branch
    lodf = np.full((nb, nb), np.nan)
    for k, brk in enumerate(case.branches):
        if not brk.status:
            lodf[:, k] = 0.0
            lodf[k, k] = -1.0
            continue
        f = case.bus_pos(brk.from_bus)
        t = case.bus_pos(brk.to_bus)
        sens = ptdf[:, f] - ptdf[:, t]  # flow response to 1 pu f->t transfer
        denom = 1.0 - sens[k]
        if abs(denom) < 1e-8:
            lodf[k, k] = -1.0
            continue  # bridge: leave column NaN
        col = sens / denom
        lodf[:, k] = col
        # branches in other islands are unaffected
        for l, brl in enumerate(case.branches):
            if not brl.status or idx.island_of[brl.from_bus] != idx.island_of[brk.from_bus]:
                lodf[l, k] = 0.0
        lodf[k, k] = -1.0
    return lodf


def dc_flows(case: GridCase, idx: LinkNetIndex, mats: NetworkMatrices,
             injections_mw: np.ndarray) -> np.ndarray:
    """Branch MW flows of the DC model for a bus injection vector (MW,
    bus-position order); per-island reference absorbs the imbalance."""
    return mats.ptdf @ injections_mw
