"""Explicit differential operators representing the restricted second
variation: the order-2(n-2) operator acting on the along-flow profile and
the order-2(n-3) operator acting on its derivative, assembled from the
symmetric coefficient functions b_ij(t) by staggered finite differences.

The quadratic forms are q1(xi) = sum b_ij xi^(i) xi^(j) (i,j = 1..n-2) and
q2(z) = sum b_{i+1,j+1} z^(i) z^(j) (i,j = 0..n-3); all derivative chains
share one staggered quadrature so Q1(xi) = Q2(xi') holds algebraically on
matched samples.  Boundary conditions (derivatives 0..n-3 for D1, 0..n-4
for D2, vanishing at both ends) are eliminated strongly with one-sided
second-order stencils, keeping the matrices symmetric and banded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .secondvar import ConjugateTimeResult


class CoefficientError(ValueError):
    pass


@dataclass
class CoefficientField:
    """Symmetric coefficient table b_ij(t), i,j = 1..n-2, constants or callables."""

    n: int
    entries: dict

    def __post_init__(self):
        if self.n < 3:
            raise CoefficientError("need state dimension n >= 3")
        r = self.n - 2
        table = {}
        for (i, j), v in self.entries.items():
            if not (1 <= i <= r and 1 <= j <= r):
                raise CoefficientError(f"coefficient index ({i},{j}) out of range 1..{r}")
            table[(i, j)] = v
            other = table.get((j, i), v)
            if not callable(v) and not callable(other) and other != v:
                raise CoefficientError(f"b[{i},{j}] != b[{j},{i}]")
            table[(j, i)] = table.get((j, i), v)
        self.entries = table

    @property
    def top_order(self):
        return self.n - 2

    def value(self, i, j, t):
        t = np.asarray(t, dtype=float)
        v = self.entries.get((i, j), 0.0)
        if callable(v):
            return np.asarray(v(t), dtype=float) * np.ones_like(t)
        return np.full_like(t, float(v))

    def check_top_positive(self, t):
        r = self.top_order
        vals = self.value(r, r, t)
        if np.any(vals <= 0):
            k = int(np.argmin(vals))
            raise CoefficientError(
                f"top coefficient b[{r},{r}] nonpositive at t = {np.asarray(t).ravel()[k]:.6g}"
            )


def coefficients_from_table(n, ts, columns):
    """CoefficientField interpolating sampled columns {(i,j): values on ts}."""
    entries = {}
    ts = np.asarray(ts, dtype=float)
    for key, vals in columns.items():
        vals = np.asarray(vals, dtype=float)
        entries[key] = (lambda v: (lambda t: np.interp(t, ts, v)))(vals)
    return CoefficientField(n, entries)


@dataclass(eq=False)
class OperatorMatrix:
    """Discretized quadratic-form operator with strong boundary conditions."""

    which: str                    # "D1" or "D2"
    n: int
    T: float
    ts: np.ndarray                # full node grid
    stiffness: sp.spmatrix        # reduced, symmetric
    mass_diag: np.ndarray         # lumped reduced mass
    embed: sp.spmatrix            # reduced DOFs -> full node values
    order: int                    # top derivative order of the form
    bc: str

    @property
    def dim(self):
        return self.stiffness.shape[0]


# ---------------------------------------------------------------------------
# staggered difference chains
# ---------------------------------------------------------------------------

def _diff_matrix(npts, h):
    return sp.diags([-np.ones(npts - 1), np.ones(npts - 1)], [0, 1],
                    shape=(npts - 1, npts), format="csr") / h


def _avg_matrix(npts):
    return sp.diags([0.5 * np.ones(npts - 1), 0.5 * np.ones(npts - 1)], [0, 1],
                    shape=(npts - 1, npts), format="csr")


def derivative_chain(npts, h, top_order):
    """Matrices G_0..G_top mapping npts samples to derivative samples on one
    common staggered grid of npts - top points (all second-order accurate)."""
    mats = []
    for i in range(top_order + 1):
        G = sp.identity(npts, format="csr")
        for _ in range(i):
            G = _diff_matrix(G.shape[0], h) @ G
        for _ in range(top_order - i):
            G = _avg_matrix(G.shape[0]) @ G
        mats.append(G)
    return mats


def chain_positions_weights(npts, h, top_order, T, offset=0.0):
    """Quadrature positions (stagger centers) and weights for a chain."""
    count = npts - top_order
    pos = (np.arange(count) + top_order / 2.0) * h + offset
    w = np.full(count, h)
    if count >= 2:
        w[0] = w[-1] = 0.5 * (T - (count - 2) * h)
    else:
        w[:] = T
    return pos, w


def _orders_and_coeff(which, n):
    """Derivative orders entering the form and the map to b-table indices."""
    if which == "D1":
        orders = range(1, n - 1)
        key = lambda i, j: (i, j)
        top = n - 2
    elif which == "D2":
        orders = range(0, n - 2)
        key = lambda i, j: (i + 1, j + 1)
        top = n - 3
    else:
        raise ValueError("which must be 'D1' or 'D2'")
    return list(orders), key, top


def quadratic_value(coeffs: CoefficientField, xi, T: float, which: str = "Q1",
                    staggered_input: bool = False) -> float:
    """Staggered-quadrature value of the quadratic form on a sampled profile.

    `xi` is sampled uniformly on [0, T] (nodes), or on cell midpoints when
    staggered_input is set (the natural grid of a first difference); the
    latter makes Q1(xi) == Q2(diff(xi)/h) exact at machine precision.
    """
    xi = np.asarray(xi, dtype=float)
    which_q = {"Q1": "D1", "Q2": "D2", "D1": "D1", "D2": "D2"}[which]
    orders, key, top = _orders_and_coeff(which_q, coeffs.n)
    npts = len(xi)
    if npts < top + 2:
        raise CoefficientError("profile too coarse for the requested derivatives")
    if staggered_input:
        h = T / npts
        offset = 0.5 * h
    else:
        h = T / (npts - 1)
        offset = 0.0
    chain = derivative_chain(npts, h, top)
    pos, w = chain_positions_weights(npts, h, top, T, offset)
    coeffs.check_top_positive(pos)
    derivs = {i: chain[i] @ xi for i in orders}
    total = 0.0
    for i in orders:
        for j in orders:
            b = coeffs.value(*key(i, j), pos)
            total += float(np.sum(w * b * derivs[i] * derivs[j]))
    return total


def quadratic_value_bilinear(coeffs, xi, eta, T, which="Q1"):
    """Polarized form value on two node-sampled profiles."""
    which_q = {"Q1": "D1", "Q2": "D2"}[which]
    orders, key, top = _orders_and_coeff(which_q, coeffs.n)
    npts = len(xi)
    h = T / (npts - 1)
    chain = derivative_chain(npts, h, top)
    pos, w = chain_positions_weights(npts, h, top, T)
    dx = {i: chain[i] @ np.asarray(xi, float) for i in orders}
    de = {i: chain[i] @ np.asarray(eta, float) for i in orders}
    total = 0.0
    for i in orders:
        for j in orders:
            b = coeffs.value(*key(i, j), pos)
            total += 0.5 * float(np.sum(w * b * (dx[i] * de[j] + de[i] * dx[j])))
    return total


# ---------------------------------------------------------------------------
# boundary elimination and assembly
# ---------------------------------------------------------------------------

def one_sided_stencil(order, h, width=None):
    """Coefficients on nodes 0..width-1 approximating f^(order)(0) to O(h^2)."""
    width = width or order + 2
    A = np.vander(np.arange(width) * h, width, increasing=True).T
    rhs = np.zeros(width)
    rhs[order] = math.factorial(order)
    return np.linalg.solve(A, rhs)


def _elimination(npts, h, n_bc):
    """Embedding matrix E: free DOFs -> full nodes, enforcing derivative
    conditions 0..n_bc-1 at both ends with one-sided stencils."""
    if n_bc == 0:
        return sp.identity(npts, format="csr")
    drop_left = n_bc          # nodes 0..n_bc-1 eliminated
    free = np.arange(drop_left, npts - drop_left)
    rows, cols, vals = [], [], []
    for c, node in enumerate(free):
        rows.append(node)
        cols.append(c)
        vals.append(1.0)
    if n_bc >= 2:
        # solve the left-end constraints for nodes 1..n_bc-1
        width = n_bc + 1 + (n_bc - 1)   # widest stencil: order n_bc-1 needs n_bc+1 pts
        width = max(width, n_bc + 1)
        C = np.zeros((n_bc - 1, width))
        for i in range(1, n_bc):
            st = one_sided_stencil(i, h)
            C[i - 1, : len(st)] = st
        unk = C[:, 1:n_bc]                 # columns for eliminated nodes 1..n_bc-1
        known = C[:, n_bc:width]           # columns for kept nodes n_bc..
        sol = -np.linalg.solve(unk, known)  # (n_bc-1, width-n_bc)
        for r in range(n_bc - 1):
            for c in range(sol.shape[1]):
                node_kept = n_bc + c
                if abs(sol[r, c]) > 0:
                    rows.append(1 + r)
                    cols.append(node_kept - drop_left)
                    vals.append(sol[r, c])
        # mirrored right end
        for r in range(n_bc - 1):
            for c in range(sol.shape[1]):
                node_kept = npts - 1 - n_bc - c
                if abs(sol[r, c]) > 0:
                    rows.append(npts - 2 - r)
                    cols.append(node_kept - drop_left)
                    vals.append(sol[r, c])
    dim = npts - 2 * drop_left
    return sp.csr_matrix((vals, (rows, cols)), shape=(npts, dim))


def assemble(coeffs: CoefficientField, which: str, grid_size: int,
             T: float) -> OperatorMatrix:
    """Assemble the reduced stiffness and lumped mass for D1 or D2 on [0, T]."""
    n = coeffs.n
    orders, key, top = _orders_and_coeff(which, n)
    npts = grid_size + 1
    ts = np.linspace(0.0, T, npts)
    h = T / grid_size
    chain = derivative_chain(npts, h, top)
    pos, w = chain_positions_weights(npts, h, top, T)
    coeffs.check_top_positive(pos)

    K = sp.csr_matrix((npts, npts))
    for i in orders:
        Gi = chain[i]
        for j in orders:
            Gj = chain[j]
            b = coeffs.value(*key(i, j), pos)
            K = K + Gi.T @ sp.diags(w * b) @ Gj
    n_bc = (n - 2) if which == "D1" else (n - 3)
    E = _elimination(npts, h, n_bc)
    K_red = (E.T @ K @ E).tocsr()
    K_red = 0.5 * (K_red + K_red.T)
    wt = np.full(npts, h)
    wt[0] = wt[-1] = h / 2
    M_red = (E.T @ sp.diags(wt) @ E).tocsr()
    mass = np.asarray(M_red.diagonal())
    bc = f"derivatives 0..{n_bc - 1} clamped at both ends" if n_bc else "no end conditions"
    return OperatorMatrix(which=which, n=n, T=T, ts=ts, stiffness=K_red,
                          mass_diag=mass, embed=E, order=top, bc=bc)


def pairing(op: OperatorMatrix, xi_full) -> float:
    """Discrete bilinear pairing of a full node-sampled profile with itself.

    The profile is restricted to the free DOFs and re-embedded, so conforming
    profiles reproduce the quadrature value up to the elimination error.
    """
    xi_full = np.asarray(xi_full, dtype=float)
    n_bc = {"D1": op.n - 2, "D2": op.n - 3}[op.which]
    red = xi_full[n_bc:-n_bc] if n_bc else xi_full
    return float(red @ (op.stiffness @ red))


def _band_storage(K: sp.spmatrix):
    """Lower band storage (scipy eig_banded layout) of a symmetric sparse matrix."""
    coo = K.tocoo()
    bw = int(np.max(np.abs(coo.row - coo.col))) if coo.nnz else 0
    dim = K.shape[0]
    band = np.zeros((bw + 1, dim))
    Kc = K.tocsr()
    for d in range(bw + 1):
        band[d, : dim - d] = Kc.diagonal(d)
    return band, bw


def spectrum(op: OperatorMatrix, k: int):
    """Lowest k eigenvalues (and mass-orthonormal eigenprofiles on the full grid).

    Solves the lumped-mass generalized problem via a diagonal similarity and
    a banded symmetric eigensolver.
    """
    if k > op.dim:
        raise ValueError("k exceeds the number of free grid DOFs")
    s = 1.0 / np.sqrt(op.mass_diag)
    Kt = sp.diags(s) @ op.stiffness @ sp.diags(s)
    band, bw = _band_storage(Kt.tocsr())
    vals, vecs = scipy.linalg.eig_banded(band, lower=True, select="i",
                                         select_range=(0, k - 1))
    profiles = op.embed @ (vecs * s[:, None])
    return vals, profiles


def smallest_eigenvalue(op: OperatorMatrix) -> float:
    s = 1.0 / np.sqrt(op.mass_diag)
    Kt = sp.diags(s) @ op.stiffness @ sp.diags(s)
    band, _ = _band_storage(Kt.tocsr())
    vals = scipy.linalg.eig_banded(band, lower=True, select="i",
                                   select_range=(0, 0), eigvals_only=True)
    return float(vals[0])


def operator_conjugate_time(coeffs: CoefficientField, which: str,
                            T_max: float, tol_T: float, grid_size: int = 2000,
                            n_scan: int = 32) -> ConjugateTimeResult:
    """First horizon where the smallest eigenvalue of D1 or D2 crosses zero.

    Pre-scans n_scan horizons, then bisects the first sign change down to
    tol_T.  The coefficient family is re-evaluated on each trial horizon.
    """
    mode = "fixed" if which == "D1" else "free"

    def lam(T):
        return smallest_eigenvalue(assemble(coeffs, which, grid_size, T))

    ts_scan = np.linspace(T_max / n_scan, T_max, n_scan)
    lams = np.array([lam(T) for T in ts_scan])
    result = ConjugateTimeResult(mode=mode, status="none",
                                 bracket_low=None, bracket_high=None,
                                 scan_max=T_max,
                                 scan_ts=[float(t) for t in ts_scan],
                                 scan_lams=[float(x) for x in lams])
    neg = np.nonzero(lams <= 0)[0]
    if len(neg) == 0:
        return result
    hi = ts_scan[int(neg[0])]
    lo = ts_scan[int(neg[0]) - 1] if neg[0] > 0 else min(tol_T, ts_scan[0] / 8)
    while hi - lo > tol_T:
        mid = 0.5 * (lo + hi)
        if lam(mid) <= 0:
            hi = mid
        else:
            lo = mid
    result.status = "bracketed"
    result.bracket_low = float(lo)
    result.bracket_high = float(hi)
    return result


def eig_inequality_check(coeffs: CoefficientField, T: float, grid_size: int = 800):
    """Smallest eigenvalues of both operators at horizon T and the comparison
    lambda_1 > 2 mu_1 / T^2 that separates the two conjugate times."""
    lam1 = smallest_eigenvalue(assemble(coeffs, "D1", grid_size, T))
    mu1 = smallest_eigenvalue(assemble(coeffs, "D2", grid_size, T))
    return lam1, mu1, bool(lam1 > 2.0 * mu1 / T ** 2)
