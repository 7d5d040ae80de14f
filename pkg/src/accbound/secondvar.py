"""First and intrinsic second derivatives of the end-point mapping along the
reference trajectory, assembled from variational equations, and conjugate
times located from restricted spectra.

The quadratic form stored here is Q(v,v) = p(T).d2E_T(0)(v,v), i.e. twice
the second-order Taylor coefficient of <p(T), E_T(hv)> in h; the finite
difference oracle pins that normalization down.  Restricted eigenvalues are
taken with respect to the L2 mass of the along-flow displacement profile,
which makes the fully-clamped branch agree with the explicit operator
route's spectrum and keeps the two restriction modes on nested subspaces.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.integrate import solve_ivp

from .expr import eval_jet
from .geometry import (System, TrajectoryData, IntegrationError,
                       adjoint_along, build_adapted_frames, check_assumptions,
                       reference_trajectory)


class AssumptionFailure(RuntimeError):
    """Raised when H0..H4 fail inside a horizon that an operation needs."""

    def __init__(self, report, message="assumptions fail on the requested horizon"):
        self.report = report
        super().__init__(message)


class RestrictionMode(enum.Enum):
    """Which adapted end-point coordinates are pinned on the control kernel.

    FIXED pins all n-1 cone coordinates of dE (every transverse end-point
    coordinate fixed); FREE releases the first (along-flow) coordinate and
    pins rows 2..n-1 only, so the FREE kernel strictly contains FIXED.
    """

    FIXED = "fixed"
    FREE = "free"


@dataclass(eq=False)
class QuadraticFormData:
    """Discretized first variation and intrinsic Hessian of the end-point map."""

    T: float
    ts: np.ndarray                 # fine time grid, shape (M+1,)
    w: np.ndarray                  # trapezoid weights on ts
    control_ts: np.ndarray         # hat-function nodes, shape (m,)
    hats: np.ndarray               # hat values on ts, shape (m, M+1)
    dE: np.ndarray                 # end-point displacements, shape (n, m)
    adapted_dE: np.ndarray         # first n-1 dual-frame rows of dE, (n-1, m)
    p_row: np.ndarray              # <p(T), dE columns>, shape (m,)
    xi1: np.ndarray                # along-flow displacement profiles, (m, M+1)
    xi2: np.ndarray                # d/dt of xi1, (m, M+1)
    traj: TrajectoryData
    Q: np.ndarray | None = None    # Hessian matrix, (m, m)
    delta: np.ndarray = field(default=None, repr=False)  # (m, M+1, n)

    @property
    def m(self):
        return len(self.control_ts)

    @property
    def abnormality_residual(self):
        scale = max(float(np.max(np.abs(self.dE))), 1e-300)
        return float(np.max(np.abs(self.p_row))) / scale

    def profile_mass(self, profiles):
        return (profiles * self.w) @ profiles.T


@dataclass
class ConjugateTimeResult:
    mode: str
    status: str                    # "bracketed" or "none"
    bracket_low: float | None
    bracket_high: float | None
    scan_max: float
    scan_ts: list = field(default_factory=list)
    scan_lams: list = field(default_factory=list)

    @property
    def time(self):
        if self.status != "bracketed":
            return None
        return 0.5 * (self.bracket_low + self.bracket_high)

    def to_dict(self):
        return {"mode": self.mode,
                "bracket_low": self.bracket_low,
                "bracket_high": self.bracket_high,
                "status": self.status}


# ---------------------------------------------------------------------------
# variational assembly
# ---------------------------------------------------------------------------

def hat_values(control_ts, ts):
    """Piecewise-linear hat basis on control_ts evaluated at ts, shape (m, M+1)."""
    m = len(control_ts)
    out = np.zeros((m, len(ts)))
    for j in range(m):
        c = control_ts[j]
        left = control_ts[j - 1] if j > 0 else c
        right = control_ts[j + 1] if j < m - 1 else c
        if j > 0:
            mask = (ts >= left) & (ts <= c)
            out[j, mask] = (ts[mask] - left) / (c - left)
        if j < m - 1:
            mask = (ts > c) & (ts <= right)
            out[j, mask] = (right - ts[mask]) / (right - c)
        out[j, np.isclose(ts, c)] = 1.0
    return out


def _linearization_data(traj, system):
    """DX, Y and the Hessian contraction of X along gamma at grid and midpoints."""
    ts = traj.ts
    mids = 0.5 * (ts[:-1] + ts[1:])
    pts_mid = traj.state_at(mids)
    n = traj.n

    def dx_and_y(points):
        xj = eval_jet(system.X, points, 1)
        yj = eval_jet(system.Y, points, 0)
        A = np.stack([np.stack([xj[i].deriv(j).value() for j in range(n)], axis=-1)
                      for i in range(n)], axis=-2)
        b = np.stack([c.value() for c in yj], axis=-1)
        return A, b

    A_grid, Y_grid = dx_and_y(traj.gamma)
    A_mid, Y_mid = dx_and_y(pts_mid)
    return A_grid, Y_grid, A_mid, Y_mid


def _variational_columns(traj, system, m):
    """Integrate the first variational equation for every hat control at once.

    Returns (delta, hats, control_ts) with delta of shape (m, M+1, n):
    column j solves d(delta)/dt = DX(gamma) delta + hat_j(t) Y(gamma).
    """
    ts = traj.ts
    M = len(ts) - 1
    control_ts = np.linspace(0.0, traj.T, m)
    hats = hat_values(control_ts, ts)
    mids = 0.5 * (ts[:-1] + ts[1:])
    hats_mid = hat_values(control_ts, mids)

    A_grid, Y_grid, A_mid, Y_mid = _linearization_data(traj, system)

    n = traj.n
    delta = np.zeros((m, M + 1, n))
    D = np.zeros((m, n))
    for k in range(M):
        h = ts[k + 1] - ts[k]

        def f(A, b, v, state):
            return state @ A.T + v[:, None] * b[None, :]

        k1 = f(A_grid[k], Y_grid[k], hats[:, k], D)
        k2 = f(A_mid[k], Y_mid[k], hats_mid[:, k], D + 0.5 * h * k1)
        k3 = f(A_mid[k], Y_mid[k], hats_mid[:, k], D + 0.5 * h * k2)
        k4 = f(A_grid[k + 1], Y_grid[k + 1], hats[:, k + 1], D + h * k3)
        D = D + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        delta[:, k + 1, :] = D
    return delta, hats, control_ts


def _trapezoid_weights(ts):
    w = np.empty_like(ts)
    w[1:-1] = 0.5 * (ts[2:] - ts[:-2])
    w[0] = 0.5 * (ts[1] - ts[0])
    w[-1] = 0.5 * (ts[-1] - ts[-2])
    return w


def _pack_qfd(traj, system, delta, hats, control_ts, Q=None):
    ts = traj.ts
    w = _trapezoid_weights(ts)
    dE = delta[:, -1, :].T
    frames = traj.frame_dual
    adapted = frames[-1][: traj.n - 1] @ dE
    p_row = traj.p[-1] @ dE
    xi1 = np.einsum("kn,jkn->jk", frames[:, 0, :], delta)
    xi2 = np.gradient(xi1, ts, axis=1)
    return QuadraticFormData(T=traj.T, ts=ts, w=w, control_ts=control_ts,
                             hats=hats, dE=dE, adapted_dE=adapted, p_row=p_row,
                             xi1=xi1, xi2=xi2, traj=traj, Q=Q, delta=delta)


def first_variation_matrix(traj: TrajectoryData, system: System, m: int) -> QuadraticFormData:
    """Discretize dE_T(0) over the hat-function control basis (no Hessian)."""
    if traj.p is None:
        raise ValueError("trajectory needs its adjoint first")
    if m < traj.n:
        raise ValueError("need at least n control basis functions")
    delta, hats, control_ts = _variational_columns(traj, system, m)
    return _pack_qfd(traj, system, delta, hats, control_ts)


def hessian_form(traj: TrajectoryData, system: System, m: int) -> QuadraticFormData:
    """Assemble Q(v,w) = p(T).d2E_T(0)(v,w) over the hat basis.

    Uses the second variational equation reduced to a quadrature against the
    first-order responses: Q(v,v) = int p.(D2X[d1,d1] + 2 v DY d1) dt, with
    the adjoint sign fixed by adjoint_along so that Q is positive on short
    horizons.
    """
    if traj.p is None:
        raise ValueError("trajectory needs its adjoint first")
    delta, hats, control_ts = _variational_columns(traj, system, m)
    ts = traj.ts
    n = traj.n
    w = _trapezoid_weights(ts)

    xj = eval_jet(system.X, traj.gamma, 2)
    yj = eval_jet(system.Y, traj.gamma, 1)
    # S[k] = sum_c p_c Hess X_c at gamma(t_k); r[k] = DY(gamma)^T p
    S = np.zeros((len(ts), n, n))
    for a in range(n):
        for b in range(a, n):
            alpha = [0] * n
            alpha[a] += 1
            alpha[b] += 1
            # Taylor coefficient of x^alpha is Hess/2 when a == b, mixed otherwise
            coef = np.stack([xj[c].coeff(alpha) for c in range(n)], axis=-1)
            val = np.einsum("kc,kc->k", coef, traj.p)
            if a == b:
                S[:, a, a] = 2.0 * val
            else:
                S[:, a, b] = val
                S[:, b, a] = val
    DYt = np.stack([np.stack([yj[i].deriv(j).value() for j in range(n)], axis=-1)
                    for i in range(n)], axis=-2)
    r = np.einsum("kij,ki->kj", DYt, traj.p)

    # quadratic-in-delta part, exploiting sparsity of S
    Q = np.zeros((len(control_ts), len(control_ts)))
    for a in range(n):
        for b in range(n):
            col = S[:, a, b]
            if not np.any(col):
                continue
            Q += (delta[:, :, a] * (col * w)) @ delta[:, :, b].T
    # cross terms with the control
    C = np.einsum("kj,ikj->ik", r, delta)
    Ew = hats * w
    G = Ew @ C.T
    Q += G + G.T
    Q = 0.5 * (Q + Q.T)
    return _pack_qfd(traj, system, delta, hats, control_ts, Q=Q)


def fd_oracle(system: System, traj: TrajectoryData, v, h: float) -> float:
    """Central second difference of <p(T), E_T(h v)> through the nonlinear flow.

    `v` is a control profile sampled on traj.ts.  Independent of the
    variational-equation route on purpose.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    v = np.asarray(v, dtype=float)
    fX = system.X.compiled()
    fY = system.Y.compiled()
    ts = traj.ts

    def endpoint(scale):
        def rhs(t, x):
            u = scale * np.interp(t, ts, v)
            return fX(x) + u * fY(x)
        sol = solve_ivp(rhs, (0.0, traj.T), traj.gamma[0], method="DOP853",
                        rtol=1e-12, atol=1e-13)
        if not sol.success:
            raise IntegrationError(sol.message)
        return sol.y[:, -1]

    pT = traj.p[-1]
    base = float(pT @ traj.gamma[-1])
    plus = float(pT @ endpoint(h))
    minus = float(pT @ endpoint(-h))
    return (plus + minus - 2.0 * base) / h ** 2


# ---------------------------------------------------------------------------
# restricted spectra and conjugate times
# ---------------------------------------------------------------------------

def _smallest_generalized_eig(A, B, rel_floor=1e-8):
    """Smallest eigenpair of A y = lam B y with B symmetric positive semidefinite.

    B is the mass of an iterated-integral profile, so its spectrum spans many
    orders of magnitude (condition ~ m^(2(n-1))).  A small multiple of the
    identity keeps it positive definite without displacing the smooth
    eigenvectors: high-frequency directions get a mass floor instead of
    turning roundoff in A into spurious huge negative eigenvalues.
    """
    B = 0.5 * (B + B.T)
    scale = float(np.linalg.norm(B, 2))
    if scale <= 0:
        raise ValueError("mass matrix is numerically zero")
    B_reg = B + (rel_floor * scale) * np.eye(len(B))
    lams, vecs = scipy.linalg.eigh(A, B_reg)
    return float(lams[0]), vecs[:, 0]


def restricted_smallest_eig(qfd: QuadraticFormData, mode: RestrictionMode):
    """Smallest eigenvalue of the intrinsic form on the selected dE kernel.

    The form is Q/2 (the integral normalization) and the inner product is the
    quadrature mass of the along-flow profile xi1, so FIXED reproduces the
    spectrum of the explicit 2(n-2)-order operator on matched meshes.
    """
    if qfd.Q is None:
        raise ValueError("need the assembled Hessian")
    rows = qfd.adapted_dE if mode == RestrictionMode.FIXED else qfd.adapted_dE[1:]
    Z = scipy.linalg.null_space(rows)
    if Z.shape[1] == 0:
        raise ValueError("empty restricted kernel; increase the control grid")
    A = Z.T @ (0.5 * qfd.Q) @ Z
    N = qfd.profile_mass(qfd.xi1)
    B = Z.T @ N @ Z
    lam, y = _smallest_generalized_eig(A, B)
    vec = Z @ y
    return lam, vec


def _lambda_at(system, x0, T, mode, m, M, rank_tol):
    traj = reference_trajectory(system, x0, T, M)
    traj = adjoint_along(traj, system, rank_tol)
    qfd = hessian_form(traj, system, m)
    lam, _ = restricted_smallest_eig(qfd, mode)
    return lam


def conjugate_time_search(system: System, x0, mode: RestrictionMode,
                          T_max: float, tol_T: float,
                          m: int = 160, M: int = 1200, n_scan: int = 32,
                          rank_tol: float = 1e-7,
                          assumption_tol: float = 1e-6) -> ConjugateTimeResult:
    """First horizon where the restricted smallest eigenvalue changes sign.

    A coarse monotone pre-scan brackets the crossing (eigenvalues decrease in
    T); plain bisection then shrinks the bracket to width tol_T.  If the scan
    sees a non-monotone anomaly it falls back to a denser scan before giving
    up.  Raises AssumptionFailure if H0..H4 fail on [0, T_max].
    """
    probe = reference_trajectory(system, x0, T_max, max(M, 400))
    report = check_assumptions(probe, system, assumption_tol)
    if not report.all_passed:
        raise AssumptionFailure(report)

    def lam_of(T):
        return _lambda_at(system, x0, T, mode, m, M, rank_tol)

    def scan(ts_scan):
        lams = [lam_of(T) for T in ts_scan]
        return np.asarray(lams)

    ts_scan = np.linspace(T_max / n_scan, T_max, n_scan)
    lams = scan(ts_scan)
    scale = float(np.max(np.abs(lams)))
    if np.any(np.diff(lams) > 1e-9 * max(scale, 1.0)) and not np.any(lams <= 0):
        # monotonicity anomaly: re-scan denser before trusting "none"
        ts_scan = np.linspace(T_max / (4 * n_scan), T_max, 4 * n_scan)
        lams = scan(ts_scan)

    result = ConjugateTimeResult(mode=mode.value, status="none",
                                 bracket_low=None, bracket_high=None,
                                 scan_max=T_max,
                                 scan_ts=[float(t) for t in ts_scan],
                                 scan_lams=[float(x) for x in lams])
    neg = np.nonzero(lams <= 0)[0]
    if len(neg) == 0:
        return result
    hi_idx = int(neg[0])
    lo = ts_scan[hi_idx - 1] if hi_idx > 0 else min(ts_scan[0] / 8, tol_T)
    hi = ts_scan[hi_idx]
    while hi - lo > tol_T:
        mid = 0.5 * (lo + hi)
        if lam_of(mid) <= 0:
            hi = mid
        else:
            lo = mid
    result.status = "bracketed"
    result.bracket_low = float(lo)
    result.bracket_high = float(hi)
    return result


def conjugate_time_refined(system: System, x0, mode: RestrictionMode,
                           T_max: float, tol_T: float,
                           m: int = 240, M: int = 1600, **kw) -> ConjugateTimeResult:
    """Mesh-extrapolated conjugate time from searches at m and 2m controls.

    The clamped discrete kernels converge at first order in the control
    spacing, so t(m), t(2m) are combined as 2 t(2m) - t(m).
    """
    r1 = conjugate_time_search(system, x0, mode, T_max, tol_T / 4, m=m, M=M, **kw)
    r2 = conjugate_time_search(system, x0, mode, T_max, tol_T / 4,
                               m=2 * m, M=max(M, 2 * m), **kw)
    if r1.status != "bracketed" or r2.status != "bracketed":
        return r2
    t_star = 2.0 * r2.time - r1.time
    out = ConjugateTimeResult(mode=mode.value, status="bracketed",
                              bracket_low=t_star - tol_T / 2,
                              bracket_high=t_star + tol_T / 2,
                              scan_max=r2.scan_max,
                              scan_ts=r2.scan_ts, scan_lams=r2.scan_lams)
    return out
