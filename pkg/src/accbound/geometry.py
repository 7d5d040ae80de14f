"""Reference trajectory, iterated Lie brackets, corank-1 adjoint and the
rank/span assumptions that make a drift trajectory abnormal.

Bracket convention: [V, W] = DW.V - DV.W, so that ad V.W = [V, W].  All
rank and span verdicts are invariant under the opposite convention.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .expr import VectorFieldExpr, eval_jet


class IntegrationError(RuntimeError):
    pass


class ConeRankError(RuntimeError):
    """The Pontryagin cone does not have corank 1 along the trajectory."""


@dataclass(frozen=True)
class System:
    """Single-input affine control system dx/dt = X(x) + u Y(x)."""

    X: VectorFieldExpr
    Y: VectorFieldExpr
    name: str = ""

    def __post_init__(self):
        if self.X.dim != self.Y.dim:
            raise ValueError("X and Y must share the dimension")

    @property
    def n(self):
        return self.X.dim


@dataclass(eq=False)
class TrajectoryData:
    """Sampled drift trajectory with (optionally) its adjoint and cone bases.

    cone[k, j] is ad^j X.Y evaluated at gamma(t_k) for j = 0..n-2; p[k] is the
    unit annihilator of their span, oriented continuously in k.
    """

    T: float
    ts: np.ndarray
    gamma: np.ndarray
    dense: object = None
    p: np.ndarray | None = None
    cone: np.ndarray | None = None
    frame_dual: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.gamma.shape[1]

    def state_at(self, t):
        return np.asarray(self.dense(t)).T


# ---------------------------------------------------------------------------
# brackets
# ---------------------------------------------------------------------------

def _field_jets(field_expr, point, order):
    return eval_jet(field_expr, point, order)


def _bracket_jets(v_jets, w_jets):
    """Jet of [V, W] from component jets; result is one order lower."""
    n = len(v_jets)
    out = []
    for i in range(n):
        acc = None
        for j in range(n):
            term = w_jets[i].deriv(j) * v_jets[j] - v_jets[i].deriv(j) * w_jets[j]
            acc = term if acc is None else acc + term
        out.append(acc)
    return out


def lie_bracket_at(V: VectorFieldExpr, W: VectorFieldExpr, point, order: int):
    """Jets of [V, W] at `point` up to `order` (batched over leading dims)."""
    vj = _field_jets(V, point, order + 1)
    wj = _field_jets(W, point, order + 1)
    return _bracket_jets(vj, wj)


def ad_sequence(X: VectorFieldExpr, Y: VectorFieldExpr, point, kmax: int):
    """Values of ad^0 X.Y, ..., ad^kmax X.Y at `point` (batched).

    Entry j+1 is the bracket of X with the jet field that produced entry j;
    each bracket consumes one jet order, so X and Y are expanded to order kmax.
    """
    point = np.asarray(point, dtype=float)
    xj = _field_jets(X, point, kmax)
    cur = _field_jets(Y, point, kmax)
    seq = [np.stack([c.value() for c in cur], axis=-1)]
    for k in range(kmax):
        order = kmax - k - 1
        cur = _bracket_jets([c.truncated(order + 1) for c in xj], cur)
        seq.append(np.stack([c.value() for c in cur], axis=-1))
    return seq


def ad2_other_way(X: VectorFieldExpr, Y: VectorFieldExpr, point):
    """Value of ad^2 Y.X = [Y, [Y, X]] at `point` (batched)."""
    point = np.asarray(point, dtype=float)
    yj = _field_jets(Y, point, 2)
    inner = _bracket_jets(yj, _field_jets(X, point, 2))
    outer = _bracket_jets([y.truncated(1) for y in yj], inner)
    return np.stack([c.value() for c in outer], axis=-1)


# ---------------------------------------------------------------------------
# trajectory and adjoint
# ---------------------------------------------------------------------------

def reference_trajectory(system: System, x0, T: float, M: int) -> TrajectoryData:
    """Integrate the drift trajectory (u = 0) and sample it on a uniform grid."""
    if T <= 0:
        raise ValueError("horizon T must be positive")
    if M < 2:
        raise ValueError("need at least 2 grid intervals")
    fX = system.X.compiled()
    x0 = np.asarray(x0, dtype=float)

    def rhs(t, x):
        return fX(x)

    ts = np.linspace(0.0, T, M + 1)
    sol = solve_ivp(rhs, (0.0, T), x0, method="DOP853", t_eval=ts,
                    rtol=1e-12, atol=1e-13, dense_output=True)
    if not sol.success or not np.all(np.isfinite(sol.y)):
        raise IntegrationError(f"drift integration failed: {sol.message}")
    return TrajectoryData(T=T, ts=ts, gamma=sol.y.T, dense=sol.sol)


def adjoint_along(traj: TrajectoryData, system: System,
                  rank_tol: float = 1e-7) -> TrajectoryData:
    """Fill in cone bases and the unit-norm continuously-oriented annihilator.

    Requires the cone spanned by ad^j X.Y, j = 0..n-1, to have rank exactly
    n-1 at every grid point (corank-1 abnormality); otherwise raises
    ConeRankError.  The global sign of p is provisional here; the Hessian
    assembly normalizes it so the form has positive trace.
    """
    n = traj.n
    seq = ad_sequence(system.X, system.Y, traj.gamma, n - 1)
    cone = np.stack(seq[: n - 1], axis=1)        # (M+1, n-1, n)
    full = np.stack(seq, axis=1)                 # (M+1, n, n), one extra bracket
    u, s, vt = np.linalg.svd(full)
    ratios = s / s[:, :1]
    rank = (ratios > rank_tol).sum(axis=1)
    if np.any(rank != n - 1):
        k = int(np.argmax(rank != n - 1))
        raise ConeRankError(
            f"corank-1 failure: cone rank {int(rank[k])} != {n - 1} at t = {traj.ts[k]:.6g}"
        )
    p = vt[:, -1, :]                             # unit null vector of the cone span
    # continuous orientation along the grid
    lead = int(np.argmax(np.abs(p[0])))
    if p[0, lead] < 0:
        p[0] = -p[0]
    for k in range(1, len(p)):
        d = float(p[k - 1] @ p[k])
        if d < 0:
            p[k] = -p[k]
            d = -d
        if d < 0.5:
            raise ConeRankError(f"annihilator flips discontinuously at t = {traj.ts[k]:.6g}")
    # global sign: pair positively with ad^2 Y.X, the direction whose top
    # coefficient is positive in adapted coordinates; this makes the Hessian
    # form positive on short horizons and puts the accessible side at x_n > 0.
    ad2 = ad2_other_way(system.X, system.Y, traj.gamma)
    pairing = np.einsum("kn,kn->k", p, ad2)
    k = int(np.argmax(np.abs(pairing)))
    if pairing[k] < 0:
        p = -p
    traj.p = p
    traj.cone = cone
    build_adapted_frames(traj, system)
    return traj


def build_adapted_frames(traj: TrajectoryData, system: System) -> np.ndarray:
    """Dual rows of the frame [X(gamma), basis of cone ∩ X-perp, p] per grid point.

    Row 0 is the along-flow functional, rows 1..n-2 the transverse cone
    functionals, row n-1 pairs with p.  The first n-1 rows depend only on the
    spans involved, not on the basis choice inside the cone.
    """
    n = traj.n
    xvals = system.X.compiled()(traj.gamma)      # X(gamma(t_k))
    frames = np.empty((len(traj.ts), n, n))
    for k in range(len(traj.ts)):
        xk = xvals[k]
        K = traj.cone[k]                          # (n-1, n) rows spanning the cone
        # orthonormal basis of cone ∩ xk-perp
        proj = K - np.outer(K @ xk, xk) / (xk @ xk)
        if n > 2:
            u, s, vt = np.linalg.svd(proj, full_matrices=False)
            b = vt[: n - 2]
            if s[n - 3] <= 1e-10 * max(s[0], 1.0):
                raise ConeRankError(
                    f"degenerate transverse cone directions at t = {traj.ts[k]:.6g}"
                )
        else:
            b = np.empty((0, n))
        F = np.vstack([xk[None, :], b, traj.p[k][None, :]])
        frames[k] = np.linalg.inv(F).T            # rows are the dual functionals
    traj.frame_dual = frames
    return frames


# ---------------------------------------------------------------------------
# assumption report
# ---------------------------------------------------------------------------

@dataclass
class AssumptionVerdict:
    passed: bool
    margin: float
    worst_time: float
    note: str = ""

    def to_dict(self):
        return {"passed": bool(self.passed), "margin": float(self.margin),
                "worst_time": float(self.worst_time), "note": self.note}


@dataclass
class AssumptionReport:
    tol: float
    verdicts: dict

    @property
    def all_passed(self):
        return all(v.passed for v in self.verdicts.values())

    def to_dict(self):
        return {"tolerance": float(self.tol),
                "all_passed": bool(self.all_passed),
                "verdicts": {k: v.to_dict() for k, v in self.verdicts.items()}}


def _span_distance(vecs, basis):
    """Relative distance of vecs (M, n) to the row span of basis (M, r, n).

    Numerically null directions of the basis are excluded, so degenerate
    spans do not absorb test vectors by accident.
    """
    u, s, vt = np.linalg.svd(basis, full_matrices=False)
    live = s > 1e-12 * np.maximum(s[:, :1], 1e-300)
    comps = np.einsum("krn,kn->kr", vt, vecs) * live
    proj = np.einsum("krn,kr->kn", vt, comps)
    resid = np.linalg.norm(vecs - proj, axis=1)
    scale = np.maximum(np.linalg.norm(vecs, axis=1), 1e-300)
    return resid / scale


def check_assumptions(traj: TrajectoryData, system: System, tol: float = 1e-6) -> AssumptionReport:
    """Grid verdicts for the abnormality assumptions H0..H4.

    H0 injectivity; H1 cone has codimension exactly 1 and is spanned by the
    first n-1 brackets; H2 ad^2 Y.X leaves the cone; H3 X(gamma) is outside
    the one-shorter bracket span; H4 X(gamma) lies inside the cone.
    Failures are verdicts, not errors.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = traj.n
    ts = traj.ts
    M = len(ts) - 1
    seq = ad_sequence(system.X, system.Y, traj.gamma, n - 1)
    cone = np.stack(seq[: n - 1], axis=1)
    xvals = system.X.compiled()(traj.gamma)
    verdicts = {}

    # H0: injectivity, min distance between samples at least T/8 apart in time
    gap = max(M // 8, 1)
    best = np.inf
    worst_t = ts[0]
    for off in range(gap, M + 1):
        d = np.linalg.norm(traj.gamma[off:] - traj.gamma[:-off or None], axis=1)
        k = int(np.argmin(d))
        if d[k] < best:
            best = float(d[k])
            worst_t = ts[k]
    scale = max(float(np.max(np.linalg.norm(traj.gamma - traj.gamma[0], axis=1))), 1.0)
    verdicts["H0"] = AssumptionVerdict(best / scale > tol, best / scale, worst_t,
                                       "min separation of time-distant samples")

    # H1: rank of the first n-1 brackets is n-1, and ad^(n-1) X.Y stays inside
    s = np.linalg.svd(cone, compute_uv=False)
    ratios = s[:, -1] / s[:, 0]
    k = int(np.argmin(ratios))
    rank_ok = float(ratios[k])
    extra = _span_distance(seq[n - 1], cone)
    norm_extra = np.linalg.norm(seq[n - 1], axis=1)
    extra = np.where(norm_extra > tol * s[:, 0], extra, 0.0)
    k2 = int(np.argmax(extra))
    rank_fail = rank_ok <= tol
    h1_ok = (not rank_fail) and (extra[k2] < tol)
    verdicts["H1"] = AssumptionVerdict(
        h1_ok,
        float(rank_ok) if (rank_fail or extra[k2] < tol) else float(-extra[k2]),
        ts[k] if rank_fail else ts[k2],
        "smallest cone sv ratio; codim-1 containment")

    # H2: ad^2 Y.X outside the cone
    ad2 = ad2_other_way(system.X, system.Y, traj.gamma)
    d2 = _span_distance(ad2, cone)
    k = int(np.argmin(d2))
    verdicts["H2"] = AssumptionVerdict(d2[k] > tol, float(d2[k]), ts[k],
                                       "distance of ad^2 Y.X to the cone")

    # H3: X(gamma) outside the span of the first n-2 brackets
    if n >= 3:
        short = np.stack(seq[: n - 2], axis=1)
        d3 = _span_distance(xvals, short)
        k = int(np.argmin(d3))
        verdicts["H3"] = AssumptionVerdict(d3[k] > tol, float(d3[k]), ts[k],
                                           "distance of X to the shortened span")
    else:
        verdicts["H3"] = AssumptionVerdict(True, np.inf, ts[0], "void for n < 3")

    # H4: X(gamma) inside the cone (zero-Hamiltonian condition)
    d4 = _span_distance(xvals, cone)
    k = int(np.argmax(d4))
    verdicts["H4"] = AssumptionVerdict(d4[k] < tol, float(tol - d4[k]), ts[k],
                                       "distance of X to the cone (must vanish)")

    return AssumptionReport(tol=tol, verdicts=verdicts)
