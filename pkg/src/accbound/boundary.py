"""Kernel boundary-value problem for the contact coefficient A_T and the
predicted accessibility-boundary curves.

A_T is the value of the along-flow quadratic form on the kernel profile J
solving D1 J = 0 with J and its first n-3 derivatives vanishing at 0 and
prescribed at T (value 1, higher derivatives 0).  The boundary near the
reference end-point is then x_n = A_T (x_1 - T)^2 + o((x_1 - T)^2) in
adapted coordinates, two-sided for the constrained affine system and
one-sided (x_n = 0 for x_1 <= T) for the rank-2 metric system.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg

from .operators import (CoefficientField, CoefficientError, assemble,
                        chain_positions_weights, derivative_chain,
                        one_sided_stencil, quadratic_value,
                        quadratic_value_bilinear, smallest_eigenvalue,
                        _orders_and_coeff)


class SingularBVPError(RuntimeError):
    """The kernel BVP is singular: the horizon sits at or beyond the first
    conjugate time of the clamped operator."""


@dataclass
class BoundaryCurve:
    T: float
    A_T: float
    case: str                     # "AFFINE" or "SR"
    x1: np.ndarray
    xn: np.ndarray
    J: np.ndarray | None = None

    def meta(self):
        return {"T": float(self.T), "A_T": float(self.A_T), "case": self.case}


@dataclass
class MartinetBranches:
    """Closed-form contact data for the flat rank-2 model with metric
    (1 + a y)^2 dx^2 + c dy^2."""

    A_T: float
    branch2_exponent: int
    branch2_small_T_coefficient: float
    description: str


def solve_kernel_bvp(coeffs: CoefficientField, T: float, left, right,
                     grid_size: int = 2000) -> np.ndarray:
    """Profile J with D1 J = 0 in the interior and J^(k)(0) = left[k],
    J^(k)(T) = right[k] for k = 0..n-3.

    The interior rows reuse the staggered form assembly of the operator
    route; the first and last n-2 rows are replaced by one-sided boundary
    stencils carrying the requested data.
    """
    n = coeffs.n
    r = n - 2
    if len(left) != r or len(right) != r:
        raise ValueError(f"boundary data must prescribe derivatives 0..{r - 1}")
    # past the first conjugate time the clamped form is indefinite and the
    # kernel problem is no longer uniquely solvable
    lam1 = smallest_eigenvalue(assemble(coeffs, "D1", grid_size, T))
    if lam1 <= 0:
        raise SingularBVPError(
            f"kernel BVP degenerate at T = {T:.6g}: the clamped operator has "
            f"smallest eigenvalue {lam1:.3g} (horizon at or beyond the "
            "conjugate time)")
    npts = grid_size + 1
    h = T / grid_size
    ts = np.linspace(0.0, T, npts)
    orders, key, top = _orders_and_coeff("D1", n)
    chain = derivative_chain(npts, h, top)
    pos, _ = chain_positions_weights(npts, h, top, T)
    coeffs.check_top_positive(pos)
    # uniform weights: the rows act as h * (D1 .) stencils, and the modified
    # quadrature end weights would make the rows next to the replaced ones
    # first-order inconsistent
    K = sp.csr_matrix((npts, npts))
    for i in orders:
        for j in orders:
            K = K + chain[i].T @ sp.diags(h * coeffs.value(*key(i, j), pos)) @ chain[j]
    K = K.tolil()
    rhs = np.zeros(npts)
    for k in range(r):
        st = one_sided_stencil(k, h)
        row = np.zeros(npts)
        row[: len(st)] = st
        K[k] = row
        rhs[k] = left[k]
        row = np.zeros(npts)
        row[npts - len(st):] = ((-1) ** k) * st[::-1]
        K[npts - 1 - k] = row
        rhs[npts - 1 - k] = right[k]
    Kc = K.tocsr()
    J = scipy.sparse.linalg.spsolve(Kc, rhs)
    if not np.all(np.isfinite(J)):
        raise SingularBVPError(f"kernel BVP singular at T = {T:.6g}")
    data_scale = max(float(np.max(np.abs(left))), float(np.max(np.abs(right))), 1e-300)
    if float(np.max(np.abs(J))) > 1e8 * data_scale:
        raise SingularBVPError(
            f"kernel BVP degenerate at T = {T:.6g}: profile magnitude "
            f"{float(np.max(np.abs(J))):.3g} (horizon at a conjugate time)"
        )
    # relative residual on the untouched interior rows
    interior = slice(r, npts - r)
    res = float(np.max(np.abs((Kc @ J - rhs)[interior])))
    row_scale = float(np.max(np.abs(Kc[interior]).sum(axis=1)))
    scale = row_scale * max(float(np.max(np.abs(J))), 1e-300)
    if res > 1e-8 * scale:
        raise SingularBVPError(
            f"kernel BVP ill-conditioned at T = {T:.6g}: relative interior "
            f"residual {res / scale:.3g}"
        )
    return J


def compute_A(coeffs: CoefficientField, T: float, grid_size: int = 2000) -> float:
    """Contact coefficient A_T = Q1(J) for the kernel profile hitting value 1
    at the moving end; positive before the released conjugate time, negative
    between the two conjugate times."""
    r = coeffs.n - 2
    right = np.zeros(r)
    right[0] = 1.0
    J = solve_kernel_bvp(coeffs, T, np.zeros(r), right, grid_size)
    return quadratic_value(coeffs, J, T, "Q1")


def kernel_profile(coeffs: CoefficientField, T: float, index: int = 1,
                   grid_size: int = 2000, mirrored: bool = False) -> np.ndarray:
    """The index-th kernel function (unit (index-1)-th derivative at the end).

    With mirrored=True the data sits at t = 0 instead, giving the companion
    family used in expansion arguments."""
    r = coeffs.n - 2
    if not 1 <= index <= r:
        raise ValueError(f"index must be in 1..{r}")
    data = np.zeros(r)
    data[index - 1] = 1.0
    if mirrored:
        return solve_kernel_bvp(coeffs, T, data, np.zeros(r), grid_size)
    return solve_kernel_bvp(coeffs, T, np.zeros(r), data, grid_size)


def gram_matrix(coeffs: CoefficientField, T: float, grid_size: int = 2000) -> np.ndarray:
    """Symmetric matrix of polarized form values over the kernel family."""
    r = coeffs.n - 2
    Js = [kernel_profile(coeffs, T, i, grid_size) for i in range(1, r + 1)]
    A = np.empty((r, r))
    for i in range(r):
        for j in range(i, r):
            A[i, j] = A[j, i] = quadratic_value_bilinear(coeffs, Js[i], Js[j], T, "Q1")
    return A


def boundary_curve(A_T: float, T: float, window, case: str = "AFFINE",
                   num: int = 201, J: np.ndarray | None = None) -> BoundaryCurve:
    """Sampled predicted boundary in the adapted (x1, xn) plane.

    AFFINE: parabola on both sides of the contact point.  SR: flat at zero
    for x1 <= T, parabola for x1 >= T.
    """
    lo, hi = window
    if not lo <= T <= hi:
        raise ValueError("window must contain the contact abscissa T")
    x1 = np.linspace(lo, hi, num)
    xn = A_T * (x1 - T) ** 2
    if case.upper() == "SR":
        xn = np.where(x1 <= T, 0.0, xn)
    elif case.upper() != "AFFINE":
        raise ValueError("case must be AFFINE or SR")
    return BoundaryCurve(T=T, A_T=A_T, case=case.upper(), x1=x1, xn=xn, J=J)


def martinet_closed_form(alpha: float, T: float) -> MartinetBranches:
    """Closed-form branch data for the flat rank-2 model: branch 1 is
    z = (x - T)^2 / (2 T alpha^2) for x >= T; branch 2 leaves the contact
    point cubically with small-horizon coefficient 1/6."""
    if alpha == 0:
        raise ValueError("alpha = 0: the rank/span assumptions fail on this model")
    if T <= 0:
        raise ValueError("need T > 0")
    return MartinetBranches(
        A_T=1.0 / (2.0 * T * alpha ** 2),
        branch2_exponent=3,
        branch2_small_T_coefficient=1.0 / 6.0,
        description="branch 1: x >= T, z = (x-T)^2/(2 T alpha^2); "
                    "branch 2: x <= T, z ~ (1/6)(1+O(T))(x-T)^3",
    )


def calibrate_scalar_coefficient(qfd, degree: int = 2) -> CoefficientField:
    """Fit the single coefficient b11(t) of a 3-state system from Hessian data.

    Least squares of (1/2) Q(v_i, v_j) against int b11(t) xi2_i xi2_j dt over
    all control-basis pairs, with b11 a polynomial of the given degree.  The
    half compensates the Hessian normalization Q = p.d2E (twice the
    second-order Taylor coefficient).
    """
    if qfd.traj.n != 3:
        raise CoefficientError("scalar calibration applies to 3-state systems only")
    if qfd.Q is None:
        raise ValueError("need the assembled Hessian")
    ts, w, xi2 = qfd.ts, qfd.w, qfd.xi2
    cols = []
    for p in range(degree + 1):
        cols.append(((xi2 * (w * ts ** p)) @ xi2.T).ravel())
    X = np.stack(cols, axis=1)
    y = (0.5 * qfd.Q).ravel()
    c, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = float(np.linalg.norm(X @ c - y) / max(np.linalg.norm(y), 1e-300))

    def b11(t, c=c):
        t = np.asarray(t, dtype=float)
        return sum(ck * t ** k for k, ck in enumerate(c))

    field = CoefficientField(3, {(1, 1): b11})
    field.fit_coefficients = c
    field.fit_residual = resid
    return field
