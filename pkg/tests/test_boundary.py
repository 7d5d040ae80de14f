import numpy as np
import pytest

from accbound.boundary import (BoundaryCurve, SingularBVPError, boundary_curve,
                               calibrate_scalar_coefficient, compute_A,
                               gram_matrix, kernel_profile,
                               martinet_closed_form, solve_kernel_bvp)
from accbound.operators import CoefficientField

C3 = CoefficientField(3, {(1, 1): 0.5})
C4 = CoefficientField(4, {(1, 1): -1.0, (2, 2): 1.0})


def test_kernel_profile_linear_for_constant_coefficient():
    J = solve_kernel_bvp(C3, 1.0, [0.0], [1.0], 400)
    ts = np.linspace(0, 1, 401)
    assert np.abs(J - ts).max() < 1e-10


def test_zero_boundary_data_gives_zero_profile():
    J = solve_kernel_bvp(C3, 1.0, [0.0], [0.0], 200)
    assert np.abs(J).max() == 0.0


def test_bvp_bad_data_length():
    with pytest.raises(ValueError, match="derivatives"):
        solve_kernel_bvp(C4, 1.0, [0.0], [1.0], 200)


def test_compute_A_constant_coefficient_closed_form():
    assert compute_A(C3, 1.0, 800) == pytest.approx(0.5, rel=1e-10)
    assert compute_A(C3, 2.0, 800) == pytest.approx(0.25, rel=1e-10)


def test_A_sign_law_const4():
    # positive below the released conjugate time, negative between the two
    assert compute_A(C4, 2.0, 1200) > 0
    assert compute_A(C4, np.pi - 0.15, 1200) > 0
    assert compute_A(C4, np.pi + 0.15, 1200) < 0
    assert compute_A(C4, 4.0, 1200) < 0


def test_A_strictly_decreasing():
    ts = np.linspace(0.8, 5.8, 9)
    vals = [compute_A(C4, T, 1200) for T in ts]
    assert np.all(np.diff(vals) < 0)


@pytest.mark.slow
def test_A_mesh_halving_stability():
    a, b = compute_A(C4, 4.0, 2000), compute_A(C4, 4.0, 4000)
    assert abs(a - b) / abs(b) <= 1e-4


def test_bvp_degenerate_beyond_conjugate_time():
    with pytest.raises(SingularBVPError):
        compute_A(C4, 2 * np.pi + 0.3, 2000)
    with pytest.raises(SingularBVPError):
        compute_A(C4, 8.0, 1000)


def test_gram_matrix_scalar_case_equals_A():
    g = gram_matrix(C3, 1.0, 800)
    assert g.shape == (1, 1)
    assert g[0, 0] == pytest.approx(compute_A(C3, 1.0, 800), rel=1e-12)


def test_gram_matrix_symmetry():
    g = gram_matrix(C4, 1.5, 800)
    assert np.abs(g - g.T).max() <= 1e-10


def test_boundary_curve_shapes():
    c = boundary_curve(0.5, 1.0, (0.8, 1.2), "SR")
    k = np.argmin(np.abs(c.x1 - 1.1))
    assert c.xn[k] == pytest.approx(0.5 * (c.x1[k] - 1.0) ** 2)
    assert c.xn[k] == pytest.approx(0.005, rel=1e-2)
    kL = np.argmin(np.abs(c.x1 - 0.9))
    assert c.xn[kL] == 0.0
    kT = np.argmin(np.abs(c.x1 - 1.0))
    assert abs(c.xn[kT]) < 1e-6
    aff = boundary_curve(0.5, 1.0, (0.8, 1.2), "AFFINE")
    assert aff.xn[kL] == pytest.approx(0.5 * (aff.x1[kL] - 1.0) ** 2)
    with pytest.raises(ValueError):
        boundary_curve(0.5, 1.0, (1.1, 1.2), "SR")
    with pytest.raises(ValueError):
        boundary_curve(0.5, 1.0, (0.8, 1.2), "WEIRD")


def test_martinet_closed_form_values():
    assert martinet_closed_form(1.0, 1.0).A_T == pytest.approx(0.5)
    assert martinet_closed_form(2.0, 0.5).A_T == pytest.approx(0.25)
    mb = martinet_closed_form(1.0, 1.0)
    assert mb.branch2_exponent == 3
    assert mb.branch2_small_T_coefficient == pytest.approx(1 / 6)
    with pytest.raises(ValueError):
        martinet_closed_form(0.0, 1.0)
    with pytest.raises(ValueError):
        martinet_closed_form(1.0, -1.0)


def test_calibrated_martinet_matches_closed_form(martinet_qfd):
    field = calibrate_scalar_coefficient(martinet_qfd)
    assert field.fit_residual < 1e-4
    A = compute_A(field, 1.0, 2000)
    assert abs(A - 0.5) / 0.5 <= 1e-3


def test_calibration_requires_three_states(const4_preset):
    from accbound.geometry import adjoint_along, reference_trajectory
    from accbound.secondvar import hessian_form
    sys_ = const4_preset.system
    traj = adjoint_along(reference_trajectory(sys_, const4_preset.x0, 1.0, 300), sys_)
    qfd = hessian_form(traj, sys_, 40)
    with pytest.raises(Exception, match="3-state"):
        calibrate_scalar_coefficient(qfd)


def test_mirrored_kernel_profile():
    # companion family: unit data at t = 0 instead of t = T
    J = kernel_profile(C3, 1.0, 1, 400, mirrored=True)
    ts = np.linspace(0, 1, 401)
    assert np.abs(J - (1 - ts)).max() < 1e-10


def test_A_matches_analytic_kernel_const4():
    """Independent oracle: for constant (b11, b22) = (-1, 1) the kernel
    profile is a + b t + c cos t + d sin t; A_T follows by quadrature of the
    analytic derivatives."""
    from scipy.integrate import quad

    def analytic_A(T):
        M = np.array([
            [1, 0, 1, 0],
            [0, 1, 0, 1],
            [1, T, np.cos(T), np.sin(T)],
            [0, 1, -np.sin(T), np.cos(T)],
        ])
        a, b, c, d = np.linalg.solve(M, [0, 0, 1, 0])
        val, _ = quad(lambda t: (-c * np.cos(t) - d * np.sin(t)) ** 2
                      - (b - c * np.sin(t) + d * np.cos(t)) ** 2, 0, T, limit=200)
        return val

    for T in (1.0, 2.0, 4.0, 5.5):
        ref = analytic_A(T)
        assert compute_A(C4, T, 2000) == pytest.approx(ref, rel=1e-5)


@pytest.mark.slow
def test_calibrated_pipeline_general_metric():
    """The closed-form coefficient 1/(2 T alpha^2) holds for every metric of
    the family; beta and gamma only enter at higher order."""
    from accbound.geometry import adjoint_along, reference_trajectory
    from accbound.presets import martinet
    from accbound.secondvar import hessian_form
    for alpha, beta, gamma, T in ((2.0, 0.0, 0.0, 0.5), (1.0, 0.3, -0.2, 1.0)):
        p = martinet(alpha=alpha, beta=beta, gamma=gamma)
        traj = adjoint_along(reference_trajectory(p.system, p.x0, T, 1200),
                             p.system)
        qfd = hessian_form(traj, p.system, 160)
        field = calibrate_scalar_coefficient(qfd)
        A = compute_A(field, T, 1500)
        expect = 1.0 / (2.0 * T * alpha ** 2)
        assert A == pytest.approx(expect, rel=2e-3)
