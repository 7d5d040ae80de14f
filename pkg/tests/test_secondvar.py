import numpy as np
import pytest

from accbound.expr import parse_field
from accbound.geometry import System, adjoint_along, reference_trajectory
from accbound.secondvar import (AssumptionFailure, QuadraticFormData,
                                RestrictionMode, conjugate_time_refined,
                                conjugate_time_search, fd_oracle,
                                first_variation_matrix, hessian_form,
                                restricted_smallest_eig)


def _project_control(qfd, profile):
    """Least-squares hat coefficients of a fine-grid control profile."""
    coef, *_ = np.linalg.lstsq(qfd.hats.T, profile, rcond=None)
    return coef


def test_abnormal_direction_row_vanishes(martinet_qfd):
    assert martinet_qfd.abnormality_residual <= 1e-8


def test_first_variation_chain_closed_form(chain3_preset):
    # the controllable part is a double integrator, so the first two dE rows
    # are convolutions against the kernels (T - s) and 1
    sys_ = chain3_preset.system
    traj = adjoint_along(reference_trajectory(sys_, chain3_preset.x0, 1.0, 1000), sys_)
    # 11 nodes put every hat kink on the fine grid, so the integration is exact
    qfd = first_variation_matrix(traj, sys_, 11)
    nodes = qfd.control_ts
    hstep = nodes[1] - nodes[0]
    T = 1.0

    def hat_moment(c, weight):
        # exact integral of weight(s) * hat_c(s) for piecewise-linear hats
        from scipy.integrate import quad
        lo, hi = max(c - hstep, 0.0), min(c + hstep, T)

        def hat(s):
            return max(0.0, 1.0 - abs(s - c) / hstep)

        val, _ = quad(lambda s: weight(s) * hat(s), lo, hi, limit=200)
        return val

    for j in (0, 3, 7, 10):
        c = nodes[j]
        expect_x1 = hat_moment(c, lambda s: T - s)
        expect_x2 = hat_moment(c, lambda s: 1.0)
        assert qfd.dE[0, j] == pytest.approx(expect_x1, rel=1e-6, abs=1e-10)
        assert qfd.dE[1, j] == pytest.approx(expect_x2, rel=1e-6, abs=1e-10)


def test_hessian_symmetry(martinet_qfd):
    assert np.abs(martinet_qfd.Q - martinet_qfd.Q.T).max() <= 1e-12


def test_fd_oracle_zero_control(martinet_preset, martinet_traj):
    v = np.zeros_like(martinet_traj.ts)
    assert fd_oracle(martinet_preset.system, martinet_traj, v, 1e-3) == pytest.approx(0.0, abs=1e-12)


def test_fd_oracle_richardson_consistency(martinet_preset, martinet_traj):
    v = np.sin(3 * martinet_traj.ts) + 0.4
    a = fd_oracle(martinet_preset.system, martinet_traj, v, 2e-3)
    b = fd_oracle(martinet_preset.system, martinet_traj, v, 1e-3)
    assert a == pytest.approx(b, rel=1e-4)


def test_hessian_matches_fd_oracle(martinet_preset, martinet_qfd, rng):
    qfd = martinet_qfd
    for _ in range(5):
        freq = rng.uniform(1.0, 6.0)
        phase = rng.uniform(0, 2 * np.pi)
        v = np.sin(freq * qfd.ts + phase) * rng.uniform(0.5, 2.0)
        coef = _project_control(qfd, v)
        quad_val = coef @ qfd.Q @ coef
        ref = fd_oracle(martinet_preset.system, qfd.traj, qfd.hats.T @ coef, 1e-3)
        assert quad_val == pytest.approx(ref, rel=1e-4)


def test_restricted_eigs_positive_martinet(martinet_qfd):
    lam_fixed, _ = restricted_smallest_eig(martinet_qfd, RestrictionMode.FIXED)
    lam_free, _ = restricted_smallest_eig(martinet_qfd, RestrictionMode.FREE)
    assert lam_fixed > 0 and lam_free > 0
    assert lam_free <= lam_fixed + 1e-12


def test_identity_form_positive(martinet_qfd):
    import copy
    qfd = copy.copy(martinet_qfd)
    qfd.Q = np.eye(qfd.m)
    for mode in RestrictionMode:
        lam, _ = restricted_smallest_eig(qfd, mode)
        assert lam > 0


def test_mode_ordering_and_monotonicity_const4(const4_preset):
    sys_ = const4_preset.system
    lams = {m: [] for m in RestrictionMode}
    ts = [1.5, 2.5, 3.5, 4.5, 5.5]
    for T in ts:
        traj = adjoint_along(reference_trajectory(sys_, const4_preset.x0, T, 600), sys_)
        qfd = hessian_form(traj, sys_, 90)
        for mode in RestrictionMode:
            lams[mode].append(restricted_smallest_eig(qfd, mode)[0])
    for mode in RestrictionMode:
        diffs = np.diff(lams[mode])
        assert np.all(diffs <= 1e-9)  # nonincreasing in T
    free, fixed = np.array(lams[RestrictionMode.FREE]), np.array(lams[RestrictionMode.FIXED])
    assert np.all(free <= fixed + 1e-12)


def test_empty_kernel_error(martinet_qfd):
    import copy
    qfd = copy.copy(martinet_qfd)
    qfd.adapted_dE = np.eye(qfd.m)[: qfd.m]
    with pytest.raises(ValueError, match="kernel"):
        restricted_smallest_eig(qfd, RestrictionMode.FIXED)


def test_conjugate_search_martinet_none(martinet_preset):
    res = conjugate_time_search(martinet_preset.system, martinet_preset.x0,
                                RestrictionMode.FREE, 10.0, 1e-3,
                                m=100, M=800, n_scan=10)
    assert res.status == "none"
    assert all(lam > 0 for lam in res.scan_lams)


def test_conjugate_search_assumption_gate():
    from accbound.presets import martinet
    p0 = martinet(alpha=0.0)
    with pytest.raises(AssumptionFailure):
        conjugate_time_search(p0.system, p0.x0, RestrictionMode.FREE, 2.0, 1e-2,
                              m=40, M=200, n_scan=4)


@pytest.mark.slow
def test_const4_conjugate_times_closed_form(const4_preset):
    # kernel of -z'' - z on Dirichlet data gives pi; the clamped fourth-order
    # operator loses definiteness at the first root of 2(cos s - 1) + s sin s
    res_free = conjugate_time_refined(const4_preset.system, const4_preset.x0,
                                      RestrictionMode.FREE, 5.0, 1e-3,
                                      m=120, M=960, n_scan=12)
    assert res_free.time == pytest.approx(np.pi, abs=1e-3)
    res_fixed = conjugate_time_refined(const4_preset.system, const4_preset.x0,
                                       RestrictionMode.FIXED, 7.5, 1e-3,
                                       m=120, M=960, n_scan=12)
    assert res_fixed.time == pytest.approx(2 * np.pi, abs=1e-3)
    assert 0 < res_free.time < res_fixed.time


@pytest.mark.slow
def test_mesh_doubling_stability_const4(const4_preset):
    tol_T = 5e-3
    vals = []
    for m in (120, 240):
        r = conjugate_time_search(const4_preset.system, const4_preset.x0,
                                  RestrictionMode.FREE, 4.0, tol_T / 4,
                                  m=m, M=max(800, 4 * m), n_scan=8)
        vals.append(r.time)
    assert abs(vals[1] - vals[0]) <= tol_T
