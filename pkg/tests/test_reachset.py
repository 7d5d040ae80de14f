import numpy as np
import pytest

from accbound.reachset import (ConstraintViolation, RegimeError,
                               adapted_projection, empirical_envelope,
                               fit_contact, reparametrization_check,
                               sample_affine, sample_sr, sector_perturbation,
                               sector_sweep)


def test_zero_bound_collapses_to_reference(martinet_preset, martinet_traj):
    cloud = sample_affine(martinet_preset.system, martinet_preset.x0, 1.0, 0.0,
                          64, seed=1, steps=400)
    assert np.abs(cloud.states - martinet_traj.gamma[-1]).max() < 1e-12


def test_cloud_determinism_and_extension(martinet_preset):
    kw = dict(T=1.0, eta=0.1, seed=9, steps=400)
    c1 = sample_affine(martinet_preset.system, martinet_preset.x0, N=300, **kw)
    c1b = sample_affine(martinet_preset.system, martinet_preset.x0, N=300, **kw)
    c2 = sample_affine(martinet_preset.system, martinet_preset.x0, N=600, **kw)
    assert np.array_equal(c1.states, c1b.states)
    assert np.array_equal(c1.states, c2.states[:300])


def test_doubling_never_shrinks_envelope(martinet_preset, martinet_traj):
    kw = dict(T=1.0, eta=0.1, seed=5, steps=400)
    c1 = sample_affine(martinet_preset.system, martinet_preset.x0, N=2048, **kw)
    c2 = sample_affine(martinet_preset.system, martinet_preset.x0, N=4096, **kw)
    p1 = adapted_projection(c1, martinet_traj)
    p2 = adapted_projection(c2, martinet_traj)
    e1 = empirical_envelope(p1, "right", 6, 1.0, window=0.02)
    e2 = empirical_envelope(p2, "right", 6, 1.0, window=0.02)
    # same binning: larger cloud can only push minima down
    assert np.all(e2[1] <= e1[1] + 1e-15)


def test_small_horizon_positivity(martinet_preset):
    from accbound.geometry import adjoint_along, reference_trajectory
    T = 0.5
    traj = adjoint_along(reference_trajectory(martinet_preset.system,
                                              martinet_preset.x0, T, 400),
                         martinet_preset.system)
    cloud = sample_affine(martinet_preset.system, martinet_preset.x0, T, 0.1,
                          3000, seed=3, steps=600)
    pts = adapted_projection(cloud, traj)
    near = np.max(np.abs(pts - [T, 0.0]), axis=1) <= 0.1 * T
    assert pts[near, 1].min() >= -1e-6


def test_sr_alpha_small_degenerates_to_drift(martinet_preset, martinet_traj):
    alpha = 1e-3
    cloud = sample_sr(martinet_preset.system, martinet_preset.x0, 1.0, alpha,
                      512, seed=11, steps=400)
    # every end-point hugs the reference curve (x, 0, 0)
    assert np.abs(cloud.states[:, 1]).max() <= 5 * alpha
    assert np.abs(cloud.states[:, 2]).max() <= 5 * alpha ** 2
    # the pure-drift family lands exactly on gamma(s), s in [(1-alpha)T, T]
    drift = cloud.family == 3
    assert drift.any()
    assert np.abs(cloud.states[drift, 1:]).max() <= 1e-12
    assert cloud.states[drift, 0].min() >= (1 - alpha) - 1e-9
    assert cloud.states[drift, 0].max() <= 1.0 + 1e-9


def test_sr_reparametrization_inclusion(martinet_preset):
    cloud = sample_sr(martinet_preset.system, martinet_preset.x0, 1.0, 0.3,
                      64, seed=2, steps=400, reparam_checks=100)
    assert cloud.reparam_error <= 1e-8


def test_reparametrization_single_segment(martinet_preset):
    segs = [(0.4, 0.8, 0.2), (0.6, 0.95, -0.1)]
    e_sr, e_af, err = reparametrization_check(martinet_preset.system,
                                              martinet_preset.x0, segs)
    assert err <= 1e-9


def test_adapted_projection_base_point(martinet_traj):
    gT = martinet_traj.gamma[-1]
    pts = adapted_projection(np.stack([gT, gT + 0.25 * martinet_traj.p[-1]]),
                             martinet_traj)
    assert pts[0] == pytest.approx([1.0, 0.0], abs=1e-12)
    assert pts[1] == pytest.approx([1.0, 0.25], abs=1e-12)


def test_adapted_projection_martinet_native_chart(martinet_traj, rng):
    # adapted coordinates agree with reading (x, z) near the end-point
    eps = 1e-3
    disp = rng.normal(size=(20, 3)) * eps
    pts = adapted_projection(martinet_traj.gamma[-1] + disp, martinet_traj)
    native_x1 = 1.0 + disp[:, 0]
    native_xn = disp[:, 2]
    assert np.abs(pts[:, 0] - native_x1).max() <= eps ** 2
    assert np.abs(pts[:, 1] - native_xn).max() <= eps ** 2


def test_envelope_reproduces_parabola():
    x1 = np.linspace(1.001, 1.1, 400)
    xn = 0.7 * (x1 - 1.0) ** 2
    pts = np.stack([x1, xn], axis=1)
    xs, vals, _ = empirical_envelope(pts, "right", 8, 1.0)
    assert vals == pytest.approx(0.7 * (xs - 1.0) ** 2, rel=1e-12)


def test_envelope_empty_side_error():
    pts = np.stack([np.linspace(1.01, 1.1, 50), np.ones(50)], axis=1)
    with pytest.raises(ValueError, match="insufficient"):
        empirical_envelope(pts, "left", 4, 1.0)


def test_fit_contact_synthetic_powers(rng):
    for expo in (2.0, 3.0):
        x1 = 1.0 + np.geomspace(1e-3, 1e-1, 300)
        xn = 0.8 * (x1 - 1.0) ** expo
        env = empirical_envelope(np.stack([x1, xn], axis=1), "right", 10, 1.0)
        fit = fit_contact(env, 1.0)
        assert fit.exponent == pytest.approx(expo, abs=1e-6)
        assert fit.coefficient == pytest.approx(0.8, rel=1e-6)


def test_fit_contact_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        fit_contact((np.array([1.01]), np.array([1e-4]), np.array([1e-9])), 1.0)


def test_sector_perturbation_small_eps(martinet_preset, martinet_traj):
    p1 = sector_perturbation(martinet_preset.system, martinet_traj, 1.0, 0.02)
    p2 = sector_perturbation(martinet_preset.system, martinet_traj, 1.0, 0.2)
    assert p1.xn < 0 and p2.xn < 0
    # eps^5 scaling: the end-point sinks fast as eps grows
    assert abs(p1.xn) < abs(p2.xn) * 1e-3
    assert abs(p1.xn) <= 0.02 ** 5


def test_sector_perturbation_validation(martinet_preset, martinet_traj):
    with pytest.raises(ValueError):
        sector_perturbation(martinet_preset.system, martinet_traj, 1.0, 0.6)
    with pytest.raises(ValueError):
        sector_perturbation(martinet_preset.system, martinet_traj, 0.05, 0.04)


def test_sector_sweep_martinet(martinet_preset, martinet_traj):
    sweep = sector_sweep(martinet_preset.system, martinet_traj, 1.0,
                         [0.05, 0.1, 0.15, 0.2, 0.3, 0.4])
    assert sweep.slope == pytest.approx(5.0, abs=0.3)
    assert all(p.xn < 0 for p in sweep.points)
    assert min(p.sup_dist for p in sweep.points) >= 1.0
    l2 = [p.l2_dist for p in sweep.points]
    assert np.all(np.diff(l2) > 0)  # shrinks toward the reference as eps drops


def test_sector_sweep_input_validation(martinet_preset, martinet_traj):
    with pytest.raises(ValueError, match="duplicate"):
        sector_sweep(martinet_preset.system, martinet_traj, 1.0,
                     [0.05, 0.05, 0.1, 0.3, 0.4])
    with pytest.raises(ValueError, match="at least 5"):
        sector_sweep(martinet_preset.system, martinet_traj, 1.0, [0.1, 0.2, 0.4])
    with pytest.raises(ValueError, match="factor 4"):
        sector_sweep(martinet_preset.system, martinet_traj, 1.0,
                     [0.2, 0.25, 0.3, 0.35, 0.4])


def test_constraints_hold_pointwise(martinet_preset):
    # assertion machinery is live: impossible bounds must raise, valid ones not
    cloud = sample_sr(martinet_preset.system, martinet_preset.x0, 1.0, 0.5,
                      256, seed=8, steps=300)
    assert np.all(cloud.sup_dist <= np.sqrt(2 * 0.5 ** 2) + 1e-9)


@pytest.mark.slow
def test_martinet_contact_fit_quick(martinet_preset, martinet_traj):
    cloud = sample_affine(martinet_preset.system, martinet_preset.x0, 1.0, 0.1,
                          8192, seed=17, steps=1000)
    pts = adapted_projection(cloud, martinet_traj)
    env = empirical_envelope(pts, "right", 10, 1.0, window=0.01,
                             spacing="log", min_count=5)
    fit = fit_contact(env, 1.0)
    assert fit.exponent == pytest.approx(2.0, abs=0.15)
    assert fit.coefficient == pytest.approx(0.5, rel=0.2)
