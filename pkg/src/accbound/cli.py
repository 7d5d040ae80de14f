"""Command-line front end: configuration in, reproducible reports out.

Commands: check-assumptions, conjugate-times, boundary, sample, sector-demo,
classify, all.  Each command writes report.json (canonical formatting, with
the config hash and tolerances embedded) plus its delimited outputs and, by
default, rendered figures next to them.  Exit codes: 0 success, 2 when the
abnormality assumptions fail, 1 on numerical or configuration failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import boundary as bd
from . import figures, reachset, report
from .config import ConfigError, RunConfig, load_config
from .geometry import (ConeRankError, IntegrationError, adjoint_along,
                       check_assumptions, reference_trajectory)
from .operators import CoefficientError, operator_conjugate_time
from .secondvar import (AssumptionFailure, RestrictionMode,
                        conjugate_time_search, hessian_form)

COMMANDS = ("check-assumptions", "conjugate-times", "boundary", "sample",
            "sector-demo", "classify", "all")


def _payload(cfg: RunConfig, command: str) -> dict:
    return {
        "command": command,
        "config_hash": cfg.hash,
        "preset": cfg.preset.name if cfg.preset else None,
        "preset_params": cfg.preset.params if cfg.preset else None,
        "T": cfg.T,
        "seed": cfg.seed,
        "tolerances": {"rank": cfg.rank_tol, "assumption": cfg.assumption_tol,
                       "conjugate_time": cfg.tol_T},
    }


def _trajectory(cfg: RunConfig, T=None):
    traj = reference_trajectory(cfg.system, cfg.x0, T or cfg.T, cfg.traj_grid)
    return adjoint_along(traj, cfg.system, cfg.rank_tol)


def _result_value(res):
    return "none" if res.status != "bracketed" else res.time


def _coefficients(cfg: RunConfig):
    """Coefficient table for the operator route: preset table, user table, or
    (for 3-state systems) calibration from the control-space Hessian."""
    if cfg.coeffs is not None:
        return cfg.coeffs, None
    if cfg.n != 3:
        raise ConfigError("no coefficient table available and calibration "
                          "applies to 3-state systems only")
    traj = _trajectory(cfg)
    qfd = hessian_form(traj, cfg.system, cfg.control_grid)
    field = bd.calibrate_scalar_coefficient(qfd)
    info = {"fit_coefficients": list(field.fit_coefficients),
            "fit_residual": field.fit_residual}
    return field, info


def cmd_check_assumptions(cfg: RunConfig, out: Path, render: bool) -> int:
    traj = reference_trajectory(cfg.system, cfg.x0, cfg.T, cfg.traj_grid)
    rep = check_assumptions(traj, cfg.system, cfg.assumption_tol)
    payload = _payload(cfg, "check-assumptions")
    payload["assumptions"] = rep.to_dict()
    corank_note = None
    if rep.all_passed:
        try:
            adjoint_along(traj, cfg.system, cfg.rank_tol)
            ann = np.abs(np.einsum("kjn,kn->kj", traj.cone, traj.p))
            ann = ann / np.linalg.norm(traj.cone, axis=2)
            payload["annihilator_max"] = float(ann.max())
        except ConeRankError as exc:
            corank_note = str(exc)
    if corank_note:
        payload["corank_failure"] = corank_note
    report.write_report(out / "report.json", payload)
    return 0 if rep.all_passed and corank_note is None else 2


def cmd_conjugate_times(cfg: RunConfig, out: Path, render: bool) -> int:
    m = cfg.control_grid
    res = {}
    for label, mode in (("t_cc", RestrictionMode.FREE), ("t_c", RestrictionMode.FIXED)):
        res[label] = conjugate_time_search(
            cfg.system, cfg.x0, mode, cfg.scan_T_max, cfg.tol_T,
            m=m, M=max(800, 4 * m), n_scan=32,
            rank_tol=cfg.rank_tol, assumption_tol=cfg.assumption_tol)
    payload = _payload(cfg, "conjugate-times")
    payload["scan_max"] = cfg.scan_T_max
    payload["t_cc"] = _result_value(res["t_cc"])
    payload["t_c"] = _result_value(res["t_c"])
    payload["detail"] = {k: r.to_dict() for k, r in res.items()}
    if cfg.coeffs is not None:
        op_cc = operator_conjugate_time(cfg.coeffs, "D2", cfg.scan_T_max,
                                        cfg.tol_T, cfg.operator_grid)
        op_c = operator_conjugate_time(cfg.coeffs, "D1", cfg.scan_T_max,
                                       cfg.tol_T, cfg.operator_grid)
        payload["operator_route"] = {"t_cc": _result_value(op_cc),
                                     "t_c": _result_value(op_c)}
    cols = {"free": res["t_cc"].scan_lams, "fixed": res["t_c"].scan_lams}
    report.spectrum_csv(out / "spectrum.csv", res["t_cc"].scan_ts, cols)
    if render:
        figures.save_spectrum(out / "spectrum.png", res["t_cc"].scan_ts, cols,
                              title="restricted smallest eigenvalue vs horizon")
    report.write_report(out / "report.json", payload)
    return 0


def cmd_boundary(cfg: RunConfig, out: Path, render: bool) -> int:
    coeffs, calibration = _coefficients(cfg)
    A_T = bd.compute_A(coeffs, cfg.T, cfg.operator_grid)
    w = max(cfg.neighborhood * cfg.T, 1e-3)
    window = (cfg.T - w, cfg.T + w)
    curves = [bd.boundary_curve(A_T, cfg.T, window, "AFFINE"),
              bd.boundary_curve(A_T, cfg.T, window, "SR")]
    payload = _payload(cfg, "boundary")
    payload["A_T"] = A_T
    payload["curve_window"] = list(window)
    payload["curves"] = [c.meta() for c in curves]
    if calibration:
        payload["calibration"] = calibration
    if cfg.preset and cfg.preset.closed_form_A is not None:
        ref = cfg.preset.closed_form_A(cfg.T)
        payload["closed_form"] = {"A_T": ref,
                                  "rel_error": abs(A_T - ref) / abs(ref)}
    if cfg.preset and cfg.preset.name == "martinet":
        mb = bd.martinet_closed_form(cfg.preset.params["alpha"], cfg.T)
        payload["second_branch"] = {"exponent": mb.branch2_exponent,
                                    "small_T_coefficient": mb.branch2_small_T_coefficient,
                                    "description": mb.description}
    gram = bd.gram_matrix(coeffs, cfg.T, cfg.operator_grid)
    payload["gram_matrix"] = gram.tolist()
    rows = []
    for c in curves:
        rows += [[c.case, x, v] for x, v in zip(c.x1, c.xn)]
    report.write_csv(out / "curve.csv", ["case", "x1", "xn"], rows)
    report.write_report(out / "report.json", payload)
    if render:
        figures.save_boundary(out / "boundary.png", curves,
                              title=f"predicted contact, T={cfg.T:g}")
    return 0


def cmd_sample(cfg: RunConfig, out: Path, render: bool) -> int:
    traj = _trajectory(cfg)
    affine = reachset.sample_affine(cfg.system, cfg.x0, cfg.T, cfg.eta,
                                    cfg.n_samples, cfg.seed, cfg.steps,
                                    cfg.threads)
    sr = reachset.sample_sr(cfg.system, cfg.x0, cfg.T, cfg.sr_alpha,
                            cfg.n_samples, cfg.seed + 1, cfg.steps,
                            cfg.threads, reparam_checks=100)
    pts_a = reachset.adapted_projection(affine, traj)
    pts_s = reachset.adapted_projection(sr, traj)
    radius = cfg.neighborhood
    near_a = np.max(np.abs(pts_a - [cfg.T, 0.0]), axis=1) <= radius
    near_s = np.max(np.abs(pts_s - [cfg.T, 0.0]), axis=1) <= radius
    payload = _payload(cfg, "sample")
    payload["N"] = cfg.n_samples
    payload["eta"] = cfg.eta
    payload["sr_alpha"] = cfg.sr_alpha
    payload["neighborhood_radius"] = radius
    payload["min_xn_neighborhood"] = {
        "affine": float(pts_a[near_a, 1].min()) if near_a.any() else None,
        "sr": float(pts_s[near_s, 1].min()) if near_s.any() else None,
    }
    payload["reparam_error"] = sr.reparam_error
    window = min(cfg.eta ** 2, radius)
    fit = None
    try:
        env = reachset.empirical_envelope(pts_a, "right", cfg.bins, cfg.T,
                                          window=window, spacing="log",
                                          min_count=5)
        fit = reachset.fit_contact(env, cfg.T)
        payload["right_branch_fit"] = fit.to_dict()
    except ValueError as exc:
        payload["right_branch_fit"] = {"error": str(exc)}
        env = None
    try:
        env_l = reachset.empirical_envelope(pts_s, "left", max(cfg.bins // 2, 4),
                                            cfg.T, window=radius)
        payload["sr_left_envelope_max_abs"] = float(np.max(np.abs(env_l[1])))
    except ValueError as exc:
        payload["sr_left_envelope_max_abs"] = None
    report.cloud_csv(out / "cloud.csv", affine, pts_a)
    report.cloud_csv(out / "cloud_sr.csv", sr, pts_s)
    report.write_report(out / "report.json", payload)
    if render:
        A_ref = None
        if cfg.preset and cfg.preset.closed_form_A is not None:
            A_ref = cfg.preset.closed_form_A(cfg.T)
        curve = None
        if A_ref is not None:
            curve = bd.boundary_curve(A_ref, cfg.T,
                                      (cfg.T - window, cfg.T + window), "SR")
        figures.save_cloud(out / "cloud.png", pts_a, cfg.T, curve=curve,
                           envelope=env, title="affine end-point cloud")
        figures.save_cloud(out / "cloud_sr.png", pts_s, cfg.T, curve=curve,
                           title="sector-constrained end-point cloud")
    return 0


def cmd_sector_demo(cfg: RunConfig, out: Path, render: bool) -> int:
    traj = _trajectory(cfg)
    sweep = reachset.sector_sweep(cfg.system, traj, cfg.T, cfg.eps_list)
    payload = _payload(cfg, "sector-demo")
    payload["sweep"] = sweep.to_dict()
    payload["sup_dist_min"] = float(min(p.sup_dist for p in sweep.points))
    payload["l2_dist_decreasing"] = bool(
        all(a.l2_dist < b.l2_dist for a, b in
            zip(sweep.points, sweep.points[1:])))
    report.write_csv(out / "sector.csv",
                     ["eps", "x1", "xn", "sup_dist", "l2_dist"],
                     [[p.eps, p.x1, p.xn, p.sup_dist, p.l2_dist]
                      for p in sweep.points])
    report.write_report(out / "report.json", payload)
    if render:
        figures.save_sector(out / "sector.png", sweep,
                            title="sector end-point depth vs eps")
    return 0


def cmd_classify(cfg: RunConfig, out: Path, render: bool) -> int:
    payload = _payload(cfg, "classify")
    if cfg.coeffs is not None:
        t_cc = operator_conjugate_time(cfg.coeffs, "D2", cfg.scan_T_max,
                                       cfg.tol_T, cfg.operator_grid)
        t_c = operator_conjugate_time(cfg.coeffs, "D1", cfg.scan_T_max,
                                      cfg.tol_T, cfg.operator_grid)
        payload["route"] = "operator"
    else:
        t_cc = conjugate_time_search(cfg.system, cfg.x0, RestrictionMode.FREE,
                                     cfg.scan_T_max, cfg.tol_T,
                                     m=cfg.control_grid,
                                     rank_tol=cfg.rank_tol,
                                     assumption_tol=cfg.assumption_tol)
        t_c = conjugate_time_search(cfg.system, cfg.x0, RestrictionMode.FIXED,
                                    cfg.scan_T_max, cfg.tol_T,
                                    m=cfg.control_grid,
                                    rank_tol=cfg.rank_tol,
                                    assumption_tol=cfg.assumption_tol)
        payload["route"] = "second-variation"
    v_cc = _result_value(t_cc)
    v_c = _result_value(t_c)
    payload["t_cc"] = v_cc
    payload["t_c"] = v_c
    payload["classification"] = {
        # isolated-trajectory time optimality ends at the released conjugate time
        "time_minimal": bool(v_cc == "none" or cfg.T < v_cc),
        # fixed-horizon cost optimality survives until the clamped conjugate time
        "fixed_time_cost_minimal": bool(v_c == "none" or cfg.T < v_c),
        # the metric problem shares its conjugate time with the affine system
        "sr_c0_optimal": bool(v_cc == "none" or cfg.T < v_cc),
    }
    report.write_report(out / "report.json", payload)
    return 0


_DISPATCH = {
    "check-assumptions": cmd_check_assumptions,
    "conjugate-times": cmd_conjugate_times,
    "boundary": cmd_boundary,
    "sample": cmd_sample,
    "sector-demo": cmd_sector_demo,
    "classify": cmd_classify,
}


def run(command: str, config_path: str, out_dir: str, seed_override=None,
        threads=None, render_figures: bool = True) -> int:
    """Run one command (or 'all'); returns the process exit code."""
    try:
        cfg = load_config(config_path)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    if seed_override is not None:
        cfg.seed = int(seed_override)
    if threads is not None:
        cfg.threads = max(1, int(threads))
    commands = list(_DISPATCH) if command == "all" else [command]
    code = 0
    for name in commands:
        out = Path(out_dir) / name if command == "all" else Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        try:
            rc = _DISPATCH[name](cfg, out, render_figures)
        except (AssumptionFailure,) as exc:
            payload = _payload(cfg, name)
            payload["assumptions"] = exc.report.to_dict()
            payload["error"] = str(exc)
            report.write_report(out / "report.json", payload)
            print(f"{name}: assumption failure: {exc}", file=sys.stderr)
            rc = 2
        except ConeRankError as exc:
            payload = _payload(cfg, name)
            payload["error"] = f"corank-1 failure: {exc}"
            report.write_report(out / "report.json", payload)
            print(f"{name}: {exc}", file=sys.stderr)
            rc = 2
        except (IntegrationError, bd.SingularBVPError, CoefficientError,
                reachset.RegimeError, reachset.ConstraintViolation,
                ConfigError, ValueError) as exc:
            print(f"{name}: {exc}", file=sys.stderr)
            rc = 1
        code = max(code, rc)
        if rc == 2 and command == "all":
            break
    return code


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(
        prog="accbound",
        description="Conjugate times, boundary contact coefficient and Monte "
                    "Carlo reachable-set evidence for single-input affine "
                    "systems near an abnormal trajectory.")
    parser.add_argument("--command", required=True, choices=COMMANDS)
    parser.add_argument("--config", required=True, help="run configuration file")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed-override", type=int, default=None)
    parser.add_argument("--threads", type=int, default=None,
                        help="worker processes for sampling batches")
    parser.add_argument("--no-figures", action="store_true",
                        help="skip figure rendering, keep CSV/JSON only")
    args = parser.parse_args(argv)
    sys.exit(run(args.command, args.config, args.out,
                 seed_override=args.seed_override, threads=args.threads,
                 render_figures=not args.no_figures))


if __name__ == "__main__":
    main()
