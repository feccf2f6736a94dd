"""Command line entry point.

    kidney-pivot template build DIR      mean template + convergence curve
    kidney-pivot template cohort         write a synthetic cohort of clouds
    kidney-pivot patient gen             export a synthetic patient
    kidney-pivot run explore|localize|sweep
    kidney-pivot experiment er|efficiency

Exit status: 0 on success, 1 on a failed run, 2 on bad input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .config import load_config
from .control import TRACE_HEADER
from .errors import ConfigError, KidneyPivotError
from .experiments import (
    EFFICIENCY_HEADER,
    ER_HEADER,
    FAILURE_LIMIT,
    SUMMARY_HEADER,
    er_means,
    patient_seed,
    run_efficiency_study,
    run_er_study,
    strategy_means,
)
from .geometry import PointCloud
from .kinematics import load_chain
from .metrics import efficiency_curve
from .pivoting import Strategy, nop_pivot_pose, optimal_pivot_pose, run_sweep
from .registration import localize
from .template import build_template, convergence_curve
from .worldsim import (
    export_patient,
    import_patient,
    make_synthetic_patient,
    mask_centroid,
    run_exploration,
    synthetic_kidney_cloud,
)

log = logging.getLogger("kidney_pivot")

FRAME_HEADER = ("frame", "t", "tip_x", "tip_y", "tip_z", "o_x", "o_y", "o_z", "points", "c_msk")


class UsageError(Exception):
    """Bad command line input; exit status 2."""


def _stamp(cfg, seeds):
    seeds = list(seeds)
    shown = seeds if len(seeds) <= 8 else seeds[:3] + ["..."] + seeds[-2:]
    return [f"config {cfg.digest()} seeds {' '.join(str(s) for s in shown)}"]


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_patient(args, cfg):
    if args.patient:
        d = Path(args.patient)
        surface = d / "body_surface.csv"
        return import_patient(d / "kidney.obj", surface if surface.exists() else None, cfg.k_contact)
    return make_synthetic_patient(cfg.seed, cfg.patient_params, cfg.k_contact)


def _frame_rows(frames, fan):
    rows = []
    for k, fr in enumerate(frames):
        p, r = fr.probe_pose.translation, fr.probe_pose.rotation
        c = mask_centroid(fr, fan)
        rows.append((k, fr.t, *p, *r[:, 0], len(fr.mask_boundary), "" if c is None else float(c)))
    return rows


def _write_trace(out, cfg, trace, name="trace.csv"):
    if trace is not None:
        io.write_csv(out / name, TRACE_HEADER, trace, _stamp(cfg, [cfg.seed]))


# ---------------------------------------------------------------------------
# commands


def cmd_template_build(args, cfg):
    src = Path(args.input_dir)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".ply", ".obj")) if src.is_dir() else []
    if not files:
        raise UsageError("no inputs")
    cohort = [io.load_cloud(p) for p in files]
    k = args.sample_k or min(cfg.template_sample_k, min(len(c) for c in cohort))
    tmpl = build_template(cohort, k)
    out = _out_dir(args)
    io.write_ply(out / "template.ply", tmpl.cloud)
    curve = convergence_curve(cohort, k) if len(cohort) > 1 else []
    io.write_csv(out / "convergence.csv", ("n", "mean_diff_mm"), curve, _stamp(cfg, [cfg.seed]))
    last = f"{curve[-1][1]:.4f} mm" if curve else "n/a"
    print(f"cohort size {len(cohort)}, {k} points, final convergence {last}")
    return 0


def cmd_template_cohort(args, cfg):
    out = _out_dir(args)
    seeds = [cfg.seed + cfg.template_seed + j for j in range(args.count)]
    for j, s in enumerate(seeds):
        io.write_ply(out / f"kidney_{j:03d}.ply", synthetic_kidney_cloud(s, cfg.patient_params))
    print(f"wrote {len(seeds)} clouds to {out}")
    return 0


def cmd_patient_gen(args, cfg):
    patient = make_synthetic_patient(cfg.seed, cfg.patient_params, cfg.k_contact)
    out = _out_dir(args)
    export_patient(patient, out)
    print(f"patient seed {cfg.seed}: axis ratio {patient.axis_ratio:.2f}, written to {out}")
    return 0


def cmd_run_explore(args, cfg):
    patient = _load_patient(args, cfg)
    chain = load_chain(cfg.chain_path or None)
    trace = [] if args.trace else None
    res = run_exploration(patient, chain, None, cfg.gains, args.er, args.offset, cfg.fan, cfg.dt, cfg.damping, trace)
    out = _out_dir(args)
    stamp = _stamp(cfg, [cfg.seed])
    io.write_csv(out / "frames.csv", FRAME_HEADER, _frame_rows(res.frames, cfg.fan), stamp)
    io.write_ply(out / "p_local.ply", res.cloud)
    _write_trace(out, cfg, trace)
    print(f"{len(res.frames)} frames, {len(res.cloud)} points, path {res.path_length:.1f} mm")
    return 0


def cmd_run_localize(args, cfg):
    cloud = io.read_ply(args.cloud)
    tmpl = io.read_ply(args.template)
    anchor = None if args.anchor is None else np.array(args.anchor, dtype=float)
    res = localize(tmpl, cloud, cfg.registration, anchor=anchor)
    out = _out_dir(args)
    io.write_pose(out / "kidney_pose.txt", res.t_k_b)
    with (out / "icp_log.jsonl").open("w") as fh:
        for it, err, dth, dtr in res.log:
            fh.write(json.dumps({"iter": it, "error": err, "dtheta_norm": dth, "dt_norm": dtr}) + "\n")
    state = "converged" if res.converged else "not converged"
    print(f"{res.iterations} iterations, {state}, error {res.final_error:.4g} mm^2")
    return 0


def cmd_run_sweep(args, cfg):
    patient = _load_patient(args, cfg)
    chain = load_chain(cfg.chain_path or None)
    strategy = Strategy(args.strategy)
    if strategy is Strategy.GTOP:
        pivot = optimal_pivot_pose(patient.kidney_gt_pose, "ground_truth")
    elif strategy is Strategy.SL:
        pivot = None
    else:
        if not args.kidney_pose:
            raise UsageError(f"strategy {strategy.value} needs --kidney-pose")
        t_est = io.read_pose(args.kidney_pose)
        pivot = optimal_pivot_pose(t_est) if strategy is Strategy.OP else nop_pivot_pose(t_est)
    res = run_sweep(patient, chain, None, pivot, cfg.gains, cfg.fan, cfg.dt, strategy, cfg.damping)
    m = efficiency_curve(res.frames, cfg.fan.depth, cfg.fan, cfg.voxel_mm, patient)
    out = _out_dir(args)
    stamp = _stamp(cfg, [cfg.seed])
    io.write_csv(out / "frames.csv", FRAME_HEADER, _frame_rows(res.frames, cfg.fan), stamp)
    io.write_ply(out / "sweep_cloud.ply", PointCloud(np.concatenate(
        [f.world_points() for f in res.frames if not f.empty] or [np.empty((0, 3))])))
    io.write_csv(out / "metrics.csv", ("step", "epsilon_mm", "n", "V"),
                 [(k, e, n, v) for k, (e, n, v) in enumerate(m.v_curve)], stamp)
    final_v = m.v_curve[-1][2] if m.v_curve else 0.0
    print(f"{strategy.value}: epsilon {m.epsilon:.1f} mm, n {m.n}, V {final_v:.3f}")
    return 0


def cmd_experiment_er(args, cfg):
    if cfg.patients < 1:
        raise UsageError("need at least one patient")
    study = run_er_study(cfg)
    out = _out_dir(args)
    seeds = [patient_seed(cfg, i) for i in range(cfg.patients)]
    io.write_csv(out / "er_study.csv", ER_HEADER, study.rows, _stamp(cfg, seeds))
    print("er    e_trans_mm        e_rot_deg         trials")
    for er, (mt, st, mr, sr, n) in er_means(study.rows).items():
        print(f"{er:.1f}  {mt:7.2f} +- {st:6.2f}  {mr:7.2f} +- {sr:6.2f}  {n}")
    for er, (tt, tr) in study.tests.items():
        print(f"er {er:.1f} vs 1.0: e_trans t {tt.t:7.3f} p {tt.p:.4f} | e_rot t {tr.t:7.3f} p {tr.p:.4f}")
    crit = "none" if study.critical_er is None else f"{study.critical_er:.1f}"
    print(f"critical exploration ratio (p > {cfg.alpha}): {crit}")
    print(f"failed trials: {study.failures}/{len(study.rows)}")
    return 1 if study.failure_rate > FAILURE_LIMIT else 0


def cmd_experiment_efficiency(args, cfg):
    if cfg.patients < 1:
        raise UsageError("need at least one patient")
    try:
        strategies = [Strategy(s.strip()) for s in args.strategies.split(",") if s.strip()]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    study = run_efficiency_study(cfg, strategies, perfect_registration=args.perfect_registration)
    out = _out_dir(args)
    stamp = _stamp(cfg, [patient_seed(cfg, i) for i in range(cfg.patients)])
    io.write_csv(out / "efficiency.csv", EFFICIENCY_HEADER, study.rows, stamp)
    io.write_csv(out / "efficiency_summary.csv", SUMMARY_HEADER, study.summary, stamp)
    print("strategy  epsilon_mm   n       V      patients")
    for name, (e, n, v, count) in strategy_means(study.summary).items():
        print(f"{name:8s}  {e:9.1f}  {n:6.1f}  {v:6.3f}  {count}")
    print(f"failed runs: {study.failures}/{len(study.summary)}")
    return 1 if study.failure_rate > FAILURE_LIMIT else 0


# ---------------------------------------------------------------------------
# parser


def _global_flags(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=d, help="base seed (overrides the config)")
    p.add_argument("--trace", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="write a per-step controller trace")
    p.add_argument("--out", default=d if suppress else ".", help="output directory")
    p.add_argument("--workers", type=int, default=d, help="worker processes (0: all CPUs)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="kidney-pivot", description="Template-guided kidney ultrasound simulator")
    _global_flags(parser, False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, True)
    sub = parser.add_subparsers(dest="group", required=True)

    tp = sub.add_parser("template").add_subparsers(dest="action", required=True)
    p = tp.add_parser("build", parents=[common], help="build a mean template from PLY/OBJ files")
    p.add_argument("input_dir")
    p.add_argument("--sample-k", type=int, default=0, help="points per subject (default: config)")
    p.set_defaults(func=cmd_template_build)
    p = tp.add_parser("cohort", parents=[common], help="write synthetic kidney clouds")
    p.add_argument("--count", type=int, default=20)
    p.set_defaults(func=cmd_template_cohort)

    pp = sub.add_parser("patient").add_subparsers(dest="action", required=True)
    p = pp.add_parser("gen", parents=[common], help="export a synthetic patient")
    p.set_defaults(func=cmd_patient_gen)

    rp = sub.add_parser("run").add_subparsers(dest="action", required=True)
    p = rp.add_parser("explore", parents=[common], help="explorative scan of one patient")
    p.add_argument("--patient", help="patient directory from 'patient gen' (default: synthetic from --seed)")
    p.add_argument("--er", type=float, default=1.0)
    p.add_argument("--offset", type=float, default=0.0, help="start offset along base x, mm")
    p.set_defaults(func=cmd_run_explore)
    p = rp.add_parser("localize", parents=[common], help="register a partial cloud to a template")
    p.add_argument("--cloud", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--anchor", type=float, nargs=3, help="kidney centroid guess for an empty cloud")
    p.set_defaults(func=cmd_run_localize)
    p = rp.add_parser("sweep", parents=[common], help="run one sweep strategy")
    p.add_argument("--patient")
    p.add_argument("--strategy", choices=[s.value for s in Strategy], default="op")
    p.add_argument("--kidney-pose", help="estimated kidney pose file (op, nop)")
    p.set_defaults(func=cmd_run_sweep)

    ep = sub.add_parser("experiment").add_subparsers(dest="action", required=True)
    p = ep.add_parser("er", parents=[common], help="localization error against exploration ratio")
    p.add_argument("--patients", type=int)
    p.set_defaults(func=cmd_experiment_er)
    p = ep.add_parser("efficiency", parents=[common], help="compare sweep strategies")
    p.add_argument("--patients", type=int)
    p.add_argument("--strategies", default="op,gtop,sl,nop")
    p.add_argument("--perfect-registration", action="store_true", help="use the true kidney pose for op and nop")
    p.set_defaults(func=cmd_experiment_efficiency)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.workers is not None:
            overrides["workers"] = args.workers
        if getattr(args, "patients", None) is not None:
            if args.patients < 1:
                raise UsageError("need at least one patient")
            overrides["patients"] = args.patients
        cfg = load_config(args.config, **overrides)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KidneyPivotError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
