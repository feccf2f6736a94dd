"""Batch studies: localization error against exploration ratio, and sweep efficiency.

Every trial is a pure function of the configuration and its seeds, so
trials can run in worker processes and the gathered rows are sorted
before anything is written.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .config import RunConfig
from .errors import KidneyPivotError
from .kinematics import load_chain
from .metrics import efficiency_curve, localization_error, paired_t_test
from .pivoting import Strategy, nop_pivot_pose, optimal_pivot_pose, run_sweep
from .registration import localize
from .template import build_template
from .worldsim import (
    explore_full,
    make_synthetic_patient,
    run_exploration,
    synthetic_kidney_cloud,
    truncate_exploration,
)

log = logging.getLogger(__name__)

ER_HEADER = ("patient", "seed", "offset", "offset_mm", "er", "e_trans_mm", "e_rot_deg", "points", "status")
EFFICIENCY_HEADER = ("patient", "strategy", "step", "epsilon_mm", "n", "V")
SUMMARY_HEADER = ("patient", "strategy", "axis_ratio", "epsilon_mm", "n", "V", "status")
FAILURE_LIMIT = 0.10


def patient_seed(cfg: RunConfig, i):
    return cfg.seed + i


def template_seeds(cfg: RunConfig):
    return [cfg.seed + cfg.template_seed + j for j in range(cfg.template_subjects)]


def start_offsets(cfg: RunConfig, i):
    rng = np.random.default_rng([cfg.seed, i])
    return rng.uniform(-cfg.offset_range_mm, cfg.offset_range_mm, cfg.offsets)


@lru_cache(maxsize=4)
def _template_for(cfg: RunConfig):
    cohort = [synthetic_kidney_cloud(s, cfg.patient_params) for s in template_seeds(cfg)]
    tmpl = build_template(cohort, cfg.template_sample_k)
    return tmpl, cKDTree(tmpl.cloud.points)


@lru_cache(maxsize=4)
def _chain_for(path):
    return load_chain(path or None)


def _pool_map(fn, items, workers):
    workers = workers or (len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as ex:
        return list(ex.map(fn, items))


# ---------------------------------------------------------------------------
# exploration-ratio study


@dataclass(frozen=True)
class ERStudy:
    rows: list  # tuples matching ER_HEADER, sorted by (patient, er, offset)
    tests: dict = field(default_factory=dict)  # er -> (TTestResult e_trans, TTestResult e_rot)
    critical_er: float | None = None
    failures: int = 0

    @property
    def failure_rate(self):
        return self.failures / len(self.rows) if self.rows else 0.0


def _er_patient(args):
    cfg, i = args
    chain = _chain_for(cfg.chain_path)
    tmpl, tree = _template_for(cfg)
    seed = patient_seed(cfg, i)
    rows = []
    try:
        patient = make_synthetic_patient(seed, cfg.patient_params, cfg.k_contact)
    except KidneyPivotError as exc:
        log.warning("patient %d: %s", i, exc)
        return [(i, seed, j, math.nan, er, math.nan, math.nan, 0, "patient_failed")
                for j in range(cfg.offsets) for er in cfg.er_list]
    for j, off in enumerate(start_offsets(cfg, i)):
        try:
            full = explore_full(patient, chain, None, cfg.gains, float(off), cfg.fan, cfg.dt, cfg.damping)
        except KidneyPivotError as exc:
            log.warning("patient %d offset %d: %s", i, j, exc)
            rows += [(i, seed, j, off, er, math.nan, math.nan, 0, "explore_failed") for er in cfg.er_list]
            continue
        anchor = full.tips[0] - np.array([0.0, 0.0, cfg.anchor_depth_mm])
        for er in cfg.er_list:
            try:
                part = truncate_exploration(full, er)
                res = localize(tmpl, part.cloud, cfg.registration, anchor=anchor, tree=tree)
                err = localization_error(res.t_k_b, patient.kidney_gt_pose)
                rows.append((i, seed, j, off, er, err.e_trans, err.e_rot_x, len(part.cloud), "ok"))
            except (KidneyPivotError, ValueError, np.linalg.LinAlgError) as exc:
                log.warning("patient %d offset %d er %.1f: %s", i, j, er, exc)
                rows.append((i, seed, j, off, er, math.nan, math.nan, 0, type(exc).__name__))
    return rows


def _per_patient_means(rows, er, col):
    by_patient = {}
    for r in rows:
        if r[4] == er and r[8] == "ok":
            by_patient.setdefault(r[0], []).append(r[col])
    return {p: float(np.mean(v)) for p, v in by_patient.items()}


def er_tests(rows, er_list, alpha=0.05):
    """Paired t-tests of per-patient mean errors at each ratio against ER = 1.0.

    Returns the test table and the smallest ratio for which at least one
    error metric is not significantly different from full exploration.
    """
    ref = {col: _per_patient_means(rows, 1.0, col) for col in (5, 6)}
    tests = {}
    critical = None
    for er in sorted(er_list):
        if er == 1.0:
            continue
        pair = []
        for col in (5, 6):
            cur = _per_patient_means(rows, er, col)
            common = sorted(set(cur) & set(ref[col]))
            if len(common) < 2:
                pair = None
                break
            pair.append(paired_t_test([cur[p] for p in common], [ref[col][p] for p in common]))
        if pair is None:
            continue
        tests[er] = tuple(pair)
        if critical is None and any(t.p > alpha for t in pair):
            critical = er
    return tests, critical


def run_er_study(cfg: RunConfig) -> ERStudy:
    if cfg.patients < 1:
        raise ValueError("need at least one patient")
    _template_for(cfg)  # build once in the parent so forked workers inherit it
    chunks = _pool_map(_er_patient, [(cfg, i) for i in range(cfg.patients)], cfg.workers)
    rows = sorted((r for c in chunks for r in c), key=lambda r: (r[0], r[4], r[2]))
    tests, critical = er_tests(rows, cfg.er_list, cfg.alpha)
    failures = sum(r[8] != "ok" for r in rows)
    return ERStudy(rows, tests, critical, failures)


def er_means(rows):
    """Mean and standard deviation of both errors per exploration ratio."""
    out = {}
    for er in sorted({r[4] for r in rows}):
        ok = [r for r in rows if r[4] == er and r[8] == "ok"]
        if ok:
            et = np.array([r[5] for r in ok])
            eo = np.array([r[6] for r in ok])
            out[er] = (float(et.mean()), float(et.std()), float(eo.mean()), float(eo.std()), len(ok))
    return out


# ---------------------------------------------------------------------------
# sweep-efficiency study


@dataclass(frozen=True)
class EfficiencyStudy:
    rows: list  # tuples matching EFFICIENCY_HEADER
    summary: list  # tuples matching SUMMARY_HEADER
    failures: int = 0

    @property
    def failure_rate(self):
        return self.failures / len(self.summary) if self.summary else 0.0


def _efficiency_patient(args):
    cfg, i, strategies, perfect_registration = args
    chain = _chain_for(cfg.chain_path)
    seed = patient_seed(cfg, i)
    rows, summary = [], []

    def fail(status, ratio=math.nan):
        return [], [(i, s.value, ratio, math.nan, 0, math.nan, status) for s in strategies]

    try:
        patient = make_synthetic_patient(seed, cfg.patient_params, cfg.k_contact)
    except KidneyPivotError as exc:
        log.warning("patient %d: %s", i, exc)
        return fail("patient_failed")
    ratio = patient.axis_ratio
    if perfect_registration:
        t_est = patient.kidney_gt_pose
    else:
        tmpl, tree = _template_for(cfg)
        try:
            ex = run_exploration(patient, chain, None, cfg.gains, cfg.efficiency_er, 0.0, cfg.fan, cfg.dt, cfg.damping)
            t_est = localize(tmpl, ex.cloud, cfg.registration, tree=tree).t_k_b
        except (KidneyPivotError, ValueError) as exc:
            log.warning("patient %d exploration: %s", i, exc)
            return fail(type(exc).__name__, ratio)
    for s in strategies:
        try:
            if s is Strategy.SL:
                pivot = None
            elif s is Strategy.GTOP:
                pivot = optimal_pivot_pose(patient.kidney_gt_pose, "ground_truth")
            elif s is Strategy.OP:
                pivot = optimal_pivot_pose(t_est)
            else:
                pivot = nop_pivot_pose(t_est)
            res = run_sweep(patient, chain, None, pivot, cfg.gains, cfg.fan, cfg.dt, s, cfg.damping)
            m = efficiency_curve(res.frames, cfg.fan.depth, cfg.fan, cfg.voxel_mm, patient)
        except (KidneyPivotError, ValueError) as exc:
            log.warning("patient %d %s: %s", i, s.value, exc)
            summary.append((i, s.value, ratio, math.nan, 0, math.nan, type(exc).__name__))
            continue
        rows += [(i, s.value, k, e, n, v) for k, (e, n, v) in enumerate(m.v_curve)]
        final_v = m.v_curve[-1][2] if m.v_curve else 0.0
        summary.append((i, s.value, ratio, m.epsilon, m.n, final_v, "ok"))
    return rows, summary


def run_efficiency_study(cfg: RunConfig, strategies=tuple(Strategy), perfect_registration=False) -> EfficiencyStudy:
    """Run each sweep strategy on every patient.

    ``perfect_registration`` replaces the estimated kidney pose by the
    ground truth, which makes OP identical to GTOP.
    """
    if cfg.patients < 1:
        raise ValueError("need at least one patient")
    strategies = tuple(Strategy(s) for s in strategies)
    if not perfect_registration:
        _template_for(cfg)
    order = {s: k for k, s in enumerate(Strategy)}
    items = [(cfg, i, strategies, perfect_registration) for i in range(cfg.patients)]
    parts = _pool_map(_efficiency_patient, items, cfg.workers)
    rank = {s.value: order[s] for s in Strategy}
    rows = sorted((r for p in parts for r in p[0]), key=lambda r: (r[0], rank[r[1]], r[2]))
    summary = sorted((r for p in parts for r in p[1]), key=lambda r: (r[0], rank[r[1]]))
    return EfficiencyStudy(rows, summary, sum(r[6] != "ok" for r in summary))


def strategy_means(summary, min_axis_ratio=0.0):
    """Mean final (epsilon, n, V) per strategy over patients with the given elongation."""
    out = {}
    for s in Strategy:
        ok = [r for r in summary if r[1] == s.value and r[6] == "ok" and r[2] >= min_axis_ratio]
        if ok:
            out[s.value] = tuple(float(np.mean([r[k] for r in ok])) for k in (3, 4, 5)) + (len(ok),)
    return out
