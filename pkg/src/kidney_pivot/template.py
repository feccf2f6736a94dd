"""Mean kidney template from a cohort of kidney surface clouds.

Every subject is brought into its own principal-axes frame, thinned to a
fixed number of points by farthest point sampling, put in point-to-point
correspondence with subject 0 by nearest neighbors, and averaged.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import KidneyPivotError, SubjectError
from .geometry import (
    PointCloud,
    estimate_normals,
    farthest_point_indices,
    knn_correspond,
    pca_canonical_frame,
)

DEFAULT_X_REF = (1.0, 0.0, 0.0)
DEFAULT_Y_REF = (0.0, 1.0, 0.0)


@dataclass(frozen=True, eq=False)
class KidneyTemplate:
    cloud: PointCloud  # canonical frame, with normals
    point_count: int
    cohort_size: int


def canonical_resample(cloud: PointCloud, sample_k, x_ref, y_ref):
    """Canonicalize, thin to ``sample_k`` points, and canonicalize the thinned set again.

    The second pass makes the returned points exactly centered and
    principal-axes aligned even though the thinned set differs slightly
    from the full cloud.
    """
    frame = pca_canonical_frame(cloud, x_ref, y_ref).frame
    pts = frame.apply(cloud.points)
    pts = pts[farthest_point_indices(pts, sample_k)]
    frame2 = pca_canonical_frame(pts, x_ref, y_ref).frame
    return frame2.apply(pts)


def average_corresponded(subjects):
    """Re-index every subject against subject 0 and take the per-index mean.

    ``subjects`` are (k, 3) arrays already expressed in a common frame.
    """
    ref = subjects[0]
    acc = np.zeros_like(ref)
    for pts in subjects:
        acc += pts[knn_correspond(pts, ref)]
    return acc / len(subjects)


def _prepare(cohort, sample_k, x_ref, y_ref):
    out = []
    for i, cloud in enumerate(cohort):
        try:
            if len(cloud) < sample_k:
                raise ValueError(f"{len(cloud)} points is fewer than sample_k = {sample_k}")
            out.append(canonical_resample(cloud, sample_k, x_ref, y_ref))
        except (KidneyPivotError, ValueError) as exc:
            raise SubjectError(i, exc) from exc
    return out


def _finish(mean_pts, sample_k, cohort_size, x_ref, y_ref, k_normals):
    # the mean of aligned clouds is aligned up to averaging noise; snap it exactly
    mean_pts = pca_canonical_frame(mean_pts, x_ref, y_ref).frame.apply(mean_pts)
    cloud = estimate_normals(PointCloud(mean_pts), k_normals)
    return KidneyTemplate(cloud, sample_k, cohort_size)


def build_template(cohort, sample_k=2048, x_ref=DEFAULT_X_REF, y_ref=DEFAULT_Y_REF, k_normals=12) -> KidneyTemplate:
    if len(cohort) < 1:
        raise ValueError("cohort is empty")
    subjects = _prepare(cohort, sample_k, x_ref, y_ref)
    return _finish(average_corresponded(subjects), sample_k, len(cohort), x_ref, y_ref, k_normals)


def convergence_curve(cohort, sample_k=2048, x_ref=DEFAULT_X_REF, y_ref=DEFAULT_Y_REF):
    """Mean per-point change of the template as subjects are added.

    Returns ``[(n, diff), ...]`` for n = 2..N, where ``diff`` is the mean
    distance between index-matched points of the templates built from the
    first n and the first n - 1 subjects.
    """
    if len(cohort) < 2:
        raise ValueError("convergence needs at least two subjects")
    subjects = _prepare(cohort, sample_k, x_ref, y_ref)
    ref = subjects[0]
    acc = ref.copy()
    prev = pca_canonical_frame(acc, x_ref, y_ref).frame.apply(acc)
    out = []
    for n in range(2, len(subjects) + 1):
        pts = subjects[n - 1]
        acc += pts[knn_correspond(pts, ref)]
        mean = acc / n
        cur = pca_canonical_frame(mean, x_ref, y_ref).frame.apply(mean)
        out.append((n, float(np.linalg.norm(cur - prev, axis=1).mean())))
        prev = cur
    return out
