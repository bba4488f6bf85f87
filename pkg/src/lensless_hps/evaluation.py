"""MPJPE, PA-MPJPE and PVE, plus a Table-style report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ToolkitError
from .numerics import procrustes_align

METRIC_COLUMNS = (("mpjpe_mm", "MPJPE"), ("pa_mpjpe_mm", "PA-MPJPE"), ("pve_mm", "PVE"))


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ToolkitError("shape", f"point sets {pred.shape} and {gt.shape} must both be (N, 3)")
    return pred, gt


def _root(points, pelvis_index):
    """Pelvis position; a sequence of indices means their midpoint (e.g. two hips)."""
    idx = np.atleast_1d(np.asarray(pelvis_index, dtype=np.int64))
    if idx.min() < -len(points) or idx.max() >= len(points):
        raise ToolkitError("shape", f"pelvis index {pelvis_index} out of range")
    return points[idx].mean(axis=0)


def mean_distance(a, b):
    return float(np.mean(np.linalg.norm(a - b, axis=1)))


def mpjpe(pred, gt, pelvis_index=0):
    """Mean joint distance after moving each set's pelvis to the origin."""
    pred, gt = _pair(pred, gt)
    return mean_distance(pred - _root(pred, pelvis_index), gt - _root(gt, pelvis_index))


def pa_mpjpe(pred, gt, with_scale=True, pelvis_index=None):
    """Mean joint distance after Procrustes-aligning ``pred`` onto ``gt``.

    Pelvis centering beforehand is accepted for symmetry with :func:`mpjpe`;
    the alignment absorbs any translation, so the result does not change.
    """
    pred, gt = _pair(pred, gt)
    if len(pred) < 3:
        raise ToolkitError("shape", "PA-MPJPE needs at least 3 joints")
    if pelvis_index is not None:
        pred = pred - _root(pred, pelvis_index)
        gt = gt - _root(gt, pelvis_index)
    tf = procrustes_align(pred, gt, with_scale=with_scale)
    return mean_distance(tf.apply(pred), gt)


def pve(pred_vertices, gt_vertices):
    """Mean per-vertex distance, no alignment."""
    pred, gt = _pair(pred_vertices, gt_vertices)
    return mean_distance(pred, gt)


@dataclass
class MetricReport:
    mpjpe_mm: float
    pa_mpjpe_mm: float
    pve_mm: float
    per_sample: list = field(default_factory=list)
    count: int = 0
    pa_pelvis_centered_mm: float | None = None

    @classmethod
    def from_samples(cls, samples):
        """Aggregate a list of per-sample metric dicts by plain means."""
        if not samples:
            raise ToolkitError("empty", "no samples to aggregate")
        agg = {key: float(np.mean([s[key] for s in samples])) for key, _ in METRIC_COLUMNS}
        centered = [s["pa_pelvis_centered_mm"] for s in samples if "pa_pelvis_centered_mm" in s]
        return cls(
            **agg,
            per_sample=list(samples),
            count=len(samples),
            pa_pelvis_centered_mm=float(np.mean(centered)) if centered else None,
        )

    def values(self):
        return [getattr(self, key) for key, _ in METRIC_COLUMNS]

    def format_table(self, method="prediction"):
        """Aligned text table with the columns ``MPJPE | PA-MPJPE | PVE`` (mm, 2 dp)."""
        headers = [f"{label} ↓" for _, label in METRIC_COLUMNS]
        cells = [f"{v:.2f}" for v in self.values()]
        widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
        mwidth = max(len("Method"), len(method))
        head = f"{'Method':<{mwidth}} | " + " ".join(h.rjust(w) for h, w in zip(headers, widths))
        row = f"{method:<{mwidth}} | " + " ".join(c.rjust(w) for c, w in zip(cells, widths))
        return "\n".join([head, "-" * len(head), row])

    def format_kv(self):
        lines = [f"{key}={val:.2f}" for (key, _), val in zip(METRIC_COLUMNS, self.values())]
        lines.append(f"count={self.count}")
        lines.append("pa_mpjpe_primary=uncentered")
        if self.pa_pelvis_centered_mm is not None:
            lines.append(f"pa_mpjpe_pelvis_centered_mm={self.pa_pelvis_centered_mm:.2f}")
        return "\n".join(lines)


def evaluate_sample(pred_joints, gt_joints, pred_vertices, gt_vertices, pelvis_index=0, with_scale=True):
    return {
        "mpjpe_mm": mpjpe(pred_joints, gt_joints, pelvis_index),
        "pa_mpjpe_mm": pa_mpjpe(pred_joints, gt_joints, with_scale),
        "pve_mm": pve(pred_vertices, gt_vertices),
        "pa_pelvis_centered_mm": pa_mpjpe(pred_joints, gt_joints, with_scale, pelvis_index),
    }
