"""Training losses with analytic gradients, plus target generation.

All losses are mean-reduced and return a :class:`LossResult` that unpacks as
``value, grads``. Gradients are taken with respect to the prediction arrays
only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .bodymodel import MM_PER_UNIT, normalized_to_pixels, project_weak_perspective
from .errors import ToolkitError

log = logging.getLogger(__name__)

DEFAULT_SPLIT = 2
DEFAULT_SIGMA = 6.0
DEFAULT_NUM_PARTS = 24


@dataclass(frozen=True)
class LossWeights:
    lambda_2d: float = 1.0
    lambda_3d: float = 1.0
    lambda_para: float = 1.0
    lambda_xy: float = 1.0
    lambda_pi: float = 1.0
    lambda_uv: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ToolkitError("weights", f"{f.name} must be finite and >= 0, got {v}")

    def scaled(self, c):
        return LossWeights(**{f.name: getattr(self, f.name) * c for f in fields(self)})

    @classmethod
    def from_text(cls, text):
        """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
        known = {f.name for f in fields(cls)}
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ToolkitError("config", f"line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ToolkitError("config", f"line {lineno}: unknown loss weight {key!r}")
            values[key] = float(val)
        return cls(**values)

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())


@dataclass
class LossResult:
    value: float
    grads: dict
    flags: tuple = ()
    terms: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.value
        yield self.grads

    def __float__(self):
        return float(self.value)


# -- SimCC ---------------------------------------------------------------------


@dataclass(frozen=True)
class SimccTarget:
    x: np.ndarray  # (N, k * width)
    y: np.ndarray  # (N, k * height)
    visible: np.ndarray  # (N,) bool
    k: int
    sigma: float


def _axis_encode(coords, n_bins, k, sigma):
    mu = k * coords
    bins = np.arange(n_bins, dtype=np.float64)
    if sigma <= 0:
        out = np.zeros((len(coords), n_bins))
        idx = np.clip(np.floor(mu + 0.5).astype(np.int64), 0, n_bins - 1)
        out[np.arange(len(coords)), idx] = 1.0
        return out
    out = np.exp(-((bins[None, :] - mu[:, None]) ** 2) / (2.0 * sigma**2))
    return out / out.sum(axis=1, keepdims=True)


def simcc_encode(kp2d, width, height, k=DEFAULT_SPLIT, sigma=DEFAULT_SIGMA):
    """Per-axis discretised Gaussian labels over ``k * size`` sub-pixel bins.

    Bin ``i`` stands for coordinate ``i / k``. Keypoints outside
    ``[0, size - 1/k]`` on either axis are marked invisible and get uniform
    labels so every vector is still a distribution.
    """
    if width <= 0 or height <= 0:
        raise ToolkitError("shape", f"image dims must be positive, got {width}x{height}")
    if k < 1:
        raise ToolkitError("shape", f"split factor must be >= 1, got {k}")
    kp = np.asarray(kp2d, dtype=np.float64).reshape(-1, 2)
    nx, ny = k * width, k * height
    x, y = kp[:, 0], kp[:, 1]
    visible = (
        np.isfinite(x) & np.isfinite(y)
        & (k * x >= 0) & (k * x <= nx - 1)
        & (k * y >= 0) & (k * y <= ny - 1)
    )
    tx = np.full((len(kp), nx), 1.0 / nx)
    ty = np.full((len(kp), ny), 1.0 / ny)
    if visible.any():
        tx[visible] = _axis_encode(x[visible], nx, k, sigma)
        ty[visible] = _axis_encode(y[visible], ny, k, sigma)
    return SimccTarget(tx, ty, visible, int(k), float(sigma))


def simcc_decode(x_vectors, y_vectors, k=DEFAULT_SPLIT):
    """Argmax bin / k per axis; ties go to the lowest bin."""
    xv = np.atleast_2d(np.asarray(x_vectors, dtype=np.float64))
    yv = np.atleast_2d(np.asarray(y_vectors, dtype=np.float64))
    if xv.size == 0 or yv.size == 0 or xv.shape[0] != yv.shape[0]:
        raise ToolkitError("shape", f"bad SimCC vectors {xv.shape} / {yv.shape}")
    return np.stack([np.argmax(xv, axis=1) / k, np.argmax(yv, axis=1) / k], axis=1)


def _log_softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _kl_rows(target, log_q):
    """Row-wise ``KL(target || q)`` with ``0 log 0 = 0``."""
    pos = target > 0
    t_log_t = np.where(pos, target * np.log(np.where(pos, target, 1.0)), 0.0)
    return (t_log_t - target * log_q).sum(axis=1)


def loss_simcc(pred_x, pred_y, target, w):
    """``lambda_xy * mean_visible [KL(t_x || softmax(pred_x)) + KL(t_y || softmax(pred_y))]``."""
    pred_x = np.asarray(pred_x, dtype=np.float64)
    pred_y = np.asarray(pred_y, dtype=np.float64)
    if pred_x.shape != target.x.shape or pred_y.shape != target.y.shape:
        raise ToolkitError("shape", "SimCC prediction and target shapes differ")
    gx = np.zeros_like(pred_x)
    gy = np.zeros_like(pred_y)
    vis = target.visible
    n = int(vis.sum())
    if n == 0:
        log.warning("SimCC loss: no visible keypoints")
        return LossResult(0.0, {"x": gx, "y": gy}, ("no-visible-keypoints",))

    lqx = _log_softmax(pred_x[vis], 1)
    lqy = _log_softmax(pred_y[vis], 1)
    kl_x = _kl_rows(target.x[vis], lqx)
    kl_y = _kl_rows(target.y[vis], lqy)
    value = w.lambda_xy * float(kl_x.sum() + kl_y.sum()) / n
    gx[vis] = w.lambda_xy * (np.exp(lqx) - target.x[vis]) / n
    gy[vis] = w.lambda_xy * (np.exp(lqy) - target.y[vis]) / n
    return LossResult(value, {"x": gx, "y": gy})


# -- IUV -----------------------------------------------------------------------


@dataclass(frozen=True)
class IuvMap:
    part_index: np.ndarray  # (H, W) int, 0 = background
    u: np.ndarray
    v: np.ndarray

    @property
    def foreground(self):
        return self.part_index > 0


@dataclass(frozen=True)
class IuvPrediction:
    part_logits: np.ndarray  # (P + 1, H, W)
    u: np.ndarray
    v: np.ndarray


def smooth_l1(d):
    a = np.abs(d)
    return np.where(a < 1.0, 0.5 * d * d, a - 0.5)


def smooth_l1_grad(d):
    return np.clip(d, -1.0, 1.0)


def loss_iuv(pred, gt, w):
    """Part cross-entropy over all pixels plus smooth-L1 on U and V over foreground."""
    logits = np.asarray(pred.part_logits, dtype=np.float64)
    parts = np.asarray(gt.part_index, dtype=np.int64)
    n_cls, H, W = logits.shape
    if parts.shape != (H, W) or pred.u.shape != (H, W) or pred.v.shape != (H, W) \
            or gt.u.shape != (H, W) or gt.v.shape != (H, W):
        raise ToolkitError("shape", "IUV prediction and ground truth dims differ")
    if parts.min() < 0 or parts.max() >= n_cls:
        raise ToolkitError("shape", f"part index outside [0, {n_cls - 1}]")

    npix = H * W
    logp = _log_softmax(logits, 0)
    rows, cols = np.indices((H, W))
    ce = -float(logp[parts, rows, cols].sum()) / npix
    g_logits = np.exp(logp)
    g_logits[parts, rows, cols] -= 1.0
    g_logits *= w.lambda_pi / npix

    fg = parts > 0
    n_fg = int(fg.sum())
    g_u = np.zeros((H, W))
    g_v = np.zeros((H, W))
    flags = ()
    su = sv = 0.0
    if n_fg == 0:
        flags = ("no-foreground",)
        log.warning("IUV loss: no foreground pixels, UV terms are zero")
    else:
        du = np.asarray(pred.u, dtype=np.float64) - gt.u
        dv = np.asarray(pred.v, dtype=np.float64) - gt.v
        su = float(smooth_l1(du[fg]).sum()) / n_fg
        sv = float(smooth_l1(dv[fg]).sum()) / n_fg
        g_u[fg] = w.lambda_uv * smooth_l1_grad(du[fg]) / n_fg
        g_v[fg] = w.lambda_uv * smooth_l1_grad(dv[fg]) / n_fg

    value = w.lambda_pi * ce + w.lambda_uv * (su + sv)
    return LossResult(
        value,
        {"part_logits": g_logits, "u": g_u, "v": g_v},
        flags,
        {"cross_entropy": ce, "smooth_l1_u": su, "smooth_l1_v": sv},
    )


def rasterize_iuv(vertices, faces, camera, uv_table, height, width, unit=MM_PER_UNIT):
    """Z-buffered IUV rendering of a posed mesh under the weak-perspective camera.

    Pixels are sampled at their centres. Larger model-space ``z`` is nearer
    to the camera. U and V are interpolated barycentrically; the part index
    is taken from the vertex with the largest barycentric weight.
    """
    verts = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    uv_table = np.asarray(uv_table, dtype=np.float64)
    if len(faces) == 0:
        raise ToolkitError("shape", "mesh has no faces")
    if uv_table.shape != (len(verts), 3):
        raise ToolkitError("shape", "uv_table must have one (part, u, v) row per vertex")

    px = normalized_to_pixels(project_weak_perspective(verts, camera, unit), 1.0)
    px = px * np.array([width, height])
    depth = verts[:, 2]

    zbuf = np.full((height, width), -np.inf)
    part = np.zeros((height, width), dtype=np.int64)
    u_map = np.zeros((height, width))
    v_map = np.zeros((height, width))

    for f in faces:
        p = px[f]
        area = (p[1, 0] - p[0, 0]) * (p[2, 1] - p[0, 1]) - (p[2, 0] - p[0, 0]) * (p[1, 1] - p[0, 1])
        if abs(area) < 1e-12:
            continue
        c0 = max(int(np.ceil(p[:, 0].min() - 0.5)), 0)
        c1 = min(int(np.floor(p[:, 0].max() - 0.5)), width - 1)
        r0 = max(int(np.ceil(p[:, 1].min() - 0.5)), 0)
        r1 = min(int(np.floor(p[:, 1].max() - 0.5)), height - 1)
        if c0 > c1 or r0 > r1:
            continue
        rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
        sx = cc + 0.5
        sy = rr + 0.5
        w0 = ((p[1, 0] - sx) * (p[2, 1] - sy) - (p[2, 0] - sx) * (p[1, 1] - sy)) / area
        w1 = ((p[2, 0] - sx) * (p[0, 1] - sy) - (p[0, 0] - sx) * (p[2, 1] - sy)) / area
        w2 = 1.0 - w0 - w1
        bary = np.stack([w0, w1, w2])
        inside = np.all(bary >= -1e-12, axis=0)
        z = np.tensordot(depth[f], bary, axes=1)
        win = inside & (z > zbuf[rr, cc])
        if not win.any():
            continue
        r, c = rr[win], cc[win]
        b = np.clip(bary[:, win], 0.0, 1.0)
        b /= b.sum(axis=0)
        zbuf[r, c] = z[win]
        u_map[r, c] = uv_table[f, 1] @ b
        v_map[r, c] = uv_table[f, 2] @ b
        part[r, c] = uv_table[f, 0][np.argmax(b, axis=0)].astype(np.int64)

    return IuvMap(part, u_map, v_map)


# -- regressor loss ------------------------------------------------------------


def loss_regressor(pred_theta, pred_k2d, pred_j3d, gt_theta=None, gt_k2d=None, gt_j3d=None, w=None):
    """``l2d * mse(K) + l3d * mse(J) + lpara * mse(Theta)``; a missing target drops its term."""
    w = w or LossWeights()
    items = (
        ("theta", pred_theta, gt_theta, w.lambda_para),
        ("k2d", pred_k2d, gt_k2d, w.lambda_2d),
        ("j3d", pred_j3d, gt_j3d, w.lambda_3d),
    )
    value = 0.0
    grads = {}
    terms = {}
    for name, pred, gt, lam in items:
        pred = np.asarray(pred, dtype=np.float64)
        if gt is None:
            grads[name] = np.zeros_like(pred)
            terms[name] = 0.0
            continue
        gt = np.asarray(gt, dtype=np.float64)
        if pred.shape != gt.shape:
            raise ToolkitError("shape", f"{name}: prediction {pred.shape} vs target {gt.shape}")
        diff = pred - gt
        n = max(diff.size, 1)
        term = float(np.sum(diff**2)) / n
        terms[name] = term
        value += lam * term
        grads[name] = 2.0 * lam * diff / n
    flags = ("no-targets",) if all(gt is None for _, _, gt, _ in items) else ()
    return LossResult(value, grads, flags, terms)


def loss_total(*parts):
    """Plain sum of the regressor, keypoint and dense-correspondence losses."""
    return float(sum(float(p) for p in parts))
