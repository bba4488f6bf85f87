"""Dense-array primitives: 2D convolution, bilinear sampling, Procrustes.

Grids are 2D float arrays indexed ``[row, col]``. Multi-channel images are
channel-first ``(C, H, W)`` arrays. 2D point sets are ``(P, 2)`` arrays of
``(x, y)`` = ``(col, row)`` in index coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ToolkitError

PADDING_MODES = ("linear", "circular")


def _check_grid(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ToolkitError("shape", f"{name} must be 2D, got shape {a.shape}")
    if a.size == 0:
        raise ToolkitError("empty", f"{name} is empty")
    if not np.all(np.isfinite(a)):
        raise ToolkitError("non-finite", f"{name} contains NaN or Inf")
    return a


def _check_conv_args(scene, kernel, padding):
    scene = _check_grid(scene, "scene")
    kernel = _check_grid(kernel, "kernel")
    if padding not in PADDING_MODES:
        raise ToolkitError("padding", f"unknown padding mode {padding!r}")
    if kernel.shape[0] > scene.shape[0] or kernel.shape[1] > scene.shape[1]:
        raise ToolkitError(
            "shape", f"kernel {kernel.shape} larger than scene {scene.shape}"
        )
    return scene, kernel


def _next_pow2(n):
    return 1 << (int(n) - 1).bit_length()


def kernel_center(kernel_shape):
    """Index of the kernel element treated as the origin (``size // 2``)."""
    return kernel_shape[0] // 2, kernel_shape[1] // 2


def embed_kernel_circular(kernel, shape):
    """Place ``kernel`` in a zero array of ``shape`` with its center at (0, 0).

    The result is the periodic kernel whose DFT is the transfer function of
    circular convolution with ``kernel``.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    out = np.zeros(shape, dtype=np.float64)
    out[: kernel.shape[0], : kernel.shape[1]] = kernel
    cy, cx = kernel_center(kernel.shape)
    return np.roll(out, (-cy, -cx), axis=(0, 1))


def fft_convolve_2d(scene, kernel, padding="linear", full=False):
    """2D convolution via FFT.

    ``linear`` zero-pads and returns the same-size central crop of the full
    linear convolution (the whole ``(H+kh-1, W+kw-1)`` result when ``full``).
    ``circular`` wraps around the scene borders.
    """
    scene, kernel = _check_conv_args(scene, kernel, padding)
    H, W = scene.shape
    kh, kw = kernel.shape
    if padding == "circular":
        tf = np.fft.rfft2(embed_kernel_circular(kernel, (H, W)))
        return np.fft.irfft2(np.fft.rfft2(scene) * tf, s=(H, W))

    fh, fw = H + kh - 1, W + kw - 1
    ph, pw = _next_pow2(fh), _next_pow2(fw)
    spec = np.fft.rfft2(scene, s=(ph, pw)) * np.fft.rfft2(kernel, s=(ph, pw))
    out = np.fft.irfft2(spec, s=(ph, pw))[:fh, :fw]
    if full:
        return out
    cy, cx = kernel_center(kernel.shape)
    return out[cy : cy + H, cx : cx + W].copy()


def naive_convolve_2d(scene, kernel, padding="linear", full=False):
    """Direct spatial-domain convolution; the reference for ``fft_convolve_2d``.

    Accumulates one shifted, weighted copy of the scene per kernel tap, which
    is the defining sum ``out[i, j] = sum_mn k[m, n] s[i - m, j - n]``.
    """
    scene, kernel = _check_conv_args(scene, kernel, padding)
    H, W = scene.shape
    kh, kw = kernel.shape
    cy, cx = kernel_center(kernel.shape)

    if padding == "circular":
        out = np.zeros((H, W))
        for m in range(kh):
            for n in range(kw):
                out += kernel[m, n] * np.roll(scene, (m - cy, n - cx), axis=(0, 1))
        return out

    full_out = np.zeros((H + kh - 1, W + kw - 1))
    for m in range(kh):
        for n in range(kw):
            full_out[m : m + H, n : n + W] += kernel[m, n] * scene
    if full:
        return full_out
    return full_out[cy : cy + H, cx : cx + W].copy()


def bilinear_sample(feature_map, points):
    """Sample a ``(C, H, W)`` map at ``(P, 2)`` index-space points ``(x, y)``.

    Returns a ``(P, C)`` array. Neighbours outside the map contribute zero, so
    samples fade to zero within one pixel of the border and are exactly zero
    beyond it.
    """
    fmap = np.asarray(feature_map, dtype=np.float64)
    if fmap.ndim == 2:
        fmap = fmap[None]
    if fmap.ndim != 3:
        raise ToolkitError("shape", f"feature map must be (C, H, W), got {fmap.shape}")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    C, H, W = fmap.shape
    if len(pts) == 0:
        return np.zeros((0, C))

    x, y = pts[:, 0], pts[:, 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    out = np.zeros((len(pts), C))
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            yi = y0 + dy
            xi = x0 + dx
            ok = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
            w = np.where(ok, wy * wx, 0.0)
            vals = fmap[:, np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1)].T
            out += w[:, None] * vals
    return out


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation


def procrustes_align(source, target, with_scale=True):
    """Closed-form similarity (or rigid) transform mapping ``source`` onto ``target``.

    Minimises ``sum ||s R x_i + t - y_i||^2`` using the SVD of the
    cross-covariance, with a sign flip on the last singular direction so that
    ``det(R) = +1``. With ``with_scale=False`` the scale is pinned to 1.
    """
    X = np.asarray(source, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ToolkitError("shape", f"point sets {X.shape} and {Y.shape} must both be (N, 3)")
    if X.shape[0] < 3:
        raise ToolkitError("shape", "need at least 3 points")

    mu_x = X.mean(axis=0)
    mu_y = Y.mean(axis=0)
    Xc = X - mu_x
    Yc = Y - mu_y
    var_x = np.sum(Xc**2)
    cov = Yc.T @ Xc

    U, S, Vt = np.linalg.svd(cov)
    # rank < 2 leaves the rotation about the common line undetermined
    if var_x <= 1e-300 or S[1] <= S[0] * 1e-12:
        raise ToolkitError("degenerate", "point sets are collinear or coincident")

    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    scale = float(np.trace(np.diag(S) @ D) / var_x) if with_scale else 1.0
    t = mu_y - scale * R @ mu_x
    return SimilarityTransform(scale, R, t)


def procrustes_residual(source, target, transform):
    """Sum of squared distances after applying ``transform`` to ``source``."""
    diff = transform.apply(source) - np.asarray(target, dtype=np.float64)
    return float(np.sum(diff**2))


def rotation_about_axis(axis, angle):
    """Rotation matrix for ``angle`` radians about unit-normalised ``axis``."""
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array(
        [[0.0, -axis[2], axis[1]], [axis[2], 0.0, -axis[0]], [-axis[1], axis[0], 0.0]]
    )
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * K @ K
