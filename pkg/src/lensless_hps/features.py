"""Feature pyramid contract, mesh-aligned point features and iterative regression.

A decoder maps a preprocessed ``(3, 224, 224)`` measurement to four feature
maps at 7, 14, 28 and 56 pixels square. Level 0 seeds the initial parameter
estimate; levels 1..3 are sampled at the projected, downsampled mesh of the
previous estimate and fed to one regressor per iteration, each predicting an
additive parameter residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import container
from .bodymodel import (
    MM_PER_UNIT,
    BodyParams,
    Camera,
    body_forward,
    canonicalize_axis_angle,
    downsample_vertices,
    normalized_to_pixels,
    project_weak_perspective,
)
from .errors import ToolkitError
from .imaging import NETWORK_INPUT_SIZE, Measurement
from .numerics import bilinear_sample

PYRAMID_SIZES = (7, 14, 28, 56)
DEFAULT_CHANNELS = (32, 32, 16, 8)
DEFAULT_REDUCER_WIDTH = 5
NUM_ITERATIONS = 3
MIN_CAMERA_SCALE = 1e-3


@dataclass(frozen=True)
class FeaturePyramid:
    levels: tuple

    def __post_init__(self):
        levels = tuple(np.asarray(l, dtype=np.float64) for l in self.levels)
        object.__setattr__(self, "levels", levels)
        if len(levels) != len(PYRAMID_SIZES):
            raise ToolkitError("shape", f"pyramid needs {len(PYRAMID_SIZES)} levels, got {len(levels)}")
        for t, (lvl, size) in enumerate(zip(levels, PYRAMID_SIZES)):
            if lvl.ndim != 3 or lvl.shape[1:] != (size, size) or lvl.shape[0] < 1:
                raise ToolkitError("shape", f"level {t} has shape {lvl.shape}, expected (C, {size}, {size})")

    def __getitem__(self, t):
        return self.levels[t]

    def __len__(self):
        return len(self.levels)


class FeatureDecoder(Protocol):
    name: str

    def __call__(self, image: np.ndarray) -> FeaturePyramid: ...

    def digest(self) -> str: ...


def _strided_conv(x, w):
    """Non-overlapping ``s x s`` convolution with stride ``s``; ``w`` is (O, C, s, s)."""
    C, H, W = x.shape
    s = w.shape[-1]
    xr = x.reshape(C, H // s, s, W // s, s).transpose(0, 2, 4, 1, 3)
    return np.tensordot(w, xr, axes=([1, 2, 3], [0, 1, 2]))


def _upsample_nearest(x, factor=2):
    return x.repeat(factor, axis=1).repeat(factor, axis=2)


class ToyDecoder:
    """Fixed-seed, bias-free linear stand-in for a trained multi-scale decoder.

    Strided convolutions build a 56 -> 28 -> 14 -> 7 bottom-up path. The
    7x7 level also receives a projection of the whole-image channel means,
    and a top-down nearest-neighbour pass folds each coarser level into the
    next finer one, so every output value depends on the full input extent.
    """

    name = "toy-decoder"
    KEYS = ("stem", "down2", "down1", "down0", "glob", "fuse1", "fuse2", "fuse3")

    def __init__(self, params):
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in self.KEYS}
        for arr in self.params.values():
            arr.setflags(write=False)

    @classmethod
    def create(cls, seed=0, channels=DEFAULT_CHANNELS):
        rng = np.random.default_rng(seed)
        c0, c1, c2, c3 = channels

        def init(*shape):
            fan_in = int(np.prod(shape[1:]))
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

        return cls(
            {
                "stem": init(c3, 3, 4, 4),
                "down2": init(c2, c3, 2, 2),
                "down1": init(c1, c2, 2, 2),
                "down0": init(c0, c1, 2, 2),
                "glob": init(c0, 3),
                "fuse1": init(c1, c0),
                "fuse2": init(c2, c1),
                "fuse3": init(c3, c2),
            }
        )

    @property
    def channels(self):
        p = self.params
        return (p["down0"].shape[0], p["down1"].shape[0], p["down2"].shape[0], p["stem"].shape[0])

    def __call__(self, image):
        p = self.params
        x3 = _strided_conv(image, p["stem"])
        x2 = _strided_conv(x3, p["down2"])
        x1 = _strided_conv(x2, p["down1"])
        x0 = _strided_conv(x1, p["down0"])
        x0 = x0 + (p["glob"] @ image.mean(axis=(1, 2)))[:, None, None]
        y1 = x1 + np.tensordot(p["fuse1"], _upsample_nearest(x0), axes=1)
        y2 = x2 + np.tensordot(p["fuse2"], _upsample_nearest(y1), axes=1)
        y3 = x3 + np.tensordot(p["fuse3"], _upsample_nearest(y2), axes=1)
        return FeaturePyramid((x0, y1, y2, y3))

    def to_arrays(self):
        return {"kind": np.array([0]), **{f"decoder/{k}": v for k, v in self.params.items()}}

    @classmethod
    def from_arrays(cls, arrays):
        return cls({k: arrays[f"decoder/{k}"] for k in cls.KEYS})

    def digest(self):
        return container.digest_arrays(self.to_arrays())


def decode_features(m, decoder):
    """Run ``decoder`` on a preprocessed measurement and enforce the pyramid contract."""
    image = m.image if isinstance(m, Measurement) else np.asarray(m, dtype=np.float64)
    expected = (3, NETWORK_INPUT_SIZE, NETWORK_INPUT_SIZE)
    if image.shape != expected:
        raise ToolkitError("shape", f"decoder input must be {expected}, got {image.shape}")
    pyramid = decoder(image)
    if not isinstance(pyramid, FeaturePyramid):
        pyramid = FeaturePyramid(tuple(pyramid))
    return pyramid


def dump_pyramid(pyramid, out_dir):
    """Write one container per level (``level_<t>.lhps`` with entry ``features``)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, lvl in enumerate(pyramid.levels):
        path = out_dir / f"level_{t}.lhps"
        container.save(path, {"features": lvl})
        paths.append(path)
    return paths


class ReducerMlp:
    """Per-level affine map from a sampled channel vector to width ``d``."""

    def __init__(self, weights, biases=None):
        self.weights = {int(t): np.asarray(w, dtype=np.float64) for t, w in weights.items()}
        widths = {w.shape[0] for w in self.weights.values()}
        if len(widths) != 1:
            raise ToolkitError("shape", f"reducer output widths differ across levels: {widths}")
        self.width = widths.pop()
        self.biases = {
            t: np.asarray(biases[t], dtype=np.float64) if biases and t in biases else np.zeros(self.width)
            for t in self.weights
        }

    @classmethod
    def create(cls, seed=0, channels=DEFAULT_CHANNELS, width=DEFAULT_REDUCER_WIDTH):
        rng = np.random.default_rng(seed)
        weights = {
            t: rng.normal(0.0, 1.0 / np.sqrt(channels[t]), size=(width, channels[t]))
            for t in range(1, len(channels))
        }
        return cls(weights)

    @classmethod
    def identity(cls, num_channels, levels=(1, 2, 3)):
        return cls({t: np.eye(num_channels) for t in levels})

    def __call__(self, level, feats):
        if level not in self.weights:
            raise ToolkitError("level", f"reducer has no weights for level {level}")
        return feats @ self.weights[level].T + self.biases[level]

    def to_arrays(self):
        out = {}
        for t in sorted(self.weights):
            out[f"reducer/{t}/weight"] = self.weights[t]
            out[f"reducer/{t}/bias"] = self.biases[t]
        return out

    @classmethod
    def from_arrays(cls, arrays):
        levels = sorted({int(k.split("/")[1]) for k in arrays if k.startswith("reducer/")})
        return cls(
            {t: arrays[f"reducer/{t}/weight"] for t in levels},
            {t: arrays[f"reducer/{t}/bias"] for t in levels},
        )


def level_sample_coords(points3d, camera, level_size, unit=MM_PER_UNIT):
    """Index-space ``(x, y)`` coordinates of 3D points on a ``level_size`` map."""
    norm = project_weak_perspective(points3d, camera, unit)
    return normalized_to_pixels(norm, level_size) - 0.5


def extract_pointwise(level_map, points3d, camera, reducer, level, unit=MM_PER_UNIT):
    """Bilinearly sample ``level_map`` at projected points, reduce, concatenate.

    Output length is ``len(points3d) * reducer.width``, blocks in point order.
    """
    if level not in (1, 2, 3):
        raise ToolkitError("level", f"point-wise features use levels 1..3, got {level}")
    pts = np.asarray(points3d, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ToolkitError("no-points", "sample point set is empty")
    level_map = np.asarray(level_map, dtype=np.float64)
    coords = level_sample_coords(pts, camera, level_map.shape[-1], unit)
    return reducer(level, bilinear_sample(level_map, coords)).ravel()


class Regressor(Protocol):
    def __call__(self, theta: np.ndarray, features: np.ndarray) -> np.ndarray: ...


class ZeroRegressor:
    def __call__(self, theta, features):
        return np.zeros_like(theta)

    def to_arrays(self):
        return {"kind": np.array([1])}


class ConstantRegressor:
    def __init__(self, residual):
        self.residual = np.asarray(residual, dtype=np.float64)

    def __call__(self, theta, features):
        return self.residual.copy()

    def to_arrays(self):
        return {"kind": np.array([2]), "residual": self.residual}


def residual_bounds(num_joints=24, num_betas=10):
    """Per-entry magnitude caps of the toy regressor output."""
    return np.concatenate(
        [np.full(num_joints * 3, 0.02), np.full(num_betas, 0.05), [0.01, 0.01, 0.01]]
    )


class ToyRegressor:
    """Two-layer tanh MLP on ``[theta, features]`` with a bounded output.

    ``residual = bounds * tanh(W2 tanh(W1 x + b1) + b2)``
    """

    def __init__(self, w1, b1, w2, b2, bounds):
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.bounds = np.asarray(bounds, dtype=np.float64)

    @classmethod
    def create(cls, n_params, n_features, seed=0, hidden=64, bounds=None):
        rng = np.random.default_rng(seed)
        n_in = n_params + n_features
        return cls(
            rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(hidden, n_in)),
            np.zeros(hidden),
            rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(n_params, hidden)),
            np.zeros(n_params),
            residual_bounds() if bounds is None else bounds,
        )

    def __call__(self, theta, features):
        x = np.concatenate([theta, features])
        if x.shape[0] != self.w1.shape[1]:
            raise ToolkitError(
                "shape", f"regressor expects {self.w1.shape[1]} inputs, got {x.shape[0]}"
            )
        h = np.tanh(self.w1 @ x + self.b1)
        return self.bounds * np.tanh(self.w2 @ h + self.b2)

    def to_arrays(self):
        return {
            "kind": np.array([3]),
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
            "bounds": self.bounds,
        }


def regressor_from_arrays(arrays):
    kind = int(np.asarray(arrays["kind"]).ravel()[0])
    if kind == 1:
        return ZeroRegressor()
    if kind == 2:
        return ConstantRegressor(arrays["residual"])
    if kind == 3:
        return ToyRegressor(arrays["w1"], arrays["b1"], arrays["w2"], arrays["b2"], arrays["bounds"])
    raise ToolkitError("format", f"unknown regressor kind {kind}")


def regress_iteration(theta, features, reg):
    """``theta + reg(theta, features)`` with the camera scale kept positive."""
    vec = theta.to_vector()
    features = np.asarray(features, dtype=np.float64).ravel()
    if not (np.all(np.isfinite(vec)) and np.all(np.isfinite(features))):
        raise ToolkitError("non-finite", "regressor inputs must be finite")
    residual = np.asarray(reg(vec, features), dtype=np.float64)
    if residual.shape != vec.shape:
        raise ToolkitError("shape", f"residual shape {residual.shape} != parameter shape {vec.shape}")
    new = BodyParams.from_vector(vec + residual, theta.pose.shape[0])
    cam = new.camera
    return BodyParams(
        canonicalize_axis_angle(new.pose),
        new.betas,
        Camera(max(cam.scale, MIN_CAMERA_SCALE), cam.tx, cam.ty),
    )


@dataclass
class RegressionTrace:
    thetas: list = field(default_factory=list)
    meshes: list = field(default_factory=list)
    sample_points: list = field(default_factory=list)

    @property
    def final(self):
        return self.thetas[-1]


def initial_features(pyramid):
    """Global average pool of the 7x7 level."""
    return pyramid[0].mean(axis=(1, 2))


def run_regression_loop(pyramid, model, regressors: Sequence, reducer, init=None):
    """Initial estimate from level 0, then one mesh-aligned refinement per level 1..3.

    ``meshes[t]`` is the mesh of ``thetas[t]`` whose downsampled vertices were
    sampled for the step producing ``thetas[t + 1]``.
    """
    if len(regressors) != NUM_ITERATIONS + 1:
        raise ToolkitError("shape", f"need {NUM_ITERATIONS + 1} regressors, got {len(regressors)}")
    theta = init if init is not None else BodyParams.neutral(model.num_joints)
    trace = RegressionTrace()
    theta = regress_iteration(theta, initial_features(pyramid), regressors[0])
    trace.thetas.append(theta)
    for t in range(1, NUM_ITERATIONS + 1):
        mesh, _, _ = body_forward(model, theta)
        points = downsample_vertices(mesh, model)
        feats = extract_pointwise(pyramid[t], points, theta.camera, reducer, t)
        theta = regress_iteration(theta, feats, regressors[t])
        trace.meshes.append(mesh)
        trace.sample_points.append(points)
        trace.thetas.append(theta)
    return trace


def make_toy_regressors(model, reducer, seed=0, channels=DEFAULT_CHANNELS):
    n_params = model.num_joints * 3 + 10 + 3
    n_points = model.downsample.shape[0]
    sizes = [channels[0]] + [n_points * reducer.width] * NUM_ITERATIONS
    return [ToyRegressor.create(n_params, n, seed=seed + 1 + t) for t, n in enumerate(sizes)]
