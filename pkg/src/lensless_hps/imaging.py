"""Lensless camera forward model, measurement preprocessing and Wiener deconvolution."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ToolkitError
from .numerics import embed_kernel_circular, fft_convolve_2d

log = logging.getLogger(__name__)

NETWORK_INPUT_SIZE = 224
PSF_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Psf:
    grid: np.ndarray
    normalized: bool = True

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=np.float64)
        if g.ndim != 2 or g.size == 0:
            raise ToolkitError("shape", f"PSF must be a non-empty 2D grid, got {g.shape}")
        if np.any(g < 0) or not np.all(np.isfinite(g)):
            raise ToolkitError("psf-negative", "PSF values must be finite and >= 0")
        object.__setattr__(self, "grid", g)

    @property
    def is_normalized(self):
        return abs(float(self.grid.sum()) - 1.0) <= PSF_SUM_TOL


@dataclass(frozen=True)
class NoiseSpec:
    gaussian_sigma: float = 0.0
    seed: int = 0


@dataclass
class Measurement:
    image: np.ndarray
    provenance: str = "captured"
    noise_sigma: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ToolkitError("shape", f"measurement must be (3, H, W), got {img.shape}")
        if np.any(img < 0):
            raise ToolkitError("negative", "measurement intensities must be >= 0")
        self.image = img


def normalize_psf(raw):
    """Clip negatives to zero and rescale to unit mass."""
    g = np.asarray(raw, dtype=np.float64)
    g = np.clip(g, 0.0, None)
    total = g.sum()
    if not total > 0:
        raise ToolkitError("empty-psf", "PSF has no positive mass")
    return Psf(g / total, normalized=True)


def _require_normalized(psf):
    if not psf.is_normalized:
        raise ToolkitError(
            "psf-not-normalized", f"PSF sums to {psf.grid.sum():.12g}, expected 1"
        )


def convolve_image(image, kernel, padding="linear"):
    """Convolve every channel of a ``(C, H, W)`` image with one 2D kernel."""
    return np.stack([fft_convolve_2d(ch, kernel, padding) for ch in image])


def simulate_measurement(scene, psf, noise=None, padding="linear"):
    """Simulate the sensor capture ``b = p * i`` of a 3-channel scene.

    Seeded Gaussian read noise is added after convolution, then intensities
    are clipped at zero.
    """
    scene = np.asarray(scene, dtype=np.float64)
    if scene.ndim != 3 or scene.shape[0] != 3:
        raise ToolkitError("shape", f"scene must be (3, H, W), got {scene.shape}")
    _require_normalized(psf)
    noise = noise or NoiseSpec()
    if not np.isfinite(noise.gaussian_sigma) or noise.gaussian_sigma < 0:
        raise ToolkitError("noise", "noise sigma must be finite and >= 0")

    b = convolve_image(scene, psf.grid, padding)
    if noise.gaussian_sigma > 0:
        rng = np.random.default_rng(noise.seed)
        b = b + rng.normal(0.0, noise.gaussian_sigma, size=b.shape)
    b = np.clip(b, 0.0, None)
    return Measurement(
        b,
        provenance="simulated",
        noise_sigma=float(noise.gaussian_sigma),
        metadata={"padding": padding, "max_intensity": float(b.max())},
    )


def _area_weights(n_in, n_out):
    """Row-stochastic ``(n_out, n_in)`` matrix of exact box-filter overlaps."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    W = np.zeros((n_out, n_in))
    for o in range(n_out):
        lo, hi = edges[o], edges[o + 1]
        first = int(np.floor(lo))
        last = min(int(np.ceil(hi)), n_in)
        for i in range(first, last):
            W[o, i] = min(hi, i + 1) - max(lo, i)
    return W / W.sum(axis=1, keepdims=True)


def area_resize(image, size):
    """Area-average resize of a ``(C, H, W)`` image to ``size`` x ``size``."""
    C, H, W = image.shape
    wy = _area_weights(H, size)
    wx = _area_weights(W, size)
    return wy @ image @ wx.T


def preprocess_measurement(raw, size=NETWORK_INPUT_SIZE):
    """Center-crop the largest square and area-resize to ``size`` x ``size``."""
    img = raw.image
    _, H, W = img.shape
    if H < size or W < size:
        raise ToolkitError("too-small", f"measurement {H}x{W} smaller than {size}x{size}")
    side = min(H, W)
    top = (H - side) // 2
    left = (W - side) // 2
    crop = img[:, top : top + side, left : left + side]
    out = crop.copy() if side == size else area_resize(crop, size)
    meta = dict(raw.metadata)
    meta["preprocess"] = {"crop": [top, left, side], "resize": size}
    return Measurement(np.clip(out, 0.0, None), raw.provenance, raw.noise_sigma, meta)


def wiener_reconstruct(m, psf, snr_param, padding="circular"):
    """Per-channel Wiener deconvolution ``B conj(P) / (|P|^2 + 1/snr)``.

    The PSF is embedded periodically at measurement size, so the filter is the
    exact inverse model for circularly simulated measurements. Output is
    clipped to [0, 1].
    """
    if not snr_param > 0:
        raise ToolkitError("snr", "snr_param must be > 0")
    if not np.any(psf.grid > 0):
        raise ToolkitError("degenerate-psf", "PSF is identically zero")
    _require_normalized(psf)
    img = m.image if isinstance(m, Measurement) else np.asarray(m, dtype=np.float64)
    _, H, W = img.shape
    if psf.grid.shape[0] > H or psf.grid.shape[1] > W:
        raise ToolkitError("shape", f"PSF {psf.grid.shape} larger than measurement {H}x{W}")

    P = np.fft.rfft2(embed_kernel_circular(psf.grid, (H, W)))
    filt = np.conj(P) / (np.abs(P) ** 2 + 1.0 / snr_param)
    out = np.stack([np.fft.irfft2(np.fft.rfft2(ch) * filt, s=(H, W)) for ch in img])
    if padding != "circular":
        log.debug("Wiener filter assumes periodic boundaries; %s input will ring", padding)
    return np.clip(out, 0.0, 1.0)


def psnr(estimate, reference, peak=1.0):
    mse = float(np.mean((np.asarray(estimate) - np.asarray(reference)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(peak**2 / mse)


def make_toy_psf(shape, seed=0, n_dots=40):
    """Sparse caustic-like PSF: a handful of random bright dots, unit mass."""
    rng = np.random.default_rng(seed)
    g = np.zeros(shape)
    rows = rng.integers(0, shape[0], n_dots)
    cols = rng.integers(0, shape[1], n_dots)
    np.add.at(g, (rows, cols), rng.uniform(0.2, 1.0, n_dots))
    return normalize_psf(g)


def delta_psf(shape):
    g = np.zeros(shape)
    g[shape[0] // 2, shape[1] // 2] = 1.0
    return Psf(g)


def load_png(path):
    """Read an 8-bit image as a ``(3, H, W)`` float array in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1).copy()


def save_png(path, image):
    from PIL import Image

    arr = np.clip(np.asarray(image).transpose(1, 2, 0), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8)).save(path)
