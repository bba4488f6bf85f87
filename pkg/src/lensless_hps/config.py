"""Plain-text ``key = value`` pipeline configuration."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ToolkitError
from .numerics import PADDING_MODES
from .supervision import DEFAULT_SIGMA, DEFAULT_SPLIT, LossWeights

PATH_KEYS = ("psf", "body_model", "decoder", "reducer", "loss_weights")
REGRESSOR_KEYS = tuple(f"regressor_{t}" for t in range(4))
SCALAR_KEYS = ("simcc_k", "simcc_sigma", "padding", "seed", "snr", "pelvis")


@dataclass
class PipelineConfig:
    psf: Path | None = None
    body_model: Path | None = None
    decoder: Path | None = None
    reducer: Path | None = None
    regressors: list = field(default_factory=list)
    loss_weights: LossWeights = field(default_factory=LossWeights)
    simcc_k: int = DEFAULT_SPLIT
    simcc_sigma: float = DEFAULT_SIGMA
    padding: str = "linear"
    seed: int = 0
    snr: float = 1e4
    pelvis: tuple = (0,)
    source: Path | None = None

    @classmethod
    def from_text(cls, text, base_dir="."):
        base = Path(base_dir)
        raw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ToolkitError("config", f"line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in PATH_KEYS + REGRESSOR_KEYS + SCALAR_KEYS:
                raise ToolkitError("config", f"line {lineno}: unknown key {key!r}")
            if key in raw:
                raise ToolkitError("config", f"line {lineno}: duplicate key {key!r}")
            raw[key] = val

        def path(key):
            if key not in raw:
                return None
            p = Path(raw[key])
            p = p if p.is_absolute() else base / p
            if not p.exists():
                raise ToolkitError("config", f"{key}: file not found: {p}")
            return p

        cfg = cls()
        for key in ("psf", "body_model", "decoder", "reducer"):
            setattr(cfg, key, path(key))
        regs = [path(k) for k in REGRESSOR_KEYS]
        if any(regs):
            if not all(regs):
                raise ToolkitError("config", "either all four regressor_<t> keys or none")
            cfg.regressors = regs
        if "loss_weights" in raw:
            cfg.loss_weights = LossWeights.load(path("loss_weights"))
        try:
            if "simcc_k" in raw:
                cfg.simcc_k = int(raw["simcc_k"])
            if "simcc_sigma" in raw:
                cfg.simcc_sigma = float(raw["simcc_sigma"])
            if "seed" in raw:
                cfg.seed = int(raw["seed"])
            if "snr" in raw:
                cfg.snr = float(raw["snr"])
            if "pelvis" in raw:
                cfg.pelvis = tuple(int(s) for s in raw["pelvis"].split(","))
        except ValueError as exc:
            raise ToolkitError("config", str(exc)) from exc
        if "padding" in raw:
            if raw["padding"] not in PADDING_MODES:
                raise ToolkitError("config", f"padding must be one of {PADDING_MODES}")
            cfg.padding = raw["padding"]
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        cfg = cls.from_text(path.read_text(), path.parent)
        cfg.source = path
        return cfg

    def require(self, *keys):
        missing = [k for k in keys if not getattr(self, k)]
        if missing:
            raise ToolkitError("config", f"config is missing {', '.join(missing)}")
