"""Central finite-difference verification of the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .supervision import (
    IuvMap,
    IuvPrediction,
    LossWeights,
    loss_iuv,
    loss_regressor,
    loss_simcc,
    simcc_encode,
)

FD_STEP = 1e-5
REL_TOL = 1e-4
LOSS_NAMES = ("regressor", "simcc", "iuv")


def central_difference(f, x, eps=FD_STEP):
    """Gradient of scalar ``f`` at array ``x`` by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def relative_error(analytic, numeric):
    a = np.concatenate([np.ravel(v) for v in analytic])
    n = np.concatenate([np.ravel(v) for v in numeric])
    scale = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / scale)


def random_weights(rng):
    return LossWeights(*rng.uniform(0.1, 2.0, size=6))


def check_regressor(rng, corrupt=1.0):
    w = random_weights(rng)
    shapes = {"theta": (85,), "k2d": (14, 2), "j3d": (14, 3)}
    pred = {k: rng.normal(size=s) for k, s in shapes.items()}
    gt = {k: rng.normal(size=s) for k, s in shapes.items()}

    def value(name):
        def f(x):
            p = dict(pred, **{name: x})
            return loss_regressor(p["theta"], p["k2d"], p["j3d"], gt["theta"], gt["k2d"], gt["j3d"], w).value
        return f

    res = loss_regressor(pred["theta"], pred["k2d"], pred["j3d"], gt["theta"], gt["k2d"], gt["j3d"], w)
    analytic = [res.grads[k] * corrupt for k in shapes]
    numeric = [central_difference(value(k), pred[k]) for k in shapes]
    return relative_error(analytic, numeric)


def check_simcc(rng, corrupt=1.0, n_kp=5, size=48, k=2, sigma=2.0):
    w = random_weights(rng)
    kp = rng.uniform(0, size - 1, size=(n_kp, 2))
    target = simcc_encode(kp, size, size, k, sigma)
    px = rng.normal(size=target.x.shape)
    py = rng.normal(size=target.y.shape)
    res = loss_simcc(px, py, target, w)
    analytic = [res.grads["x"] * corrupt, res.grads["y"] * corrupt]
    numeric = [
        central_difference(lambda x: loss_simcc(x, py, target, w).value, px),
        central_difference(lambda y: loss_simcc(px, y, target, w).value, py),
    ]
    return relative_error(analytic, numeric)


def check_iuv(rng, corrupt=1.0, size=16, n_parts=3):
    w = random_weights(rng)
    parts = rng.integers(0, n_parts + 1, size=(size, size))
    gt = IuvMap(parts, rng.uniform(size=(size, size)), rng.uniform(size=(size, size)))
    logits = rng.normal(size=(n_parts + 1, size, size))
    # spread beyond +-1 so both smooth-L1 branches are exercised
    u = rng.uniform(-1.5, 2.5, size=(size, size))
    v = rng.uniform(-1.5, 2.5, size=(size, size))
    res = loss_iuv(IuvPrediction(logits, u, v), gt, w)
    analytic = [res.grads[k] * corrupt for k in ("part_logits", "u", "v")]
    numeric = [
        central_difference(lambda x: loss_iuv(IuvPrediction(x, u, v), gt, w).value, logits),
        central_difference(lambda x: loss_iuv(IuvPrediction(logits, x, v), gt, w).value, u),
        central_difference(lambda x: loss_iuv(IuvPrediction(logits, u, x), gt, w).value, v),
    ]
    return relative_error(analytic, numeric)


CHECKS = {"regressor": check_regressor, "simcc": check_simcc, "iuv": check_iuv}


@dataclass
class GradcheckRow:
    loss: str
    trials: int
    max_rel_err: float
    passed: bool
    vacuous: bool = False


def run_gradcheck(seed=0, trials=50, corrupt=None, tol=REL_TOL):
    """Run every loss's finite-difference check ``trials`` times.

    ``corrupt`` names a loss whose analytic gradient is scaled by 1.01 before
    comparison; it exists so the harness itself can be shown to fail.
    """
    rows = []
    for i, name in enumerate(LOSS_NAMES):
        rng = np.random.default_rng([seed, i])
        factor = 1.01 if corrupt == name else 1.0
        errs = [CHECKS[name](rng, corrupt=factor) for _ in range(trials)]
        worst = max(errs) if errs else 0.0
        rows.append(GradcheckRow(name, trials, worst, worst < tol, vacuous=trials == 0))
    return rows


def format_rows(rows):
    lines = [f"{'loss':<10} {'trials':>6} {'max_rel_err':>12} status"]
    for r in rows:
        status = "PASS" if r.passed else "FAIL"
        if r.vacuous:
            status += " (vacuous)"
        lines.append(f"{r.loss:<10} {r.trials:>6} {r.max_rel_err:>12.3e} {status}")
    return "\n".join(lines)
