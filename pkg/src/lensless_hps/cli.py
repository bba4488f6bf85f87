"""Command-line entry point: ``lensless-hps <subcommand>``.

Exit codes: 0 success, 1 data error, 2 usage error. Set ``LHPS_LOG_LEVEL``
(e.g. ``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import container
from .bodymodel import (
    MM_PER_UNIT,
    BodyModel,
    body_forward,
    make_toy_model,
    normalized_to_pixels,
    project_weak_perspective,
)
from .config import PipelineConfig
from .errors import ToolkitError
from .evaluation import MetricReport, evaluate_sample
from .features import (
    ReducerMlp,
    ToyDecoder,
    ZeroRegressor,
    decode_features,
    dump_pyramid,
    make_toy_regressors,
    regressor_from_arrays,
    run_regression_loop,
)
from .gradcheck import LOSS_NAMES, format_rows, run_gradcheck
from .imaging import (
    NETWORK_INPUT_SIZE,
    Measurement,
    NoiseSpec,
    load_png,
    make_toy_psf,
    normalize_psf,
    preprocess_measurement,
    save_png,
    simulate_measurement,
    wiener_reconstruct,
)
from .numerics import PADDING_MODES

log = logging.getLogger("lensless_hps")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2
SCENE_SUFFIXES = (".png", ".lhps")


class StageError(Exception):
    def __init__(self, stage, exc):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {exc}")


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ToolkitError as exc:
        raise StageError(name, exc) from exc


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- file readers --------------------------------------------------------------


def read_image(path, key="image"):
    path = Path(path)
    if path.suffix.lower() == ".png":
        return load_png(path)
    entries = container.load(path)
    for name in (key, "image", "measurement", "scene"):
        if name in entries:
            return entries[name]
    raise ToolkitError("format", f"{path}: no image entry")


def read_psf(path):
    path = Path(path)
    if path.suffix.lower() == ".png":
        return normalize_psf(load_png(path).mean(axis=0))
    entries = container.load(path)
    if "psf" not in entries:
        raise ToolkitError("format", f"{path}: no 'psf' entry")
    return normalize_psf(entries["psf"])


def read_measurement(path):
    return Measurement(read_image(path, "measurement"))


def load_pipeline(cfg):
    cfg.require("body_model", "decoder", "reducer", "regressors")
    model = BodyModel.from_arrays(container.load(cfg.body_model))
    decoder = ToyDecoder.from_arrays(container.load(cfg.decoder))
    reducer = ReducerMlp.from_arrays(container.load(cfg.reducer))
    regressors = [regressor_from_arrays(container.load(p)) for p in cfg.regressors]
    return model, decoder, reducer, regressors


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    psf_path = args.psf or cfg.psf
    if psf_path is None:
        raise ToolkitError("config", "no PSF given (--psf or psf= in config)")
    padding = args.padding or cfg.padding
    seed = cfg.seed if args.seed is None else args.seed
    psf = read_psf(psf_path)

    scenes = sorted(p for p in Path(args.scene_dir).iterdir() if p.suffix.lower() in SCENE_SUFFIXES)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records, failures = [], []
    for i, path in enumerate(scenes):
        try:
            scene = read_image(path)
            noise = NoiseSpec(args.noise, int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
            m = simulate_measurement(scene, psf, noise, padding)
        except (ToolkitError, OSError, ValueError) as exc:
            log.error("%s: %s", path.name, exc)
            failures.append({"scene": path.name, "error": str(exc)})
            continue
        target = out / f"{path.stem}.lhps"
        data = container.save(target, {"measurement": m.image})
        if args.png:
            save_png(out / f"{path.stem}.png", np.clip(m.image / max(m.image.max(), 1e-12), 0, 1))
        records.append(
            {
                "scene": path.name,
                "measurement": target.name,
                "sha256": container.digest_bytes(data),
                "noise_seed": noise.seed,
                "max_intensity": m.metadata["max_intensity"],
            }
        )
    _write_json(
        out / "manifest.json",
        {
            "psf": str(Path(psf_path).name),
            "psf_sha256": container.digest_file(psf_path),
            "padding": padding,
            "seed": seed,
            "noise_sigma": args.noise,
            "measurements": records,
            "failures": failures,
        },
    )
    print(f"simulated {len(records)} measurement(s), {len(failures)} failure(s)")
    return EXIT_DATA if failures else EXIT_OK


def cmd_reconstruct(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    psf_path = args.psf or cfg.psf
    if psf_path is None:
        raise ToolkitError("config", "no PSF given (--psf or psf= in config)")
    psf = read_psf(psf_path)
    snr = args.snr if args.snr is not None else cfg.snr
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in map(Path, args.measurements):
        img = wiener_reconstruct(read_measurement(path), psf, snr)
        container.save(out / f"{path.stem}.lhps", {"image": img})
        if args.png:
            save_png(out / f"{path.stem}.png", img)
    print(f"reconstructed {len(args.measurements)} measurement(s)")
    return EXIT_OK


def cmd_infer(args):
    start = time.perf_counter()
    cfg = _stage("config", PipelineConfig.load, args.config)
    model, decoder, reducer, regressors = _stage("load", load_pipeline, cfg)
    raw = _stage("read", read_measurement, args.measurement)
    m = _stage("preprocess", preprocess_measurement, raw)
    pyramid = _stage("decode", decode_features, m, decoder)
    trace = _stage("regress", run_regression_loop, pyramid, model, regressors, reducer)
    theta = trace.final
    mesh, kp3d, joints = _stage("body", body_forward, model, theta)
    kp_norm = _stage("project", project_weak_perspective, kp3d, theta.camera, MM_PER_UNIT)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "theta.lhps": {"theta_trace": np.stack([t.to_vector() for t in trace.thetas])},
        "mesh.lhps": {"vertices": mesh.vertices, "faces": mesh.faces},
        "keypoints.lhps": {
            "keypoints2d_norm": kp_norm,
            "keypoints2d_px": normalized_to_pixels(kp_norm, NETWORK_INPUT_SIZE),
            "keypoints3d": kp3d,
        },
        "prediction.lhps": {"joints3d": kp3d, "vertices": mesh.vertices},
        "trace.lhps": {
            **{f"mesh_{t}": mm.vertices for t, mm in enumerate(trace.meshes)},
            **{f"samples_{t + 1}": s for t, s in enumerate(trace.sample_points)},
        },
    }
    digests = {}
    for name, entries in files.items():
        digests[name] = container.digest_bytes(container.save(out / name, entries))
    if args.dump_pyramid:
        for p in dump_pyramid(pyramid, out / "pyramid"):
            digests[f"pyramid/{p.name}"] = container.digest_file(p)
    _write_json(
        out / "manifest.json",
        {
            "measurement": Path(args.measurement).name,
            "measurement_sha256": container.digest_file(args.measurement),
            "decoder": decoder.name,
            "decoder_sha256": decoder.digest(),
            "outputs": digests,
            "theta_records": len(trace.thetas),
        },
    )
    log.info("infer finished in %.2fs", time.perf_counter() - start)
    for name, d in digests.items():
        print(f"{name} {d}")
    return EXIT_OK


def _parse_pelvis(text):
    return tuple(int(s) for s in text.split(","))


def cmd_evaluate(args):
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    preds = {p.name for p in pred_dir.glob("*.lhps")}
    gts = {p.name for p in gt_dir.glob("*.lhps")}
    unmatched = sorted(preds ^ gts)
    if unmatched:
        for name in unmatched:
            side = "prediction" if name in preds else "ground truth"
            print(f"unmatched {side} file: {name}", file=sys.stderr)
        return EXIT_DATA
    if not preds:
        raise ToolkitError("empty", "no .lhps files to evaluate")

    samples = []
    for name in sorted(preds):
        p = container.load(pred_dir / name)
        g = container.load(gt_dir / name)
        for side, entries in (("prediction", p), ("ground truth", g)):
            missing = {"joints3d", "vertices"} - set(entries)
            if missing:
                raise ToolkitError("format", f"{side} {name} lacks {sorted(missing)}")
        s = evaluate_sample(
            p["joints3d"], g["joints3d"], p["vertices"], g["vertices"],
            args.pelvis, with_scale=not args.rigid,
        )
        s["name"] = name
        samples.append(s)
    report = MetricReport.from_samples(samples)
    print(report.format_table(args.method))
    print()
    print(report.format_kv())
    if args.report:
        Path(args.report).write_text(report.format_table(args.method) + "\n\n" + report.format_kv() + "\n")
    return EXIT_OK


def cmd_gradcheck(args):
    rows = run_gradcheck(args.seed, args.trials, corrupt=args.corrupt_gradient)
    print(format_rows(rows))
    return EXIT_OK if all(r.passed for r in rows) else EXIT_DATA


def cmd_gen_toy_model(args):
    data = container.save(args.out, make_toy_model(args.seed).to_arrays())
    print(f"{args.out} {container.digest_bytes(data)}")
    return EXIT_OK


def cmd_gen_toy_pipeline(args):
    """Write a complete toy pipeline (model, PSF, decoder, reducer, regressors, config)."""
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    model = make_toy_model(seed)
    decoder = ToyDecoder.create(seed)
    reducer = ReducerMlp.create(seed)
    regs = [ZeroRegressor()] * 4 if args.zero_regressors else make_toy_regressors(model, reducer, seed)
    container.save(out / "body_model.lhps", model.to_arrays())
    container.save(out / "decoder.lhps", decoder.to_arrays())
    container.save(out / "reducer.lhps", reducer.to_arrays())
    for t, r in enumerate(regs):
        container.save(out / f"regressor_{t}.lhps", r.to_arrays())
    size = NETWORK_INPUT_SIZE
    container.save(out / "psf.lhps", {"psf": make_toy_psf((size, size), seed).grid})
    lines = [
        "# toy pipeline",
        "psf = psf.lhps",
        "body_model = body_model.lhps",
        "decoder = decoder.lhps",
        "reducer = reducer.lhps",
        *[f"regressor_{t} = regressor_{t}.lhps" for t in range(4)],
        f"seed = {seed}",
        "padding = linear",
        "pelvis = 2,3",
    ]
    (out / "config.txt").write_text("\n".join(lines) + "\n")
    print(out / "config.txt")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="lensless-hps", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate lensless measurements from scenes")
    p.add_argument("scene_dir")
    p.add_argument("--psf")
    p.add_argument("--out", required=True)
    p.add_argument("--noise", type=float, default=0.0, help="Gaussian read-noise sigma")
    p.add_argument("--seed", type=int)
    p.add_argument("--padding", choices=PADDING_MODES)
    p.add_argument("--config")
    p.add_argument("--png", action="store_true", help="also write max-normalised PNG previews")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reconstruct", help="Wiener-deconvolve measurements")
    p.add_argument("measurements", nargs="+")
    p.add_argument("--psf")
    p.add_argument("--snr", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--png", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("infer", help="run the regression pipeline on one measurement")
    p.add_argument("measurement")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-pyramid", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="MPJPE / PA-MPJPE / PVE over paired files")
    p.add_argument("pred_dir")
    p.add_argument("gt_dir")
    p.add_argument("--pelvis", type=_parse_pelvis, default=(2, 3),
                   help="pelvis joint index, or comma-separated indices to average")
    p.add_argument("--rigid", action="store_true", help="Procrustes without scale")
    p.add_argument("--method", default="prediction")
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of all loss gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--corrupt-gradient", choices=LOSS_NAMES, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-toy-model", help="write the synthetic body model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_toy_model)

    p = sub.add_parser("gen-toy-pipeline", help="write a runnable toy configuration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--zero-regressors", action="store_true")
    p.set_defaults(func=cmd_gen_toy_pipeline)
    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("LHPS_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ToolkitError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
