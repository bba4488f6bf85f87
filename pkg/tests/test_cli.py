import json
import subprocess
import sys
import time

import numpy as np
import pytest

from lensless_hps import container
from lensless_hps.bodymodel import BodyModel, BodyParams
from lensless_hps.cli import main
from lensless_hps.imaging import delta_psf, make_toy_psf, save_png


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("toy")
    assert main(["gen-toy-pipeline", "--seed", "0", "--out-dir", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def zero_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("zero")
    assert main(["gen-toy-pipeline", "--seed", "0", "--out-dir", str(d), "--zero-regressors"]) == 0
    return d


@pytest.fixture(scope="module")
def measurement(tmp_path_factory):
    path = tmp_path_factory.mktemp("meas") / "m.lhps"
    img = np.random.default_rng(0).uniform(size=(3, 256, 320))
    container.save(path, {"measurement": img})
    return path


def make_scenes(d, n, size=(3, 24, 24)):
    d.mkdir(parents=True, exist_ok=True)
    r = np.random.default_rng(7)
    for i in range(n):
        container.save(d / f"scene_{i:02d}.lhps", {"image": r.uniform(size=size)})
    return d


@pytest.fixture
def small_psf(tmp_path):
    path = tmp_path / "psf16.lhps"
    container.save(path, {"psf": make_toy_psf((16, 16), seed=2).grid})
    return path


def write_delta_psf(path, shape=(5, 5)):
    container.save(path, {"psf": delta_psf(shape).grid})
    return path


# -- simulate ------------------------------------------------------------------


def test_simulate_counts_and_manifest(tmp_path, small_psf):
    scenes = make_scenes(tmp_path / "scenes", 10)
    out = tmp_path / "out"
    assert main(["simulate", str(scenes), "--psf", str(small_psf), "--out", str(out), "--noise", "0.01"]) == 0
    files = sorted(out.iterdir())
    assert len([f for f in files if f.suffix == ".lhps"]) == 10
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["psf_sha256"] == container.digest_file(small_psf)
    assert manifest["padding"] == "linear" and manifest["seed"] == 0
    assert len(manifest["measurements"]) == 10


def test_simulate_rerun_is_byte_identical(tmp_path, small_psf):
    scenes = make_scenes(tmp_path / "scenes", 4)
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        main(["simulate", str(scenes), "--psf", str(small_psf), "--out", str(out),
              "--noise", "0.05", "--seed", "3", "--padding", "circular"])
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1]
    other = tmp_path / "c"
    main(["simulate", str(scenes), "--psf", str(small_psf), "--out", str(other),
          "--noise", "0.05", "--seed", "4", "--padding", "circular"])
    assert (other / "scene_00.lhps").read_bytes() != outs[0]["scene_00.lhps"]


def test_simulate_delta_psf_png_round_trip(tmp_path):
    scenes = tmp_path / "scenes"
    scenes.mkdir()
    img = np.round(np.random.default_rng(1).uniform(size=(3, 12, 16)) * 255) / 255
    save_png(scenes / "a.png", img)
    psf = write_delta_psf(tmp_path / "psf.lhps")
    assert main(["simulate", str(scenes), "--psf", str(psf), "--out", str(tmp_path / "o")]) == 0
    np.testing.assert_allclose(container.load(tmp_path / "o" / "a.lhps")["measurement"], img, atol=1e-12)


def test_simulate_bad_scene_fails_nonzero(tmp_path):
    scenes = make_scenes(tmp_path / "scenes", 2)
    (scenes / "broken.lhps").write_bytes(b"nope")
    psf = write_delta_psf(tmp_path / "psf.lhps")
    assert main(["simulate", str(scenes), "--psf", str(psf), "--out", str(tmp_path / "o")]) == 1
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert [f["scene"] for f in manifest["failures"]] == ["broken.lhps"]
    assert len(manifest["measurements"]) == 2


def test_reconstruct(tmp_path):
    scenes = make_scenes(tmp_path / "scenes", 2, size=(3, 16, 16))
    psf = write_delta_psf(tmp_path / "psf.lhps", (16, 16))
    main(["simulate", str(scenes), "--psf", str(psf), "--out", str(tmp_path / "m"), "--padding", "circular"])
    meas = sorted((tmp_path / "m").glob("*.lhps"))
    assert main(["reconstruct", *map(str, meas), "--psf", str(psf), "--snr", "1e8", "--out", str(tmp_path / "r")]) == 0
    rec = container.load(tmp_path / "r" / "scene_00.lhps")["image"]
    np.testing.assert_allclose(rec, container.load(scenes / "scene_00.lhps")["image"], atol=1e-6)


# -- infer ---------------------------------------------------------------------


def test_infer_smoke_fast_four_thetas(tmp_path, toy_dir, measurement, capsys):
    start = time.perf_counter()
    rc = main(["infer", str(measurement), "--config", str(toy_dir / "config.txt"), "--out", str(tmp_path / "o"), "--dump-pyramid"])
    elapsed = time.perf_counter() - start
    assert rc == 0 and elapsed < 5.0
    trace = container.load(tmp_path / "o" / "theta.lhps")["theta_trace"]
    assert trace.shape == (4, 85)
    assert np.all(np.isfinite(trace))
    kp = container.load(tmp_path / "o" / "keypoints.lhps")
    assert kp["keypoints2d_px"].shape == (14, 2)
    assert sorted(p.name for p in (tmp_path / "o" / "pyramid").iterdir()) == [f"level_{t}.lhps" for t in range(4)]
    assert "theta.lhps" in capsys.readouterr().out


def test_infer_zero_regressors_gives_neutral(tmp_path, zero_dir, measurement):
    assert main(["infer", str(measurement), "--config", str(zero_dir / "config.txt"), "--out", str(tmp_path / "o")]) == 0
    trace = container.load(tmp_path / "o" / "theta.lhps")["theta_trace"]
    for row in trace:
        np.testing.assert_array_equal(row, BodyParams.neutral().to_vector())


def test_infer_is_deterministic(tmp_path, toy_dir, measurement):
    for run in ("a", "b"):
        main(["infer", str(measurement), "--config", str(toy_dir / "config.txt"), "--out", str(tmp_path / run)])
    a = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}
    b = {p.name: p.read_bytes() for p in (tmp_path / "b").iterdir()}
    assert a == b


def test_infer_names_failing_stage(tmp_path, toy_dir, capsys):
    small = tmp_path / "small.lhps"
    container.save(small, {"measurement": np.ones((3, 100, 100))})
    rc = main(["infer", str(small), "--config", str(toy_dir / "config.txt"), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "preprocess" in capsys.readouterr().err


# -- evaluate ------------------------------------------------------------------


def write_pred(d, name, joints, verts):
    d.mkdir(parents=True, exist_ok=True)
    container.save(d / name, {"joints3d": joints, "vertices": verts})


def test_evaluate_self_is_zero(tmp_path, capsys):
    r = np.random.default_rng(0)
    for i in range(3):
        write_pred(tmp_path / "gt", f"{i}.lhps", r.normal(scale=300, size=(14, 3)), r.normal(scale=300, size=(50, 3)))
    assert main(["evaluate", str(tmp_path / "gt"), str(tmp_path / "gt")]) == 0
    out = capsys.readouterr().out
    assert "mpjpe_mm=0.00" in out and "pa_mpjpe_mm=0.00" in out and "pve_mm=0.00" in out
    header = out.splitlines()[0]
    assert header.index("MPJPE") < header.index("PA-MPJPE") < header.index("PVE")


def test_evaluate_known_offsets(tmp_path, capsys):
    r = np.random.default_rng(1)
    for i, off in enumerate((4.0, 8.0)):
        j = r.normal(scale=300, size=(14, 3))
        v = r.normal(scale=300, size=(50, 3))
        write_pred(tmp_path / "gt", f"{i}.lhps", j, v)
        pj = j.copy()
        pj[5] += [off * 14, 0, 0]  # one non-hip joint moves; hips fixed
        write_pred(tmp_path / "pred", f"{i}.lhps", pj, v + [0, 0, off])
    report = tmp_path / "report.txt"
    assert main(["evaluate", str(tmp_path / "pred"), str(tmp_path / "gt"), "--report", str(report)]) == 0
    text = report.read_text()
    assert "mpjpe_mm=6.00" in text  # mean of 4 and 8
    assert "pve_mm=6.00" in text


def test_evaluate_unmatched_files(tmp_path, capsys):
    z = np.zeros((14, 3))
    write_pred(tmp_path / "p", "a.lhps", z, z)
    write_pred(tmp_path / "g", "b.lhps", z, z)
    assert main(["evaluate", str(tmp_path / "p"), str(tmp_path / "g")]) == 1
    err = capsys.readouterr().err
    assert "a.lhps" in err and "b.lhps" in err


# -- gradcheck / gen-toy-model / usage ----------------------------------------


def test_gradcheck_passes(capsys):
    assert main(["gradcheck", "--trials", "3"]) == 0
    out = capsys.readouterr().out
    for name in ("regressor", "simcc", "iuv"):
        assert name in out
    assert "FAIL" not in out


def test_gradcheck_zero_trials_is_vacuous(capsys):
    assert main(["gradcheck", "--trials", "0"]) == 0
    assert capsys.readouterr().out.count("vacuous") == 3


def test_gradcheck_corrupted_fails(capsys):
    assert main(["gradcheck", "--trials", "2", "--corrupt-gradient", "simcc"]) == 1
    lines = capsys.readouterr().out.splitlines()
    assert any(l.startswith("simcc") and "FAIL" in l for l in lines)
    assert any(l.startswith("iuv") and "PASS" in l for l in lines)


def test_gen_toy_model_stable(tmp_path):
    for name in ("a.lhps", "b.lhps"):
        assert main(["gen-toy-model", "--seed", "5", "--out", str(tmp_path / name)]) == 0
    assert container.digest_file(tmp_path / "a.lhps") == container.digest_file(tmp_path / "b.lhps")
    model = BodyModel.from_arrays(container.load(tmp_path / "a.lhps"))
    np.testing.assert_allclose(model.weights.sum(axis=1), 1.0, atol=1e-12)
    assert set(container.load(tmp_path / "a.lhps")) >= {
        "template", "blendshapes", "weights", "parents", "Jreg_rest", "Jreg_kp", "downsample", "faces", "uv_table"
    }


def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["infer"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["simulate", "x", "--out", "y", "--padding", "reflect"])
    assert e.value.code == 2


def test_module_entry_point(tmp_path):
    out = tmp_path / "m.lhps"
    proc = subprocess.run(
        [sys.executable, "-m", "lensless_hps.cli", "gen-toy-model", "--out", str(out)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert out.exists()
