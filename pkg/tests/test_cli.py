import subprocess
import sys

import numpy as np
import pytest

from psagan.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, load_network, main
from psagan.detect import CircleAnnotation, load_annotations, save_annotations
from psagan.io import load_checkpoint, read_image, read_metric_csv, write_image
from psagan.registration import AffineTransform, save_landmarks, warp_image

TINY = """\
seed = 3
patch_size = 32
synth_images = 5
synth_shape = 64,64
synth_count = 3
translator_widths = 8,8,8
attention_stages = 1
patchgan_widths = 4,8
sr_widths = 4
n_rrdb = 1
rrdb_growth = 4
sr_disc_widths = 4,8
srpsa_widths = 4,4,4,4,4
translator_epochs = 1
sr_epochs = 1
det_epochs = 1
knn_k = 2
embed_dim = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.cfg").write_text(TINY)
    assert main(["synth", "--config", str(root / "tiny.cfg"), "--out", str(root / "data")]) == EXIT_OK
    return root


def _run(*argv):
    return main([str(a) for a in argv])


def test_synth_outputs(workspace):
    rows = (workspace / "data" / "manifest.csv").read_text().splitlines()
    assert rows[0] == "path,kind,split"
    assert len([r for r in rows if ",om," in r]) == 15
    log = (workspace / "data" / "run.log").read_text()
    assert "seed = 3" in log and "translator_widths = 8,8,8" in log and "input_sha256" in log


@pytest.fixture(scope="module")
def checkpoints(workspace):
    cfg, data = workspace / "tiny.cfg", workspace / "data"
    out = {}
    for cmd, name in (("train-translator", "t"), ("train-sr", "s"), ("train-detector", "d")):
        out[name] = workspace / f"{name}.mgrn"
        assert _run(cmd, "--config", cfg, "--data", data, "--out", out[name]) == EXIT_OK
    return out


def test_training_commands_write_checkpoints_and_curves(checkpoints):
    headers = {"t": "step,loss_g,loss_d", "s": "step,loss_g,loss_d", "d": "step,loss_train,loss_val"}
    for name, path in checkpoints.items():
        load_checkpoint(path)
        assert path.with_suffix(".loss.csv").read_text().splitlines()[0] == headers[name]
        assert "checkpoint_sha256" in path.with_name(path.name + ".log").read_text()
    assert load_network(checkpoints["d"]).spec.kind == "srpsa_net"


def test_training_is_bit_reproducible(workspace, checkpoints):
    again = workspace / "again.mgrn"
    assert _run("train-detector", "--config", workspace / "tiny.cfg", "--data", workspace / "data",
                "--out", again) == EXIT_OK
    assert again.read_bytes() == checkpoints["d"].read_bytes()
    assert _run("train-detector", "--config", workspace / "tiny.cfg", "--seed", 9, "--data", workspace / "data",
                "--out", workspace / "other.mgrn") == EXIT_OK
    assert (workspace / "other.mgrn").read_bytes() != checkpoints["d"].read_bytes()


def test_super_resolve_and_detect(workspace, checkpoints, tmp_path):
    src = sorted((workspace / "data" / "om").iterdir())[-1]
    out = tmp_path / "sr.pgm"
    args = ("super-resolve", "--config", workspace / "tiny.cfg", "--translator", checkpoints["t"],
            "--sr", checkpoints["s"], "--in", src, "--out", out)
    assert _run(*args) == EXIT_OK
    first = out.read_bytes()
    assert read_image(out).shape == read_image(src).shape
    assert _run(*args) == EXIT_OK and out.read_bytes() == first
    dets = tmp_path / "d.csv"
    assert _run("detect", "--model", checkpoints["d"], "--in", out, "--out", dets, "--p-thresh", 0.0) == EXIT_OK
    assert load_annotations(dets)
    assert _run("detect", "--model", checkpoints["d"], "--in", out, "--out", dets, "--p-thresh", 1.0) == EXIT_OK
    assert load_annotations(dets) == []
    # wrong kind of checkpoint for the command
    assert _run("detect", "--model", checkpoints["t"], "--in", out, "--out", dets) == EXIT_DATA


def test_detect_blank_image_gives_header_only_csv(checkpoints, tmp_path):
    write_image(tmp_path / "blank.pgm", np.zeros((64, 64)))
    assert _run("detect", "--model", checkpoints["d"], "--in", tmp_path / "blank.pgm",
                "--out", tmp_path / "d.csv") == EXIT_OK
    assert (tmp_path / "d.csv").read_text().splitlines() == ["x,y,r,p"]


def test_register(tmp_path):
    yy, xx = np.mgrid[0:48, 0:48]
    ref = 0.5 + 0.3 * np.sin(xx / 5.0) * np.cos(yy / 6.0)
    t = AffineTransform.from_params(angle_deg=3.0, tx=2.0, ty=-1.0)
    write_image(tmp_path / "raw.pgm", warp_image(ref, t.inverse(), ref.shape))
    src = np.random.default_rng(0).uniform(5, 40, (5, 2))
    save_landmarks(tmp_path / "lm.csv", np.hstack([t.inverse().apply(src), src]))
    assert _run("register", "--landmarks", tmp_path / "lm.csv", "--in", tmp_path / "raw.pgm",
                "--out", tmp_path / "reg.pgm") == EXIT_OK
    assert np.abs(read_image(tmp_path / "reg.pgm") - ref)[8:-8, 8:-8].mean() < 0.02
    save_landmarks(tmp_path / "bad.csv", np.zeros((2, 4)))
    assert _run("register", "--landmarks", tmp_path / "bad.csv", "--in", tmp_path / "raw.pgm",
                "--out", tmp_path / "x.pgm") == EXIT_DATA


def test_evaluate(tmp_path):
    rng = np.random.default_rng(1)
    (tmp_path / "real").mkdir()
    (tmp_path / "fake").mkdir()
    for i in range(4):
        img = rng.random((32, 32))
        write_image(tmp_path / "real" / f"{i}.pgm", img)
        write_image(tmp_path / "fake" / f"{i}.pgm", np.clip(img + rng.normal(0, 0.05, img.shape), 0, 1))
    assert _run("evaluate", "--real", tmp_path / "real", "--fake", tmp_path / "fake", "--set", "knn_k=2",
                "--out", tmp_path / "m.csv") == EXIT_OK
    m = read_metric_csv(tmp_path / "m.csv")
    assert set(m) == {"psnr", "ssim", "density", "coverage", "pairs"}
    assert 20 < m["psnr"] < 40 and 0 < m["ssim"] < 1 and m["pairs"] == 4


def test_stats_on_identical_sizes(tmp_path):
    save_annotations(tmp_path / "a.csv", [CircleAnnotation(10 * i, 10, 5.0) for i in range(1, 4)])
    assert _run("stats", "--annotations", tmp_path / "a.csv", "--out", tmp_path / "s.csv") == EXIT_OK
    s = read_metric_csv(tmp_path / "s.csv")
    assert s["stdev"] == 0.0 and s["mean"] == 5.0 and s["count"] == 3
    assert (tmp_path / "s_kde.csv").read_text().startswith("x,density")
    assert _run("stats", "--annotations", tmp_path / "a.csv", "--out", tmp_path / "u.csv",
                "--pixel-size", 0.5) == EXIT_OK
    assert read_metric_csv(tmp_path / "u.csv")["mean"] == 5.0  # diameter 10 px at 0.5 um/px
    assert _run("stats", "--annotations", tmp_path / "a.csv", "--out", tmp_path / "u.csv",
                "--pixel-size", -1) == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the divergent run overflows on purpose
def test_exit_codes(tmp_path, workspace):
    assert _run() == EXIT_USAGE
    assert _run("detect", "--in", "x") == EXIT_USAGE
    assert _run("synth", "--set", "nonsense=1", "--out", tmp_path) == EXIT_USAGE
    assert _run("detect", "--model", tmp_path / "missing.mgrn", "--in", "x", "--out", tmp_path / "o.csv") == EXIT_DATA
    (tmp_path / "junk.mgrn").write_bytes(b"MGRN1 not really")
    assert _run("detect", "--model", tmp_path / "junk.mgrn", "--in", "x", "--out", tmp_path / "o.csv") == EXIT_DATA
    (tmp_path / "hot.cfg").write_text(TINY + "det_lr = 1e30\n")
    code = _run("train-detector", "--config", tmp_path / "hot.cfg", "--data", workspace / "data",
                "--out", tmp_path / "hot.mgrn")
    assert code == EXIT_NUMERIC


@pytest.mark.filterwarnings("ignore:ISJ fixed point")  # a handful of tiny detections
def test_pipeline_smoke(workspace):
    out = workspace / "run"
    assert _run("pipeline", "--config", workspace / "tiny.cfg", "--in", workspace / "data", "--out", out) == EXIT_OK
    for name in ("translator.mgrn", "super_resolver.mgrn", "detector.mgrn"):
        load_checkpoint(out / name)
    metrics = read_metric_csv(out / "metrics.csv")
    assert {"psnr", "ssim", "detections", "ground_truth", "matched"} <= set(metrics)
    assert read_metric_csv(out / "stats_truth.csv")["count"] == metrics["ground_truth"]
    n_val = len(list((out / "super_resolved").glob("*.pgm")))
    assert n_val == 3 and len(list((out / "detections").glob("*.csv"))) == 3
    assert "matched =" in (out / "run.log").read_text()


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "psagan.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.strip()
