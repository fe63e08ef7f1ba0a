import contextlib
import io
import json
import os
import stat
import subprocess
import sys
import time

import pytest

from jgseg.cli import main, run_lock
from jgseg.errors import PreconditionError

from conftest import MICRO

FAST = MICRO + [
    "train.gan_steps=100", "train.enc_steps=50", "train.sample_every=50", "invert.steps=20",
    "eval.baseline_epochs=2", "eval.distill_synth=6", "eval.distill_epochs=1", "eval.sample_count=4",
    "eval.ablation_k=[1,2]", "eval.ablation_n=[20,40]", "eval.ablation_gan_steps=2", "eval.ablation_enc_steps=2",
    "eval.ablation_test=4",
]


def run(*argv, overrides=FAST):
    args = list(argv)
    for o in overrides:
        args += ["--set", o]
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(args)
    return code, out.getvalue(), err.getvalue()


def ok(*argv, **kw):
    code, out, err = run(*argv, **kw)
    assert code == 0, err
    return out


PIPELINE = [
    ("make-data",), ("train-gan",), ("train-encoder",), ("evaluate", "--limit", "4"),
    ("evaluate", "--method", "ours-no", "--domain", "out"), ("baseline",),
    ("evaluate", "--method", "baseline", "--limit", "4"), ("infer", "--limit", "2"), ("sample",),
    ("evaluate", "--lambda2-sweep", "--domain", "out", "--limit", "2"),
    ("distill",), ("ablate",), ("report",),
]

REPEATED = ("make-data", "train-gan", "train-encoder", "evaluate")


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    old = os.environ.get("JGSEG_RUNS_DIR")
    os.environ["JGSEG_RUNS_DIR"] = str(root)
    t0 = time.time()
    outputs = {}
    for name in ("a", "b"):
        for step in PIPELINE:
            if name == "b" and (step[0] not in REPEATED or "baseline" in step):
                continue
            outputs[(name,) + step] = ok(*step, "--run-name", name)
    elapsed = time.time() - t0
    yield root, outputs, elapsed
    if old is None:
        del os.environ["JGSEG_RUNS_DIR"]
    else:
        os.environ["JGSEG_RUNS_DIR"] = old


def test_pipeline_completes_quickly(runs):
    root, outputs, elapsed = runs
    assert elapsed < 300
    assert "labeled,4" in outputs[("a", "make-data")]
    assert outputs[("a", "evaluate", "--limit", "4")].splitlines()[0] == "method,domain,metric,mean,median,n"


def test_artifact_dirs_carry_config_and_version(runs):
    root, _, _ = runs
    for sub in ("make-data", "train-gan", "train-encoder", "baseline", "infer", "sample", "distill", "ablate",
                "report", "evaluate/ours-in", "evaluate/baseline-in"):
        d = root / "a" / sub
        assert (d / "VERSION").read_text().startswith("0.")
        cfg = d / "config.yaml"
        assert cfg.exists() and not os.stat(cfg).st_mode & stat.S_IWUSR


def test_outputs_and_figures(runs):
    root, outputs, _ = runs
    a = root / "a"
    assert (a / "train-gan" / "samples_000050.png").exists()
    assert (a / "make-data" / "labeled_examples.png").exists()
    assert len(list((a / "infer").glob("*_label.png"))) == 2
    assert len(list((a / "sample").glob("sample_*_img.png"))) == 4
    for fig in ("summary.png", "gan_losses.png", "encoder_losses.png", "metric_vs_step.png", "distillation.png",
                "ablation.png", "lambda2_sweep.png"):
        assert (a / "report" / fig).stat().st_size > 0
    assert not list((a / "distill").glob("*.png")) and not list((a / "ablate").glob("*.png"))
    sweep = outputs[("a", "evaluate", "--lambda2-sweep", "--domain", "out", "--limit", "2")].splitlines()
    assert sweep[0] == "lambda2,domain,metric,value,median,n" and len(sweep) == 4
    lines = outputs[("a", "report")].strip().splitlines()
    assert lines[0].startswith("source,method,domain")
    assert len(lines) - 1 == len(list(a.rglob("report.json")))


def test_reports_reproducible(runs):
    root, _, _ = runs
    for tag in ("ours-in", "ours-no-out"):
        a = json.loads((root / "a" / "evaluate" / tag / "report.json").read_text())
        b = json.loads((root / "b" / "evaluate" / tag / "report.json").read_text())
        assert a == b


def test_missing_prerequisite_exit_3(tmp_path, monkeypatch):
    monkeypatch.setenv("JGSEG_RUNS_DIR", str(tmp_path))
    code, _, err = run("train-gan", "--run-name", "empty")
    assert code == 3
    tail = json.loads(err.strip().splitlines()[-1])
    assert tail["status"] == "error" and tail["exit"] == 3 and "make-data" in tail["message"]
    code, _, err = run("report", "--run-name", "nothing")
    assert code == 3


def test_config_errors_exit_2(tmp_path, monkeypatch):
    monkeypatch.setenv("JGSEG_RUNS_DIR", str(tmp_path))
    for argv, overrides in ((("make-data",), ["train.gan_steps=-5"]), (("make-data",), ["nope.key=1"]),
                            (("make-data", "--bogus"), []), (("frobnicate",), [])):
        code, _, err = run(*argv, overrides=overrides)
        assert code == 2, argv
        assert json.loads(err.strip().splitlines()[-1])["exit"] == 2


def test_lock_excludes_live_and_reclaims_stale(tmp_path):
    with run_lock(tmp_path):
        with pytest.raises(PreconditionError):
            with run_lock(tmp_path):
                pass
    assert not (tmp_path / ".lock").exists()
    (tmp_path / ".lock").write_text("999999999")
    with run_lock(tmp_path):
        assert (tmp_path / ".lock").read_text() == str(os.getpid())


def test_console_script(tmp_path):
    env = {**os.environ, "JGSEG_RUNS_DIR": str(tmp_path)}
    proc = subprocess.run([sys.executable, "-m", "jgseg.cli", "evaluate", "--run-name", "x"], env=env,
                          capture_output=True, text=True)
    assert proc.returncode == 3
    assert json.loads(proc.stderr.strip().splitlines()[-1])["kind"] == "PreconditionError"
