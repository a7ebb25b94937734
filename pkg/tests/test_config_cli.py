import json
import shutil
import subprocess
import sys

import pytest

from changeloc.cli import EXIT_FAIL, EXIT_USAGE, main
from changeloc.config import ConfigError, load_config, parse_override
from changeloc.evaluation import parse_report

SMALL_TOML = """
seed = 3

[data]
num_videos = 12
num_test = 4
t_min = 30
t_max = 50
feature_dim = 6
num_classes = 2
max_actions = 2
min_regime_length = 5

[dfc]
feature_dim = 6
encoder_dims = [8]
decoder_dims = [8]
head_hidden = 8
latent1 = 4
latent2 = 4
gru_hidden = 6
window = 40

[efc]
feature_dim = 6
num_classes = 2
hidden = [8]

[train]
dfc_epochs = 2
efc_epochs = 2
batch_size = 4

[eval]
figures = 1
"""


def test_override_parsing():
    assert parse_override("train.lr=1e-4") == (["train", "lr"], 1e-4)
    assert parse_override("eval.thresholds=[0.5]") == (["eval", "thresholds"], [0.5])
    assert parse_override("paths.corpus=some/dir") == (["paths", "corpus"], "some/dir")
    with pytest.raises(ConfigError):
        parse_override("novalue")


def test_load_config_layers(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(SMALL_TOML)
    cfg = load_config(p, ["train.lr=0.01", "seed=9"])
    assert cfg.section("train")["lr"] == 0.01 and cfg.section("train")["wd"] == 5e-4
    assert cfg.seed == 9 and cfg.genspec().seed == 9
    assert cfg.dfc().encoder_dims == (8,)
    assert load_config(p).digest() == load_config(p).digest() != cfg.digest()


@pytest.mark.parametrize("override", [
    "train.bogus=1", "dfc.widht=3", "nosection.x=1", "seed=-1", "lcs.tau_sim=2.0",
    "train.lr=0", "eval.thresholds=[]",
])
def test_bad_config_rejected(override):
    with pytest.raises(ConfigError):
        load_config(None, [override])


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "small.toml"
    cfg.write_text(SMALL_TOML)
    return root, cfg


def run_pipeline(root, cfg, tag):
    dirs = {k: root / tag / k for k in ("data", "train", "detect", "eval")}
    common = ["--config", str(cfg), "-q",
              "--set", f"paths.corpus=\"{dirs['data']}\"",
              "--set", f"paths.checkpoints=\"{dirs['train']}\"",
              "--set", f"paths.detections=\"{dirs['detect']}\""]
    assert main(["gen-data", "--out", str(dirs["data"])] + common) == 0
    assert main(["train", "--out", str(dirs["train"])] + common) == 0
    assert main(["detect", "--out", str(dirs["detect"])] + common) == 0
    assert main(["eval", "--out", str(dirs["eval"])] + common) == 0
    return dirs


def test_cli_pipeline_outputs_and_manifest(small_run):
    root, cfg = small_run
    dirs = run_pipeline(root, cfg, "a")
    assert (dirs["data"] / "annotations.csv").exists()
    assert {"dfc.ckpt", "efc.ckpt", "loss_trace.csv"} <= {p.name for p in dirs["train"].iterdir()}
    assert (dirs["train"] / "figures" / "loss.png").stat().st_size > 0
    assert (dirs["detect"] / "segments.csv").read_text().startswith("video_id,start,end")
    report = parse_report((dirs["eval"] / "report.txt").read_text())
    assert 0 <= report["avg_map"] <= 1 and "cp_f1" in report and "video_accuracy" in report
    man = json.loads((dirs["train"] / "manifest.json").read_text())
    assert man["command"] == "train" and man["seed"] == 3 and len(man["config_hash"]) == 64
    assert {"numpy", "torch", "python"} <= set(man["versions"])
    assert set(man["outputs"]) >= {"dfc.ckpt", "efc.ckpt", "loss_trace.csv"}


def test_eval_with_copied_ground_truth_is_perfect(small_run, tmp_path):
    root, cfg = small_run
    data = root / "a" / "data"
    if not data.exists():
        run_pipeline(root, cfg, "a")
    from changeloc.boundary import Segment, write_segments
    from changeloc.dataio import load_corpus
    rows = [(gt.video_id, Segment(s, e, c, 1.0))
            for _, gt in load_corpus(data, "test") for s, e, c in gt.annotations]
    det = tmp_path / "det"
    det.mkdir()
    write_segments(det / "segments.csv", rows)
    out = tmp_path / "ev"
    code = main(["eval", "--config", str(cfg), "-q", "--out", str(out),
                 "--set", f"paths.corpus=\"{data}\"", "--set", f"paths.detections=\"{det}\""])
    assert code == 0
    assert parse_report((out / "report.txt").read_text())["avg_map"] == 1.0


def test_missing_input_fails_and_cleans_up(tmp_path):
    out = tmp_path / "train_out"
    code = main(["train", "-q", "--out", str(out), "--set", f"paths.corpus=\"{tmp_path / 'nope'}\""])
    assert code == EXIT_FAIL
    assert not out.exists()
    existing = tmp_path / "keep"
    existing.mkdir()
    (existing / "old.txt").write_text("x")
    assert main(["detect", "-q", "--out", str(existing),
                 "--set", f"paths.checkpoints=\"{tmp_path / 'none'}\""]) == EXIT_FAIL
    assert [p.name for p in existing.iterdir()] == ["old.txt"]


def test_bad_override_is_usage_error(tmp_path):
    assert main(["gen-data", "-q", "--out", str(tmp_path / "x"), "--set", "data.bogus=1"]) == EXIT_USAGE
    assert not (tmp_path / "x").exists()


def test_gradcheck_command(tmp_path):
    out = tmp_path / "gc"
    small = ["--set", "dfc.encoder_dims=[8]", "--set", "dfc.decoder_dims=[8]",
             "--set", "dfc.head_hidden=8", "--set", "efc.hidden=[8]"]
    assert main(["gradcheck", "-q", "--out", str(out)] + small) == 0
    vals = (out / "gradcheck.txt").read_text()
    assert "dfc_max_rel_error=" in vals and "efc_max_rel_error=" in vals
    assert main(["gradcheck", "-q", "--out", str(tmp_path / "gc2"), "--set", "gradcheck.tol=1e-30"]
                + small) == EXIT_FAIL


@pytest.mark.skipif(shutil.which("changeloc") is None, reason="console script not installed")
def test_console_script_exit_code(tmp_path):
    res = subprocess.run(["changeloc", "eval", "-q", "--out", str(tmp_path / "e"),
                          "--set", f"paths.corpus=\"{tmp_path / 'missing'}\""],
                         capture_output=True, text=True)
    assert res.returncode == EXIT_FAIL
    assert "not found" in res.stderr


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "changeloc.cli", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "gradcheck" in res.stdout
