"""Command-line entry point: ``changeloc <command> [--config PATH] [--set K=V ...] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import shutil
import sys
from pathlib import Path

import matplotlib
import numpy as np
import torch

from . import __version__
from .boundary import read_segments, write_segments
from .config import ConfigError, RunConfig, load_config
from .dataio import FormatError, generate_corpus, load_corpus, save_corpus
from .dfc import DfcModel, draw_noise, elbo_loss
from .efc import EfcModel, efc_loss
from .evaluation import corpus_changepoint_f1, map_report
from .numerics import grad_check
from .pipeline import fit_dfc, fit_efc, run_corpus, split_corpus
from . import plotting

log = logging.getLogger("changeloc")

# one snippet = 16 frames at 25 fps
SNIPPET_SECONDS = 16 / 25

EXIT_FAIL = 1
EXIT_USAGE = 2


class CommandError(RuntimeError):
    pass


class OutputDir:
    """Tracks files a command creates so a failed run can remove them."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.created_dir = not self.path.exists()
        self.files: list[Path] = []

    def __enter__(self):
        self.path.mkdir(parents=True, exist_ok=True)
        return self

    def file(self, name: str) -> Path:
        p = self.path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p)
        return p

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            return False
        if self.created_dir:
            shutil.rmtree(self.path, ignore_errors=True)
        else:
            for p in self.files:
                if p.is_dir():
                    shutil.rmtree(p, ignore_errors=True)
                elif p.exists():
                    p.unlink()
        return False


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    if path.is_dir():
        for sub in sorted(path.rglob("*")):
            if sub.is_file():
                h.update(str(sub.relative_to(path)).encode())
                h.update(sub.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out: OutputDir, command: str, cfg: RunConfig, inputs: dict[str, Path]) -> None:
    path = out.file("manifest.json")
    manifest = {
        "command": command,
        "config_hash": cfg.digest(),
        "config": cfg.raw,
        "seed": cfg.seed,
        "versions": {
            "changeloc": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "matplotlib": matplotlib.__version__,
        },
        "inputs": {k: str(v) for k, v in sorted(inputs.items())},
        "outputs": {str(p.relative_to(out.path)): _sha256(p)
                    for p in sorted(out.files) if p != path and p.exists()},
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise CommandError(f"{path} not found; {hint}")
    return path


def _load_split(cfg: RunConfig, split: str):
    corpus_dir = _require(cfg.path("corpus"), "run gen-data or set paths.corpus")
    try:
        return load_corpus(corpus_dir, split)
    except KeyError:
        raise CommandError(f"{corpus_dir} has no split {split!r}") from None


def _load_models(cfg: RunConfig):
    ck = cfg.path("checkpoints")
    hint = "run train or set paths.checkpoints"
    return (DfcModel.load(_require(ck / "dfc.ckpt", hint)),
            EfcModel.load(_require(ck / "efc.ckpt", hint)))


def cmd_gen_data(cfg: RunConfig, out: OutputDir) -> int:
    spec = cfg.genspec()
    n_test = cfg.section("data")["num_test"]
    if not 0 < n_test < spec.num_videos:
        raise ConfigError("data.num_test must lie strictly between 0 and num_videos")
    corpus = generate_corpus(spec)
    train, test = split_corpus(corpus, n_test)
    splits = {"train": [s.video_id for s, _ in train], "test": [s.video_id for s, _ in test]}
    for name in ("features", "annotations.csv", "corpus.json"):
        out.file(name)
    save_corpus(out.path, corpus, spec, splits)
    seq, gt = corpus[0]
    plotting.plot_detection(seq.data, [], gt.change_points, None,
                            out.file("figures/preview.png"), f"{seq.video_id} (ground truth)")
    write_manifest(out, "gen-data", cfg, {})
    log.info("wrote %d videos (%d train / %d test) to %s",
             len(corpus), len(train), len(test), out.path)
    return 0


def cmd_train(cfg: RunConfig, out: OutputDir) -> int:
    data = _load_split(cfg, "train")
    dfc, dfc_trace = fit_dfc(cfg, data, log=lambda e, v: log.info("dfc epoch %d loss %.4f", e, v))
    dfc.save(out.file("dfc.ckpt"))
    efc, efc_trace = fit_efc(cfg, data, log=lambda e, v: log.info("efc epoch %d loss %.4f", e, v))
    efc.save(out.file("efc.ckpt"))

    with open(out.file("loss_trace.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "epoch", "loss"])
        for name, trace in (("dfc", dfc_trace), ("efc", efc_trace)):
            w.writerows([name, i + 1, f"{v:.10g}"] for i, v in enumerate(trace))
    plotting.plot_loss_traces({"DFC negative ELBO / snippet": dfc_trace, "EFC loss": efc_trace},
                              out.file("figures/loss.png"))
    write_manifest(out, "train", cfg, {"corpus": cfg.path("corpus")})
    return 0


def cmd_detect(cfg: RunConfig, out: OutputDir) -> int:
    dfc, efc = _load_models(cfg)
    data = _load_split(cfg, "test")
    results = run_corpus(dfc, efc, data, cfg.lcs())
    n_fig = cfg.section("eval")["figures"]
    for (seq, gt), r in list(zip(data, results))[:n_fig]:
        plotting.plot_detection(seq.data, r.kept_points, gt.change_points, r.fg_attention,
                                out.file(f"figures/{seq.video_id}.png"), seq.video_id)

    write_segments(out.file("segments.csv"), [(r.video_id, s) for r in results for s in r.segments])
    with open(out.file("changepoints.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id", "t", "kept"])
        w.writerows((r.video_id, t, int(t in r.kept_points)) for r in results for t in r.raw_points)
    with open(out.file("video_scores.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["video_id"] + [f"p{c}" for c in range(efc.config.num_classes)])
        w.writerows([r.video_id] + [f"{p:.6f}" for p in r.class_probs] for r in results)
    human = [f"{r.video_id}  {s.start * SNIPPET_SECONDS:8.2f}s - {s.end * SNIPPET_SECONDS:8.2f}s"
             f"  class {s.class_id}  score {s.score:.3f}" for r in results for s in r.segments]
    out.file("segments.txt").write_text("\n".join(human) + "\n")
    write_manifest(out, "detect", cfg,
                   {"corpus": cfg.path("corpus"), "checkpoints": cfg.path("checkpoints")})
    log.info("%d segments over %d videos", sum(len(r.segments) for r in results), len(data))
    return 0


def _read_changepoints(path: Path) -> tuple[dict[str, list[int]], dict[str, list[int]]]:
    """Raw detector output and the points that survived pruning, per video."""
    raw: dict[str, list[int]] = {}
    kept: dict[str, list[int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            raw.setdefault(row["video_id"], []).append(int(row["t"]))
            if row["kept"] == "1":
                kept.setdefault(row["video_id"], []).append(int(row["t"]))
    return raw, kept


def cmd_eval(cfg: RunConfig, out: OutputDir) -> int:
    data = _load_split(cfg, "test")
    det_dir = cfg.path("detections")
    preds = read_segments(_require(det_dir / "segments.csv", "run detect or set paths.detections"))
    truths = [(gt.video_id, s, e, c) for _, gt in data for s, e, c in gt.annotations]
    ev = cfg.section("eval")
    report = map_report(preds, truths, ev["thresholds"])
    cp_path = det_dir / "changepoints.csv"
    if cp_path.exists():
        raw, kept = _read_changepoints(cp_path)
        w = ev["tolerance"]
        report.changepoint = corpus_changepoint_f1(
            [(raw.get(gt.video_id, []), gt.change_points) for _, gt in data], w)
        report.tolerance = w
        report.extra["cp_f1_pruned"] = corpus_changepoint_f1(
            [(kept.get(gt.video_id, []), gt.change_points) for _, gt in data], w)[2]
    scores_path = det_dir / "video_scores.csv"
    if scores_path.exists():
        with open(scores_path, newline="") as fh:
            top = {r[0]: int(np.argmax([float(x) for x in r[1:]])) for r in list(csv.reader(fh))[1:]}
        hits = [top.get(gt.video_id) in gt.classes for _, gt in data]
        report.extra["video_accuracy"] = float(np.mean(hits))
    out.file("report.txt").write_text(report.to_text())
    report.write_csv(out.file("report.csv"))
    plotting.plot_map_curve(report, out.file("figures/map.png"))
    write_manifest(out, "eval", cfg, {"corpus": cfg.path("corpus"), "detections": det_dir})
    sys.stdout.write(report.to_text())
    return 0


def gradcheck_models(cfg: RunConfig):
    """Finite-difference checks of the one-step DFC ELBO and the EFC loss."""
    g = cfg.section("gradcheck")
    T = int(g["T"])
    if T < 2:
        raise ConfigError("gradcheck.T must be >= 2")
    rng = np.random.default_rng(cfg.seed)
    dfc = DfcModel(cfg.dfc(), seed=cfg.seed)
    X = rng.normal(size=(T, dfc.config.feature_dim))
    updates = np.zeros(T, dtype=bool)
    updates[T - 1] = True
    noise = tuple(n[0] for n in draw_noise(rng, 1, T, dfc.config))
    kw = dict(eps=g["eps"], max_entries_per_param=g["entries_per_param"], seed=cfg.seed,
              skip_kinks=True)
    dres = grad_check(lambda: elbo_loss(dfc, X, noise, updates), dfc.store, **kw)

    efc = EfcModel(cfg.efc(), seed=cfg.seed)
    Xe = rng.normal(size=(max(8, T), efc.config.feature_dim))
    y = np.zeros(efc.config.num_classes)
    y[0] = 1.0
    eres = grad_check(lambda: efc_loss(efc, Xe, y), efc.store, **kw)
    return dres, eres


def cmd_gradcheck(cfg: RunConfig, out: OutputDir) -> int:
    dres, eres = gradcheck_models(cfg)
    lines = []
    for name, r in (("dfc", dres), ("efc", eres)):
        lines += [f"{name}_max_rel_error={r.max_rel_error:.3e}", f"{name}_worst_param={r.worst_param}",
                  f"{name}_entries={r.entries_checked}", f"{name}_kinks_skipped={r.kinks_skipped}"]
    text = "\n".join(lines) + "\n"
    out.file("gradcheck.txt").write_text(text)
    write_manifest(out, "gradcheck", cfg, {})
    sys.stdout.write(text)
    tol = cfg.section("gradcheck")["tol"]
    worst = max(dres.max_rel_error, eres.max_rel_error)
    if worst > tol:
        log.error("gradient check failed: max relative error %.3e > %.1e", worst, tol)
        return EXIT_FAIL
    return 0


COMMANDS = {
    "gen-data": (cmd_gen_data, "corpus"),
    "train": (cmd_train, "checkpoints"),
    "detect": (cmd_detect, "detections"),
    "eval": (cmd_eval, None),
    "gradcheck": (cmd_gradcheck, None),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="K=V",
                        help="override a config value, e.g. train.lr=1e-4 (repeatable)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-q", "--quiet", action="store_true")
    parser = argparse.ArgumentParser(prog="changeloc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    fn, path_key = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, args.overrides)
        out_dir = args.out
        if out_dir is None:
            out_dir = cfg.path(path_key) if path_key else Path("run") / args.command
        if path_key:
            # later commands find this output through the config
            cfg.raw["paths"][path_key] = str(out_dir)
    except ConfigError as e:
        log.error("config: %s", e)
        return EXIT_USAGE
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(True)
    try:
        with OutputDir(out_dir) as out:
            code = fn(cfg, out)
    except (CommandError, ConfigError, FormatError, FileNotFoundError, ValueError,
            FloatingPointError) as e:
        log.error("%s failed: %s", args.command, e)
        return EXIT_FAIL
    return code


if __name__ == "__main__":
    sys.exit(main())
