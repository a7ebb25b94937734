"""Training and inference over a whole corpus; shared by the CLI and the test suite."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .boundary import LcsConfig, Segment, extract_segments, lcs_prune
from .config import RunConfig
from .dataio import FeatureSequence, GroundTruth
from .dfc import DfcModel, detect_sequence, train_dfc
from .efc import EfcModel, cas_forward, classify_video, train_efc

Corpus = list[tuple[FeatureSequence, GroundTruth]]


def split_corpus(corpus: Corpus, num_test: int) -> tuple[Corpus, Corpus]:
    return corpus[:-num_test], corpus[-num_test:]


def fit_dfc(cfg: RunConfig, train: Corpus, log=None) -> tuple[DfcModel, list[float]]:
    t = cfg.section("train")
    model = DfcModel(cfg.dfc(train[0][0].F), seed=cfg.seed)
    trace = train_dfc(model, [s for s, _ in train], t["dfc_epochs"], lr=t["lr"], wd=t["wd"],
                      seed=cfg.seed, batch_size=t["batch_size"], log=log)
    return model, trace


def fit_efc(cfg: RunConfig, train: Corpus, log=None) -> tuple[EfcModel, list[float]]:
    t = cfg.section("train")
    seq, gt = train[0]
    model = EfcModel(cfg.efc(seq.F, gt.num_classes), seed=cfg.seed)
    trace = train_efc(model, [(s.data, g.label) for s, g in train], t["efc_epochs"],
                      lr=t["efc_lr"], wd=t["wd"], seed=cfg.seed, batch_size=t["batch_size"], log=log)
    return model, trace


@dataclass
class VideoResult:
    video_id: str
    raw_points: list[int]
    kept_points: list[int]
    segments: list[Segment]
    class_probs: np.ndarray
    fg_attention: np.ndarray = field(repr=False)


def run_video(dfc: DfcModel, efc: EfcModel, seq: FeatureSequence, lcs: LcsConfig,
              prune: bool = True) -> VideoResult:
    raw = detect_sequence(dfc, seq.data)
    kept = lcs_prune(raw, seq.data, lcs) if prune else list(raw)
    with torch.no_grad():
        cas = cas_forward(efc, seq.data)
    segs = extract_segments(kept, cas, lcs)
    return VideoResult(seq.video_id, raw, kept, segs, classify_video(efc, seq.data),
                       cas.numpy()[1][0])


def run_corpus(dfc, efc, data: Corpus, lcs: LcsConfig, prune: bool = True) -> list[VideoResult]:
    return [run_video(dfc, efc, seq, lcs, prune) for seq, _ in data]
