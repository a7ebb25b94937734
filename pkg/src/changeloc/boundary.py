"""From change-points and class activations to scored action segments."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .dataio import FormatError
from .dfc import detect_sequence
from .efc import cas_forward
from .numerics import as_tensor

SEGMENT_HEADER = ["video_id", "start", "end", "class_id", "score"]


@dataclass(frozen=True)
class Segment:
    start: int
    end: int  # exclusive
    class_id: int
    score: float

    def __post_init__(self):
        if not 0 <= self.start < self.end:
            raise ValueError(f"invalid segment [{self.start}, {self.end})")
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")


@dataclass
class LcsConfig:
    tau_sim: float = 0.65
    rho: float = 0.5
    theta_fg: float = 0.5

    def __post_init__(self):
        if not 0 < self.tau_sim < 1:
            raise ValueError("tau_sim must lie in (0, 1)")
        if not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if not 0 < self.theta_fg < 1:
            raise ValueError("theta_fg must lie in (0, 1)")


def classic_lcs(a: Sequence, b: Sequence, match: Callable = None) -> int:
    """Length of the longest common subsequence under a match predicate."""
    if match is None:
        match = lambda x, y: x == y  # noqa: E731
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if match(x, y) else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _lcs_from_matches(m: np.ndarray) -> int:
    n, k = m.shape
    prev = [0] * (k + 1)
    for i in range(n):
        row = m[i]
        cur = [0]
        for j in range(k):
            cur.append(prev[j] + 1 if row[j] else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def _unit_rows(X: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.maximum(norms, 1e-12)


def lcs_redundancy(X: np.ndarray, a: int, b: int, c: int, tau_sim: float) -> float:
    """LCS of the snippets before ``b`` (from ``a``) and after it (up to ``c``).

    Two snippets match when their cosine similarity reaches ``tau_sim``. The
    LCS length is divided by the shorter of the two runs, so 1 means the run
    after ``b`` just continues the one before it.
    """
    left, right = _unit_rows(X[a:b]), _unit_rows(X[b:c])
    if len(left) == 0 or len(right) == 0:
        return 1.0
    matches = (left @ right.T) >= tau_sim
    return _lcs_from_matches(matches) / min(len(left), len(right))


def lcs_prune(points: Sequence[int], X, cfg: LcsConfig = LcsConfig()) -> list[int]:
    """Drop change-points whose two sides look alike; scans left to right."""
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    pts = sorted(set(int(p) for p in points))
    if pts and (pts[0] < 0 or pts[-1] >= len(X)):
        raise ValueError("change-points outside the sequence")
    i = 1
    while i < len(pts) - 1:
        if lcs_redundancy(X, pts[i - 1], pts[i], pts[i + 1], cfg.tau_sim) >= cfg.rho:
            del pts[i]
        else:
            i += 1
    return pts


def _softmax_cols(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def extract_segments(points: Sequence[int], cas, cfg: LcsConfig = LcsConfig()) -> list[Segment]:
    """Keep change-point intervals with high foreground attention and label them.

    ``cas`` is a CasMap or a ``(logits, attention)`` pair of arrays shaped
    (C+1, T) and (3, T).
    """
    logits, att = cas.numpy() if hasattr(cas, "numpy") else map(np.asarray, cas)
    C, T = logits.shape[0] - 1, logits.shape[1]
    fg = att[0]
    probs = _softmax_cols(logits)
    bounds = sorted({0, T} | {int(p) for p in points if 0 < p < T})

    def label(s, e):
        weighted = (fg[s:e] * logits[:C, s:e]).mean(axis=1)
        c = int(np.argmax(weighted))
        return c, float(probs[c, s:e].mean())

    segments: list[Segment] = []
    prev_kept = False
    for s, e in zip(bounds[:-1], bounds[1:]):
        if fg[s:e].mean() < cfg.theta_fg:
            prev_kept = False
            continue
        c, score = label(s, e)
        if prev_kept and segments[-1].class_id == c and segments[-1].end == s:
            s = segments.pop().start
            score = float(probs[c, s:e].mean())
        segments.append(Segment(s, e, c, score))
        prev_kept = True
    return segments


def localize(dfc_model, efc_model, X, cfg: LcsConfig = LcsConfig(), prune: bool = True,
             return_points: bool = False):
    """Detect, prune, classify and extract segments for one (T, F) sequence."""
    X = np.asarray(getattr(X, "data", X), dtype=np.float64)
    points = detect_sequence(dfc_model, X)
    if prune:
        points = lcs_prune(points, X, cfg)
    with torch.no_grad():
        cas = cas_forward(efc_model, as_tensor(X))
    segments = extract_segments(points, cas, cfg)
    return (segments, points) if return_points else segments


def write_segments(path, rows: Sequence[tuple[str, Segment]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SEGMENT_HEADER)
        for vid, seg in rows:
            w.writerow([vid, seg.start, seg.end, seg.class_id, f"{seg.score:.6f}"])


def read_segments(path) -> list[tuple[str, Segment]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != SEGMENT_HEADER:
            raise FormatError(f"{path}: expected header {','.join(SEGMENT_HEADER)}")
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                vid, s, e, c, score = row
                out.append((vid, Segment(int(s), int(e), int(c), float(score))))
            except ValueError as err:
                raise FormatError(f"{path}:{lineno}: {err}") from None
        return out
