"""Localization and change-point metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)


def temporal_iou(a, b) -> float:
    """IoU of two half-open snippet intervals; accepts Segments or (start, end) pairs."""
    a0, a1 = (a.start, a.end) if hasattr(a, "start") else a[:2]
    b0, b1 = (b.start, b.end) if hasattr(b, "start") else b[:2]
    inter = max(0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [1.0]])
    for i in range(len(mprec) - 2, -1, -1):
        mprec[i] = max(mprec[i], mprec[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0] + 1
    return float(np.sum((mrec[idx] - mrec[idx - 1]) * mprec[idx]))


def average_precision(predictions, truths, iou_thr: float, class_id: int) -> float | None:
    """AP for one class; ``None`` when the class has no ground truth.

    ``predictions`` holds (video_id, Segment) pairs and ``truths`` holds
    (video_id, start, end, class_id) tuples. Predictions are ranked by score
    (ties: earlier start, then video id) and each one claims the unmatched
    ground truth of highest IoU if that IoU reaches the threshold.
    """
    gts: dict[str, list[tuple[int, int]]] = {}
    for vid, s, e, c in truths:
        if c == class_id:
            gts.setdefault(vid, []).append((s, e))
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    preds = [(vid, seg) for vid, seg in predictions if seg.class_id == class_id]
    if not preds:
        return 0.0
    preds.sort(key=lambda p: (-p[1].score, p[1].start, p[0], p[1].end))
    used = {vid: [False] * len(v) for vid, v in gts.items()}
    tp = np.zeros(len(preds))
    for i, (vid, seg) in enumerate(preds):
        best, best_j = iou_thr, -1
        for j, g in enumerate(gts.get(vid, [])):
            if used[vid][j]:
                continue
            iou = temporal_iou(seg, g)
            if iou >= best and (best_j < 0 or iou > best):
                best, best_j = iou, j
        if best_j >= 0:
            used[vid][best_j] = True
            tp[i] = 1.0
    hits = np.cumsum(tp)
    return interpolated_ap(hits / np.arange(1, len(preds) + 1), hits / n_gt)


@dataclass
class EvalReport:
    thresholds: tuple[float, ...]
    map_by_threshold: dict[float, float]
    per_class_ap: dict[float, dict[int, float]]
    changepoint: tuple[float, float, float] | None = None
    tolerance: int | None = None
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def average_map(self) -> float:
        return float(np.mean([self.map_by_threshold[t] for t in self.thresholds]))

    def to_text(self) -> str:
        lines = [f"map@{t:.2f}={self.map_by_threshold[t]:.6f}" for t in self.thresholds]
        lines.append(f"avg_map={self.average_map:.6f}")
        for t in self.thresholds:
            for c, ap in sorted(self.per_class_ap[t].items()):
                lines.append(f"ap@{t:.2f}/class{c}={ap:.6f}")
        if self.changepoint is not None:
            p, r, f = self.changepoint
            lines += [f"cp_tolerance={self.tolerance}", f"cp_precision={p:.6f}",
                      f"cp_recall={r:.6f}", f"cp_f1={f:.6f}"]
        lines += [f"{k}={v:.6f}" for k, v in sorted(self.extra.items())]
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iou_threshold", "class_id", "ap"])
            for t in self.thresholds:
                for c, ap in sorted(self.per_class_ap[t].items()):
                    w.writerow([f"{t:.2f}", c, f"{ap:.6f}"])
                w.writerow([f"{t:.2f}", "mean", f"{self.map_by_threshold[t]:.6f}"])


def parse_report(text: str) -> dict[str, float]:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = float(v)
    return out


def map_report(predictions, truths, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> EvalReport:
    truths = list(truths)
    if not truths:
        raise ValueError("empty ground-truth set")
    predictions = list(predictions)
    classes = sorted({c for _, _, _, c in truths})
    thresholds = tuple(float(t) for t in thresholds)
    per_class, maps = {}, {}
    for t in thresholds:
        aps = {c: average_precision(predictions, truths, t, c) for c in classes}
        per_class[t] = aps
        maps[t] = float(np.mean(list(aps.values())))
    return EvalReport(thresholds, maps, per_class)


def changepoint_matches(detected: Sequence[int], truth: Sequence[int], w: int = 2) -> int:
    """One-to-one matching within +-w, closest pairs first."""
    pairs = sorted((abs(d - t), d, t) for d in set(detected) for t in set(truth) if abs(d - t) <= w)
    used_d, used_t, n = set(), set(), 0
    for _, d, t in pairs:
        if d not in used_d and t not in used_t:
            used_d.add(d)
            used_t.add(t)
            n += 1
    return n


def _prf(matched: int, n_det: int, n_true: int) -> tuple[float, float, float]:
    p = matched / n_det if n_det else (1.0 if n_true == 0 else 0.0)
    r = matched / n_true if n_true else (1.0 if n_det == 0 else 0.0)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def changepoint_f1(detected: Sequence[int], truth: Sequence[int], w: int = 2) -> tuple[float, float, float]:
    return _prf(changepoint_matches(detected, truth, w), len(set(detected)), len(set(truth)))


def corpus_changepoint_f1(pairs: Iterable[tuple[Sequence[int], Sequence[int]]], w: int = 2):
    """Micro-averaged precision/recall/F1 over (detected, truth) pairs."""
    m = nd = nt = 0
    for det, tru in pairs:
        m += changepoint_matches(det, tru, w)
        nd += len(set(det))
        nt += len(set(tru))
    return _prf(m, nd, nt)
