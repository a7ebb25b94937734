"""Feature/annotation files and the synthetic piecewise-stationary corpus."""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"LSEG"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sIIIQ")  # magic, version, T, F, reserved
ANNOTATION_HEADER = ["video_id", "start", "end", "class_id"]


class FormatError(Exception):
    pass


class MagicError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class VersionError(FormatError):
    pass


class AnnotationError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class GenSpecError(ValueError):
    pass


@dataclass
class FeatureSequence:
    video_id: str
    data: np.ndarray  # (T, F) float64

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise ValueError(f"{self.video_id}: features must be a non-empty T x F matrix")
        if not np.isfinite(self.data).all():
            raise ValueError(f"{self.video_id}: non-finite feature values")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def F(self) -> int:
        return self.data.shape[1]


@dataclass
class GroundTruth:
    video_id: str
    T: int
    num_classes: int
    annotations: list[tuple[int, int, int]] = field(default_factory=list)

    def __post_init__(self):
        self.annotations = sorted((int(s), int(e), int(c)) for s, e, c in self.annotations)
        validate_annotations(self.annotations, self.T, self.num_classes)

    @property
    def label(self) -> np.ndarray:
        """Multi-hot class vector, l1-normalized."""
        if not self.annotations:
            raise AnnotationError(f"{self.video_id}: no annotations, video label undefined")
        y = np.zeros(self.num_classes)
        for _, _, c in self.annotations:
            y[c] = 1.0
        return y / y.sum()

    @property
    def classes(self) -> set[int]:
        return {c for _, _, c in self.annotations}

    @property
    def change_points(self) -> list[int]:
        pts = {p for s, e, _ in self.annotations for p in (s, e)}
        return sorted(p for p in pts if 0 < p < self.T)


def validate_annotations(rows, T: int | None, num_classes: int | None, lines=None) -> None:
    prev_end, prev_line = None, None
    order = sorted(range(len(rows)), key=lambda i: rows[i][:2])
    for i in order:
        s, e, c = rows[i]
        line = lines[i] if lines is not None else None
        if not 0 <= s < e:
            raise AnnotationError(f"invalid interval [{s}, {e})", line)
        if T is not None and e > T:
            raise AnnotationError(f"interval [{s}, {e}) exceeds video length {T}", line)
        if num_classes is not None and not 0 <= c < num_classes:
            raise AnnotationError(f"class {c} outside [0, {num_classes})", line)
        if prev_end is not None and s < prev_end:
            raise AnnotationError(f"interval [{s}, {e}) overlaps the one on line {prev_line}", line)
        prev_end, prev_line = e, line


def write_features(path, seq: FeatureSequence) -> None:
    path = Path(path)
    header = _FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, seq.T, seq.F, 0)
    path.write_bytes(header + seq.data.astype("<f8").tobytes(order="C"))


def read_features(path, video_id: str | None = None) -> FeatureSequence:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _FEATURE_HEADER.size:
        raise TruncationError(f"{path}: {len(raw)} bytes, shorter than the 24-byte header")
    magic, version, T, F, _ = _FEATURE_HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise MagicError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    expected = _FEATURE_HEADER.size + 8 * T * F
    if len(raw) != expected:
        raise TruncationError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_FEATURE_HEADER.size).reshape(T, F)
    return FeatureSequence(video_id or path.stem, data.astype(np.float64))


def write_annotations(path, truths: list[GroundTruth]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ANNOTATION_HEADER)
        for gt in truths:
            for s, e, c in gt.annotations:
                w.writerow([gt.video_id, s, e, c])


def read_annotations(path, lengths: dict[str, int] | None = None,
                     num_classes: int | None = None) -> dict[str, GroundTruth]:
    """Parse ``video_id,start,end,class_id`` rows grouped per video.

    ``lengths`` (video id -> T) enables range checks and also lists videos
    that carry no annotation rows; without it T is taken as the last end.
    """
    rows: dict[str, list] = {}
    lines: dict[str, list] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ANNOTATION_HEADER:
            raise AnnotationError(f"expected header {','.join(ANNOTATION_HEADER)}", 1)
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not r.strip() for r in rec):
                continue
            if len(rec) != 4:
                raise AnnotationError(f"expected 4 fields, found {len(rec)}", lineno)
            try:
                s, e, c = int(rec[1]), int(rec[2]), int(rec[3])
            except ValueError as exc:
                raise AnnotationError(f"non-integer field ({exc})", lineno) from None
            vid = rec[0].strip()
            if lengths is not None and vid not in lengths:
                raise AnnotationError(f"unknown video {vid!r}", lineno)
            rows.setdefault(vid, []).append((s, e, c))
            lines.setdefault(vid, []).append(lineno)
    if num_classes is None:
        num_classes = 1 + max((c for rs in rows.values() for _, _, c in rs), default=0)
    out = {}
    for vid in sorted(set(rows) | set(lengths or {})):
        rs = rows.get(vid, [])
        T = lengths[vid] if lengths is not None else max(e for _, e, _ in rs)
        validate_annotations(rs, T, num_classes, lines.get(vid))
        out[vid] = GroundTruth(vid, T, num_classes, rs)
    return out


@dataclass
class GenSpec:
    seed: int = 0
    num_videos: int = 160
    t_min: int = 80
    t_max: int = 200
    feature_dim: int = 16
    num_classes: int = 3
    noise_sigma: float = 0.3
    drift_amplitude: float | None = None  # defaults to 0.3 * noise_sigma
    drift_period: float = 40.0
    min_actions: int = 1
    max_actions: int = 3
    min_regime_length: int = 8
    background_fraction: float = 0.5
    second_class_prob: float = 0.25
    prototypes: list[list[float]] | None = None  # (C + 1) x F, last row background

    def __post_init__(self):
        if self.noise_sigma <= 0:
            raise GenSpecError("noise_sigma must be positive")
        if not 1 <= self.min_actions <= self.max_actions:
            raise GenSpecError("need 1 <= min_actions <= max_actions")
        if not 1 <= self.t_min <= self.t_max:
            raise GenSpecError("need 1 <= t_min <= t_max")
        if not 0 < self.background_fraction < 1:
            raise GenSpecError("background_fraction must lie in (0, 1)")
        if self.num_classes < 1 or self.feature_dim < 1 or self.num_videos < 1:
            raise GenSpecError("num_classes, feature_dim and num_videos must be positive")
        # regimes alternate bg / action / bg ..., so k actions need 2k + 1 regimes
        need = (2 * self.max_actions + 1) * self.min_regime_length
        if need > self.t_min:
            raise GenSpecError(
                f"infeasible: {2 * self.max_actions + 1} regimes x min length "
                f"{self.min_regime_length} = {need} > t_min {self.t_min}")

    @property
    def drift(self) -> float:
        return 0.3 * self.noise_sigma if self.drift_amplitude is None else self.drift_amplitude

    def prototype_matrix(self) -> np.ndarray:
        if self.prototypes is not None:
            protos = np.asarray(self.prototypes, dtype=np.float64)
            if protos.shape != (self.num_classes + 1, self.feature_dim):
                raise GenSpecError(f"prototypes must be {self.num_classes + 1} x {self.feature_dim}")
        else:
            protos = np.random.default_rng([self.seed, 1]).normal(
                size=(self.num_classes + 1, self.feature_dim))
        unit = protos / np.linalg.norm(protos, axis=1, keepdims=True)
        cos = unit @ unit.T
        np.fill_diagonal(cos, 0.0)
        if np.abs(cos).max() > 1 - 1e-6:
            raise GenSpecError("prototypes must be pairwise non-collinear")
        return protos

    def to_dict(self) -> dict:
        return asdict(self)


def _split_lengths(rng, T: int, n: int, min_len: int) -> list[int]:
    spare = T - n * min_len
    cuts = np.sort(rng.integers(0, spare + 1, size=n - 1))
    parts = np.diff(np.concatenate([[0], cuts, [spare]]))
    return [int(min_len + p) for p in parts]


def generate_video(spec: GenSpec, rng: np.random.Generator, protos: np.ndarray, video_id: str):
    C, F = spec.num_classes, spec.feature_dim
    T = int(rng.integers(spec.t_min, spec.t_max + 1))
    n_act = int(rng.integers(spec.min_actions, spec.max_actions + 1))
    classes = [int(rng.integers(C))]
    if C > 1 and rng.random() < spec.second_class_prob:
        classes.append(int((classes[0] + rng.integers(1, C)) % C))
    act_classes = [classes[i % len(classes)] for i in range(n_act)]
    rng.shuffle(act_classes)

    n_reg = 2 * n_act + 1
    bg_total = int(round(spec.background_fraction * T))
    bg_total = min(max(bg_total, (n_act + 1) * spec.min_regime_length),
                   T - n_act * spec.min_regime_length)
    bg_lens = _split_lengths(rng, bg_total, n_act + 1, spec.min_regime_length)
    act_lens = _split_lengths(rng, T - bg_total, n_act, spec.min_regime_length)
    lens = [bg_lens[i // 2] if i % 2 == 0 else act_lens[i // 2] for i in range(n_reg)]

    X = np.empty((T, F))
    annotations, t0 = [], 0
    for r, n in enumerate(lens):
        c = C if r % 2 == 0 else act_classes[r // 2]
        t = np.arange(t0, t0 + n)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        drift = spec.drift * np.sin(2.0 * np.pi * t / spec.drift_period + phase)
        X[t0:t0 + n] = protos[c] + drift[:, None] + spec.noise_sigma * rng.normal(size=(n, F))
        if c < C:
            annotations.append((t0, t0 + n, c))
        t0 += n
    return (FeatureSequence(video_id, X),
            GroundTruth(video_id, T, C, annotations))


def generate_corpus(spec: GenSpec) -> list[tuple[FeatureSequence, GroundTruth]]:
    """Deterministic corpus; each video alternates background and action regimes."""
    protos = spec.prototype_matrix()
    rng = np.random.default_rng(spec.seed)
    return [generate_video(spec, rng, protos, f"vid{i:04d}") for i in range(spec.num_videos)]


def save_corpus(directory, corpus, spec: GenSpec | None = None, splits: dict[str, list[str]] | None = None):
    """Write ``features/<id>.lseg``, ``annotations.csv`` and ``corpus.json``."""
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    for seq, _ in corpus:
        write_features(directory / "features" / f"{seq.video_id}.lseg", seq)
    write_annotations(directory / "annotations.csv", [gt for _, gt in corpus])
    meta = {
        "num_classes": corpus[0][1].num_classes,
        "videos": {seq.video_id: {"T": seq.T} for seq, _ in corpus},
        "splits": splits or {},
        "genspec": spec.to_dict() if spec is not None else None,
    }
    (directory / "corpus.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def load_corpus(directory, split: str | None = None):
    directory = Path(directory)
    meta_path = directory / "corpus.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} missing; run gen-data first")
    meta = json.loads(meta_path.read_text())
    lengths = {vid: v["T"] for vid, v in meta["videos"].items()}
    truths = read_annotations(directory / "annotations.csv", lengths, meta["num_classes"])
    ids = meta["splits"][split] if split else sorted(lengths)
    out = []
    for vid in ids:
        seq = read_features(directory / "features" / f"{vid}.lseg", vid)
        out.append((seq, truths[vid]))
    return out
