"""Attention-based snippet classifier with foreground/background/context branches.

Every snippet gets C+1 class logits (the last class is background) and a
softmax over three branch attentions. A branch's video-level prediction is the
top-k temporal mean of its attention-weighted logits, passed through a softmax.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .numerics import (
    ParamStore, ShapeError, adam_step, as_tensor, init_dense, mlp_forward,
)

BRANCHES = ("fg", "bg", "ct")
LOG_FLOOR = 1e-12


@dataclass
class EfcConfig:
    feature_dim: int = 16
    num_classes: int = 3
    hidden: tuple[int, ...] = (64,)
    topk_divisor: int = 8

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if min(self.feature_dim, self.num_classes, self.topk_divisor, *self.hidden) < 1:
            raise ValueError("EFC dimensions must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


class EfcModel:
    def __init__(self, config: EfcConfig, seed: int = 0):
        self.config = c = config
        rng = np.random.default_rng(seed)
        self.store = store = ParamStore()
        self.embed, prev = [], c.feature_dim
        for i, h in enumerate(c.hidden):
            self.embed.append(store.add_dense(f"embed.{i}", init_dense(rng, prev, h)))
            prev = h
        self.cas_head = store.add_dense("cas", init_dense(rng, prev, c.num_classes + 1, "identity"))
        self.att_head = store.add_dense("att", init_dense(rng, prev, 3, "identity"))

    def save(self, path) -> None:
        save_checkpoint(path, "efc", self.config.to_dict(), self.store.snapshot())

    @classmethod
    def load(cls, path) -> "EfcModel":
        cfg, arrays = load_checkpoint(path, "efc")
        model = cls(EfcConfig(**cfg))
        model.store.load(arrays)
        return model


@dataclass
class CasMap:
    logits: torch.Tensor  # (C+1, T); last row is background
    attention: torch.Tensor  # (3, T) rows fg, bg, ct; columns sum to 1

    @property
    def T(self) -> int:
        return self.logits.shape[1]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0] - 1

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.logits.detach().numpy(), self.attention.detach().numpy()


def cas_forward(model: EfcModel, X) -> CasMap:
    X = as_tensor(getattr(X, "data", X))
    if X.dim() != 2 or X.shape[1] != model.config.feature_dim:
        raise ShapeError(f"expected (T, {model.config.feature_dim}) features, got {tuple(X.shape)}")
    h = mlp_forward(model.embed, X)
    logits = mlp_forward([model.cas_head], h)
    att = torch.softmax(mlp_forward([model.att_head], h), dim=-1)
    return CasMap(logits.T, att.T)


def branch_video_score(cas: CasMap, branch: str, topk_divisor: int = 8) -> torch.Tensor:
    b = BRANCHES.index(branch)
    weighted = cas.attention[b] * cas.logits
    k = max(1, cas.T // topk_divisor)
    pooled = torch.topk(weighted, k, dim=1).values.mean(dim=1)
    return torch.softmax(pooled, dim=0)


def make_branch_label(y, branch: str) -> np.ndarray:
    """Length C+1 target for a branch; ``y`` is the l1-normalized class vector."""
    y = np.asarray(y, dtype=np.float64)
    if branch == "fg":
        target = np.append(y, 0.0)
    elif branch == "bg":
        target = np.append(np.zeros_like(y), 1.0)
    elif branch == "ct":
        target = np.append(y, 1.0)
    else:
        raise ValueError(f"unknown branch {branch!r}")
    return target / target.sum()


def cross_entropy(target, probs: torch.Tensor) -> torch.Tensor:
    return -(as_tensor(target) * torch.log(torch.clamp(probs, min=LOG_FLOOR))).sum()


def branch_losses(model: EfcModel, X, y) -> dict[str, torch.Tensor]:
    cas = cas_forward(model, X)
    return {b: cross_entropy(make_branch_label(y, b),
                             branch_video_score(cas, b, model.config.topk_divisor))
            for b in BRANCHES}


def efc_loss(model: EfcModel, X, y) -> torch.Tensor:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (model.config.num_classes,):
        raise ShapeError(f"label must have {model.config.num_classes} entries")
    losses = branch_losses(model, X, y)
    return losses["fg"] + losses["bg"] + losses["ct"]


def train_efc(model: EfcModel, dataset, epochs: int, lr: float = 1e-3, wd: float = 5e-4,
              seed: int = 0, batch_size: int = 16, log=None) -> list[float]:
    """Adam over shuffled minibatches of (features, label) pairs."""
    data = [(as_tensor(getattr(X, "data", X)), np.asarray(y, dtype=np.float64)) for X, y in dataset]
    if not data:
        raise ValueError("empty training set")
    rng = np.random.default_rng(seed)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = np.sort(order[i:i + batch_size])
            loss = sum(efc_loss(model, *data[j]) for j in idx) / len(idx)
            model.store.backward(loss)
            adam_step(model.store, lr, wd)
            total += loss.item() * len(idx)
        trace.append(total / len(data))
        if log is not None:
            log(epoch + 1, trace[-1])
    return trace


@torch.no_grad()
def foreground_attention(model: EfcModel, X) -> np.ndarray:
    return cas_forward(model, X).attention[0].numpy()


@torch.no_grad()
def classify_video(model: EfcModel, X) -> np.ndarray:
    """Foreground-branch class probabilities over the C action classes (renormalized)."""
    p = branch_video_score(cas_forward(model, X), "fg", model.config.topk_divisor)[:-1].numpy()
    return p / p.sum()
