"""Differentiable numerical kernels.

Dense layers, a GRU cell, diagonal Gaussians, a parameter store with Adam,
and a central finite-difference gradient checker. Values are float64 torch
tensors; analytic gradients come from torch's reverse-mode autograd.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
import torch

DTYPE = torch.float64
LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 10.0
ACTIVATIONS = ("relu", "identity", "tanh")


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def check_finite(x: torch.Tensor, what: str) -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


# While grad_check probes for kinks, every piecewise-linear op appends its
# active-region mask here; None means recording is off.
_kink_log: list[torch.Tensor] | None = None


def _note_region(mask: torch.Tensor) -> None:
    if _kink_log is not None:
        _kink_log.append(mask.detach().reshape(-1).clone())


def _activate(y: torch.Tensor, activation: str) -> torch.Tensor:
    if activation == "relu":
        _note_region(y > 0)
        return torch.relu(y)
    if activation == "tanh":
        return torch.tanh(y)
    return y


@dataclass
class DenseLayer:
    weight: torch.Tensor  # (out, in)
    bias: torch.Tensor  # (out,)
    activation: str = "relu"

    def __post_init__(self):
        if self.weight.dim() != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"weight {tuple(self.weight.shape)} incompatible with bias {tuple(self.bias.shape)}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def init_dense(rng: np.random.Generator, in_dim: int, out_dim: int,
               activation: str = "relu") -> DenseLayer:
    # uniform +-1/sqrt(fan_in) for weight and bias; He scaling pushed the
    # Gaussian heads' log-variances into the clamp at start-up
    a = 1.0 / math.sqrt(in_dim)
    w = rng.uniform(-a, a, size=(out_dim, in_dim))
    b = rng.uniform(-a, a, size=out_dim)
    return DenseLayer(as_tensor(w), as_tensor(b), activation)


def dense_forward(layer: DenseLayer, x: torch.Tensor) -> torch.Tensor:
    """Apply ``activation(W x + b)`` over the last axis of ``x``."""
    if x.shape[-1] != layer.in_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != layer in-dim {layer.in_dim}")
    return _activate(x @ layer.weight.T + layer.bias, layer.activation)


def mlp_forward(layers: Iterable[DenseLayer], x: torch.Tensor) -> torch.Tensor:
    for layer in layers:
        x = dense_forward(layer, x)
    return x


@dataclass
class GruCell:
    w_z: torch.Tensor  # (H, I)
    u_z: torch.Tensor  # (H, H)
    b_z: torch.Tensor
    w_r: torch.Tensor
    u_r: torch.Tensor
    b_r: torch.Tensor
    w_n: torch.Tensor
    u_n: torch.Tensor
    b_n: torch.Tensor

    @property
    def input_size(self) -> int:
        return self.w_z.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.w_z.shape[0]

    def parameters(self) -> dict[str, torch.Tensor]:
        return {k: getattr(self, k) for k in
                ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n")}


def init_gru(rng: np.random.Generator, input_size: int, hidden_size: int) -> GruCell:
    a = 1.0 / math.sqrt(hidden_size)

    def u(*shape):
        return as_tensor(rng.uniform(-a, a, size=shape))

    return GruCell(
        u(hidden_size, input_size), u(hidden_size, hidden_size), u(hidden_size),
        u(hidden_size, input_size), u(hidden_size, hidden_size), u(hidden_size),
        u(hidden_size, input_size), u(hidden_size, hidden_size), u(hidden_size),
    )


def gru_step(cell: GruCell, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """One gated update; ``h' = (1 - z) * h + z * tanh(W_n x + U_n (r * h) + b_n)``."""
    if x.shape[-1] != cell.input_size or h.shape[-1] != cell.hidden_size:
        raise ShapeError(
            f"gru expects input {cell.input_size} / hidden {cell.hidden_size}, "
            f"got {x.shape[-1]} / {h.shape[-1]}")
    z = torch.sigmoid(x @ cell.w_z.T + h @ cell.u_z.T + cell.b_z)
    r = torch.sigmoid(x @ cell.w_r.T + h @ cell.u_r.T + cell.b_r)
    n = torch.tanh(x @ cell.w_n.T + (r * h) @ cell.u_n.T + cell.b_n)
    return (1.0 - z) * h + z * n


class DiagonalGaussian:
    """Gaussian with diagonal covariance; log-variance clamped to [-10, 10]."""

    __slots__ = ("mean", "log_var")

    def __init__(self, mean, log_var):
        mean, log_var = as_tensor(mean), as_tensor(log_var)
        if mean.shape != log_var.shape:
            raise ShapeError(f"mean {tuple(mean.shape)} vs log_var {tuple(log_var.shape)}")
        self.mean = mean
        _note_region((log_var > LOG_VAR_MIN) & (log_var < LOG_VAR_MAX))
        self.log_var = torch.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    @classmethod
    def from_head(cls, out: torch.Tensor) -> "DiagonalGaussian":
        """Split a head output ``[mean; log_var]`` along the last axis."""
        if out.shape[-1] % 2:
            raise ShapeError("distribution head must emit an even number of values")
        mean, log_var = out.chunk(2, dim=-1)
        return cls(mean, log_var)

    @classmethod
    def standard(cls, shape) -> "DiagonalGaussian":
        return cls(torch.zeros(shape, dtype=DTYPE), torch.zeros(shape, dtype=DTYPE))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_var)

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.log_var.detach())

    def __repr__(self):
        return f"DiagonalGaussian(dim={self.dim}, batch={tuple(self.mean.shape[:-1])})"


def gaussian_kl(q: DiagonalGaussian, p: DiagonalGaussian) -> torch.Tensor:
    """KL(q || p) summed over the last axis (batched over leading axes)."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ShapeError(f"KL between dims {q.dim} and {p.dim}")
    # exp of the log-variance difference makes KL(g, g) exactly zero
    term = (p.log_var - q.log_var + torch.exp(q.log_var - p.log_var)
            + (q.mean - p.mean) ** 2 * torch.exp(-p.log_var) - 1.0)
    return 0.5 * term.sum(-1)


def reparam_sample(g: DiagonalGaussian, noise: torch.Tensor) -> torch.Tensor:
    noise = as_tensor(noise)
    if noise.shape[-1] != g.dim:
        raise ShapeError(f"noise dim {noise.shape[-1]} != gaussian dim {g.dim}")
    return g.mean + g.std * noise


class ParamStore:
    """Named leaf tensors with parallel gradient and Adam moment slots."""

    def __init__(self):
        self.params: dict[str, torch.Tensor] = {}
        self.grads: dict[str, torch.Tensor] = {}
        self.m: dict[str, torch.Tensor] = {}
        self.v: dict[str, torch.Tensor] = {}
        self.step = 0

    def add(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        tensor.requires_grad_(True)
        self.params[name] = tensor
        self.grads[name] = torch.zeros_like(tensor, requires_grad=False)
        self.m[name] = torch.zeros_like(self.grads[name])
        self.v[name] = torch.zeros_like(self.grads[name])
        return tensor

    def add_dense(self, prefix: str, layer: DenseLayer) -> DenseLayer:
        self.add(f"{prefix}.weight", layer.weight)
        self.add(f"{prefix}.bias", layer.bias)
        return layer

    def add_gru(self, prefix: str, cell: GruCell) -> GruCell:
        for k, t in cell.parameters().items():
            self.add(f"{prefix}.{k}", t)
        return cell

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    @property
    def size(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.zero_()

    def backward(self, loss: torch.Tensor) -> None:
        """Accumulate d(loss)/d(param) into the gradient slots."""
        names = list(self.params)
        grads = torch.autograd.grad(loss, [self.params[n] for n in names], allow_unused=True)
        for n, g in zip(names, grads):
            if g is not None:
                self.grads[n] += g

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.detach().numpy().copy() for n, p in self.params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        with torch.no_grad():
            for n, p in self.params.items():
                a = as_tensor(arrays[n])
                if a.shape != p.shape:
                    raise ShapeError(f"{n}: stored {tuple(a.shape)} vs model {tuple(p.shape)}")
                p.copy_(a)


def adam_step(store: ParamStore, lr: float, wd: float = 0.0,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam with L2 weight decay folded into the gradient.

    Gradient slots are zeroed afterwards.
    """
    for n, g in store.grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteError(f"non-finite gradient for parameter {n!r}")
    b1, b2 = betas
    store.step += 1
    bc1 = 1.0 - b1 ** store.step
    bc2 = 1.0 - b2 ** store.step
    with torch.no_grad():
        for n, p in store.params.items():
            g = store.grads[n]
            if wd:
                g = g + wd * p
            m, v = store.m[n], store.v[n]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(lr * (m / bc1) / (torch.sqrt(v / bc2) + eps))
    store.zero_grad()


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    entries_checked: int
    kinks_skipped: int = 0


def _eval_regions(loss_fn, record: bool):
    global _kink_log
    if not record:
        return loss_fn(), None
    _kink_log = []
    try:
        loss = loss_fn()
        regions = torch.cat(_kink_log) if _kink_log else torch.zeros(0, dtype=torch.bool)
    finally:
        _kink_log = None
    return loss, regions


def grad_check(loss_fn: Callable[[], torch.Tensor], store: ParamStore, eps: float = 1e-4,
               max_entries_per_param: int | None = None, seed: int = 0,
               floor: float = 1e-6, skip_kinks: bool = False) -> GradCheckResult:
    """Compare autograd gradients with central finite differences.

    Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``; the floor
    keeps entries whose true gradient is ~0 from reporting roundoff as error.
    When ``max_entries_per_param`` is set, that many entries are sampled from
    every parameter tensor.

    With ``skip_kinks`` the active regions of every ReLU and log-variance
    clamp are recorded at the three evaluation points; if any region flips
    inside the +-eps window the loss has a kink there, central differences
    are meaningless, and the entry is counted in ``kinks_skipped`` instead.
    """
    store.zero_grad()
    loss, base_regions = _eval_regions(loss_fn, skip_kinks)
    if not bool(torch.isfinite(loss)):
        raise NonFiniteError("loss is not finite")
    store.backward(loss)
    analytic = {n: g.clone() for n, g in store.grads.items()}
    store.zero_grad()
    rng = np.random.default_rng(seed)
    worst, worst_name, count, kinks = 0.0, "", 0, 0
    with torch.no_grad():
        for n, p in store.params.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel())
            if max_entries_per_param is not None and idx.size > max_entries_per_param:
                idx = np.sort(rng.choice(idx, size=max_entries_per_param, replace=False))
            a_flat = analytic[n].view(-1)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                lp, rp = _eval_regions(loss_fn, skip_kinks)
                flat[i] = orig - eps
                lm, rm = _eval_regions(loss_fn, skip_kinks)
                flat[i] = orig
                lp, lm = lp.item(), lm.item()
                if not (math.isfinite(lp) and math.isfinite(lm)):
                    raise NonFiniteError(f"loss not finite while perturbing {n}[{i}]")
                if skip_kinks and not (torch.equal(rp, base_regions)
                                       and torch.equal(rm, base_regions)):
                    kinks += 1
                    continue
                num = (lp - lm) / (2.0 * eps)
                a = a_flat[i].item()
                rel = abs(a - num) / max(abs(a), abs(num), floor)
                count += 1
                if rel > worst:
                    worst, worst_name = rel, f"{n}[{i}]"
    return GradCheckResult(worst, worst_name, count, kinks)
