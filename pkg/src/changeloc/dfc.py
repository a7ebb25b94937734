"""Change-point detection with a two-level latent sequence model.

An encoder/decoder pair embeds each snippet (f = enc(x), u = dec(f)). Level 2
holds a slowly varying latent that is only advanced at change-points; level 1
carries per-snippet detail. At every step the level-2 posterior of the next
snippet is compared against two priors: the static prior (deterministic
state unchanged) and the change prior (state advanced by the GRU
transition). A change is declared when

    KL(q || p_static) > beta * KL(q || p_change)

with beta stepped up after a detection and down otherwise.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .numerics import (
    DTYPE, DenseLayer, DiagonalGaussian, GruCell, NonFiniteError, ParamStore, ShapeError,
    adam_step, as_tensor, gaussian_kl, gru_step, init_dense, init_gru, mlp_forward,
    reparam_sample,
)

LOG_2PI = math.log(2.0 * math.pi)


class DetectionError(FloatingPointError):
    def __init__(self, t: int, d_static: float, d_change: float):
        self.t, self.d_static, self.d_change = t, d_static, d_change
        super().__init__(f"non-finite divergence at t={t}: D_st={d_static}, D_ch={d_change}")


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, trace: list[float]):
        self.trace = trace
        super().__init__(message)


@dataclass
class DfcConfig:
    feature_dim: int = 16
    encoder_dims: tuple[int, ...] = (64, 64)
    decoder_dims: tuple[int, ...] = (64, 64)
    head_hidden: int = 64
    latent1: int = 16
    latent2: int = 16
    gru_hidden: int = 32
    beta0: float = 0.5
    alpha: float = 0.15
    beta_min: float = 0.15
    beta_max: float = 0.9
    warmup: int = 5
    # spliced training windows
    window: int = 100
    chunk_min: int = 1
    chunk_max: int = 16

    def __post_init__(self):
        self.encoder_dims = tuple(int(d) for d in self.encoder_dims)
        self.decoder_dims = tuple(int(d) for d in self.decoder_dims)
        if not 0 < self.beta_min <= self.beta0 <= self.beta_max:
            raise ValueError("need 0 < beta_min <= beta0 <= beta_max")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        dims = (self.feature_dim, self.head_hidden, self.latent1, self.latent2,
                self.gru_hidden, *self.encoder_dims, *self.decoder_dims)
        if min(dims) < 1 or not self.encoder_dims or not self.decoder_dims:
            raise ValueError("all dimensions must be >= 1")
        if not 1 <= self.chunk_min <= self.chunk_max:
            raise ValueError("need 1 <= chunk_min <= chunk_max")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_dims"] = list(self.encoder_dims)
        d["decoder_dims"] = list(self.decoder_dims)
        return d


def _head(rng, store, name, in_dim, hidden, out_dim) -> list[DenseLayer]:
    return [store.add_dense(f"{name}.0", init_dense(rng, in_dim, hidden, "relu")),
            store.add_dense(f"{name}.1", init_dense(rng, hidden, out_dim, "identity"))]


class DfcModel:
    def __init__(self, config: DfcConfig, seed: int = 0):
        self.config = c = config
        rng = np.random.default_rng(seed)
        self.store = store = ParamStore()
        self.encoder, prev = [], c.feature_dim
        for i, w in enumerate(c.encoder_dims):
            self.encoder.append(store.add_dense(f"enc.{i}", init_dense(rng, prev, w)))
            prev = w
        self.decoder = []
        for i, w in enumerate(c.decoder_dims):
            self.decoder.append(store.add_dense(f"dec.{i}", init_dense(rng, prev, w)))
            prev = w
        fdim, udim = c.encoder_dims[-1], c.decoder_dims[-1]
        self.transition: GruCell = store.add_gru("tran", init_gru(rng, c.latent2, c.gru_hidden))
        ctx = fdim + c.gru_hidden + udim
        self.prior2 = _head(rng, store, "prior2", ctx, c.head_hidden, 2 * c.latent2)
        self.post2 = _head(rng, store, "post2", ctx, c.head_hidden, 2 * c.latent2)
        self.prior1 = _head(rng, store, "prior1", c.latent1 + c.latent2, c.head_hidden, 2 * c.latent1)
        self.post1 = _head(rng, store, "post1", fdim + c.latent2, c.head_hidden, 2 * c.latent1)
        self.recon = _head(rng, store, "recon", c.latent1 + c.latent2, c.head_hidden, c.feature_dim)
        self.d0 = torch.zeros(c.gru_hidden, dtype=DTYPE)

    @property
    def f_dim(self) -> int:
        return self.encoder[-1].out_dim

    @property
    def u_dim(self) -> int:
        return self.decoder[-1].out_dim

    def save(self, path) -> None:
        save_checkpoint(path, "dfc", self.config.to_dict(), self.store.snapshot())

    @classmethod
    def load(cls, path) -> "DfcModel":
        cfg, arrays = load_checkpoint(path, "dfc")
        model = cls(DfcConfig(**cfg))
        model.store.load(arrays)
        return model


def encode(model: DfcModel, x) -> torch.Tensor:
    x = as_tensor(x)
    if x.shape[-1] != model.config.feature_dim:
        raise ShapeError(f"feature dim {x.shape[-1]} != {model.config.feature_dim}")
    return mlp_forward(model.encoder, x)


def decode(model: DfcModel, f: torch.Tensor) -> torch.Tensor:
    return mlp_forward(model.decoder, f)


def prior_static(model: DfcModel, f, d, u) -> DiagonalGaussian:
    if f is None or d is None or u is None:
        raise ValueError("state not initialised")
    return DiagonalGaussian.from_head(mlp_forward(model.prior2, torch.cat([f, d, u], -1)))


def prior_change(model: DfcModel, f, d, v, u) -> tuple[DiagonalGaussian, torch.Tensor]:
    """Change prior built from the transition's prediction of the next state.

    The predicted state is returned but not committed anywhere.
    """
    if v is None:
        raise ValueError("state not initialised")
    d_next = gru_step(model.transition, v, d)
    return prior_static(model, f, d_next, u), d_next


def posterior(model: DfcModel, f_next, d_next, u) -> DiagonalGaussian:
    return DiagonalGaussian.from_head(mlp_forward(model.post2, torch.cat([f_next, d_next, u], -1)))


def level1_prior(model: DfcModel, v1_prev, v2) -> DiagonalGaussian:
    return DiagonalGaussian.from_head(mlp_forward(model.prior1, torch.cat([v1_prev, v2], -1)))


def level1_posterior(model: DfcModel, f, v2) -> DiagonalGaussian:
    return DiagonalGaussian.from_head(mlp_forward(model.post1, torch.cat([f, v2], -1)))


def reconstruct(model: DfcModel, v1, v2) -> torch.Tensor:
    return mlp_forward(model.recon, torch.cat([v1, v2], -1))


# -- online detection ---------------------------------------------------------

@dataclass(frozen=True)
class ChangeRecord:
    t: int
    d_static: float
    d_change: float
    beta: float


@dataclass
class DfcState:
    t: int
    f: torch.Tensor
    u: torch.Tensor
    d: torch.Tensor
    v1: torch.Tensor
    v2: torch.Tensor
    v_commit: torch.Tensor  # level-2 latent at the last level-2 update; feeds the transition
    beta: float
    change_log: list[ChangeRecord] = field(default_factory=list)


def is_change_point(d_static: float, d_change: float, beta: float) -> bool:
    """The static world explains the next snippet worse than a fresh regime would."""
    return d_static > beta * d_change


def next_beta(beta: float, changed: bool, config: DfcConfig) -> float:
    """Raise the threshold after a change, relax it otherwise; clamped."""
    if changed:
        return min(beta + config.alpha, config.beta_max)
    return max(beta - config.alpha, config.beta_min)


@torch.no_grad()
def initial_state(model: DfcModel, x0) -> DfcState:
    f = encode(model, x0)
    u = decode(model, f)
    d = model.d0.clone()
    q = posterior(model, f, d, torch.zeros(model.u_dim, dtype=DTYPE))
    v1 = level1_posterior(model, f, q.mean).mean
    return DfcState(0, f, u, d, v1, q.mean, q.mean, model.config.beta0)


@torch.no_grad()
def step_detect(model: DfcModel, state: DfcState, x_next) -> tuple[bool, DfcState]:
    """Advance the detector by one snippet; the input state is left untouched."""
    c = model.config
    f1 = encode(model, x_next)
    p_st = prior_static(model, state.f, state.d, state.u)
    p_ch, d_next = prior_change(model, state.f, state.d, state.v_commit, state.u)
    q = posterior(model, f1, d_next, state.u)
    d_st = float(gaussian_kl(q, p_st))
    d_ch = float(gaussian_kl(q, p_ch))
    t1 = state.t + 1
    if not (math.isfinite(d_st) and math.isfinite(d_ch)):
        raise DetectionError(t1, d_st, d_ch)

    is_change = t1 >= c.warmup and is_change_point(d_st, d_ch, state.beta)
    log = list(state.change_log)
    if is_change:
        log.append(ChangeRecord(t1, d_st, d_ch, state.beta))
        d, v_commit = model.d0.clone(), q.mean
    else:
        d, v_commit = state.d, state.v_commit
    beta = next_beta(state.beta, is_change, c)
    v1 = level1_posterior(model, f1, q.mean).mean
    return is_change, DfcState(t1, f1, decode(model, f1), d, v1, q.mean, v_commit, beta, log)


def detect_sequence(model: DfcModel, X, return_state: bool = False):
    """Fold ``step_detect`` over a (T, F) sequence; returns sorted change indices."""
    X = as_tensor(getattr(X, "data", X))
    if X.dim() != 2 or X.shape[0] < 1:
        raise ShapeError("expected a non-empty (T, F) sequence")
    state = initial_state(model, X[0])
    for t in range(1, X.shape[0]):
        _, state = step_detect(model, state, X[t])
    points = [r.t for r in state.change_log]
    return (points, state) if return_state else points


# -- variational objective ----------------------------------------------------

@dataclass
class ElboTerms:
    recon: torch.Tensor  # (B,)
    kl1: torch.Tensor
    kl2: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.recon + self.kl1 + self.kl2


def draw_noise(rng: np.random.Generator, B: int, T: int, config: DfcConfig):
    return (torch.from_numpy(rng.standard_normal((B, T, config.latent1))),
            torch.from_numpy(rng.standard_normal((B, T, config.latent2))))


def elbo_terms(model: DfcModel, X, updates=None, noise=None) -> ElboTerms:
    """Negative ELBO pieces for a batch of sequences ``X`` of shape (B, T, F).

    ``updates`` (B, T) marks steps at which level 2 takes a change update: the
    level-2 KL there is measured against the change prior and the transition
    input is refreshed. Elsewhere the static prior applies. Step 0 is always
    an update against the standard normal prior. ``noise`` is a pair of
    standard-normal arrays (B, T, L1), (B, T, L2); ``None`` uses the means.
    """
    X = as_tensor(X)
    if X.dim() == 2:
        X = X[None]
    B, T, F = X.shape
    c = model.config
    if F != c.feature_dim:
        raise ShapeError(f"feature dim {F} != {c.feature_dim}")
    if updates is None:
        updates = torch.zeros(B, T, dtype=torch.bool)
    else:
        updates = torch.as_tensor(np.asarray(updates, dtype=bool)).reshape(B, T)
    if noise is None:
        eps1 = torch.zeros(B, T, c.latent1, dtype=DTYPE)
        eps2 = torch.zeros(B, T, c.latent2, dtype=DTYPE)
    else:
        eps1, eps2 = (as_tensor(n).reshape(B, T, -1) for n in noise)

    f = encode(model, X)
    u = decode(model, f)
    d0 = model.d0.expand(B, -1)

    q2 = posterior(model, f[:, 0], d0, torch.zeros(B, model.u_dim, dtype=DTYPE))
    kl2 = gaussian_kl(q2, DiagonalGaussian.standard(q2.mean.shape))
    v2 = reparam_sample(q2, eps2[:, 0])
    v_commit = v2
    v1_prev = torch.zeros(B, c.latent1, dtype=DTYPE)
    kl1 = torch.zeros(B, dtype=DTYPE)
    recon = torch.zeros(B, dtype=DTYPE)
    first_bad = None
    for t in range(T):
        if t > 0:
            upd = updates[:, t, None]
            d_next = gru_step(model.transition, v_commit, d0)
            q2 = posterior(model, f[:, t], d_next, u[:, t - 1])
            p2 = prior_static(model, f[:, t - 1], torch.where(upd, d_next, d0), u[:, t - 1])
            kl2 = kl2 + gaussian_kl(q2, p2)
            v2 = reparam_sample(q2, eps2[:, t])
            v_commit = torch.where(upd, v2, v_commit)
        q1 = level1_posterior(model, f[:, t], v2)
        kl1 = kl1 + gaussian_kl(q1, level1_prior(model, v1_prev, v2))
        v1 = reparam_sample(q1, eps1[:, t])
        err = X[:, t] - reconstruct(model, v1, v2)
        recon = recon + 0.5 * (err ** 2).sum(-1) + 0.5 * F * LOG_2PI
        v1_prev = v1
        if first_bad is None and not bool(torch.isfinite(recon + kl1 + kl2).all()):
            first_bad = t
    if first_bad is not None:
        b = int(torch.nonzero(~torch.isfinite(recon + kl1 + kl2))[0, 0])
        raise NonFiniteError(f"non-finite ELBO at time step {first_bad} of sequence {b}")
    return ElboTerms(recon, kl1, kl2)


def elbo_loss(model: DfcModel, X, noise=None, updates=None) -> torch.Tensor:
    """Negative ELBO (summed over time) of a single (T, F) sequence."""
    X = as_tensor(getattr(X, "data", X))
    if X.dim() != 2 or X.shape[0] < 2:
        raise ShapeError("elbo_loss needs a (T, F) sequence with T >= 2")
    if updates is not None:
        updates = np.asarray(updates, dtype=bool)[None]
    if noise is not None:
        noise = tuple(as_tensor(n)[None] for n in noise)
    return elbo_terms(model, X[None], updates, noise).total[0]


def splice_windows(sequences: list[np.ndarray], rng: np.random.Generator, count: int,
                   length: int, chunk_min: int, chunk_max: int):
    """Assemble windows from chunks of random sequences at random offsets.

    Returns (count, length, F) features and a (count, length) mask flagging
    chunk starts, which serve as level-2 update times.
    """
    F = sequences[0].shape[1]
    X = np.empty((count, length, F))
    U = np.zeros((count, length), dtype=bool)
    for b in range(count):
        t = 0
        while t < length:
            src = sequences[int(rng.integers(len(sequences)))]
            n = min(int(rng.integers(chunk_min, chunk_max + 1)), length - t, len(src))
            start = int(rng.integers(0, len(src) - n + 1))
            X[b, t:t + n] = src[start:start + n]
            U[b, t] = t > 0
            t += n
    return X, U


def train_dfc(model: DfcModel, dataset, epochs: int, lr: float = 1e-3, wd: float = 5e-4,
              seed: int = 0, batch_size: int = 16, log=None) -> list[float]:
    """Adam on the mean per-snippet negative ELBO of spliced windows.

    One epoch draws ``ceil(len(dataset) / batch_size)`` minibatches. Returns
    the per-epoch mean loss.
    """
    seqs = [np.asarray(getattr(s, "data", s), dtype=np.float64) for s in dataset]
    if not seqs:
        raise ValueError("empty training set")
    c = model.config
    rng = np.random.default_rng(seed)
    n_batches = -(-len(seqs) // batch_size)
    trace: list[float] = []
    for epoch in range(epochs):
        total = 0.0
        for _ in range(n_batches):
            X, U = splice_windows(seqs, rng, batch_size, c.window, c.chunk_min, c.chunk_max)
            noise = draw_noise(rng, batch_size, c.window, c)
            loss = elbo_terms(model, X, U, noise).total.mean() / c.window
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(f"loss diverged in epoch {epoch + 1}", trace)
            model.store.backward(loss)
            adam_step(model.store, lr, wd)
            total += loss.item()
        trace.append(total / n_batches)
        if log is not None:
            log(epoch + 1, trace[-1])
    return trace
