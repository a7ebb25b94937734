import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from changeloc.dataio import GenSpec, generate_corpus
from changeloc.dfc import (
    DetectionError, DfcConfig, DfcModel, decode, detect_sequence, draw_noise, elbo_loss,
    elbo_terms, encode, initial_state, is_change_point, level1_posterior, level1_prior,
    next_beta, posterior, prior_change, prior_static, reconstruct, splice_windows, step_detect,
    train_dfc,
)
from changeloc.numerics import DiagonalGaussian, as_tensor, gaussian_kl, reparam_sample

SMALL = dict(feature_dim=6, encoder_dims=(8,), decoder_dims=(8,), head_hidden=8, latent1=3,
             latent2=4, gru_hidden=5)


def ones(n):
    return torch.ones(n, dtype=torch.float64)


def zeros(n):
    return torch.zeros(n, dtype=torch.float64)


def randn(n):
    return torch.randn(n, dtype=torch.float64)


def small_model(seed=0, **kw):
    return DfcModel(DfcConfig(**{**SMALL, **kw}), seed=seed)


def zero_params(model, *prefixes):
    with torch.no_grad():
        for n, p in model.store.params.items():
            if n.startswith(prefixes):
                p.zero_()


def test_config_validation():
    with pytest.raises(ValueError):
        DfcConfig(beta0=0.95)
    with pytest.raises(ValueError):
        DfcConfig(alpha=-0.1)
    with pytest.raises(ValueError):
        DfcConfig(latent1=0)
    DfcConfig(alpha=0.0)


def test_encode_zero_and_identity():
    m = small_model()
    zero_params(m, "enc.")
    assert torch.count_nonzero(encode(m, np.ones(6))) == 0
    m = DfcModel(DfcConfig(**{**SMALL, "encoder_dims": (6,)}))
    with torch.no_grad():
        m.encoder[0].weight.copy_(torch.eye(6))
        m.encoder[0].bias.zero_()
    x = np.arange(1.0, 7.0)
    assert encode(m, x).tolist() == x.tolist()


def test_decode_zero_and_composition():
    m = small_model(1)
    x = as_tensor(np.linspace(-1, 1, 6))
    f = encode(m, x)
    h = torch.relu(f @ m.decoder[0].weight.T + m.decoder[0].bias)
    assert torch.equal(decode(m, f), h)
    zero_params(m, "dec.")
    assert torch.count_nonzero(decode(m, f)) == 0


def test_zero_heads_give_standard_normal():
    m = small_model()
    zero_params(m, "prior2.", "post2.")
    f, u, d = ones(8), ones(8), ones(5)
    for g in (prior_static(m, f, d, u), posterior(m, f, d, u)):
        assert g.mean.tolist() == [0.0] * 4 and g.log_var.tolist() == [0.0] * 4


def test_prior_static_uninitialised_state():
    with pytest.raises(ValueError):
        prior_static(small_model(), ones(8), None, ones(8))


def test_zero_transition_change_prior_equals_static_at_zero():
    m = small_model(2)
    zero_params(m, "tran.")
    f, u, v = randn(8), randn(8), ones(4)
    p_ch, d_next = prior_change(m, f, zeros(5), v, u)
    assert d_next.tolist() == [0.0] * 5
    p_st = prior_static(m, f, zeros(5), u)
    assert torch.equal(p_ch.mean, p_st.mean) and torch.equal(p_ch.log_var, p_st.log_var)


def test_shared_head_symmetry_gives_zero_kl():
    m = small_model(3)
    with torch.no_grad():
        for a, b in zip(m.post2, m.prior2):
            b.weight.copy_(a.weight)
            b.bias.copy_(a.bias)
    f, u, d = randn(8), randn(8), randn(5)
    assert gaussian_kl(posterior(m, f, d, u), prior_static(m, f, d, u)).item() == 0.0


def test_boundary_condition_and_threshold_update():
    cfg = DfcConfig()
    assert is_change_point(1.0, 0.5, 0.9)
    assert not is_change_point(0.4, 0.5, 0.9)
    assert next_beta(0.5, True, cfg) == pytest.approx(0.65)
    assert next_beta(0.20, False, cfg) == 0.15
    assert next_beta(0.85, True, cfg) == 0.9


@given(st.lists(st.booleans(), max_size=300), st.sampled_from([0.15, 0.3, 0.5, 0.7, 0.9]))
def test_beta_stays_in_range(decisions, beta0):
    cfg = DfcConfig(beta0=beta0)
    beta = cfg.beta0
    for d in decisions:
        beta = next_beta(beta, d, cfg)
        assert cfg.beta_min - 1e-15 <= beta <= cfg.beta_max + 1e-15


def test_detect_sequence_trivial_and_pure():
    m = small_model(4)
    assert detect_sequence(m, np.ones((1, 6))) == []
    X = np.random.default_rng(0).normal(size=(40, 6))
    before = m.store.snapshot()
    a, b = detect_sequence(m, X), detect_sequence(m, X)
    assert a == b
    assert all(t >= m.config.warmup for t in a)
    after = m.store.snapshot()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_step_detect_leaves_input_state_and_resets():
    m = small_model(5)
    X = np.random.default_rng(1).normal(size=(30, 6))
    state = initial_state(m, X[0])
    for t in range(1, 30):
        snapshot = (state.t, state.beta, len(state.change_log), state.v_commit.clone())
        changed, new = step_detect(m, state, X[t])
        assert (state.t, state.beta, len(state.change_log)) == snapshot[:3]
        assert torch.equal(state.v_commit, snapshot[3])
        assert m.config.beta_min <= new.beta <= m.config.beta_max
        if changed:
            assert torch.equal(new.d, m.d0)
            assert new.change_log[-1].t == t
        state = new


@given(st.integers(0, 2**31 - 1))
def test_fixed_point_transition_makes_priors_identical(seed):
    # zero GRU weights map any latent to d0, the committed state
    m = small_model(seed % 1000)
    zero_params(m, "tran.")
    X = np.random.default_rng(seed).normal(size=(12, 6))
    _, state = detect_sequence(m, X, return_state=True)
    for rec in state.change_log:
        assert rec.d_static == rec.d_change
    expected = [t for t in range(m.config.warmup, 12)]
    # D_st = D_ch > 0 means the rule reduces to 1 > beta, true for every beta < 1
    assert [r.t for r in state.change_log] == expected


def test_detection_error_carries_kls():
    m = small_model(6)
    X = np.zeros((8, 6))
    X[5, 0] = np.inf
    with pytest.raises(DetectionError) as e:
        detect_sequence(m, X)
    assert e.value.t == 5


def test_elbo_constant_floor():
    m = small_model()
    zero_params(m, "prior1.", "post1.", "prior2.", "post2.", "recon.")
    T, F = 7, 6
    loss = elbo_loss(m, np.zeros((T, F)))
    assert loss.item() == pytest.approx(T * F / 2 * math.log(2 * math.pi), rel=1e-14)


@torch.no_grad()
def _reference_elbo(m, X, updates, noise):
    """Step-by-step negative ELBO written against the public building blocks."""
    X = as_tensor(X)
    eps1, eps2 = (as_tensor(n) for n in noise)
    f = [encode(m, x) for x in X]
    u = [decode(m, fi) for fi in f]
    d0 = m.d0
    recon, kls = 0.0, []
    q = posterior(m, f[0], d0, torch.zeros(m.u_dim, dtype=torch.float64))
    kls.append(gaussian_kl(q, DiagonalGaussian.standard(q.mean.shape)))
    v2 = reparam_sample(q, eps2[0])
    committed = v2
    v1_prev = torch.zeros(m.config.latent1, dtype=torch.float64)
    for t in range(len(X)):
        if t > 0:
            p_ch, d_next = prior_change(m, f[t - 1], d0, committed, u[t - 1])
            q = posterior(m, f[t], d_next, u[t - 1])
            p = p_ch if updates[t] else prior_static(m, f[t - 1], d0, u[t - 1])
            kls.append(gaussian_kl(q, p))
            v2 = reparam_sample(q, eps2[t])
            if updates[t]:
                committed = v2
        q1 = level1_posterior(m, f[t], v2)
        kls.append(gaussian_kl(q1, level1_prior(m, v1_prev, v2)))
        v1 = reparam_sample(q1, eps1[t])
        x_hat = reconstruct(m, v1, v2)
        recon += 0.5 * float(((X[t] - x_hat) ** 2).sum()) + 0.5 * len(X[t]) * math.log(2 * math.pi)
        v1_prev = v1
    return recon, float(sum(kls))


def test_elbo_decomposition_matches_reference():
    m = small_model(7)
    rng = np.random.default_rng(2)
    T = 9
    X = rng.normal(size=(T, 6))
    updates = np.zeros(T, dtype=bool)
    updates[[3, 6]] = True
    noise = tuple(n[0] for n in draw_noise(rng, 1, T, m.config))
    recon, kl = _reference_elbo(m, X, updates, noise)
    total = elbo_loss(m, X, noise, updates).item()
    assert total == pytest.approx(recon + kl, abs=1e-9)
    terms = elbo_terms(m, X, updates, tuple(n[None] for n in noise))
    assert terms.recon.item() == pytest.approx(recon, abs=1e-9)
    assert (terms.kl1 + terms.kl2).item() == pytest.approx(kl, abs=1e-9)
    assert terms.kl1.item() >= 0 and terms.kl2.item() >= 0
    assert total >= terms.recon.item()


def test_elbo_batch_matches_single():
    m = small_model(8)
    rng = np.random.default_rng(3)
    X = rng.normal(size=(3, 10, 6))
    U = rng.random((3, 10)) < 0.2
    noise = draw_noise(rng, 3, 10, m.config)
    batch = elbo_terms(m, X, U, noise).total
    for b in range(3):
        single = elbo_loss(m, X[b], (noise[0][b], noise[1][b]), U[b])
        assert batch[b].item() == pytest.approx(single.item(), rel=1e-12)


def test_elbo_errors():
    m = small_model()
    with pytest.raises(ValueError):
        elbo_loss(m, np.zeros((1, 6)))
    X = np.zeros((6, 6))
    X[4, 2] = np.nan
    with pytest.raises(FloatingPointError, match="time step 4"):
        elbo_loss(m, X)


def test_splice_windows_layout():
    rng = np.random.default_rng(0)
    seqs = [np.full((20, 2), float(i)) for i in range(3)]
    X, U = splice_windows(seqs, rng, 4, 30, 2, 5)
    assert X.shape == (4, 30, 2) and U.shape == (4, 30)
    assert not U[:, 0].any()
    for b in range(4):
        starts = [0] + list(np.nonzero(U[b])[0]) + [30]
        for s, e in zip(starts[:-1], starts[1:]):
            assert len(np.unique(X[b, s:e])) == 1
            assert e - s <= 5


def _tiny_corpus(n=8, F=6):
    spec = GenSpec(num_videos=n, feature_dim=F, t_min=40, t_max=60, min_regime_length=5)
    return [s for s, _ in generate_corpus(spec)]


def test_train_lr_zero_keeps_parameters():
    m = small_model(window=30)
    before = m.store.snapshot()
    trace = train_dfc(m, _tiny_corpus(), 2, lr=0.0, wd=0.0, batch_size=4)
    assert len(trace) == 2
    after = m.store.snapshot()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_train_deterministic():
    data = _tiny_corpus()
    a, b = small_model(window=30), small_model(window=30)
    ta = train_dfc(a, data, 2, seed=5, batch_size=4)
    tb = train_dfc(b, data, 2, seed=5, batch_size=4)
    assert ta == tb
    sa, sb = a.store.snapshot(), b.store.snapshot()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)


def test_train_loss_drops_on_small_corpus():
    spec = GenSpec(num_videos=64, feature_dim=8, t_min=100, t_max=100)
    data = [s for s, _ in generate_corpus(spec)]
    m = DfcModel(DfcConfig(feature_dim=8), seed=0)
    trace = train_dfc(m, data, 20, lr=1e-3, seed=0)
    assert trace[19] < 0.8 * trace[0]


def test_checkpoint_round_trip(tmp_path):
    m = small_model(9)
    m.save(tmp_path / "d.ckpt")
    back = DfcModel.load(tmp_path / "d.ckpt")
    assert back.config == m.config
    X = np.random.default_rng(0).normal(size=(20, 6))
    assert detect_sequence(back, X) == detect_sequence(m, X)
    (tmp_path / "e.ckpt").write_bytes((tmp_path / "d.ckpt").read_bytes())
    m.save(tmp_path / "d2.ckpt")
    assert (tmp_path / "d2.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()
