from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from prefscope import sae
from prefscope.errors import ModelStateError, NumericError, ValidationError


def small_model(d=6, M=5, k=2, prefix=3, seed=0, **kw):
    return sae.init_model(sae.SaeConfig(input_dim=d, latent_dim=M, k=k, matryoshka_prefix=prefix, seed=seed, **kw))


def test_config_validation():
    with pytest.raises(ValidationError):
        sae.SaeConfig(input_dim=4, latent_dim=3, k=4, matryoshka_prefix=3).validate()
    with pytest.raises(ValidationError):
        sae.SaeConfig(input_dim=4, latent_dim=8, k=2, matryoshka_prefix=9).validate()
    with pytest.raises(ValidationError):
        sae.SaeConfig(input_dim=4, topk_mode="bogus", latent_dim=8, k=2, matryoshka_prefix=4).validate()


def test_init_has_unit_decoder_and_tied_encoder():
    m = small_model()
    np.testing.assert_allclose(np.linalg.norm(m.W_dec, axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(m.W_enc, m.W_dec.T)


@given(arrays(np.float64, (4, 5), elements=st.floats(-3, 3, allow_nan=False)), st.integers(0, 20))
def test_topk_mask_matches_bruteforce(A, n_keep):
    np.testing.assert_array_equal(sae.topk_magnitude_mask(A, n_keep), oracles.topk_mask_bruteforce(A, n_keep))


def test_topk_ties_prefer_lower_index():
    A = np.ones((2, 3))
    mask = sae.topk_magnitude_mask(A, 2)
    assert mask.ravel().tolist() == [True, True, False, False, False, False]


def test_batch_topk_count_and_sign_symmetry(rng):
    m = small_model(d=8, M=6, k=2, prefix=3)
    X = rng.standard_normal((10, 8))
    Z, mask = sae.encode_batch_train(X, m, return_mask=True)
    assert mask.sum() == 10 * 2
    np.testing.assert_array_equal(sae.encode_batch_train(-X, m), -Z)


def test_per_prefix_mode_budgets(rng):
    m = small_model(d=8, M=8, k=2, prefix=4, topk_mode="per_prefix")
    X = rng.standard_normal((6, 8))
    _, mask = sae.encode_batch_train(X, m, return_mask=True)
    assert mask[:, :4].sum() == 6 * 1
    assert mask[:, 4:].sum() == 6 * 1


def test_inference_requires_theta():
    m = small_model()
    with pytest.raises(ModelStateError):
        sae.encode_inference(np.zeros(6), m)


def test_inference_threshold_and_dim_check(rng):
    m = small_model()
    m.theta = 0.5
    x = rng.standard_normal((3, 6))
    z = sae.encode_inference(x, m)
    a = x @ m.W_enc.T
    np.testing.assert_array_equal(z != 0, np.abs(a) >= 0.5)
    with pytest.raises(ValidationError):
        sae.encode_inference(np.zeros(5), m)
    with pytest.raises(NumericError):
        sae.encode_inference(np.full(6, np.nan), m)


def test_loss_matches_oracle_with_frozen_mask(rng):
    m = small_model()
    X = rng.standard_normal((7, 6))
    value, _, _, mask = sae.loss_and_grads(X, m)
    assert value == pytest.approx(oracles.matryoshka_loss(X, m.W_enc, m.W_dec, mask, 3), rel=1e-12)


def test_training_is_deterministic_and_renormalizes(rng):
    X = rng.standard_normal((300, 6))
    cfg = sae.SaeConfig(input_dim=6, latent_dim=5, k=2, matryoshka_prefix=3, batch_size=50, epochs=3, seed=4)
    norms = []
    a = sae.train(X, cfg, callback=lambda step, mdl: norms.append(np.linalg.norm(mdl.W_dec, axis=0)))
    b = sae.train(X, cfg)
    np.testing.assert_array_equal(a.W_enc, b.W_enc)
    np.testing.assert_array_equal(a.W_dec, b.W_dec)
    assert a.theta == b.theta and a.theta > 0
    assert len(norms) == 3 * 6
    assert max(np.max(np.abs(n - 1)) for n in norms) < 1e-12
    assert a.metadata["steps"] == 18


def test_training_rejects_bad_input(rng):
    cfg = sae.SaeConfig(input_dim=6, latent_dim=5, k=2, matryoshka_prefix=3, batch_size=50, epochs=1)
    with pytest.raises(ValidationError):
        sae.train(rng.standard_normal((10, 6)), cfg)
    with pytest.raises(ValidationError):
        sae.train(rng.standard_normal((100, 5)), cfg)
    X = rng.standard_normal((100, 6))
    X[3, 2] = np.inf
    with pytest.raises(NumericError):
        sae.train(X, cfg)


def test_loss_decreases(rng):
    dirs = np.linalg.qr(rng.standard_normal((6, 3)))[0].T
    codes = rng.standard_normal((600, 3)) * (rng.random((600, 3)) < 0.4)
    X = codes @ dirs + 0.01 * rng.standard_normal((600, 6))
    cfg = sae.SaeConfig(input_dim=6, latent_dim=4, k=1, matryoshka_prefix=2, batch_size=60, epochs=40,
                        learning_rate=5e-3)
    m = sae.train(X, cfg)
    assert m.train_loss_trace[-1] < m.train_loss_trace[0]


def test_checkpoint_round_trip_is_exact(tmp_path, rng):
    X = rng.standard_normal((120, 6))
    m = sae.train(X, sae.SaeConfig(input_dim=6, latent_dim=5, k=2, matryoshka_prefix=3, batch_size=40, epochs=2))
    path = sae.save_checkpoint(m, tmp_path / "m.json")
    r = sae.load_checkpoint(path)
    np.testing.assert_array_equal(r.W_enc, m.W_enc)
    np.testing.assert_array_equal(r.W_dec, m.W_dec)
    assert r.theta == m.theta and r.config == m.config
    np.testing.assert_array_equal(sae.transform(X, r), sae.transform(X, m))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-5, 5, allow_nan=False)))
def test_inference_is_odd(x):
    m = small_model()
    m.theta = 0.3
    np.testing.assert_array_equal(sae.encode_inference(-x, m), -sae.encode_inference(x, m))
