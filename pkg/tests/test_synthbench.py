from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

from prefscope import synthbench as sb
from prefscope.errors import ValidationError


def test_directions_orthonormal():
    spec = sb.PlantedSpec(dim=32, n_features=6).resolved()
    np.testing.assert_allclose(spec.directions @ spec.directions.T, np.eye(6), atol=1e-10)


def test_invalid_specs():
    with pytest.raises(ValidationError):
        sb.PlantedSpec(n_features=3, activation_sparsity=4).resolved()
    with pytest.raises(ValidationError):
        sb.PlantedSpec(dim=4, n_features=5).resolved()
    with pytest.raises(ValidationError):
        sb.PlantedSpec(n_features=2, effect_sizes=[1.0]).resolved()


def test_generate_is_seed_deterministic(tmp_path):
    spec = sb.PlantedSpec(n_annotators=4, pairs_per_annotator=25, effect_sizes=[0.5] * 8, seed=3)
    d1, r1, g1 = sb.generate(spec)
    d2, r2, g2 = sb.generate(spec)
    assert [p.to_record() for p in d1.pairs] == [p.to_record() for p in d2.pairs]
    np.testing.assert_array_equal(np.vstack([r.e_delta for r in r1]), np.vstack([r.e_delta for r in r2]))
    p1 = sb.write_synth(tmp_path / "a", d1, g1, spec)
    p2 = sb.write_synth(tmp_path / "b", d2, g2, spec)
    for key in p1:
        assert p1[key].read_bytes() == p2[key].read_bytes()


def test_generated_structure():
    spec = sb.PlantedSpec(n_annotators=5, pairs_per_annotator=40, activation_sparsity=2, seed=1,
                          effect_sizes=[1.0] * 8)
    d, recs, gt = sb.generate(spec)
    assert len(d) == 200
    assert np.all((gt.activations != 0).sum(axis=1) == 2)
    X = np.vstack([r.e_delta for r in recs])
    np.testing.assert_allclose(X, gt.embeddings_a - gt.embeddings_b, atol=1e-12)
    for p, a in zip(d.pairs[:20], gt.activations[:20]):
        for j in np.flatnonzero(a):
            side = p.response_a if a[j] > 0 else p.response_b
            assert f"concept{j}" in side.split()
    assert [p.length_delta for p in d.pairs] == (gt.length_term * 0 + [p.word_count_a - p.word_count_b for p in d.pairs]).tolist()


def test_null_model_label_rate():
    spec = sb.PlantedSpec(n_features=1, activation_sparsity=1, noise_sd=0.0, n_annotators=10,
                          pairs_per_annotator=1000, seed=5)
    d, _, _ = sb.generate(spec, with_embeddings=False)
    rate = d.labels().mean()
    assert abs(rate - 0.5) < 3 * np.sqrt(0.25 / 10000)


def test_label_frequencies_match_probabilities():
    spec = sb.PlantedSpec(n_annotators=100, pairs_per_annotator=1000, effect_sizes=[1, -1, 0.5, 0, 0, 0, 0, 0],
                          seed=8)
    d, _, gt = sb.generate(spec, with_embeddings=False)
    y = d.labels()
    bins = np.digitize(gt.probabilities, [0.2, 0.4, 0.6, 0.8])
    for b in range(5):
        sel = bins == b
        n = sel.sum()
        assert abs(y[sel].mean() - gt.probabilities[sel].mean()) < 4 * np.sqrt(0.25 / n)


def test_oracle_ame_properties():
    base = dict(n_annotators=20, pairs_per_annotator=500, seed=2)
    zero = sb.generate(sb.PlantedSpec(effect_sizes=[0.0] * 8, **base), with_embeddings=False)[2]
    assert sb.oracle_ame(zero, 0) == 0.0
    ames = [sb.generate(sb.PlantedSpec(effect_sizes=[e] + [0.0] * 7, **base), with_embeddings=False)[2].true_ame[0]
            for e in (0.2, 0.5, 1.0)]
    assert ames[0] < ames[1] < ames[2]


def test_oracle_ame_matches_large_sample_group_rates():
    # one feature, always active, fixed magnitude: the AME is the true rate gap
    spec = sb.PlantedSpec(n_features=1, activation_sparsity=1, magnitude_range=(1.0, 1.0),
                          effect_sizes=[0.7], n_annotators=1000, pairs_per_annotator=1000, seed=9)
    _, _, gt = sb.generate(spec, with_embeddings=False)
    rng = np.random.default_rng(0)
    y = rng.random(gt.probabilities.size) < gt.probabilities
    pos = gt.activations[:, 0] > 0
    empirical = y[pos].mean() - y[~pos].mean()
    assert abs(sb.oracle_ame(gt, 0) - empirical) < 0.01
    assert sb.oracle_ame(gt, 0) == pytest.approx(expit(0.7) - expit(-0.7))


def test_recovery_score_properties():
    spec = sb.PlantedSpec(dim=16, n_features=4).resolved()
    W = spec.directions.T.copy()
    assert sb.dictionary_recovery_score(W, spec) == pytest.approx(1.0)
    perm = W[:, [2, 0, 3, 1]] * np.array([1, -1, 1, -1])
    assert sb.dictionary_recovery_score(perm, spec) == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    big = sb.PlantedSpec(dim=1536, n_features=8).resolved()
    assert sb.dictionary_recovery_score(rng.standard_normal((1536, 32)), big) < 0.1


def test_marker_llm_negated_descriptions_flip_verdicts():
    llm = sb.MarkerLLM()
    prompt = "Feature: {f}\nRESPONSE A:\nuid concept3 lorem\nRESPONSE B:\nuid lorem\nAnswer:"
    assert llm.complete(prompt.format(f="mentions concept3")) == "1"
    assert llm.complete(prompt.format(f="does not mention concept3")) == "-1"
    assert llm.complete(prompt.format(f="mentions concept5")) == "0"
