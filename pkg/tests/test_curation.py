from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from conftest import make_dataset
from prefscope import curation as cu
from prefscope.dataset import Label, load_dataset
from prefscope.errors import InsufficientDataError, ValidationError


def matches(spec):
    """spec: list of (a, b, n_a_wins, n_b_wins, n_ties)."""
    out = []
    for a, b, wa, wb, t in spec:
        out += [cu.MatchRecord(a, b, cu.Outcome.A_WINS)] * wa
        out += [cu.MatchRecord(a, b, cu.Outcome.B_WINS)] * wb
        out += [cu.MatchRecord(a, b, cu.Outcome.TIE)] * t
    return out


def test_self_play_rejected():
    with pytest.raises(ValidationError):
        cu.MatchRecord("m", "m", "A_WINS")


def test_two_model_closed_form(frozen):
    t = cu.compute_elo(matches([("a", "b", 75, 25, 0)]))
    assert t.ratings["a"] == 1000.0
    assert t.ratings["b"] - t.ratings["a"] == pytest.approx(-frozen["elo_gap_75pct"], abs=1e-6)
    assert t.rank() == {"a": 1, "b": 2}


def test_ties_count_half():
    t = cu.compute_elo(matches([("a", "b", 1, 1, 10)]))
    assert t.ratings["b"] == pytest.approx(1000.0, abs=1e-6)
    t = cu.compute_elo(matches([("a", "b", 3, 1, 2)]))
    assert t.ratings["a"] - t.ratings["b"] == pytest.approx(oracles.bt_two_model_gap(4, 2), abs=1e-6)


def test_matches_generic_optimizer():
    spec = [("a", "b", 6, 4, 1), ("b", "c", 7, 2, 0), ("a", "c", 5, 5, 2), ("c", "d", 3, 6, 0), ("a", "d", 2, 3, 1)]
    t = cu.compute_elo(matches(spec))
    ref = oracles.bt_strengths_generic(["a", "b", "c", "d"],
                                       [(r.model_a, r.model_b, r.outcome.score_a) for r in matches(spec)])
    got = np.array([t.ratings[m] for m in "abcd"]) - 1000.0
    np.testing.assert_allclose(got, cu.ELO_SCALE * ref, atol=1e-3)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(0, 3)), min_size=3, max_size=3))
def test_reversing_all_outcomes_negates_ratings(counts):
    spec = [(a, b, *c) for (a, b), c in zip([("a", "b"), ("b", "c"), ("a", "c")], counts)]
    m = matches(spec)
    base = cu.compute_elo(m)
    rev = cu.compute_elo([r.reversed() for r in m])
    for k in base.ratings:
        assert rev.ratings[k] - 1000 == pytest.approx(-(base.ratings[k] - 1000), abs=1e-6)


def test_disconnected_graph():
    m = matches([("a", "b", 2, 1, 0), ("c", "d", 1, 2, 0)])
    with pytest.raises(ValidationError):
        cu.compute_elo(m)
    t = cu.compute_elo(m, allow_disconnected=True)
    assert t.anchors == ["a", "c"] and t.ratings["c"] == 1000.0


def test_undefeated_model_is_reported():
    with pytest.raises(ValidationError, match="never"):
        cu.compute_elo(matches([("a", "b", 5, 0, 0), ("b", "c", 2, 2, 0)]))


def test_empty_matches():
    with pytest.raises(InsufficientDataError):
        cu.compute_elo([])


def dataset_with_feature(rng, n=60):
    y = rng.random(n) < 0.5
    Z = rng.standard_normal((n, 2))
    Z[::7, 0] = 0.0
    models = [("m1", "m2") if i % 2 else ("m2", "m3") for i in range(n)]
    return make_dataset(y, models=models), Z


def test_rank_by_feature(rng):
    Z = np.array([[0.0], [-3.0], [2.0], [3.0]])
    assert cu.rank_by_feature(Z, 0, 3, ["w", "x", "y", "z"]) == ["x", "z", "y"]
    with pytest.raises(InsufficientDataError):
        cu.rank_by_feature(Z, 0, 4, ["w", "x", "y", "z"])
    assert cu.rank_by_feature(Z, 0, 0, ["w", "x", "y", "z"]) == []


def test_flag_for_flip_respects_direction(rng):
    d, Z = dataset_with_feature(rng)
    for direction in (1, -1):
        ids = cu.flag_for_flip(d, Z, 0, 5, direction)
        idx = d.index()
        for pid in ids:
            i = idx[pid]
            chosen_sign = 1 if d[i].label is Label.A else -1
            assert np.sign(Z[i, 0]) * chosen_sign == direction
    with pytest.raises(ValidationError):
        cu.flag_for_flip(d, Z, 0, 5, 0)
    with pytest.raises(InsufficientDataError):
        cu.flag_for_flip(d, Z, 0, 10_000, 1)


def test_flip_round_trip(rng, tmp_path):
    d, Z = dataset_with_feature(rng)
    ids = cu.flag_for_flip(d, Z, 0, 6, 1)
    once = cu.flip_labels(d, ids, feature_id=0, Z=Z)
    changed = [i for i, (a, b) in enumerate(zip(d.pairs, once.pairs)) if a != b]
    assert sorted(once[i].id for i in changed) == sorted(ids)
    for i in changed:
        assert once[i].label is d[i].label.flipped()
        assert once[i].curation["original_label"] == d[i].label.value
        assert once[i].curation["z"] == Z[i, 0]
    assert once.provenance["flips"][0]["n"] == 6
    twice = cu.flip_labels(once, ids, feature_id=0, Z=Z)
    assert twice.pairs == d.pairs
    assert len(twice.provenance["flips"]) == 2
    assert cu.flip_labels(d, []) is d
    back = load_dataset(cu.export_curated(once, tmp_path / "c.jsonl"))
    assert back.pairs == once.pairs


def test_flip_rejects_bad_ids():
    d = make_dataset(None, labels=[Label.A, Label.TIE])
    with pytest.raises(ValidationError):
        cu.flip_labels(d, ["nope"])
    with pytest.raises(ValidationError):
        cu.flip_labels(d, [d[1].id])


def test_matches_from_dataset_excludes_incomplete():
    d = make_dataset(None, labels=[Label.A, Label.B, Label.TIE, Label.UNLABELED],
                     models=[("a", "b"), ("a", None), ("b", "a"), ("a", "b")])
    m, excluded = cu.matches_from_dataset(d)
    assert [r.outcome for r in m] == [cu.Outcome.A_WINS, cu.Outcome.TIE]
    assert excluded == 2


def test_safety_adjusted_elo(rng):
    d, Z = dataset_with_feature(rng, 200)
    comp = cu.safety_adjusted_elo(d, Z, 0, 10, direction=1)
    assert len(comp.flipped_ids) == 10
    rows = comp.rows()
    assert {r["model"] for r in rows} == {"m1", "m2", "m3"}
    assert all(r["delta"] == pytest.approx(r["adjusted_rating"] - r["base_rating"]) for r in rows)
    none = cu.safety_adjusted_elo(d, Z, 0, 0, direction=1)
    assert all(v == 0 for v in none.delta.values())
