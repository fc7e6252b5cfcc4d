from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from prefscope.dataset import (Dataset, Label, PreferencePair, PreprocessConfig, load_dataset,
                               pairs_from_ranking, preprocess, swap_pair, write_jsonl)
from prefscope.errors import ParseError, ValidationError

words = st.lists(st.sampled_from(["alpha", "beta", "gamma", "δέλτα", "x"]), min_size=1, max_size=6).map(" ".join)


def write_lines(path, records):
    path.write_text("\n".join(r if isinstance(r, str) else json.dumps(r) for r in records) + "\n")
    return path


def test_label_parsing():
    assert Label.parse("a") is Label.A
    assert Label.parse(None) is Label.UNLABELED
    assert Label.parse("TIE") is Label.TIE
    with pytest.raises(ValueError):
        Label.parse("C")


@given(words, words, st.sampled_from(list(Label)))
def test_swap_is_an_involution(a, b, label):
    p = PreferencePair(id="x", prompt="q", response_a=a, response_b=b, label=label, model_a="m1", model_b="m2")
    s = swap_pair(p)
    assert s.length_delta == -p.length_delta
    assert s.response_a == p.response_b and s.model_a == "m2"
    if p.is_labeled:
        assert s.y == 1 - p.y
    assert swap_pair(s) == p


def test_unlabeled_y_raises():
    p = PreferencePair(id="x", prompt="q", response_a="a", response_b="b", label="tie")
    with pytest.raises(ValidationError):
        _ = p.y


def test_duplicate_ids_rejected():
    p = PreferencePair(id="x", prompt="q", response_a="a", response_b="b")
    with pytest.raises(ValidationError):
        Dataset(pairs=(p, p))


def test_load_round_trip(tmp_path):
    recs = [
        {"id": "1", "prompt": "q", "response_a": "one two", "response_b": "three", "label": "A",
         "annotator_id": 7, "demographics": {"age": 30}},
        {"id": "2", "prompt": "q", "response_a": "x", "response_b": "y z", "label": None},
        {"id": "3", "prompt": "q", "response_a": "x", "response_b": "y", "label": "tie",
         "curation": {"feature_id": 1, "z": 2.0, "original_label": "B"}},
    ]
    d = load_dataset(write_lines(tmp_path / "d.jsonl", recs))
    assert [p.label for p in d] == [Label.A, Label.UNLABELED, Label.TIE]
    assert d[0].annotator_id == "7" and d[0].demographics == {"age": "30"}
    assert d.length_deltas().tolist() == [1, -1, 0]
    assert d.labels().tolist() == [1.0]
    out = write_jsonl(d.replace(swap_seed=4), tmp_path / "out.jsonl")
    again = load_dataset(out)
    assert [p.to_record() for p in again] == [p.to_record() for p in d]
    assert again.swap_seed == 4


def test_parse_errors_name_the_line(tmp_path):
    path = write_lines(tmp_path / "bad.jsonl", [{"prompt": "q", "response_a": "a", "response_b": "b"}, "{oops"])
    with pytest.raises(ParseError) as exc:
        load_dataset(path)
    assert exc.value.line == 2
    path = write_lines(tmp_path / "missing.jsonl", [{"prompt": "q", "response_a": "a"}])
    with pytest.raises(ParseError, match="response_b"):
        load_dataset(path)


def test_duplicate_ids_name_both_lines(tmp_path):
    rec = {"id": "k", "prompt": "q", "response_a": "a", "response_b": "b"}
    path = write_lines(tmp_path / "dup.jsonl", [rec, {"id": "z", **{k: v for k, v in rec.items() if k != "id"}}, rec])
    with pytest.raises(ValidationError, match="lines 1 and 3"):
        load_dataset(path)


def test_transcript_word_count_uses_final_turn(tmp_path):
    convo = [{"role": "user", "content": "hi there"}, {"role": "assistant", "content": "one"},
             {"role": "user", "content": "more"}, {"role": "assistant", "content": "two three four"}]
    path = write_lines(tmp_path / "t.jsonl", [{"prompt": "q", "response_a": convo, "response_b": "x"}])
    assert load_dataset(path)[0].word_count_a == 3
    assert load_dataset(path, word_count_scope="full")[0].word_count_a == 7


def test_preprocess_filters_and_swaps_deterministically():
    pairs = [PreferencePair(id=str(i), prompt="q", response_a="a " * (i + 1), response_b="b", label="A")
             for i in range(200)]
    pairs.append(PreferencePair(id="empty", prompt="q", response_a="  ", response_b="b"))
    pairs.append(PreferencePair(id="long", prompt="q", response_a="w " * 5000, response_b="b"))
    d = Dataset(pairs=tuple(pairs))
    cfg = PreprocessConfig(swap_seed=11, filters=[lambda p: p.id != "7"])
    out1, out2 = preprocess(d, cfg), preprocess(d, cfg)
    assert out1 == out2
    assert len(out1) == 199
    assert out1.provenance["preprocess"]["dropped"] == {"empty": 1, "too_long": 1, "filtered": 1}
    n_swapped = sum(p.swapped for p in out1)
    assert 70 < n_swapped < 130
    assert all((p.label is Label.B) == p.swapped for p in out1)
    assert out1.swap_seed == 11


def test_ranking_conversion():
    best, ties = pairs_from_ranking("q", [("r0", 2), ("r1", 1), ("r2", 3)], pair_id="x")
    assert (best.response_a, best.response_b, best.label) == ("r1", "r2", Label.A)
    assert len(ties) == 2 and all(t.label is Label.TIE for t in ties)
    with pytest.raises(ValidationError):
        pairs_from_ranking("q", [("a", 1), ("b", 1)])
