"""Pairwise preference records: loading, validation and preprocessing.

A pair holds a prompt, two candidate responses and a label saying which one
the annotator chose.  Ties are kept because they still tell us how responses
differ (they feed SAE training) but they never enter a regression.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

__all__ = [
    "Label",
    "PreferencePair",
    "Dataset",
    "PreprocessConfig",
    "count_words",
    "estimate_tokens",
    "swap_pair",
    "load_dataset",
    "write_jsonl",
    "preprocess",
    "pairs_from_ranking",
]


class Label(str, enum.Enum):
    A = "A"
    B = "B"
    TIE = "tie"
    UNLABELED = "unlabeled"

    @classmethod
    def parse(cls, value) -> "Label":
        if value is None:
            return cls.UNLABELED
        if isinstance(value, Label):
            return value
        if isinstance(value, str):
            key = value.strip().lower()
            table = {"a": cls.A, "b": cls.B, "tie": cls.TIE, "unlabeled": cls.UNLABELED}
            if key in table:
                return table[key]
        raise ValueError(f"unknown label {value!r}; expected 'A', 'B', 'tie' or null")

    def flipped(self) -> "Label":
        return {Label.A: Label.B, Label.B: Label.A}.get(self, self)

    def to_json(self):
        return None if self is Label.UNLABELED else self.value


def count_words(text: str) -> int:
    """Number of Unicode-whitespace-delimited words."""
    return len(text.split())


def estimate_tokens(text: str, words_to_tokens: float = 4.0 / 3.0) -> float:
    return count_words(text) * words_to_tokens


@dataclass(frozen=True)
class PreferencePair:
    """One comparison between two responses to the same prompt.

    ``word_count_a``/``word_count_b`` default to the whitespace word count of
    the response text; loaders that know the response is a multi-turn
    transcript pass the count of the final assistant turn instead.
    """

    id: str
    prompt: str
    response_a: str
    response_b: str
    label: Label = Label.UNLABELED
    annotator_id: str | None = None
    demographics: Mapping[str, str] | None = None
    explanation: str | None = None
    model_a: str | None = None
    model_b: str | None = None
    word_count_a: int = -1
    word_count_b: int = -1
    swapped: bool = False
    curation: Mapping[str, Any] | None = None

    def __post_init__(self):
        object.__setattr__(self, "label", Label.parse(self.label))
        if self.word_count_a < 0:
            object.__setattr__(self, "word_count_a", count_words(self.response_a))
        if self.word_count_b < 0:
            object.__setattr__(self, "word_count_b", count_words(self.response_b))

    @property
    def length_delta(self) -> int:
        return self.word_count_a - self.word_count_b

    @property
    def is_labeled(self) -> bool:
        return self.label in (Label.A, Label.B)

    @property
    def y(self) -> int:
        """1 if response A was preferred, 0 if B."""
        if not self.is_labeled:
            raise ValidationError(f"pair {self.id} has label {self.label.value!r}, not A/B")
        return int(self.label is Label.A)

    def replace(self, **changes) -> "PreferencePair":
        return dataclasses.replace(self, **changes)

    def to_record(self) -> dict:
        rec = {
            "id": self.id,
            "prompt": self.prompt,
            "response_a": self.response_a,
            "response_b": self.response_b,
            "label": self.label.to_json(),
        }
        for key in ("annotator_id", "demographics", "explanation", "model_a", "model_b"):
            value = getattr(self, key)
            if value is not None:
                rec[key] = dict(value) if key == "demographics" else value
        rec["word_count_a"] = self.word_count_a
        rec["word_count_b"] = self.word_count_b
        rec["length_delta"] = self.length_delta
        rec["swapped"] = self.swapped
        if self.curation is not None:
            rec["curation"] = dict(self.curation)
        return rec


def swap_pair(pair: PreferencePair) -> PreferencePair:
    """Exchange the A and B sides of a pair, flipping its label.

    Applying this twice returns a pair equal to the original.
    """
    return pair.replace(
        response_a=pair.response_b,
        response_b=pair.response_a,
        label=pair.label.flipped(),
        model_a=pair.model_b,
        model_b=pair.model_a,
        word_count_a=pair.word_count_b,
        word_count_b=pair.word_count_a,
        swapped=not pair.swapped,
    )


@dataclass(frozen=True)
class Dataset:
    pairs: tuple[PreferencePair, ...]
    name: str = "dataset"
    swap_seed: int | None = None
    provenance: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        seen: dict[str, int] = {}
        for i, p in enumerate(self.pairs):
            if p.id in seen:
                raise ValidationError(f"duplicate id {p.id!r} at positions {seen[p.id]} and {i}")
            seen[p.id] = i

    def __len__(self):
        return len(self.pairs)

    def __iter__(self):
        return iter(self.pairs)

    def __getitem__(self, idx):
        return self.pairs[idx]

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.pairs]

    def index(self) -> dict[str, int]:
        return {p.id: i for i, p in enumerate(self.pairs)}

    def labeled_mask(self) -> np.ndarray:
        return np.array([p.is_labeled for p in self.pairs], dtype=bool)

    def labels(self) -> np.ndarray:
        """Binary labels for labeled pairs only (in dataset order)."""
        return np.array([p.y for p in self.pairs if p.is_labeled], dtype=float)

    def length_deltas(self) -> np.ndarray:
        return np.array([p.length_delta for p in self.pairs], dtype=float)

    def replace(self, **changes) -> "Dataset":
        return dataclasses.replace(self, **changes)


# --------------------------------------------------------------------------
# JSONL I/O
# --------------------------------------------------------------------------


def _render_response(value, word_count_scope: str) -> tuple[str, int]:
    """Accept a plain string or a list of chat messages."""
    if isinstance(value, str):
        return value, count_words(value)
    if isinstance(value, list) and all(isinstance(m, Mapping) for m in value):
        blocks = [f"{m.get('role', 'assistant')}: {m.get('content', '')}" for m in value]
        text = "\n\n".join(blocks)
        if word_count_scope == "full":
            return text, count_words(" ".join(str(m.get("content", "")) for m in value))
        finals = [m for m in value if m.get("role", "assistant") == "assistant"]
        final = finals[-1].get("content", "") if finals else ""
        return text, count_words(str(final))
    raise TypeError("response must be a string or a list of {role, content} messages")


def _pair_from_record(rec: Mapping, default_id: str, word_count_scope: str) -> PreferencePair:
    missing = [k for k in ("prompt", "response_a", "response_b") if k not in rec]
    if missing:
        raise ValueError(f"missing required field(s) {missing}")
    prompt = rec["prompt"]
    if isinstance(prompt, list):
        prompt, _ = _render_response(prompt, "full")
    elif not isinstance(prompt, str):
        raise TypeError("prompt must be a string or a list of messages")
    text_a, wc_a = _render_response(rec["response_a"], word_count_scope)
    text_b, wc_b = _render_response(rec["response_b"], word_count_scope)
    # stored counts win over recomputation so written files round-trip exactly
    if isinstance(rec.get("word_count_a"), int) and isinstance(rec.get("word_count_b"), int):
        wc_a, wc_b = rec["word_count_a"], rec["word_count_b"]
    demographics = rec.get("demographics")
    if demographics is not None and not isinstance(demographics, Mapping):
        raise TypeError("demographics must be an object")
    return PreferencePair(
        id=str(rec.get("id", default_id)),
        prompt=prompt,
        response_a=text_a,
        response_b=text_b,
        label=Label.parse(rec.get("label")),
        annotator_id=None if rec.get("annotator_id") is None else str(rec["annotator_id"]),
        demographics=None if demographics is None else {str(k): str(v) for k, v in demographics.items()},
        explanation=rec.get("explanation"),
        model_a=rec.get("model_a"),
        model_b=rec.get("model_b"),
        word_count_a=wc_a,
        word_count_b=wc_b,
        swapped=bool(rec.get("swapped", False)),
        curation=rec.get("curation"),
    )


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def load_dataset(path, format: str = "jsonl", *, name: str | None = None,
                 word_count_scope: str = "final_turn") -> Dataset:
    """Read a JSONL preference file.

    Parameters
    ----------
    path : path-like
        One JSON object per line with at least ``prompt``, ``response_a`` and
        ``response_b``.
    word_count_scope : {"final_turn", "full"}
        How to count words when a response is given as a list of messages.

    Raises
    ------
    ParseError
        On malformed JSON or missing required fields; names the line number.
    ValidationError
        On duplicate ids; names both line numbers.
    """
    if format != "jsonl":
        raise ValidationError(f"unsupported format {format!r}")
    if word_count_scope not in ("final_turn", "full"):
        raise ValidationError(f"word_count_scope must be 'final_turn' or 'full', got {word_count_scope!r}")
    path = Path(path)
    pairs: list[PreferencePair] = []
    first_line: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                if not isinstance(rec, dict):
                    raise ValueError("record is not a JSON object")
                pair = _pair_from_record(rec, f"{path.stem}-{lineno}", word_count_scope)
            except (ValueError, TypeError) as exc:
                raise ParseError(str(exc), line=lineno) from exc
            if pair.id in first_line:
                raise ValidationError(
                    f"duplicate id {pair.id!r} on lines {first_line[pair.id]} and {lineno}"
                )
            first_line[pair.id] = lineno
            pairs.append(pair)

    meta = {}
    if _meta_path(path).exists():
        meta = json.loads(_meta_path(path).read_text(encoding="utf-8"))
    return Dataset(
        pairs=tuple(pairs),
        name=name or meta.get("name", path.stem),
        swap_seed=meta.get("swap_seed"),
        provenance=meta.get("provenance", {}),
    )


def write_jsonl(d: Dataset, path) -> Path:
    """Write pairs as JSONL plus a ``.meta.json`` sidecar for dataset-level fields."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", encoding="utf-8") as fh:
        for p in d.pairs:
            fh.write(json.dumps(p.to_record(), ensure_ascii=False) + "\n")
    tmp.replace(path)
    meta = {"name": d.name, "swap_seed": d.swap_seed, "provenance": dict(d.provenance)}
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


@dataclass
class PreprocessConfig:
    max_token_length: int = 2048
    words_to_tokens: float = 4.0 / 3.0
    swap_seed: int = 0
    swap: bool = True
    # Each predicate returns True to keep a pair (e.g. a language-ID filter).
    filters: Sequence[Callable[[PreferencePair], bool]] = ()


def conversation_tokens(pair: PreferencePair, words_to_tokens: float = 4.0 / 3.0) -> float:
    """Estimated length of the longer of the two prompt+response conversations."""
    longest = max(count_words(pair.response_a), count_words(pair.response_b))
    return (count_words(pair.prompt) + longest) * words_to_tokens


def preprocess(d: Dataset, cfg: PreprocessConfig | None = None) -> Dataset:
    """Drop empty/overlong rows, apply user filters, then randomly swap sides.

    Every surviving pair is swapped independently with probability 0.5 using
    a generator seeded by ``cfg.swap_seed``; row order is preserved.
    """
    cfg = cfg or PreprocessConfig()
    kept: list[PreferencePair] = []
    dropped = {"empty": 0, "too_long": 0, "filtered": 0}
    for p in d.pairs:
        if not p.response_a.strip() or not p.response_b.strip() or not p.prompt.strip():
            dropped["empty"] += 1
            continue
        if conversation_tokens(p, cfg.words_to_tokens) > cfg.max_token_length:
            dropped["too_long"] += 1
            continue
        if not all(f(p) for f in cfg.filters):
            dropped["filtered"] += 1
            continue
        kept.append(p)

    n_swapped = 0
    if cfg.swap:
        rng = np.random.default_rng(cfg.swap_seed)
        flips = rng.random(len(kept)) < 0.5
        kept = [swap_pair(p) if f else p for p, f in zip(kept, flips)]
        n_swapped = int(flips.sum())
    logger.info("preprocess %s: kept %d, dropped %s, swapped %d", d.name, len(kept), dropped, n_swapped)

    provenance = dict(d.provenance)
    provenance["preprocess"] = {
        "max_token_length": cfg.max_token_length,
        "words_to_tokens": cfg.words_to_tokens,
        "dropped": dropped,
        "n_swapped": n_swapped,
    }
    return Dataset(
        pairs=tuple(kept),
        name=d.name,
        swap_seed=cfg.swap_seed if cfg.swap else d.swap_seed,
        provenance=provenance,
    )


def pairs_from_ranking(prompt: str, candidates: Sequence[tuple[str, float]],
                       annotator_id: str | None = None, *,
                       pair_id: str | None = None) -> tuple[PreferencePair, list[PreferencePair]]:
    """Turn a ranked candidate list into one best-vs-worst pair plus ties.

    Rank 1 is best.  The best response is placed on side A with label A;
    every other unordered pair of candidates becomes a TIE pair usable only
    for SAE training.
    """
    if len(candidates) < 2:
        raise ValidationError("need at least 2 ranked candidates")
    ranks = [r for _, r in candidates]
    best, worst = min(ranks), max(ranks)
    if ranks.count(best) > 1 or ranks.count(worst) > 1:
        raise ValidationError("ranks tie at the best or worst position; break ties upstream")
    if pair_id is None:
        pair_id = hashlib.sha1(prompt.encode("utf-8")).hexdigest()[:12]
    i_best, i_worst = ranks.index(best), ranks.index(worst)
    labeled = PreferencePair(
        id=f"{pair_id}-{i_best}v{i_worst}",
        prompt=prompt,
        response_a=candidates[i_best][0],
        response_b=candidates[i_worst][0],
        label=Label.A,
        annotator_id=annotator_id,
    )
    ties = [
        PreferencePair(
            id=f"{pair_id}-{i}v{j}",
            prompt=prompt,
            response_a=candidates[i][0],
            response_b=candidates[j][0],
            label=Label.TIE,
            annotator_id=annotator_id,
        )
        for i, j in itertools.combinations(range(len(candidates)), 2)
        if {i, j} != {i_best, i_worst}
    ]
    return labeled, ties


def labeled_only(d: Dataset) -> Dataset:
    return d.replace(pairs=tuple(p for p in d.pairs if p.is_labeled))


def iter_records(d: Dataset) -> Iterable[dict]:
    return (p.to_record() for p in d.pairs)
