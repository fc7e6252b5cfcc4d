"""Synthetic preference data with planted ground truth, plus oracles.

Generative model for pair ``i`` rated by annotator ``a``::

    e_delta_i = sum_j a_ij * direction_j + noise
    slope_{j,a} ~ N(effect_j + group_offset_{j,g(a)}, tau_j^2)
    P(y_i = 1) = sigmoid(sum_j slope_{j,a} a_ij + length_effect * l_i / length_sd
                         + strength[model_a] - strength[model_b])

Each row activates ``activation_sparsity`` planted features chosen uniformly,
with a random sign and a magnitude drawn uniformly from ``magnitude_range``.
Response texts carry a ``concept<j>`` token on the side where feature ``j``
is more present, so deterministic stub LLMs can describe and judge features.
"""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .dataset import Dataset, Label, PreferencePair, write_jsonl
from .embed_client import DiffRecord, StaticEmbeddingProvider
from .errors import ValidationError


@dataclass
class PlantedSpec:
    dim: int = 64
    n_features: int = 8
    directions: np.ndarray | None = None
    effect_sizes: Sequence[float] | None = None
    activation_sparsity: int = 2
    magnitude_range: tuple[float, float] = (0.5, 2.0)
    annotator_tau: Sequence[float] | None = None
    n_annotators: int = 100
    pairs_per_annotator: int = 200
    noise_sd: float = 0.2
    length_effect: float = 0.0
    length_sd: float = 40.0
    # Optional (n_groups, n_features) slope offsets; annotators are assigned
    # round-robin to groups, exposed as demographics["group"].
    group_slope_offsets: Sequence[Sequence[float]] | None = None
    n_models: int = 0
    model_strength_sd: float = 0.5
    tie_fraction: float = 0.0
    seed: int = 0

    def resolved(self) -> "PlantedSpec":
        """Copy with defaults materialized and invariants checked."""
        spec = PlantedSpec(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        F = spec.n_features
        if spec.activation_sparsity > F or spec.activation_sparsity < 0:
            raise ValidationError(
                f"activation_sparsity={spec.activation_sparsity} infeasible with {F} features"
            )
        if F > spec.dim:
            raise ValidationError("cannot plant more orthogonal directions than dimensions")
        if spec.directions is None:
            spec.directions = planted_directions(spec.dim, F, spec.seed)
        spec.directions = np.asarray(spec.directions, dtype=np.float64)
        gram = spec.directions @ spec.directions.T
        if np.max(np.abs(gram - np.eye(F))) > 1e-10:
            raise ValidationError("planted directions must be orthonormal")
        spec.effect_sizes = np.zeros(F) if spec.effect_sizes is None else np.asarray(spec.effect_sizes, float)
        spec.annotator_tau = np.zeros(F) if spec.annotator_tau is None else np.asarray(spec.annotator_tau, float)
        if len(spec.effect_sizes) != F or len(spec.annotator_tau) != F:
            raise ValidationError("effect_sizes and annotator_tau need one entry per feature")
        if np.any(spec.annotator_tau < 0):
            raise ValidationError("annotator_tau must be nonnegative")
        if spec.group_slope_offsets is not None:
            spec.group_slope_offsets = np.asarray(spec.group_slope_offsets, float)
            if spec.group_slope_offsets.ndim != 2 or spec.group_slope_offsets.shape[1] != F:
                raise ValidationError("group_slope_offsets must have shape (n_groups, n_features)")
        if spec.n_models == 1:
            raise ValidationError("tournament mode needs at least 2 models")
        return spec


@dataclass
class GroundTruth:
    activations: np.ndarray          # (N, F) planted signed activations
    annotator_index: np.ndarray      # (N,) row -> annotator
    annotator_slopes: np.ndarray     # (n_annotators, F)
    length_term: np.ndarray          # (N,) length contribution to the logit
    model_term: np.ndarray           # (N,) strength difference contribution
    probabilities: np.ndarray        # (N,) true P(y=1)
    true_ame: np.ndarray             # (F,)
    strengths: dict[str, float] = field(default_factory=dict)
    embeddings_a: np.ndarray | None = None
    embeddings_b: np.ndarray | None = None

    def logits(self) -> np.ndarray:
        slopes = self.annotator_slopes[self.annotator_index]
        return (slopes * self.activations).sum(axis=1) + self.length_term + self.model_term

    def to_json(self) -> dict:
        return {
            "activations": self.activations.tolist(),
            "annotator_index": self.annotator_index.tolist(),
            "annotator_slopes": self.annotator_slopes.tolist(),
            "length_term": self.length_term.tolist(),
            "model_term": self.model_term.tolist(),
            "probabilities": self.probabilities.tolist(),
            "true_ame": self.true_ame.tolist(),
            "strengths": self.strengths,
        }


def planted_directions(dim: int, n: int, seed: int = 0) -> np.ndarray:
    """``n`` orthonormal rows in ``R^dim`` from the QR of a seeded Gaussian matrix."""
    rng = np.random.default_rng([seed, 7919])
    q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    return q.T.copy()


def _response_text(uid: str, concepts: Sequence[int], n_words: int) -> str:
    tokens = [uid] + [f"concept{j}" for j in concepts]
    tokens += ["lorem"] * max(0, n_words - len(tokens))
    return " ".join(tokens)


def generate(spec: PlantedSpec, *, with_embeddings: bool = True):
    """Draw a synthetic dataset.

    Returns
    -------
    (Dataset, list[DiffRecord], GroundTruth)
    """
    spec = spec.resolved()
    rng = np.random.default_rng(spec.seed)
    F = spec.n_features
    n_ann = spec.n_annotators
    N = n_ann * spec.pairs_per_annotator

    acts = np.zeros((N, F))
    if spec.activation_sparsity > 0:
        keys = rng.random((N, F))
        chosen = np.argsort(keys, axis=1)[:, : spec.activation_sparsity]
        lo, hi = spec.magnitude_range
        mags = rng.uniform(lo, hi, size=chosen.shape)
        signs = rng.choice([-1.0, 1.0], size=chosen.shape)
        np.put_along_axis(acts, chosen, mags * signs, axis=1)

    diffs = acts @ spec.directions + spec.noise_sd * rng.standard_normal((N, spec.dim))

    annotator_index = np.repeat(np.arange(n_ann), spec.pairs_per_annotator)
    slopes = spec.effect_sizes + spec.annotator_tau * rng.standard_normal((n_ann, F))
    n_groups = 0 if spec.group_slope_offsets is None else spec.group_slope_offsets.shape[0]
    if n_groups:
        slopes = slopes + spec.group_slope_offsets[np.arange(n_ann) % n_groups]

    base_len = rng.integers(60, 140, size=N)
    half = np.round(rng.normal(0.0, spec.length_sd, size=N) / 2).astype(int)
    wc_a = np.maximum(base_len + half, F + 2)
    wc_b = np.maximum(base_len - half, F + 2)
    length_delta = (wc_a - wc_b).astype(float)
    length_term = spec.length_effect * length_delta / spec.length_sd

    model_names: list[str] = []
    strengths: dict[str, float] = {}
    model_term = np.zeros(N)
    pair_models = None
    if spec.n_models:
        model_names = [f"model{m:02d}" for m in range(spec.n_models)]
        s = rng.normal(0.0, spec.model_strength_sd, size=spec.n_models)
        strengths = {m: float(v) for m, v in zip(model_names, s)}
        ma = rng.integers(0, spec.n_models, size=N)
        mb = (ma + rng.integers(1, spec.n_models, size=N)) % spec.n_models
        model_term = s[ma] - s[mb]
        pair_models = (ma, mb)

    logits = (slopes[annotator_index] * acts).sum(axis=1) + length_term + model_term
    probs = expit(logits)
    y = rng.random(N) < probs
    ties = rng.random(N) < spec.tie_fraction

    if with_embeddings:
        base = rng.standard_normal((N, spec.dim))
        emb_a = base + diffs / 2
        emb_b = base - diffs / 2
        diffs = emb_a - emb_b
    else:
        emb_a = emb_b = None

    pairs = []
    for i in range(N):
        a_i = acts[i]
        pos = [j for j in range(F) if a_i[j] > 0]
        neg = [j for j in range(F) if a_i[j] < 0]
        ann = annotator_index[i]
        label = Label.TIE if ties[i] else (Label.A if y[i] else Label.B)
        active = np.flatnonzero(a_i)
        explanation = None
        if active.size:
            top = active[np.argmax(np.abs(slopes[ann, active] * a_i[active]))]
            explanation = f"I chose it because of concept{top}"
        pairs.append(PreferencePair(
            id=f"syn{i:06d}",
            prompt=f"prompt {i}",
            response_a=_response_text(f"uid{i}a", pos, int(wc_a[i])),
            response_b=_response_text(f"uid{i}b", neg, int(wc_b[i])),
            label=label,
            annotator_id=f"ann{ann:04d}",
            demographics={"group": f"g{ann % n_groups}"} if n_groups else None,
            explanation=explanation,
            model_a=model_names[pair_models[0][i]] if pair_models else None,
            model_b=model_names[pair_models[1][i]] if pair_models else None,
            word_count_a=int(wc_a[i]),
            word_count_b=int(wc_b[i]),
        ))

    dataset = Dataset(pairs=tuple(pairs), name="synthbench", provenance={"synth_seed": spec.seed})
    records = [DiffRecord(p.id, diffs[i]) for i, p in enumerate(pairs)]
    gt = GroundTruth(
        activations=acts,
        annotator_index=annotator_index,
        annotator_slopes=slopes,
        length_term=length_term,
        model_term=model_term,
        probabilities=probs,
        true_ame=np.zeros(F),
        strengths=strengths,
        embeddings_a=emb_a,
        embeddings_b=emb_b,
    )
    gt.true_ame = np.array([oracle_ame(gt, j) for j in range(F)])
    return dataset, records, gt


def oracle_ame(gt: GroundTruth, j: int) -> float:
    """Mean true win-probability gap between positive and negative presence of feature ``j``.

    Over rows where the feature is active, its activation is set to
    ``+|a_ij|`` and ``-|a_ij|`` with everything else held fixed.
    """
    rows = np.flatnonzero(gt.activations[:, j] != 0)
    if rows.size == 0:
        return 0.0
    a = gt.activations[rows, j]
    beta = gt.annotator_slopes[gt.annotator_index[rows], j]
    rest = gt.logits()[rows] - beta * a
    return float(np.mean(expit(rest + beta * np.abs(a)) - expit(rest - beta * np.abs(a))))


def greedy_match(similarity: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one assignment of rows to columns by repeatedly taking the largest entry."""
    S = np.array(similarity, dtype=float)
    pairs = []
    for _ in range(min(S.shape)):
        r, c = np.unravel_index(np.argmax(S), S.shape)
        pairs.append((int(r), int(c)))
        S[r, :] = -np.inf
        S[:, c] = -np.inf
    return pairs


def dictionary_recovery_score(model_or_decoder, spec_or_directions) -> float:
    """Mean |cosine| between planted directions and greedily matched decoder columns."""
    W_dec = getattr(model_or_decoder, "W_dec", model_or_decoder)
    dirs = getattr(spec_or_directions, "directions", spec_or_directions)
    if dirs is None:
        dirs = spec_or_directions.resolved().directions
    W = W_dec / np.linalg.norm(W_dec, axis=0, keepdims=True)
    D = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    cos = np.abs(D @ W)
    return float(np.mean([cos[r, c] for r, c in greedy_match(cos)]))


def embedding_provider(dataset: Dataset, gt: GroundTruth, model_id: str = "synthbench") -> StaticEmbeddingProvider:
    """Static provider serving the generated per-response embeddings."""
    if gt.embeddings_a is None:
        raise ValidationError("ground truth was generated without embeddings")
    table = {}
    for i, p in enumerate(dataset.pairs):
        table[p.response_a] = gt.embeddings_a[i]
        table[p.response_b] = gt.embeddings_b[i]
    return StaticEmbeddingProvider(table, model_id=model_id)


def write_synth(out_dir, dataset: Dataset, gt: GroundTruth, spec: PlantedSpec) -> dict[str, Path]:
    """Write ``dataset.jsonl``, ``ground_truth.json`` and (if present) ``embeddings.npz``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"dataset": write_jsonl(dataset, out / "dataset.jsonl")}
    spec_json = asdict(spec.resolved())
    for k, v in spec_json.items():
        if isinstance(v, np.ndarray):
            spec_json[k] = v.tolist()
    doc = {"spec": spec_json, "ground_truth": gt.to_json()}
    (out / "ground_truth.json").write_text(json.dumps(doc), encoding="utf-8")
    paths["ground_truth"] = out / "ground_truth.json"
    if gt.embeddings_a is not None:
        texts = [p.response_a for p in dataset.pairs] + [p.response_b for p in dataset.pairs]
        np.savez(out / "embeddings.npz", texts=np.array(texts),
                 vectors=np.vstack([gt.embeddings_a, gt.embeddings_b]))
        paths["embeddings"] = out / "embeddings.npz"
    return paths


def load_embedding_table(path, model_id: str = "synthbench") -> StaticEmbeddingProvider:
    with np.load(path, allow_pickle=False) as data:
        table = {str(t): v for t, v in zip(data["texts"], data["vectors"])}
    return StaticEmbeddingProvider(table, model_id=model_id)


# --------------------------------------------------------------------------
# Deterministic stub LLM for synthetic data
# --------------------------------------------------------------------------

_CONCEPT = re.compile(r"concept(\d+)")


class MarkerLLM:
    """Stub chat client that reads ``concept<j>`` tokens planted by :func:`generate`.

    * description prompts (contain ``EXAMPLES:``): names the concept whose
      A-minus-B count over the examples is largest in magnitude, negated
      (``does not mention ...``) when it sits mostly on the B side;
    * explanation prompts (contain ``Candidate features:``): indices of
      listed features whose concept appears in the annotator explanation;
    * anything else is a presence judgment: +1/-1/0 by which response
      contains the concept, sign-reversed for negated descriptions.
    """

    def __init__(self):
        self.n_calls = 0

    def complete(self, prompt: str) -> str:
        self.n_calls += 1
        if "Candidate features:" in prompt:
            return self._match(prompt)
        if "EXAMPLES:" in prompt:
            return self._describe(prompt)
        return self._judge(prompt)

    @staticmethod
    def _describe(prompt: str) -> str:
        examples = prompt.split("EXAMPLES:", 1)[-1]
        score: dict[str, int] = {}
        for a, b in re.findall(r"RESPONSE A:(.*?)RESPONSE B:(.*?)(?:-{4,}|$)", examples, flags=re.S):
            for c in set(_CONCEPT.findall(a)):
                score[c] = score.get(c, 0) + 1
            for c in set(_CONCEPT.findall(b)):
                score[c] = score.get(c, 0) - 1
        if not score:
            return '- "uses filler text"'
        best = max(sorted(score, key=int), key=lambda c: abs(score[c]))
        if score[best] < 0:
            return f'- "does not mention concept{best}"'
        return f'- "mentions concept{best}"'

    @staticmethod
    def _judge(prompt: str) -> str:
        m = re.search(r"Feature:\s*(.*)", prompt)
        found = _CONCEPT.search(m.group(1)) if m else None
        if not found:
            return "0"
        negated = "does not" in m.group(1)
        token = f"concept{found.group(1)}"
        a = re.search(r"RESPONSE A:(.*?)RESPONSE B:", prompt, flags=re.S)
        b = re.search(r"RESPONSE B:(.*?)(?:Answer|$)", prompt, flags=re.S)
        in_a = bool(a and re.search(rf"\b{token}\b", a.group(1)))
        in_b = bool(b and re.search(rf"\b{token}\b", b.group(1)))
        verdict = 1 if in_a and not in_b else -1 if in_b and not in_a else 0
        return str(-verdict if negated else verdict)

    @staticmethod
    def _match(prompt: str) -> str:
        expl = re.search(r"Annotator explanation:\s*(.*)", prompt)
        said = set(_CONCEPT.findall(expl.group(1))) if expl else set()
        section = prompt.split("Candidate features:", 1)[-1]
        hits = []
        for idx, desc in re.findall(r'^- (\d+): "(.*)"$', section, flags=re.M):
            if set(_CONCEPT.findall(desc)) & said:
                hits.append(int(idx))
        return json.dumps(hits)


class CoinJudge:
    """Null judge: uniform random verdicts in {-1, 0, +1}, independent of the prompt."""

    def __init__(self, seed: int = 0, values=("-1", "0", "1")):
        self._rng = np.random.default_rng(seed)
        self.values = list(values)
        self.n_calls = 0

    def complete(self, prompt: str) -> str:
        self.n_calls += 1
        return self.values[int(self._rng.integers(len(self.values)))]
