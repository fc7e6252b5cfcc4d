"""Natural-language descriptions of sparse features, judged fidelity, and explanation matching.

Every LLM interaction goes through an object with a ``complete(prompt) -> str``
method.  :class:`HttpChatClient` talks to an OpenAI-compatible
chat-completions endpoint; tests and the synthetic pipeline use the stubs in
:mod:`prefscope.synthbench`.  Replies are parsed strictly and every
transcript can be persisted to an :class:`AuditLog`.
"""

from __future__ import annotations

import json
import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np
from scipy import stats

from .dataset import Dataset, PreferencePair
from .embed_client import RETRYABLE_STATUS
from .errors import (
    AnnotationError,
    FormatError,
    InsufficientDataError,
    NumericError,
    ProviderContractError,
    TransportError,
    ValidationError,
)

logger = logging.getLogger(__name__)

SIGNIFICANCE_LEVEL = 0.05


class LLMClient(Protocol):
    def complete(self, prompt: str) -> str: ...


@dataclass
class ChatConfig:
    base_url: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4o-mini"
    temperature: float = 0.7
    api_key_env: str = "OPENAI_API_KEY"
    max_retries: int = 5
    backoff_seconds: float = 0.5
    timeout: float = 120.0
    max_in_flight: int = 8
    max_tokens: int | None = None


class HttpChatClient:
    """Single-message chat-completions client with bounded retries."""

    def __init__(self, config: ChatConfig, transport: httpx.BaseTransport | None = None,
                 api_key: str | None = None):
        self.config = config
        key = api_key if api_key is not None else os.environ.get(config.api_key_env)
        if not key:
            raise ValidationError(f"no credential: environment variable {config.api_key_env} is unset")
        self._client = httpx.Client(transport=transport, timeout=config.timeout,
                                    headers={"Authorization": f"Bearer {key}"})
        self.n_requests = 0
        self._lock = threading.Lock()

    def close(self):
        self._client.close()

    def complete(self, prompt: str) -> str:
        body = {"model": self.config.model, "temperature": self.config.temperature,
                "messages": [{"role": "user", "content": prompt}]}
        if self.config.max_tokens:
            body["max_tokens"] = self.config.max_tokens
        last = "no response"
        for attempt in range(1, self.config.max_retries + 1):
            with self._lock:
                self.n_requests += 1
            try:
                resp = self._client.post(self.config.base_url, json=body)
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
            else:
                if resp.status_code < 400:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (KeyError, IndexError, TypeError, ValueError) as exc:
                        raise ProviderContractError(f"malformed chat response: {exc}") from exc
                if resp.status_code not in RETRYABLE_STATUS:
                    raise TransportError(f"chat request failed: HTTP {resp.status_code}", attempts=attempt)
                last = f"HTTP {resp.status_code}"
            time.sleep(self.config.backoff_seconds * 2 ** (attempt - 1))
        raise TransportError(f"chat request failed: {last}", attempts=self.config.max_retries)


# --------------------------------------------------------------------------
# Templates and audit
# --------------------------------------------------------------------------


def load_template(name: str, override_dir=None) -> str:
    """Read a prompt template, preferring ``override_dir/<name>.txt`` when it exists.

    Leading ``# template:`` header lines are dropped.
    """
    text = None
    if override_dir is not None:
        path = Path(override_dir) / f"{name}.txt"
        if path.exists():
            text = path.read_text(encoding="utf-8")
    if text is None:
        text = resources.files("prefscope.prompts").joinpath(f"{name}.txt").read_text(encoding="utf-8")
    lines = text.splitlines()
    while lines and lines[0].startswith("# template"):
        lines.pop(0)
    return "\n".join(lines).strip("\n") + "\n"


def fill(template: str, **values: str) -> str:
    # single pass, so braces inside substituted responses are never re-expanded
    if not values:
        return template
    pattern = re.compile("|".join(re.escape("{" + k + "}") for k in values))
    return pattern.sub(lambda m: values[m.group(0)[1:-1]], template)


class AuditLog:
    """Transcript store keyed by (run id, kind, feature id, item id)."""

    def __init__(self, root, run_id: str = "run"):
        self.root = Path(root) / run_id
        self.run_id = run_id
        self._lock = threading.Lock()

    def write(self, kind: str, feature_id, item: str, prompt: str, reply: str | None,
              **extra) -> str:
        safe = re.sub(r"[^A-Za-z0-9_.-]", "_", str(item))
        rel = Path(kind) / f"f{feature_id}" / f"{safe}.json"
        path = self.root / rel
        record = {"run_id": self.run_id, "kind": kind, "feature_id": feature_id, "item": item,
                  "prompt": prompt, "reply": reply, **extra}
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            tmp.write_text(json.dumps(record, ensure_ascii=False, indent=1), encoding="utf-8")
            tmp.replace(path)
        return str(rel)


def _audit(audit: AuditLog | None, *args, **kwargs) -> str | None:
    return audit.write(*args, **kwargs) if audit is not None else None


# --------------------------------------------------------------------------
# Descriptions
# --------------------------------------------------------------------------


@dataclass
class FeatureDescription:
    feature_id: int
    text: str
    fidelity: float
    p_value: float
    significant: bool
    n_annotations: int
    n_failed: int = 0
    candidates: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def sample_top_pairs(Z, j: int, n: int, ids: Sequence[str], *, seed: int = 0,
                     quantile: float = 0.95) -> list[str]:
    """``n`` ids drawn without replacement from rows in the top 5% of signed ``z_j``.

    Only positive values qualify, since descriptions are phrased from
    response A's side.
    """
    z = np.asarray(Z, float)[:, j]
    cut = np.quantile(z, quantile)
    eligible = np.flatnonzero((z >= cut) & (z > 0))
    if eligible.size < n:
        raise InsufficientDataError(
            f"feature {j}: {eligible.size} pairs in the top {100 * (1 - quantile):.0f}%, need {n}"
        )
    rng = np.random.default_rng([seed, j])
    pick = np.sort(rng.choice(eligible, size=n, replace=False))
    return [ids[i] for i in pick]


def format_examples(pairs: Sequence[PreferencePair]) -> str:
    blocks = [f"CONTEXT:\n{p.prompt}\n\nRESPONSE A:\n{p.response_a}\n\nRESPONSE B:\n{p.response_b}"
              for p in pairs]
    return "\n----------------\n".join(blocks)


_DESCRIPTION = re.compile(r'^(?:-\s*)?"([^"\n]+)"$')
_PREFILLED = re.compile(r'^([^"\n]+)"$')
_SIDE_REFERENCE = re.compile(r"\bresponse\s*[ab]\b", re.I)


def parse_description(reply: str, transcript: str | None = None) -> str:
    """Extract the single quoted description from a reply.

    Accepts ``- "text"``, ``"text"``, or ``text"`` (when the prompt
    pre-filled the opening quote).  Anything else, including text that
    refers to response A or B, is a :class:`FormatError`.
    """
    lines = [ln.strip() for ln in reply.strip().splitlines() if ln.strip()]
    if len(lines) != 1:
        raise FormatError(f"expected one description line, got {len(lines)}", transcript)
    m = _DESCRIPTION.match(lines[0]) or _PREFILLED.match(lines[0])
    if not m:
        raise FormatError(f"reply is not a single quoted description: {lines[0][:80]!r}", transcript)
    text = m.group(1).strip()
    if not text:
        raise FormatError("empty description", transcript)
    if _SIDE_REFERENCE.search(text):
        raise FormatError(f"description refers to a response side: {text!r}", transcript)
    return text


@dataclass
class Candidate:
    text: str
    seed: int
    example_ids: list[str]
    transcript: str | None = None


def propose_descriptions(j: int, Z, d: Dataset, llm: LLMClient, *, n_candidates: int = 5,
                         n_examples: int = 5, seed: int = 0, audit: AuditLog | None = None,
                         template: str | None = None) -> list[Candidate]:
    """One description per independently re-sampled set of top-activating examples."""
    template = template or load_template("feature_interp")
    ids = d.ids
    index = d.index()
    out = []
    for c in range(n_candidates):
        s = seed + 1000 * c
        example_ids = sample_top_pairs(Z, j, n_examples, ids, seed=s)
        if not example_ids:
            raise ValidationError("empty example set")
        prompt = fill(template, examples=format_examples([d.pairs[index[i]] for i in example_ids]))
        reply = llm.complete(prompt)
        ref = _audit(audit, "describe", j, f"candidate{c}", prompt, reply, seed=s, example_ids=example_ids)
        out.append(Candidate(parse_description(reply, ref), s, example_ids, ref))
    return out


# --------------------------------------------------------------------------
# Presence judgments and fidelity
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class JudgeAnnotation:
    pair_id: str
    feature_id: int
    verdict: int

    def __post_init__(self):
        if self.verdict not in (-1, 0, 1):
            raise ValidationError(f"verdict must be -1, 0 or +1, got {self.verdict}")


_VERDICTS = {"1": 1, "+1": 1, "-1": -1, "0": 0}


def parse_verdict(reply: str) -> int:
    token = reply.strip()
    if token not in _VERDICTS:
        raise AnnotationError(f"unparseable verdict {token[:40]!r}")
    return _VERDICTS[token]


def annotate_presence(description: str, pair: PreferencePair, llm: LLMClient, *,
                      feature_id: int = -1, audit: AuditLog | None = None,
                      template: str | None = None) -> JudgeAnnotation:
    """Ask the judge whether ``description`` fits response A (+1), B (-1), or neither (0)."""
    if not description or not description.strip():
        raise ValidationError("description must be nonempty")
    template = template or load_template("presence_judge")
    prompt = fill(template, description=description, prompt=pair.prompt,
                  response_a=pair.response_a, response_b=pair.response_b)
    reply = llm.complete(prompt)
    try:
        verdict = parse_verdict(reply)
    except AnnotationError:
        _audit(audit, "judge", feature_id, pair.id, prompt, reply, parsed=None)
        raise
    flags = {}
    if pair.response_a == pair.response_b and verdict != 0:
        flags["identical_responses_nonzero_verdict"] = True
    _audit(audit, "judge", feature_id, pair.id, prompt, reply, parsed=verdict, **flags)
    return JudgeAnnotation(pair.id, feature_id, verdict)


@dataclass
class FidelityResult:
    fidelity: float
    p_value: float
    n_annotations: int
    n_failed: int
    shortfall: int = 0


class UndefinedFidelity(NumericError):
    """Verdicts or activations have no variance, so the correlation is undefined."""


def pearson_fidelity(z, verdicts) -> tuple[float, float]:
    """Pearson correlation with its two-sided t-test p-value."""
    z = np.asarray(z, float)
    v = np.asarray(verdicts, float)
    if z.size < 2:
        raise UndefinedFidelity("fewer than 2 annotations")
    if np.ptp(z) == 0 or np.ptp(v) == 0:
        raise UndefinedFidelity("zero variance in activations or verdicts")
    r, p = stats.pearsonr(z, v)
    return float(np.clip(r, -1.0, 1.0)), float(p)


def fidelity_score(j: int, description: str, Z, d: Dataset, llm: LLMClient, *, n: int = 300,
                   seed: int = 0, exclude_ids: Sequence[str] = (), audit: AuditLog | None = None,
                   max_in_flight: int = 1, template: str | None = None) -> FidelityResult:
    """Correlation between ``z_j`` and judge verdicts on rows sampled uniformly from ``z_j != 0``.

    Rows in ``exclude_ids`` (the description's own examples) are never
    sampled.  If fewer than ``n`` rows qualify, all are used and the
    shortfall is recorded.  Failed annotations are dropped and counted.
    """
    z = np.asarray(Z, float)[:, j]
    excluded = set(exclude_ids)
    eligible = np.array([i for i in np.flatnonzero(z != 0) if d.pairs[i].id not in excluded], dtype=int)
    shortfall = max(0, n - eligible.size)
    if shortfall:
        logger.info("feature %d: only %d eligible rows for fidelity (wanted %d)", j, eligible.size, n)
        rows = eligible
    else:
        rows = np.sort(np.random.default_rng([seed, j, 17]).choice(eligible, size=n, replace=False))
    template = template or load_template("presence_judge")

    def one(i):
        try:
            return i, annotate_presence(description, d.pairs[i], llm, feature_id=j, audit=audit,
                                        template=template).verdict
        except AnnotationError:
            return i, None

    if max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            results = list(pool.map(one, rows))
    else:
        results = [one(i) for i in rows]
    ok = [(i, v) for i, v in results if v is not None]
    failed = len(results) - len(ok)
    r, p = pearson_fidelity([z[i] for i, _ in ok], [v for _, v in ok])
    return FidelityResult(r, p, len(ok), failed, shortfall)


def bonferroni_significant(p_value: float, n_features: int, alpha: float = SIGNIFICANCE_LEVEL) -> bool:
    return bool(np.isfinite(p_value) and p_value * n_features < alpha)


def select_and_filter(scored: Mapping[int, Sequence[tuple[str, FidelityResult | None]]],
                      n_features: int) -> list[FeatureDescription]:
    """Keep the highest-fidelity candidate per feature and apply the Bonferroni gate.

    ``scored`` maps feature id to ``(text, result)`` pairs; a ``None``
    result marks a candidate whose fidelity was undefined.  Features whose
    candidates all failed are returned as non-significant.
    """
    out = []
    for j in sorted(scored):
        cands = list(scored[j])
        if not cands:
            raise ValidationError(f"feature {j} has no candidates")
        valid = [(t, r) for t, r in cands if r is not None and np.isfinite(r.fidelity)]
        summary = [{"text": t, "fidelity": None if r is None else r.fidelity,
                    "p_value": None if r is None else r.p_value} for t, r in cands]
        if not valid:
            out.append(FeatureDescription(j, cands[0][0], float("nan"), float("nan"), False, 0,
                                          candidates=summary))
            continue
        text, best = max(valid, key=lambda tr: tr[1].fidelity)
        out.append(FeatureDescription(
            feature_id=int(j), text=text, fidelity=best.fidelity, p_value=best.p_value,
            significant=bonferroni_significant(best.p_value, n_features),
            n_annotations=best.n_annotations, n_failed=best.n_failed, candidates=summary,
        ))
    return out


def interpret_features(Z, d: Dataset, describer: LLMClient, judge: LLMClient, *,
                       features: Sequence[int] | None = None, n_candidates: int = 5,
                       n_examples: int = 5, n_fidelity: int = 300, seed: int = 0,
                       audit: AuditLog | None = None, max_in_flight: int = 1,
                       template_dir=None) -> list[FeatureDescription]:
    """Describe, score and filter every feature.  Features that cannot be described are skipped."""
    Z = np.asarray(Z, float)
    M = Z.shape[1]
    features = range(M) if features is None else features
    t_desc = load_template("feature_interp", template_dir)
    t_judge = load_template("presence_judge", template_dir)
    scored: dict[int, list] = {}
    for j in features:
        try:
            cands = propose_descriptions(j, Z, d, describer, n_candidates=n_candidates,
                                         n_examples=n_examples, seed=seed, audit=audit, template=t_desc)
        except (InsufficientDataError, FormatError) as exc:
            logger.warning("feature %d: no description (%s)", j, exc)
            continue
        scored[j] = []
        for c in cands:
            try:
                res = fidelity_score(j, c.text, Z, d, judge, n=n_fidelity, seed=seed + c.seed,
                                     exclude_ids=c.example_ids, audit=audit,
                                     max_in_flight=max_in_flight, template=t_judge)
            except UndefinedFidelity as exc:
                logger.info("feature %d candidate %r: %s", j, c.text, exc)
                res = None
            scored[j].append((c.text, res))
    return select_and_filter(scored, M)


def write_features_json(descriptions: Sequence[FeatureDescription], path, **header) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {**header, "features": [fd.to_json() for fd in descriptions]}
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=1, allow_nan=True), encoding="utf-8")
    tmp.replace(path)
    return path


def read_features_json(path) -> list[FeatureDescription]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return [FeatureDescription(**fd) for fd in payload["features"]]


# --------------------------------------------------------------------------
# Matching annotator explanations
# --------------------------------------------------------------------------


@dataclass
class MatchReport:
    match_rate: float
    baseline_rate: float
    per_feature_counts: dict[int, int]
    n_pairs: int
    n_skipped: int
    n_failed: int


def parse_index_list(reply: str, allowed: Sequence[int]) -> list[int]:
    try:
        value = json.loads(reply.strip())
    except ValueError as exc:
        raise AnnotationError(f"reply is not a JSON list: {reply.strip()[:60]!r}") from exc
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise AnnotationError(f"reply is not a list of integers: {value!r}")
    bad = [v for v in value if v not in allowed]
    if bad:
        raise AnnotationError(f"reply names unlisted features {bad}")
    return sorted(set(value))


def _feature_list(features: Sequence[int], descriptions: Mapping[int, str]) -> str:
    return "\n".join(f'- {j}: "{descriptions[j]}"' for j in features)


def match_explanations(d: Dataset, Z, descriptions: Mapping[int, str], llm: LLMClient, *,
                       n_pairs: int = 5000, max_active: int = 4, seed: int = 0,
                       audit: AuditLog | None = None, template: str | None = None) -> MatchReport:
    """Share of annotator explanations matched by an active described feature.

    For each sampled pair with an explanation, up to ``max_active`` described
    features with ``z_j != 0`` (largest ``|z_j|`` first) are shown to the
    judge.  The baseline asks the same question about the same number of
    randomly chosen inactive described features.  Pairs with no active
    feature count in the denominator as non-matches.  Failed replies are
    dropped from both rates and counted.
    """
    template = template or load_template("explanation_match")
    Z = np.asarray(Z, float)
    described = sorted(descriptions)
    with_expl = [i for i, p in enumerate(d.pairs) if p.explanation and p.explanation.strip()]
    n_skipped = len(d) - len(with_expl)
    rng = np.random.default_rng(seed)
    take = np.sort(rng.choice(len(with_expl), size=min(n_pairs, len(with_expl)), replace=False))
    counts = {j: 0 for j in described}
    hits = base_hits = used = failed = 0

    def ask(pair, feats, kind):
        prompt = fill(template, explanation=pair.explanation, features=_feature_list(feats, descriptions))
        reply = llm.complete(prompt)
        try:
            chosen = parse_index_list(reply, feats)
        except AnnotationError:
            _audit(audit, kind, "all", pair.id, prompt, reply, parsed=None)
            raise
        _audit(audit, kind, "all", pair.id, prompt, reply, parsed=chosen)
        return chosen

    for t in take:
        i = with_expl[t]
        pair = d.pairs[i]
        row = Z[i]
        active = sorted((j for j in described if row[j] != 0), key=lambda j: (-abs(row[j]), j))[:max_active]
        inactive = [j for j in described if row[j] == 0]
        n_show = max_active if not active else len(active)
        baseline = sorted(rng.choice(inactive, size=min(n_show, len(inactive)), replace=False).tolist()) \
            if inactive else []
        try:
            chosen = ask(pair, active, "match") if active else []
            chosen_base = ask(pair, baseline, "match_baseline") if baseline else []
        except AnnotationError:
            failed += 1
            continue
        used += 1
        hits += bool(chosen)
        base_hits += bool(chosen_base)
        for j in chosen:
            counts[j] += 1
    rate = hits / used if used else float("nan")
    base = base_hits / used if used else float("nan")
    return MatchReport(rate, base, counts, used, n_skipped, failed)
