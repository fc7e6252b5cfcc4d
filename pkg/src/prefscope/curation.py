"""Feature-targeted label flipping, curated exports, and Bradley-Terry Elo leaderboards."""

from __future__ import annotations

import enum
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import expit

from .dataset import Dataset, Label, write_jsonl
from .errors import InsufficientDataError, ValidationError

logger = logging.getLogger(__name__)

ANCHOR_RATING = 1000.0
ELO_SCALE = 400.0 / math.log(10.0)   # rating = 400 * log10(e**s)


class Outcome(str, enum.Enum):
    A_WINS = "A_WINS"
    B_WINS = "B_WINS"
    TIE = "TIE"

    def reversed(self) -> "Outcome":
        return {Outcome.A_WINS: Outcome.B_WINS, Outcome.B_WINS: Outcome.A_WINS}.get(self, self)

    @property
    def score_a(self) -> float:
        return {Outcome.A_WINS: 1.0, Outcome.B_WINS: 0.0, Outcome.TIE: 0.5}[self]


@dataclass(frozen=True)
class MatchRecord:
    model_a: str
    model_b: str
    outcome: Outcome
    pair_id: str | None = None

    def __post_init__(self):
        if self.model_a == self.model_b:
            raise ValidationError(f"a model cannot play itself ({self.model_a})")
        object.__setattr__(self, "outcome", Outcome(self.outcome))

    def reversed(self) -> "MatchRecord":
        return MatchRecord(self.model_a, self.model_b, self.outcome.reversed(), self.pair_id)


@dataclass
class EloTable:
    ratings: dict[str, float]
    n_matches: dict[str, int]
    anchors: list[str]
    components: list[list[str]] = field(default_factory=list)

    def rank(self) -> dict[str, int]:
        order = sorted(self.ratings, key=lambda m: (-self.ratings[m], m))
        return {m: i + 1 for i, m in enumerate(order)}


# --------------------------------------------------------------------------
# Flagging and flipping
# --------------------------------------------------------------------------


def rank_by_feature(Z, j: int, n: int, ids: Sequence[str]) -> list[str]:
    """Top-``n`` pair ids by ``|z_j|`` (descending, ties by id) among nonzero rows."""
    z = np.asarray(Z, float)[:, j]
    if len(ids) != z.size:
        raise ValidationError("ids and Z rows must align")
    if n < 0:
        raise ValidationError("n must be nonnegative")
    if n == 0:
        return []
    nz = np.flatnonzero(z != 0)
    if n > nz.size:
        raise InsufficientDataError(f"feature {j} is nonzero on {nz.size} pairs; cannot take {n}")
    order = sorted(nz, key=lambda i: (-abs(z[i]), ids[i]))
    return [ids[i] for i in order[:n]]


def flag_for_flip(d: Dataset, Z, j: int, n: int, direction: int) -> list[str]:
    """Pairs to flip so that the chosen side stops favouring one direction of feature ``j``.

    ``direction`` is the sign of ``z_j`` whose preference is being removed:
    ``+1`` means the feature expressed more by response A is undesirable.
    Among labeled A/B pairs, the top-``n`` by ``|z_j|`` whose chosen
    response is the one expressing that direction are returned.
    """
    if direction not in (-1, 1):
        raise ValidationError("direction must be +1 or -1")
    Z = np.asarray(Z, float)
    z = Z[:, j]
    candidates = [i for i, p in enumerate(d.pairs)
                  if p.label in (Label.A, Label.B) and z[i] != 0
                  and np.sign(z[i]) * (1 if p.label is Label.A else -1) == direction]
    if n > len(candidates):
        raise InsufficientDataError(f"only {len(candidates)} pairs favour direction {direction:+d} of feature {j}")
    order = sorted(candidates, key=lambda i: (-abs(z[i]), d.pairs[i].id))
    return [d.pairs[i].id for i in order[:n]]


def flip_labels(d: Dataset, ids: Sequence[str], *, feature_id: int | None = None, Z=None) -> Dataset:
    """Swap A and B labels on ``ids``; everything else is untouched.

    Each flipped row carries a curation block ``{feature_id, z, original_label}``
    and the dataset provenance gains a flip manifest.  Flipping a row that
    already carries a curation block from a flip removes it, so flipping the
    same ids twice restores the original dataset.
    """
    if not ids:
        return d
    index = d.index()
    targets = set()
    for pid in ids:
        if pid not in index:
            raise ValidationError(f"unknown pair id {pid!r}")
        if d.pairs[index[pid]].label not in (Label.A, Label.B):
            raise ValidationError(f"pair {pid!r} is labeled {d.pairs[index[pid]].label.value!r}; nothing to flip")
        targets.add(pid)
    zcol = None if (Z is None or feature_id is None) else np.asarray(Z, float)[:, feature_id]
    before = Counter(d.pairs[index[pid]].label.value for pid in targets)
    pairs = list(d.pairs)
    for pid in targets:
        i = index[pid]
        p = pairs[i]
        if p.curation and p.curation.get("original_label") == p.label.flipped().value:
            curation = None
        else:
            curation = {
                "feature_id": feature_id,
                "z": None if zcol is None else float(zcol[i]),
                "original_label": p.label.value,
            }
        pairs[i] = p.replace(label=p.label.flipped(), curation=curation)
    provenance = dict(d.provenance)
    flips = list(provenance.get("flips", []))
    flips.append({"feature_id": feature_id, "n": len(targets), "ids": sorted(targets),
                  "pre_flip_labels": dict(before)})
    provenance["flips"] = flips
    return d.replace(pairs=tuple(pairs), provenance=provenance)


def export_curated(d: Dataset, path) -> Path:
    """Write the (possibly flipped) dataset as JSONL with its curation blocks."""
    return write_jsonl(d, path)


# --------------------------------------------------------------------------
# Bradley-Terry / Elo
# --------------------------------------------------------------------------


def matches_from_dataset(d: Dataset) -> tuple[list[MatchRecord], int]:
    """Matches for pairs carrying both model identities; returns (matches, n_excluded)."""
    out, excluded = [], 0
    to_outcome = {Label.A: Outcome.A_WINS, Label.B: Outcome.B_WINS, Label.TIE: Outcome.TIE}
    for p in d.pairs:
        if not p.model_a or not p.model_b or p.label not in to_outcome or p.model_a == p.model_b:
            excluded += 1
            continue
        out.append(MatchRecord(p.model_a, p.model_b, to_outcome[p.label], p.id))
    return out, excluded


def _components(models: list[str], matches: Sequence[MatchRecord]) -> list[list[str]]:
    parent = {m: m for m in models}

    def find(m):
        while parent[m] != m:
            parent[m] = parent[parent[m]]
            m = parent[m]
        return m

    for r in matches:
        ra, rb = find(r.model_a), find(r.model_b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    groups: dict[str, list[str]] = {}
    for m in models:
        groups.setdefault(find(m), []).append(m)
    return sorted((sorted(g) for g in groups.values()), key=lambda g: g[0])


def _bt_strengths(models: list[str], matches: Sequence[MatchRecord], *, tol: float = 1e-10,
                  max_iter: int = 200) -> np.ndarray:
    """Bradley-Terry MLE on one connected component with ``models[0]`` pinned at 0.

    Outcomes are aggregated per ordered model pair into win fractions; the
    fit is Newton's method on the log-likelihood.
    """
    k = len(models)
    if k == 1:
        return np.zeros(1)
    pos = {m: i for i, m in enumerate(models)}
    n = np.zeros((k, k))
    w = np.zeros((k, k))
    for r in matches:
        a, b = pos[r.model_a], pos[r.model_b]
        n[a, b] += 1
        n[b, a] += 1
        w[a, b] += r.outcome.score_a
        w[b, a] += 1 - r.outcome.score_a
    # the MLE exists only if every model can reach every other through wins (ties count both ways)
    n_strong, labels = connected_components(csr_matrix(w > 0), directed=True, connection="strong")
    if n_strong > 1:
        sizes = Counter(labels)
        odd = [models[i] for i in range(k) if sizes[labels[i]] < k][:3]
        raise ValidationError(
            f"Bradley-Terry strengths diverge; some models never lose or never win against the rest: {odd}"
        )
    iu = np.triu_indices(k, 1)
    has = n[iu] > 0
    ia, ib = iu[0][has], iu[1][has]
    games, wins = n[ia, ib], w[ia, ib]
    s = np.zeros(k)
    for _ in range(max_iter):
        p = expit(s[ia] - s[ib])
        resid = wins - games * p
        grad = np.zeros(k)
        np.add.at(grad, ia, resid)
        np.add.at(grad, ib, -resid)
        if np.max(np.abs(grad[1:])) <= tol * max(1.0, games.sum()):
            break
        h = games * p * (1 - p)
        H = np.zeros((k, k))
        np.add.at(H, (ia, ia), h)
        np.add.at(H, (ib, ib), h)
        np.add.at(H, (ia, ib), -h)
        np.add.at(H, (ib, ia), -h)
        step = np.linalg.lstsq(H[1:, 1:], grad[1:], rcond=None)[0]
        s[1:] += step
        if np.max(np.abs(s)) > 50:
            undefeated = [models[i] for i in np.argsort(-np.abs(s))[:3]]
            raise ValidationError(
                f"Bradley-Terry strengths diverge; some model never loses or never wins: {undefeated}"
            )
    return s - s[0]


def compute_elo(matches: Sequence[MatchRecord], *, allow_disconnected: bool = False) -> EloTable:
    """Maximum-likelihood Bradley-Terry ratings on the Elo scale.

    Ties count as half a win for each side.  The lexicographically smallest
    model of each connected component is anchored at 1000; a disconnected
    comparison graph is an error unless ``allow_disconnected``.
    """
    if not matches:
        raise InsufficientDataError("no matches")
    counts = Counter()
    for r in matches:
        counts[r.model_a] += 1
        counts[r.model_b] += 1
    models = sorted(counts)
    comps = _components(models, matches)
    if len(comps) > 1:
        if not allow_disconnected:
            raise ValidationError(f"comparison graph has {len(comps)} components: {comps}")
        logger.warning("anchoring %d disconnected components separately", len(comps))
    ratings: dict[str, float] = {}
    for comp in comps:
        members = set(comp)
        s = _bt_strengths(comp, [r for r in matches if r.model_a in members])
        for m, v in zip(comp, s):
            ratings[m] = ANCHOR_RATING + ELO_SCALE * float(v)
        ratings[comp[0]] = ANCHOR_RATING
    return EloTable(ratings, dict(counts), [c[0] for c in comps], comps)


@dataclass
class EloComparison:
    base: EloTable
    adjusted: EloTable
    delta: dict[str, float]
    flipped_ids: list[str]
    n_excluded: int

    def rows(self) -> list[dict]:
        br, ar = self.base.rank(), self.adjusted.rank()
        return [{
            "model": m,
            "base_rating": self.base.ratings[m],
            "adjusted_rating": self.adjusted.ratings[m],
            "delta": self.delta[m],
            "base_rank": br[m],
            "adjusted_rank": ar[m],
            "n_matches": self.base.n_matches[m],
        } for m in sorted(self.base.ratings, key=lambda m: (br[m], m))]


ELO_COLUMNS = ["model", "base_rating", "adjusted_rating", "delta", "base_rank", "adjusted_rank", "n_matches"]


def safety_adjusted_elo(d: Dataset, Z, j: int, n: int, *, direction: int,
                        allow_disconnected: bool = False) -> EloComparison:
    """Elo before and after flipping the top-``n`` pairs of feature ``j`` in ``direction``."""
    ids = flag_for_flip(d, Z, j, n, direction) if n else []
    curated = flip_labels(d, ids, feature_id=j, Z=Z)
    base_matches, excluded = matches_from_dataset(d)
    adj_matches, _ = matches_from_dataset(curated)
    base = compute_elo(base_matches, allow_disconnected=allow_disconnected)
    adjusted = compute_elo(adj_matches, allow_disconnected=allow_disconnected)
    delta = {m: adjusted.ratings[m] - base.ratings[m] for m in base.ratings}
    return EloComparison(base, adjusted, delta, ids, excluded)
