"""Annotator heterogeneity: random-slopes meta-analysis, subgroup tests, personalization.

Slopes are estimated per annotator (stage one) and pooled under a
normal-normal model ``beta_a ~ N(beta, tau^2)`` (stage two).  ``tau`` is the
between-annotator spread of a preference, i.e. how subjective it is.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats
from scipy.special import expit

from .dataset import Dataset
from .errors import (
    ConvergenceError,
    DegenerateColumnError,
    InsufficientDataError,
    RankDeficiencyError,
    SeparationError,
    ValidationError,
)
from .preference_stats import auc, fit_logistic, standardize

logger = logging.getLogger(__name__)

REML = "REML"
PAULE_MANDEL = "PAULE_MANDEL"


@dataclass(frozen=True)
class AnnotatorSlope:
    annotator_id: str
    feature_id: int
    beta_hat: float
    se: float
    n_pairs: int


class SlopeList(list):
    """List of :class:`AnnotatorSlope` that also remembers skipped annotators."""

    def __init__(self, items=(), skipped: dict[str, str] | None = None):
        super().__init__(items)
        self.skipped = dict(skipped or {})


@dataclass(frozen=True)
class RandomEffectsEstimate:
    feature_id: int
    beta_mean: float
    tau: float
    estimator: str
    n_annotators: int
    beta_mean_se: float = float("nan")


def _labeled_view(d: Dataset, Z):
    Z = np.asarray(Z, dtype=np.float64)
    if Z.shape[0] != len(d):
        raise ValidationError(f"Z has {Z.shape[0]} rows but dataset has {len(d)} pairs")
    mask = d.labeled_mask()
    return mask, Z[mask], d.labels(), d.length_deltas()[mask]


# --------------------------------------------------------------------------
# Stage one: per-annotator slopes
# --------------------------------------------------------------------------


def per_annotator_slopes(j: int, d: Dataset, Z, *, min_pairs: int = 30,
                         standardize_columns: bool = True,
                         length_control: bool = True) -> SlopeList:
    """Fit ``y ~ sigma(a + b z_j + g l_delta)`` separately for every annotator.

    With ``standardize_columns`` the feature and length columns are
    standardized once over all labeled pairs, so every annotator's slope is
    on the same per-SD scale as the pooled effect.
    """
    mask, Zl, y, ld = _labeled_view(d, Z)
    z = Zl[:, j]
    if standardize_columns:
        z = standardize(z)[0]
        if length_control:
            try:
                ld = standardize(ld)[0]
            except DegenerateColumnError:
                length_control = False
    ann = np.array([p.annotator_id for p, m in zip(d.pairs, mask) if m], dtype=object)
    if any(a is None for a in ann):
        raise ValidationError("per-annotator slopes need an annotator id on every labeled pair")

    out = SlopeList()
    for a in sorted(set(ann)):
        rows = np.flatnonzero(ann == a)
        if rows.size < min_pairs:
            out.skipped[a] = f"{rows.size} labeled pairs < {min_pairs}"
            continue
        za = z[rows]
        if np.ptp(za) == 0:
            out.skipped[a] = "feature constant for this annotator"
            continue
        cols, names = [za], ["z"]
        if length_control and np.ptp(ld[rows]) > 0:
            cols.append(ld[rows])
            names.append("length_delta")
        try:
            fit = fit_logistic(y[rows], np.column_stack(cols), columns=names)
        except (SeparationError, RankDeficiencyError, ConvergenceError) as exc:
            out.skipped[a] = f"{type(exc).__name__}: {exc}"
            continue
        k = fit.index("z")
        out.append(AnnotatorSlope(a, int(j), float(fit.coef[k]), float(fit.se[k]), int(rows.size)))
    if not out:
        logger.warning("feature %d: no annotator reached %d usable pairs", j, min_pairs)
    return out


# --------------------------------------------------------------------------
# Stage two: pooling
# --------------------------------------------------------------------------


def _pooled_mean(b, v, tau2):
    w = 1.0 / (v + tau2)
    mu = float((w * b).sum() / w.sum())
    return mu, w


def restricted_loglik(tau2: float, b: np.ndarray, v: np.ndarray) -> float:
    mu, w = _pooled_mean(b, v, tau2)
    return float(-0.5 * (np.log(v + tau2).sum() + np.log(w.sum()) + (w * (b - mu) ** 2).sum()))


def tau2_reml(b, v, *, grid_points: int = 200, tol: float = 1e-8) -> float:
    """Maximize the restricted likelihood over ``tau^2 in [0, 10 var(b)]``.

    A coarse grid locates the basin and a bounded scalar search refines it.
    """
    b = np.asarray(b, float)
    v = np.asarray(v, float)
    upper = 10.0 * float(np.var(b))
    if upper <= 0:
        return 0.0
    grid = np.linspace(0.0, upper, grid_points)
    values = np.array([restricted_loglik(t, b, v) for t in grid])
    i = int(np.argmax(values))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid_points - 1)]
    res = optimize.minimize_scalar(lambda t: -restricted_loglik(t, b, v), bounds=(lo, hi),
                                   method="bounded", options={"xatol": tol})
    best = float(res.x)
    # the boundary itself is a legitimate optimum that a bounded search only approaches
    if restricted_loglik(0.0, b, v) >= restricted_loglik(best, b, v):
        return 0.0
    return best


def q_statistic(tau2: float, b, v) -> float:
    mu, w = _pooled_mean(b, v, tau2)
    return float((w * (b - mu) ** 2).sum())


def tau2_paule_mandel(b, v, *, tol: float = 1e-12) -> float:
    """Solve ``Q(tau^2) = n - 1``; ``Q`` is decreasing, so the root is unique when it exists."""
    b = np.asarray(b, float)
    v = np.asarray(v, float)
    target = b.size - 1
    if q_statistic(0.0, b, v) <= target:
        return 0.0
    hi = max(float(np.var(b)), 1e-12)
    while q_statistic(hi, b, v) > target:
        hi *= 2.0
    return float(optimize.brentq(lambda t: q_statistic(t, b, v) - target, 0.0, hi, xtol=tol))


def pool_random_effects(slopes: Sequence[AnnotatorSlope], estimator: str = REML) -> RandomEffectsEstimate:
    """Pool per-annotator slopes into ``(beta_mean, tau)`` with REML or Paule-Mandel."""
    if len(slopes) < 3:
        raise InsufficientDataError(f"need at least 3 annotator slopes, got {len(slopes)}")
    ordered = sorted(slopes, key=lambda s: s.annotator_id)
    b = np.array([s.beta_hat for s in ordered])
    v = np.array([s.se for s in ordered]) ** 2
    if np.any(v <= 0):
        raise ValidationError("slope standard errors must be positive")
    est = estimator.upper()
    if est == REML:
        tau2 = tau2_reml(b, v)
    elif est in (PAULE_MANDEL, "PM"):
        est = PAULE_MANDEL
        tau2 = tau2_paule_mandel(b, v)
    else:
        raise ValidationError(f"unknown estimator {estimator!r}")
    mu, w = _pooled_mean(b, v, tau2)
    features = {s.feature_id for s in ordered}
    return RandomEffectsEstimate(
        feature_id=ordered[0].feature_id if len(features) == 1 else -1,
        beta_mean=mu,
        tau=float(np.sqrt(tau2)),
        estimator=est,
        n_annotators=len(ordered),
        beta_mean_se=float(1.0 / np.sqrt(w.sum())),
    )


def fraction_reversed(estimate: RandomEffectsEstimate | float, tau: float | None = None) -> float:
    """Share of annotators whose slope sign opposes the pooled mean, ``Phi(-|beta|/tau)``.

    Accepts either an estimate or ``(beta_mean, tau)``.
    """
    if isinstance(estimate, RandomEffectsEstimate):
        beta, tau = estimate.beta_mean, estimate.tau
    else:
        if tau is None:
            raise ValidationError("tau is required when passing a bare beta_mean")
        beta = float(estimate)
    if tau < 0:
        raise ValidationError("tau must be nonnegative")
    if tau == 0:
        return 0.0
    return float(stats.norm.cdf(-abs(beta) / tau))


# --------------------------------------------------------------------------
# Subgroup likelihood-ratio test
# --------------------------------------------------------------------------


@dataclass
class LrtResult:
    feature_id: int
    grouping: str
    statistic: float
    df: int
    p_value: float
    group_offsets: dict[str, float]
    levels: dict[str, int]
    merged: list[str] = field(default_factory=list)
    n_excluded: int = 0

    def p_bonferroni(self, n_tests: int) -> float:
        return min(1.0, self.p_value * n_tests)


def subgroup_lrt(j: int, d: Dataset, Z, grouping: str, *, min_pairs: int = 30,
                 merge_small: bool = True, length_control: bool = True) -> LrtResult:
    """Test whether slope offsets by demographic group improve fit.

    Model 1 is ``y ~ z_j + length``; model 2 adds ``z_j * 1[group = g]`` for
    every non-reference level.  ``2 (l2 - l1)`` is referred to chi-square
    with ``levels - 1`` degrees of freedom.  Pairs without the demographic
    key are excluded and counted.  Levels with fewer than ``min_pairs`` rows
    are merged into ``"other"`` (or rejected if ``merge_small`` is false).
    """
    mask, Zl, y, ld = _labeled_view(d, Z)
    groups = []
    for p, m in zip(d.pairs, mask):
        if m:
            demo = p.demographics or {}
            g = demo.get(grouping)
            groups.append(None if g is None else str(g))
    groups = np.array(groups, dtype=object)
    keep = np.array([g is not None for g in groups])
    n_excluded = int((~keep).sum())
    groups, z, y, ld = groups[keep], Zl[keep, j], y[keep], ld[keep]

    counts = Counter(groups)
    small = sorted(g for g, c in counts.items() if c < min_pairs)
    if small:
        if not merge_small:
            raise InsufficientDataError(f"levels {small} of {grouping!r} have fewer than {min_pairs} pairs")
        logger.warning("merging small levels %s of %r into 'other'", small, grouping)
        groups = np.array(["other" if g in small else g for g in groups], dtype=object)
        counts = Counter(groups)
    levels = sorted(counts)
    if len(levels) < 2:
        raise InsufficientDataError(f"grouping {grouping!r} has fewer than 2 usable levels")

    zs = standardize(z)[0]
    base, names = [zs], ["z"]
    if length_control:
        try:
            base.append(standardize(ld)[0])
            names.append("length_delta")
        except DegenerateColumnError:
            pass
    fit1 = fit_logistic(y, np.column_stack(base), columns=names)
    inter = [zs * (groups == g) for g in levels[1:]]
    fit2 = fit_logistic(y, np.column_stack(base + inter),
                        columns=names + [f"z:{grouping}={g}" for g in levels[1:]])
    stat = max(0.0, 2.0 * (fit2.loglik - fit1.loglik))
    df = len(levels) - 1
    offsets = {levels[0]: 0.0}
    offsets.update({g: float(fit2.coef[len(names) + 1 + i]) for i, g in enumerate(levels[1:])})
    return LrtResult(int(j), grouping, stat, df, float(stats.chi2.sf(stat, df)), offsets,
                     {g: int(counts[g]) for g in levels}, small, n_excluded)


# --------------------------------------------------------------------------
# Personalization
# --------------------------------------------------------------------------


@dataclass
class GlobalModel:
    features: list[int]
    coef: np.ndarray                 # intercept, one slope per feature, length slope
    means: np.ndarray
    sds: np.ndarray
    length_mean: float
    length_sd: float
    annotators: list[str]
    dropped: list[int] = field(default_factory=list)

    @property
    def alpha(self) -> float:
        return float(self.coef[0])

    @property
    def beta(self) -> np.ndarray:
        return self.coef[1:1 + len(self.features)]

    @property
    def gamma(self) -> float:
        return float(self.coef[-1])

    def design(self, Z_rows) -> np.ndarray:
        """Standardized feature columns (restricted to ``features``) for raw Z rows."""
        Z_rows = np.asarray(Z_rows, float)
        return (Z_rows[:, self.features] - self.means) / self.sds

    def logit(self, Z_rows, length_delta) -> np.ndarray:
        x = (np.asarray(length_delta, float) - self.length_mean) / self.length_sd
        return self.alpha + self.design(Z_rows) @ self.beta + self.gamma * x


def low_volume_annotators(d: Dataset) -> tuple[list[str], list[str]]:
    """Split annotators into the bottom and top halves by labeled-pair count.

    Ordering is by ``(count, annotator_id)``, so equal volumes split by id.
    """
    counts = Counter(p.annotator_id for p in d.pairs if p.is_labeled and p.annotator_id is not None)
    order = sorted(counts, key=lambda a: (counts[a], a))
    half = len(order) // 2
    return order[:half], order[half:]


def fit_global(d: Dataset, Z, *, features: Sequence[int] | None = None,
               annotators: Sequence[str] | None = None) -> GlobalModel:
    """Multivariate logistic model on the low-volume half of annotators.

    Columns are standardized over the training rows; features that are
    constant there are dropped and listed in ``dropped``.
    """
    mask, Zl, y, ld = _labeled_view(d, Z)
    if annotators is None:
        annotators, _ = low_volume_annotators(d)
    annotators = list(annotators)
    if not annotators:
        raise InsufficientDataError("no annotators in the low-volume half")
    ann = np.array([p.annotator_id for p, m in zip(d.pairs, mask) if m], dtype=object)
    rows = np.isin(ann, annotators)
    if not rows.any():
        raise InsufficientDataError("low-volume annotators have no labeled pairs")
    features = list(range(Zl.shape[1])) if features is None else list(features)
    Zt = Zl[rows]
    means = Zt[:, features].mean(axis=0)
    sds = Zt[:, features].std(axis=0)
    ok = sds > 1e-12
    dropped = [f for f, k in zip(features, ok) if not k]
    features = [f for f, k in zip(features, ok) if k]
    means, sds = means[ok], sds[ok]
    l_mean, l_sd = float(ld[rows].mean()), float(ld[rows].std())
    names = [f"z{f}" for f in features]
    X = (Zt[:, features] - means) / sds
    if l_sd > 1e-12:
        fit = fit_logistic(y[rows], np.column_stack([X, (ld[rows] - l_mean) / l_sd]),
                           columns=names + ["length_delta"])
        coef = fit.coef
    else:
        # constant length difference: no length slope to estimate
        l_sd = 1.0
        coef = np.append(fit_logistic(y[rows], X, columns=names).coef, 0.0)
    return GlobalModel(features, coef, means, sds, l_mean, l_sd, annotators, dropped)


@dataclass
class PersonalizedModel:
    global_model: GlobalModel
    annotator_id: str
    selected: list[int]
    tau2: np.ndarray
    delta: np.ndarray               # one offset per global feature; zero outside ``selected``
    n_train: int
    grad_norm: float

    def logit(self, Z_rows, length_delta) -> np.ndarray:
        g = self.global_model
        return g.logit(Z_rows, length_delta) + g.design(Z_rows) @ self.delta

    def predict(self, Z_rows, length_delta) -> np.ndarray:
        return expit(self.logit(Z_rows, length_delta))


def personalize(annotator_id: str, Z_train, y_train, length_train, selected: Sequence[int],
                tau2, global_model: GlobalModel, *, max_iter: int = 100,
                tol: float = 1e-8) -> PersonalizedModel:
    """Per-annotator offsets on ``selected`` features with Gaussian priors ``N(0, tau2_j)``.

    The global coefficients stay fixed (they enter as an offset).  The
    penalized log-likelihood is maximized by IRLS until the gradient's max
    norm is below ``tol``.
    """
    g = global_model
    selected = list(selected)
    tau2 = np.broadcast_to(np.asarray(tau2, float), (len(selected),)).copy()
    if np.any(tau2 <= 0):
        raise ValidationError("prior variances must be positive")
    missing = [f for f in selected if f not in g.features]
    if missing:
        raise ValidationError(f"features {missing} are not in the global model")
    y_train = np.asarray(y_train, float)
    if y_train.size < 1:
        raise InsufficientDataError("personalization needs at least one training pair")
    cols = [g.features.index(f) for f in selected]
    design = g.design(Z_train)
    X = design[:, cols]
    offset = g.logit(Z_train, length_train)
    fit = fit_logistic(y_train, X, add_intercept=False, offset=offset, l2=1.0 / tau2,
                       max_iter=max_iter, tol=tol / (1 + y_train.size))
    delta = np.zeros(len(g.features))
    delta[cols] = fit.coef
    return PersonalizedModel(g, annotator_id, selected, tau2, delta, int(y_train.size), fit.grad_norm)


def active_sample(pair_ids: Sequence[str], z_values, k: int) -> tuple[list[str], list[str]]:
    """The ``k`` pairs with the largest ``|z|`` (ties by pair id) and the remainder.

    ``z_values`` may be 2-D, in which case the row max of ``|z|`` is used.
    """
    z = np.abs(np.asarray(z_values, float))
    if z.ndim == 2:
        z = z.max(axis=1)
    if k > len(pair_ids):
        raise InsufficientDataError(f"asked for {k} pairs, annotator has {len(pair_ids)}")
    order = sorted(range(len(pair_ids)), key=lambda i: (-z[i], pair_ids[i]))
    chosen = [pair_ids[i] for i in order[:k]]
    rest = [pair_ids[i] for i in order[k:]]
    return chosen, rest


@dataclass
class PersonalizationRow:
    k: int
    sampling_mode: str
    auc_global: float
    auc_personalized: float
    ci_lo: float
    ci_hi: float
    n_annotators: int
    n_heldout: int


def evaluate_personalization(d: Dataset, Z, global_model: GlobalModel, selected: Sequence[int],
                             tau2, *, ks: Sequence[int] = (1, 2, 4, 8, 16),
                             modes: Sequence[str] = ("random", "active"), replicates: int = 20,
                             heldout_fraction: float = 0.5, annotators: Sequence[str] | None = None,
                             n_boot: int = 200, seed: int = 0) -> list[PersonalizationRow]:
    """Held-out AUC of global vs. personalized predictions as a function of ``k``.

    Each evaluated annotator's pairs are split once (seeded) into a held-out
    set and a training pool, so every ``k`` and sampling mode is scored on
    the same rows.  ``random`` averages over ``replicates`` draws from the
    pool; ``active`` takes the top-``|z|`` pool pairs on the selected
    features.  AUC is pooled over annotators; the interval is an
    annotator-level bootstrap of the personalized AUC.
    """
    mask, Zl, y, ld = _labeled_view(d, Z)
    ids = np.array([p.id for p, m in zip(d.pairs, mask) if m], dtype=object)
    ann = np.array([p.annotator_id for p, m in zip(d.pairs, mask) if m], dtype=object)
    if annotators is None:
        train_set = set(global_model.annotators)
        annotators = sorted(a for a in set(ann) if a not in train_set)
    rng = np.random.default_rng(seed)
    max_k = max(ks)
    split = {}
    for a in annotators:
        rows = np.flatnonzero(ann == a)
        rows = rows[np.argsort(ids[rows])]
        n_hold = int(round(heldout_fraction * rows.size))
        perm = rng.permutation(rows)
        held, pool = np.sort(perm[:n_hold]), np.sort(perm[n_hold:])
        if held.size < 1 or pool.size < max_k:
            continue
        split[a] = (held, pool)
    if not split:
        raise InsufficientDataError("no annotator has enough pairs for the requested k grid")
    held_rows = {a: h for a, (h, _) in split.items()}
    names = sorted(split)
    y_held = {a: y[held_rows[a]] for a in names}

    def mean_auc(replicate_scores, members):
        vals = []
        for scores in replicate_scores:
            t = np.concatenate([y_held[a] for a in members])
            if 0 < t.sum() < t.size:
                vals.append(auc(np.concatenate([scores[a] for a in members]), t))
        return float(np.mean(vals)) if vals else float("nan")

    def with_ci(replicate_scores, boot_rng):
        point = mean_auc(replicate_scores, names)
        boots = []
        for _ in range(n_boot):
            members = [names[i] for i in boot_rng.integers(0, len(names), size=len(names))]
            value = mean_auc(replicate_scores, members)
            if np.isfinite(value):
                boots.append(value)
        lo, hi = np.quantile(boots, [0.025, 0.975]) if boots else (np.nan, np.nan)
        return point, float(min(lo, point)), float(max(hi, point))

    g_scores = {a: global_model.logit(Zl[held_rows[a]], ld[held_rows[a]]) for a in names}
    auc_global = mean_auc([g_scores], names)
    out = []
    for k in ks:
        for mode in modes:
            if mode not in ("random", "active"):
                raise ValidationError(f"unknown sampling mode {mode!r}")
            reps = replicates if mode == "random" else 1
            replicate_scores = []
            for _ in range(reps):
                scores = {}
                for a in names:
                    held, pool = split[a]
                    if mode == "active":
                        chosen_ids, _ = active_sample(list(ids[pool]), Zl[pool][:, selected], k)
                        train = pool[np.isin(ids[pool], chosen_ids)]
                    else:
                        train = rng.choice(pool, size=k, replace=False)
                    pm = personalize(a, Zl[train], y[train], ld[train], selected, tau2, global_model)
                    scores[a] = pm.logit(Zl[held], ld[held])
                replicate_scores.append(scores)
            point, lo, hi = with_ci(replicate_scores, np.random.default_rng([seed, k, len(mode)]))
            out.append(PersonalizationRow(k, mode, auc_global, point, lo, hi, len(names),
                                          int(sum(h.size for h in held_rows.values()))))
    return out
