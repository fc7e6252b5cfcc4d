"""Expressed-preference statistics.

Per-feature logistic regressions with a length control, win-rate average
marginal effects (AME) with bootstrap intervals, prevalence, and
cross-validated AUC of multivariate models.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import expit, log_expit

from .errors import (
    ConvergenceError,
    DegenerateColumnError,
    InsufficientDataError,
    NumericError,
    RankDeficiencyError,
    SeparationError,
    ValidationError,
)

logger = logging.getLogger(__name__)

# A linear predictor this large means a fitted probability within ~1e-13 of 0/1.
SEPARATION_LOGIT = 30.0


@dataclass
class LogisticFit:
    coef: np.ndarray
    cov: np.ndarray
    columns: list[str]
    loglik: float
    converged: bool
    n_iterations: int
    grad_norm: float
    n_obs: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def z(self) -> np.ndarray:
        return self.coef / self.se

    @property
    def p_values(self) -> np.ndarray:
        return 2 * stats.norm.sf(np.abs(self.z))

    def __getitem__(self, name: str) -> float:
        return float(self.coef[self.columns.index(name)])

    def index(self, name: str) -> int:
        return self.columns.index(name)


def loglik(y: np.ndarray, eta: np.ndarray, weights: np.ndarray | None = None) -> float:
    ll = y * log_expit(eta) + (1 - y) * log_expit(-eta)
    return float(ll.sum() if weights is None else (weights * ll).sum())


def fit_logistic(y, X, *, columns: Sequence[str] | None = None, add_intercept: bool = True,
                 offset=None, weights=None, l2: float | np.ndarray = 0.0,
                 max_iter: int = 100, tol: float = 1e-9,
                 check_separation: bool = True) -> LogisticFit:
    """Maximum-likelihood logistic regression by Newton's method (IRLS).

    Parameters
    ----------
    y : array (n,)
        Targets in [0, 1]; fractional values act as soft labels.
    X : array (n, p)
        Design matrix without the intercept column.
    l2 : float or array (p,)
        Ridge penalty ``0.5 * l2 * beta**2`` on the slopes (never the
        intercept).  Unpenalized fits check rank and separation.
    tol : float
        Convergence when ``max|gradient| <= tol * (1 + n)``.

    Raises
    ------
    SeparationError, RankDeficiencyError, ConvergenceError
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = y.shape[0]
    if X.shape[0] != n:
        raise ValidationError(f"X has {X.shape[0]} rows but y has {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("missing or non-finite values in regression inputs")
    if np.any((y < 0) | (y > 1)):
        raise ValidationError("y must lie in [0, 1]")
    names = list(columns) if columns is not None else [f"x{i}" for i in range(X.shape[1])]
    if add_intercept:
        X = np.column_stack([np.ones(n), X])
        names = ["intercept"] + names
    p = X.shape[1]
    pen = np.zeros(p)
    pen[int(add_intercept):] = l2
    penalized = np.any(pen > 0)
    if not penalized and np.linalg.matrix_rank(X) < p:
        raise RankDeficiencyError(f"design matrix is rank deficient (columns {names})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=np.float64)

    def objective(b):
        eta = off + X @ b
        return loglik(y, eta, w) - 0.5 * float((pen * b * b).sum())

    beta = np.zeros(p)
    current = objective(beta)
    converged = False
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        eta = off + X @ beta
        mu = expit(eta)
        grad = X.T @ (w * (y - mu)) - pen * beta
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= tol * (1 + n):
            converged = True
            break
        H = (X * (w * mu * (1 - mu))[:, None]).T @ X + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"singular Hessian at iteration {it}") from exc
        t = 1.0
        while True:
            cand = beta + t * step
            value = objective(cand)
            if value >= current - 1e-12 * abs(current) or t < 1e-10:
                break
            t *= 0.5
        beta, current = cand, value
        if check_separation and not penalized:
            eta = off + X @ beta
            if np.max(np.abs(eta - off)) > SEPARATION_LOGIT:
                order = np.argsort(-np.abs(beta))
                culprits = [names[i] for i in order if names[i] != "intercept"][:3]
                raise SeparationError(
                    f"coefficients diverge (|eta| > {SEPARATION_LOGIT}); likely separation on {culprits}",
                    columns=culprits,
                )
    if not converged:
        raise ConvergenceError(f"logistic fit did not converge in {max_iter} iterations", grad_norm=gnorm)
    eta = off + X @ beta
    mu = expit(eta)
    H = (X * (w * mu * (1 - mu))[:, None]).T @ X + np.diag(pen)
    cov = np.linalg.inv(H)
    return LogisticFit(beta, cov, names, loglik(y, eta, w), converged, it, gnorm, n)


def standardize(column, *, nonzero_only: bool = False):
    """Center and scale to mean 0, population SD 1.

    With ``nonzero_only`` the mean and SD are taken over nonzero entries and
    then applied to the whole column.

    Returns
    -------
    (standardized column, mean, sd)
    """
    x = np.asarray(column, dtype=np.float64)
    ref = x[x != 0] if nonzero_only else x
    if ref.size == 0:
        raise DegenerateColumnError("column has no nonzero entries")
    mean = float(ref.mean())
    sd = float(ref.std())
    if not np.isfinite(sd) or sd <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateColumnError("column has zero variance")
    return (x - mean) / sd, mean, sd


# --------------------------------------------------------------------------
# Per-feature effects
# --------------------------------------------------------------------------


@dataclass
class AmeResult:
    ame: float
    ci_lo: float
    ci_hi: float
    beta: float
    n_used: int
    n_boot_ok: int = 0


@dataclass
class EffectEstimate:
    feature_id: int
    beta: float = float("nan")
    beta_se: float = float("nan")
    p_value: float = float("nan")
    delta_winrate: float = float("nan")
    delta_winrate_ci: tuple[float, float] = (float("nan"), float("nan"))
    prevalence: float = float("nan")
    n_used: int = 0
    skipped_reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.skipped_reason is None


def _ame_fit(D: np.ndarray, y: np.ndarray, x: np.ndarray | None):
    cols = [D] if x is None else [D, x]
    fit = fit_logistic(y, np.column_stack(cols))
    a, b = fit.coef[0], fit.coef[1]
    base = a + (0.0 if x is None else fit.coef[2] * x)
    ame = float(np.mean(expit(base + b) - expit(base)))
    return ame, float(b)


def delta_winrate(z, y, length_delta=None, *, n_boot: int = 1000, min_rows: int = 50,
                  seed: int = 0, ci: float = 0.95) -> AmeResult:
    """Average marginal effect on win rate of positive vs. negative feature values.

    Rows with ``z == 0`` are dropped.  A logistic model
    ``y ~ D + length`` is fitted with ``D = 1 if z > 0 else 0`` and the
    length difference standardized over the used rows; the AME is
    ``mean_i[sigmoid(a + b + g*x_i) - sigmoid(a + g*x_i)]``.  The interval
    is a percentile bootstrap over rows.
    """
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    used = z != 0
    n_used = int(used.sum())
    if n_used < min_rows:
        raise InsufficientDataError(f"only {n_used} rows with nonzero feature; need {min_rows}")
    D = (z[used] > 0).astype(np.float64)
    if D.min() == D.max():
        raise InsufficientDataError("feature takes a single sign on all used rows")
    yy = y[used]
    x = None
    if length_delta is not None:
        try:
            x = standardize(np.asarray(length_delta, dtype=np.float64)[used])[0]
        except DegenerateColumnError:
            x = None
    ame, beta = _ame_fit(D, yy, x)

    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(n_boot):
        idx = rng.integers(0, n_used, size=n_used)
        Db = D[idx]
        if Db.min() == Db.max():
            continue
        xb = None
        if x is not None:
            lb = np.asarray(length_delta, dtype=np.float64)[used][idx]
            try:
                xb = standardize(lb)[0]
            except DegenerateColumnError:
                xb = None
        try:
            boots.append(_ame_fit(Db, yy[idx], xb)[0])
        except (SeparationError, RankDeficiencyError, ConvergenceError, NumericError):
            continue
    if boots:
        alpha = (1 - ci) / 2
        lo, hi = np.quantile(boots, [alpha, 1 - alpha])
        # a percentile interval can miss a point estimate on a skewed bootstrap distribution
        lo, hi = min(lo, ame), max(hi, ame)
    else:
        lo = hi = float("nan")
    return AmeResult(ame, float(lo), float(hi), beta, n_used, len(boots))


def effect_of_feature(z, y, length_delta=None, *, nonzero_only: bool = False):
    """Univariate-with-control fit on standardized columns; returns the LogisticFit."""
    zs = standardize(z, nonzero_only=nonzero_only)[0]
    cols, names = [zs], ["z"]
    if length_delta is not None:
        try:
            cols.append(standardize(length_delta)[0])
            names.append("length_delta")
        except DegenerateColumnError:
            pass
    return fit_logistic(y, np.column_stack(cols), columns=names)


def feature_effects(Z, y, length_delta=None, *, features: Sequence[int] | None = None,
                    n_boot: int = 1000, min_rows: int = 50, seed: int = 0,
                    nonzero_only: bool = False) -> list[EffectEstimate]:
    """One regression of ``y`` on standardized ``z_j`` plus standardized length per feature.

    ``Z`` and ``y`` must cover labeled pairs only.  Degenerate features are
    returned with ``skipped_reason`` set rather than raising.
    """
    Z = np.asarray(Z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if Z.shape[0] != y.shape[0]:
        raise ValidationError("Z and y must have the same number of rows")
    features = range(Z.shape[1]) if features is None else features
    out = []
    for j in features:
        col = Z[:, j]
        est = EffectEstimate(feature_id=int(j), prevalence=float(np.mean(col != 0)))
        try:
            fit = effect_of_feature(col, y, length_delta, nonzero_only=nonzero_only)
        except (DegenerateColumnError, SeparationError, RankDeficiencyError, ConvergenceError) as exc:
            est.skipped_reason = f"{type(exc).__name__}: {exc}"
            out.append(est)
            continue
        k = fit.index("z")
        est.beta = float(fit.coef[k])
        est.beta_se = float(fit.se[k])
        est.p_value = float(fit.p_values[k])
        est.n_used = fit.n_obs
        try:
            ame = delta_winrate(col, y, length_delta, n_boot=n_boot, min_rows=min_rows, seed=seed + j)
            est.delta_winrate = ame.ame
            est.delta_winrate_ci = (ame.ci_lo, ame.ci_hi)
        except (InsufficientDataError, SeparationError, ConvergenceError) as exc:
            logger.info("feature %d: no win-rate effect (%s)", j, exc)
        out.append(est)
    return out


def multivariate_effects(Z, y, length_delta=None, *, features: Sequence[int] | None = None) -> LogisticFit:
    """Joint regression over several standardized features plus length (redundancy checks)."""
    Z = np.asarray(Z, dtype=np.float64)
    features = list(range(Z.shape[1])) if features is None else list(features)
    cols = [standardize(Z[:, j])[0] for j in features]
    names = [f"z{j}" for j in features]
    if length_delta is not None:
        cols.append(standardize(length_delta)[0])
        names.append("length_delta")
    return fit_logistic(y, np.column_stack(cols), columns=names)


def bonferroni(p_values, n_tests: int | None = None) -> np.ndarray:
    p = np.asarray(p_values, dtype=np.float64)
    m = p.size if n_tests is None else n_tests
    return np.minimum(p * m, 1.0)


# --------------------------------------------------------------------------
# Prediction quality
# --------------------------------------------------------------------------


def auc(scores, y) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties get half credit)."""
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise InsufficientDataError("AUC needs both classes")
    ranks = stats.rankdata(scores)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def stratified_folds(y, folds: int, seed: int = 0) -> np.ndarray:
    y = np.asarray(y).astype(int)
    rng = np.random.default_rng(seed)
    assign = np.empty(y.size, dtype=int)
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        if idx.size < folds:
            raise InsufficientDataError(f"class {cls} has {idx.size} rows, fewer than {folds} folds")
        idx = rng.permutation(idx)
        assign[idx] = np.arange(idx.size) % folds
    return assign


def cv_auc(features, y, length_delta=None, *, folds: int = 5, seed: int = 0, l2: float = 1.0) -> float:
    """Mean held-out AUC of a ridge-penalized multivariate logistic model.

    Folds are stratified by label so every fold holds both classes.  Columns
    are standardized with training-fold statistics; columns that are
    constant in a training fold are dropped for that fold.
    """
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    y = np.asarray(y, dtype=np.float64)
    if length_delta is not None:
        F = np.column_stack([F, np.asarray(length_delta, dtype=np.float64)])
    assign = stratified_folds(y, folds, seed)
    scores = []
    for k in range(folds):
        tr, te = assign != k, assign == k
        mu = F[tr].mean(axis=0)
        sd = F[tr].std(axis=0)
        keep = sd > 1e-12
        Xtr = (F[tr][:, keep] - mu[keep]) / sd[keep]
        Xte = (F[te][:, keep] - mu[keep]) / sd[keep]
        fit = fit_logistic(y[tr], Xtr, l2=l2)
        scores.append(auc(fit.coef[0] + Xte @ fit.coef[1:], y[te]))
    return float(np.mean(scores))


def sparse_auc(Z, y, length_delta=None, *, folds: int = 5, seed: int = 0, l2: float = 1.0) -> float:
    """Cross-validated AUC of the multivariate model on the sparse features (plus length)."""
    return cv_auc(Z, y, length_delta, folds=folds, seed=seed, l2=l2)


def embedding_auc(E, y, length_delta=None, *, folds: int = 5, seed: int = 0, l2: float = 1.0) -> float:
    """Same protocol on dense embedding differences: the baseline the sparse model is compared to."""
    return cv_auc(E, y, length_delta, folds=folds, seed=seed, l2=l2)


# --------------------------------------------------------------------------
# Cross-dataset effects from judge annotations
# --------------------------------------------------------------------------


@dataclass
class CrossDatasetEffect:
    description: str
    n_annotated: int
    n_failed: int
    prevalence: float
    result: AmeResult | None = None
    skipped_reason: str | None = None


def cross_dataset_effect(description: str, d, llm, *, n: int = 10000, seed: int = 0,
                         n_boot: int = 1000, min_prevalence: float = 0.05,
                         min_rows: int = 50, audit=None) -> CrossDatasetEffect:
    """Win-rate effect of a described feature on another dataset, using judge verdicts as ``z``.

    Labeled pairs are sampled uniformly (all of them if fewer than ``n``).
    If fewer than ``min_prevalence`` of the verdicts are nonzero the feature
    is skipped.
    """
    from .autointerp import annotate_presence
    from .errors import AnnotationError

    labeled = [p for p in d.pairs if p.is_labeled]
    rng = np.random.default_rng(seed)
    take = rng.choice(len(labeled), size=min(n, len(labeled)), replace=False)
    verdicts, ys, lens = [], [], []
    failed = 0
    for i in sorted(take):
        pair = labeled[i]
        try:
            ann = annotate_presence(description, pair, llm, audit=audit)
        except AnnotationError:
            failed += 1
            continue
        verdicts.append(ann.verdict)
        ys.append(pair.y)
        lens.append(pair.length_delta)
    v = np.array(verdicts, dtype=float)
    prevalence = float(np.mean(v != 0)) if v.size else 0.0
    out = CrossDatasetEffect(description, int(v.size), failed, prevalence)
    if prevalence < min_prevalence:
        out.skipped_reason = f"prevalence {prevalence:.3f} below {min_prevalence:.2f}"
        return out
    try:
        out.result = delta_winrate(v, np.array(ys, float), np.array(lens, float),
                                   n_boot=n_boot, min_rows=min_rows, seed=seed)
    except InsufficientDataError as exc:
        out.skipped_reason = str(exc)
    return out


# --------------------------------------------------------------------------
# Tabular output
# --------------------------------------------------------------------------

EFFECT_COLUMNS = ["feature_id", "description", "beta", "se", "p", "p_adjusted", "delta_winrate",
                  "ci_lo", "ci_hi", "prevalence", "n_used"]


def effects_rows(effects: Sequence[EffectEstimate], descriptions: dict[int, str] | None = None,
                 n_tests: int | None = None) -> list[dict]:
    descriptions = descriptions or {}
    ok = [e for e in effects if e.ok]
    m = n_tests if n_tests is not None else max(len(ok), 1)
    rows = []
    for e in effects:
        rows.append({
            "feature_id": e.feature_id,
            "description": descriptions.get(e.feature_id, ""),
            "beta": e.beta,
            "se": e.beta_se,
            "p": e.p_value,
            "p_adjusted": float(min(e.p_value * m, 1.0)) if e.ok else float("nan"),
            "delta_winrate": e.delta_winrate,
            "ci_lo": e.delta_winrate_ci[0],
            "ci_hi": e.delta_winrate_ci[1],
            "prevalence": e.prevalence,
            "n_used": e.n_used,
        })
    return rows


def write_csv(rows: Sequence[dict], path, columns: Sequence[str], header_comment: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    tmp.replace(path)
    return path
