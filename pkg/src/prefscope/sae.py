"""Signed BatchTopK sparse autoencoder with a two-level Matryoshka loss.

The encoder is a bias-free linear map with identity activation, so latents
are signed: ``z_j > 0`` means feature ``j`` is more present in response A,
``z_j < 0`` more present in B.  During training the ``B*K`` activations with
the largest magnitude across the batch are kept; at inference a single
magnitude threshold ``theta`` calibrated during training replaces the batch
rule.  Because there are no biases and selection is by magnitude,
``encode(-x) == -encode(x)`` holds exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ModelStateError, NumericError, ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class SaeConfig:
    input_dim: int
    latent_dim: int = 32
    k: int = 4
    matryoshka_prefix: int = 8
    batch_size: int = 256
    learning_rate: float = 1e-3
    epochs: int = 200
    seed: int = 0
    # "global": one BatchTopK over all latents; "per_prefix": separate budgets
    # for the prefix block and the remaining latents.
    topk_mode: str = "global"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def validate(self) -> "SaeConfig":
        for name in ("input_dim", "latent_dim", "k", "matryoshka_prefix", "batch_size", "epochs"):
            if int(getattr(self, name)) <= 0:
                raise ValidationError(f"{name} must be a positive integer")
        if not self.k <= self.matryoshka_prefix <= self.latent_dim:
            raise ValidationError("require k <= matryoshka_prefix <= latent_dim")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.topk_mode not in ("global", "per_prefix"):
            raise ValidationError(f"unknown topk_mode {self.topk_mode!r}")
        return self


@dataclass
class SaeModel:
    W_enc: np.ndarray  # (M, d)
    W_dec: np.ndarray  # (d, M), unit-norm columns
    config: SaeConfig
    theta: float | None = None
    train_loss_trace: list[float] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def latent_dim(self) -> int:
        return self.W_enc.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_enc.shape[1]


def init_model(cfg: SaeConfig) -> SaeModel:
    """Decoder columns uniform on the unit sphere; encoder starts as its transpose."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    W_dec = rng.standard_normal((cfg.input_dim, cfg.latent_dim))
    W_dec /= np.linalg.norm(W_dec, axis=0, keepdims=True)
    return SaeModel(W_enc=W_dec.T.copy(), W_dec=W_dec, config=cfg)


def topk_magnitude_mask(A: np.ndarray, n_keep: int) -> np.ndarray:
    """Boolean mask of the ``n_keep`` largest ``|A|`` entries over the whole array.

    Ties at the cutoff are resolved by ascending flat (row-major) index.
    """
    mags = np.abs(A).ravel()
    size = mags.size
    if n_keep >= size:
        return np.ones(A.shape, dtype=bool)
    if n_keep <= 0:
        return np.zeros(A.shape, dtype=bool)
    cutoff = np.partition(mags, size - n_keep)[size - n_keep]
    keep = mags > cutoff
    short = n_keep - int(keep.sum())
    if short > 0:
        at_cutoff = np.flatnonzero(mags == cutoff)[:short]
        keep[at_cutoff] = True
    return keep.reshape(A.shape)


def _batch_mask(A: np.ndarray, cfg: SaeConfig) -> np.ndarray:
    B = A.shape[0]
    if cfg.topk_mode == "global":
        return topk_magnitude_mask(A, B * cfg.k)
    p = cfg.matryoshka_prefix
    k_prefix = max(1, round(cfg.k * p / cfg.latent_dim))
    mask = np.zeros(A.shape, dtype=bool)
    mask[:, :p] = topk_magnitude_mask(A[:, :p], B * k_prefix)
    if cfg.latent_dim > p and cfg.k > k_prefix:
        mask[:, p:] = topk_magnitude_mask(A[:, p:], B * (cfg.k - k_prefix))
    return mask


def _check_finite(X: np.ndarray, what: str = "input"):
    if not np.all(np.isfinite(X)):
        raise NumericError(f"non-finite values in {what}")


def encode_batch_train(X: np.ndarray, model: SaeModel, return_mask: bool = False):
    """Training-time encoding: identity activation then batch-wide top-(B*K) by magnitude."""
    X = np.asarray(X, dtype=np.float64)
    _check_finite(X)
    A = X @ model.W_enc.T
    mask = _batch_mask(A, model.config)
    Z = np.where(mask, A, 0.0)
    return (Z, mask) if return_mask else Z


def encode_inference(x: np.ndarray, model: SaeModel) -> np.ndarray:
    """Inference-time encoding: keep activations with ``|a_j| >= theta``.

    Accepts a single vector or a matrix of row vectors.
    """
    if model.theta is None:
        raise ModelStateError("theta is unset; train the model or set a threshold first")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValidationError(f"input dim {x.shape[-1]} != model input dim {model.input_dim}")
    _check_finite(x)
    a = x @ model.W_enc.T
    return np.where(np.abs(a) >= model.theta, a, 0.0)


def decode(z: np.ndarray, model: SaeModel) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) @ model.W_dec.T


def _prefix_columns(model: SaeModel) -> np.ndarray:
    pm = np.zeros(model.latent_dim)
    pm[: model.config.matryoshka_prefix] = 1.0
    return pm


def loss_and_grads(X: np.ndarray, model: SaeModel, mask: np.ndarray | None = None,
                   W_enc: np.ndarray | None = None, W_dec: np.ndarray | None = None):
    """Matryoshka loss ``MSE(prefix reconstruction) + MSE(full reconstruction)`` and its gradients.

    MSE is the mean over all ``B*d`` entries.  If ``mask`` is given the TopK
    support is frozen to it (the loss is then smooth in the weights).

    Returns
    -------
    loss, grad_W_enc, grad_W_dec, mask
    """
    W_enc = model.W_enc if W_enc is None else W_enc
    W_dec = model.W_dec if W_dec is None else W_dec
    X = np.asarray(X, dtype=np.float64)
    A = X @ W_enc.T
    if mask is None:
        mask = _batch_mask(A, model.config)
    Z = A * mask
    pm = _prefix_columns(model)
    Zp = Z * pm
    R_full = Z @ W_dec.T - X
    R_pre = Zp @ W_dec.T - X
    n = X.size
    loss = float((R_full ** 2).sum() / n + (R_pre ** 2).sum() / n)
    c = 2.0 / n
    g_dec = c * (R_full.T @ Z + R_pre.T @ Zp)
    gZ = c * (R_full @ W_dec) + c * (R_pre @ W_dec) * pm
    g_enc = (gZ * mask).T @ X
    return loss, g_enc, g_dec, mask


def loss(X: np.ndarray, model: SaeModel) -> float:
    return loss_and_grads(X, model)[0]


def _normalize_columns(W: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(W, axis=0, keepdims=True)
    return W / np.where(norms > 0, norms, 1.0)


def _as_matrix(diffs) -> np.ndarray:
    if isinstance(diffs, np.ndarray):
        return np.asarray(diffs, dtype=np.float64)
    return np.vstack([r.e_delta for r in diffs]).astype(np.float64)


def train(diffs, cfg: SaeConfig, *, callback=None) -> SaeModel:
    """Fit the SAE with Adam on shuffled full batches.

    Decoder columns are renormalized to unit length after every step.
    ``theta`` is the mean, over the final epoch's batches, of the smallest
    retained activation magnitude.  Deterministic given ``cfg.seed``.

    Parameters
    ----------
    diffs : ndarray (N, d) or sequence of DiffRecord
    callback : callable, optional
        Called as ``callback(step, model)`` after every optimizer step.
    """
    X = _as_matrix(diffs)
    cfg.validate()
    if X.shape[1] != cfg.input_dim:
        raise ValidationError(f"diff dim {X.shape[1]} != configured input_dim {cfg.input_dim}")
    N, B = X.shape[0], cfg.batch_size
    if N < B:
        raise ValidationError(f"need at least batch_size={B} records, got {N}")
    _check_finite(X)

    model = init_model(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    b1, b2 = cfg.adam_betas
    m_enc = np.zeros_like(model.W_enc)
    v_enc = np.zeros_like(model.W_enc)
    m_dec = np.zeros_like(model.W_dec)
    v_dec = np.zeros_like(model.W_dec)
    n_batches = N // B
    step = 0
    last_epoch_thresholds: list[float] = []

    for epoch in range(cfg.epochs):
        order = rng.permutation(N)
        epoch_loss = 0.0
        final_epoch = epoch == cfg.epochs - 1
        for b in range(n_batches):
            xb = X[order[b * B:(b + 1) * B]]
            value, g_enc, g_dec, mask = loss_and_grads(xb, model)
            # only the tangential part of the decoder gradient survives renormalization
            g_dec = g_dec - model.W_dec * (g_dec * model.W_dec).sum(axis=0, keepdims=True)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at step {step} (epoch {epoch}); "
                    f"encoder row norms {np.linalg.norm(model.W_enc, axis=1).round(3).tolist()}"
                )
            if final_epoch:
                kept = np.abs(xb @ model.W_enc.T)[mask]
                last_epoch_thresholds.append(float(kept.min()))
            step += 1
            m_enc = b1 * m_enc + (1 - b1) * g_enc
            v_enc = b2 * v_enc + (1 - b2) * g_enc ** 2
            m_dec = b1 * m_dec + (1 - b1) * g_dec
            v_dec = b2 * v_dec + (1 - b2) * g_dec ** 2
            corr1 = 1 - b1 ** step
            corr2 = 1 - b2 ** step
            model.W_enc = model.W_enc - cfg.learning_rate * (m_enc / corr1) / (np.sqrt(v_enc / corr2) + cfg.adam_eps)
            model.W_dec = model.W_dec - cfg.learning_rate * (m_dec / corr1) / (np.sqrt(v_dec / corr2) + cfg.adam_eps)
            model.W_dec = _normalize_columns(model.W_dec)
            epoch_loss += value
            if callback is not None:
                callback(step, model)
        model.train_loss_trace.append(epoch_loss / n_batches)
        if epoch % 50 == 0 or final_epoch:
            logger.debug("epoch %d loss %.6g", epoch, model.train_loss_trace[-1])

    model.theta = float(np.mean(last_epoch_thresholds))
    model.metadata.update(
        input_variance=float(X.var(axis=0).sum()),
        n_train=int(N),
        steps=step,
    )
    return model


def transform(diffs, model: SaeModel) -> np.ndarray:
    """Sparse latent matrix ``Z`` (N x M), one row per diff in input order."""
    return encode_inference(_as_matrix(diffs), model)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(model: SaeModel, path) -> Path:
    """JSON container; floats are written with ``repr`` precision so they reload exactly."""
    cfg = asdict(model.config)
    cfg["adam_betas"] = list(cfg["adam_betas"])
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": cfg,
        "W_enc": {"shape": list(model.W_enc.shape), "data": model.W_enc.ravel().tolist()},
        "W_dec": {"shape": list(model.W_dec.shape), "data": model.W_dec.ravel().tolist()},
        "theta": model.theta,
        "train_loss_trace": list(model.train_loss_trace),
        "metadata": model.metadata,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload), encoding="utf-8")
    tmp.replace(path)
    return path


def load_checkpoint(path) -> SaeModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = dict(payload["config"])
    cfg["adam_betas"] = tuple(cfg["adam_betas"])

    def mat(entry):
        return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])

    return SaeModel(
        W_enc=mat(payload["W_enc"]),
        W_dec=mat(payload["W_dec"]),
        config=SaeConfig(**cfg),
        theta=payload["theta"],
        train_loss_trace=list(payload["train_loss_trace"]),
        metadata=payload.get("metadata", {}),
    )
