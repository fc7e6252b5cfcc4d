"""Embedding provider client, durable embedding cache, and embedding differences."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

import httpx
import numpy as np
from filelock import FileLock

from .dataset import Dataset
from .errors import ProviderContractError, TransportError, ValidationError

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


@dataclass
class ProviderConfig:
    base_url: str = "https://api.openai.com/v1/embeddings"
    model_id: str = "text-embedding-3-small"
    dim: int = 1536
    api_key_env: str = "OPENAI_API_KEY"
    batch_size: int = 128
    max_retries: int = 5
    backoff_seconds: float = 0.5
    max_in_flight: int = 8
    timeout: float = 60.0


@dataclass(frozen=True)
class DiffRecord:
    pair_id: str
    e_delta: np.ndarray


class EmbeddingProvider(Protocol):
    model_id: str
    dim: int

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray: ...


def cache_key(model_id: str, text: str) -> str:
    return hashlib.sha256(f"{model_id}\x00{text}".encode("utf-8")).hexdigest()


class EmbeddingCache:
    """Content-addressed on-disk store of float64 vectors.

    Layout: ``<root>/<key[:2]>/<key>.f64`` holds the raw little-endian vector
    and ``<root>/index.jsonl`` lists ``{key, model_id, dim}`` per record.
    Record files are written to a temp name and renamed, so readers never see
    a partial vector; writers are serialized by a lock file.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".write.lock"))
        self._thread_lock = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.f64"

    def get(self, model_id: str, text: str) -> np.ndarray | None:
        path = self._path(cache_key(model_id, text))
        if not path.exists():
            return None
        return np.fromfile(path, dtype="<f8")

    def put(self, model_id: str, text: str, vector: np.ndarray) -> None:
        key = cache_key(model_id, text)
        path = self._path(key)
        vec = np.ascontiguousarray(vector, dtype="<f8")
        with self._thread_lock, self._lock:
            if path.exists():
                return
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
            vec.tofile(tmp)
            os.replace(tmp, path)
            with (self.root / "index.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": key, "model_id": model_id, "dim": int(vec.size)}) + "\n")

    def __contains__(self, item) -> bool:
        model_id, text = item
        return self._path(cache_key(model_id, text)).exists()


class HttpEmbeddingProvider:
    """OpenAI-compatible ``POST {model, input}`` embedding endpoint.

    Retries retryable statuses and transport failures with exponential
    backoff.  A 413, or a 400 on a multi-text request, is treated as a batch
    rejection and the batch is bisected.
    """

    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None,
                 api_key: str | None = None):
        self.config = config
        self.model_id = config.model_id
        self.dim = config.dim
        key = api_key if api_key is not None else os.environ.get(config.api_key_env)
        if not key:
            raise ValidationError(f"no credential: environment variable {config.api_key_env} is unset")
        self._client = httpx.Client(
            transport=transport,
            timeout=config.timeout,
            headers={"Authorization": f"Bearer {key}"},
        )
        self.n_requests = 0
        self._count_lock = threading.Lock()

    def close(self):
        self._client.close()

    def _post(self, texts: Sequence[str]) -> httpx.Response:
        attempts = 0
        last_error = "no response"
        while attempts < self.config.max_retries:
            attempts += 1
            with self._count_lock:
                self.n_requests += 1
            try:
                resp = self._client.post(self.config.base_url,
                                         json={"model": self.model_id, "input": list(texts)})
            except httpx.TransportError as exc:
                last_error = f"transport error: {exc}"
            else:
                if resp.status_code not in RETRYABLE_STATUS:
                    return resp
                last_error = f"HTTP {resp.status_code}"
            time.sleep(self.config.backoff_seconds * 2 ** (attempts - 1))
        raise TransportError(f"embedding request failed: {last_error}", attempts=attempts)

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        resp = self._post(texts)
        if resp.status_code == 413 or (resp.status_code == 400 and len(texts) > 1):
            mid = len(texts) // 2
            logger.info("provider rejected batch of %d; bisecting", len(texts))
            return np.vstack([self.embed_batch(texts[:mid]), self.embed_batch(texts[mid:])])
        if resp.status_code >= 400:
            raise TransportError(f"embedding request failed: HTTP {resp.status_code}", attempts=1)
        try:
            data = resp.json()["data"]
            rows = sorted(data, key=lambda item: item.get("index", 0))
            out = np.array([r["embedding"] for r in rows], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderContractError(f"malformed embedding response: {exc}") from exc
        if out.ndim != 2 or out.shape[0] != len(texts):
            raise ProviderContractError(f"expected {len(texts)} embeddings, got shape {out.shape}")
        return out


class StaticEmbeddingProvider:
    """Serves vectors from an in-memory ``text -> vector`` table.

    Used for synthetic data and offline replays; counts requests like the
    HTTP provider so cache behaviour can be checked.
    """

    def __init__(self, table: Mapping[str, np.ndarray], model_id: str = "static", dim: int | None = None):
        self.table = table
        self.model_id = model_id
        first = next(iter(table.values())) if table else np.zeros(0)
        self.dim = int(dim if dim is not None else len(first))
        self.n_requests = 0

    def embed_batch(self, texts: Sequence[str]) -> np.ndarray:
        self.n_requests += 1
        try:
            return np.array([self.table[t] for t in texts], dtype=np.float64)
        except KeyError as exc:
            raise ProviderContractError(f"text not in static table: {str(exc)[:60]}") from None


def _check_vectors(vectors: np.ndarray, provider) -> np.ndarray:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[1] != provider.dim:
        got = vectors.shape[1] if vectors.ndim == 2 else vectors.shape
        raise ProviderContractError(f"provider returned dim {got}, configured dim is {provider.dim}")
    if not np.all(np.isfinite(vectors)):
        raise ProviderContractError("provider returned non-finite embedding values")
    return vectors


def embed_texts(texts: Sequence[str], provider, cache: EmbeddingCache | None = None, *,
                batch_size: int = 128, max_in_flight: int = 8) -> np.ndarray:
    """Embed ``texts`` in input order, using and filling ``cache``.

    Duplicate texts and cached texts are never sent to the provider.

    Returns
    -------
    ndarray of shape (len(texts), provider.dim), float64.
    """
    if len(texts) == 0:
        raise ValidationError("texts must be nonempty")
    resolved: dict[str, np.ndarray] = {}
    pending: list[str] = []
    for t in dict.fromkeys(texts):
        hit = cache.get(provider.model_id, t) if cache is not None else None
        if hit is not None:
            resolved[t] = hit
        else:
            pending.append(t)

    batches = [pending[i:i + batch_size] for i in range(0, len(pending), batch_size)]

    def run(batch):
        return batch, _check_vectors(provider.embed_batch(batch), provider)

    if len(batches) > 1 and max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            results = list(pool.map(run, batches))
    else:
        results = [run(b) for b in batches]

    for batch, vectors in results:
        for t, v in zip(batch, vectors):
            resolved[t] = v
            if cache is not None:
                cache.put(provider.model_id, t, v)

    out = np.vstack([resolved[t] for t in texts])
    return _check_vectors(out, provider)


def pair_texts(d: Dataset, include_prompt: bool = False) -> tuple[list[str], list[str]]:
    if include_prompt:
        a = [f"{p.prompt}\n\n{p.response_a}" for p in d.pairs]
        b = [f"{p.prompt}\n\n{p.response_b}" for p in d.pairs]
    else:
        a = [p.response_a for p in d.pairs]
        b = [p.response_b for p in d.pairs]
    return a, b


def compute_diffs(d: Dataset, provider, cache: EmbeddingCache | None = None, *,
                  include_prompt: bool = False, batch_size: int = 128,
                  max_in_flight: int = 8) -> list[DiffRecord]:
    """Embedding of response A minus embedding of response B, per pair.

    Embeddings are used as returned by the provider (no normalization).
    """
    texts_a, texts_b = pair_texts(d, include_prompt)
    emb = embed_texts(texts_a + texts_b, provider, cache, batch_size=batch_size,
                      max_in_flight=max_in_flight)
    n = len(d)
    delta = emb[:n] - emb[n:]
    return [DiffRecord(p.id, delta[i]) for i, p in enumerate(d.pairs)]


def diff_matrix(diffs: Sequence[DiffRecord]) -> np.ndarray:
    return np.vstack([r.e_delta for r in diffs])


def save_diffs(diffs: Sequence[DiffRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".tmp.npz")
    np.savez(tmp, ids=np.array([r.pair_id for r in diffs]), e_delta=diff_matrix(diffs))
    os.replace(tmp, path)
    return path


def load_diffs(path) -> list[DiffRecord]:
    with np.load(path, allow_pickle=False) as data:
        return [DiffRecord(str(i), row) for i, row in zip(data["ids"], data["e_delta"])]
