"""Semantic branch: pair-to-sentence templating and pluggable embedding providers.

A provider turns object-action pairs into fixed-width float vectors. Three
kinds are supported: a one-hot indicator over the pair vocabulary, a lookup
table loaded from an embeddings file, and a remote text-encoder service fed
with templated sentences. Provider outputs are constants — no gradient ever
flows into them; only the linear projection to model width is trained.

Embeddings file: JSON ``{"dim": d_e, "entries": {"obj:action": [floats]}}``.
Remote service: HTTP POST ``{endpoint}/embed`` with ``{"texts": [...]}``,
response ``{"dim": int, "embeddings": [[...], ...]}``.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import requests
import torch

from .data import OAVocabulary

Transport = Callable[[list[str]], tuple[int, list[list[float]]]]


class EmbeddingError(RuntimeError):
    """Raised when an embedding provider cannot produce a vector."""


def templatize(pair: int, vocab: OAVocabulary, mode: str = "oa") -> str:
    """Render an object-action pair as a natural-language sentence.

    ``oa`` mode yields "A person is {gerund} {preposition} {article} {object}."
    with empty surface forms dropped; ``action-only`` (and every null-object
    pair regardless of mode) yields "A person is {gerund}.".
    """
    if mode not in ("oa", "action-only"):
        raise ValueError(f"unknown template mode {mode!r}")
    obj_idx, act_idx = vocab.pairs[pair]
    action = vocab.actions[act_idx]
    words = ["A", "person", "is", action.gerund]
    if mode == "oa" and obj_idx is not None:
        obj = vocab.objects[obj_idx]
        if action.preposition:
            words.append(action.preposition)
        if obj.article:
            words.append(obj.article)
        words.append(obj.name)
    return " ".join(words) + "."


class OneHotProvider:
    """Indicator vector over the pair vocabulary; width equals the pair count."""

    kind = "one-hot"

    def __init__(self, vocab: OAVocabulary):
        self.vocab = vocab
        self.dim = vocab.n_pairs

    def embed_pairs(self, pairs: Sequence[int]) -> np.ndarray:
        out = np.zeros((len(pairs), self.dim), dtype=np.float64)
        for row, pair in enumerate(pairs):
            if not 0 <= pair < self.vocab.n_pairs:
                raise EmbeddingError(f"pair index {pair} out of range")
            out[row, pair] = 1.0
        return out


class TableProvider:
    """Rows fetched from a pre-computed embeddings table keyed by pair."""

    kind = "lookup-table"

    def __init__(self, vocab: OAVocabulary, dim: int, entries: dict[str, np.ndarray]):
        self.vocab = vocab
        self.dim = dim
        self.entries = entries

    @classmethod
    def from_file(cls, path: str | Path, vocab: OAVocabulary) -> "TableProvider":
        dim, entries = load_embeddings(path)
        return cls(vocab, dim, entries)

    def embed_pairs(self, pairs: Sequence[int]) -> np.ndarray:
        rows = []
        for pair in pairs:
            key = self.vocab.pair_key(pair)
            if key not in self.entries:
                raise EmbeddingError(f"embeddings table has no row for pair {key!r}")
            rows.append(self.entries[key])
        if not rows:
            return np.zeros((0, self.dim), dtype=np.float64)
        return np.stack(rows).astype(np.float64)


def _http_transport(endpoint: str, timeout: float) -> Transport:
    url = endpoint.rstrip("/") + "/embed"

    def post(texts: list[str]) -> tuple[int, list[list[float]]]:
        try:
            resp = requests.post(url, json={"texts": texts}, timeout=timeout)
        except requests.RequestException as exc:
            raise EmbeddingError(f"text-encoder service unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise EmbeddingError(f"text-encoder service returned {resp.status_code}")
        body = resp.json()
        return int(body["dim"]), body["embeddings"]

    return post


class RemoteProvider:
    """Client for a remote text encoder, with an idempotent per-sentence cache.

    Sentences are produced by ``templatize`` and sent in batches of at most
    ``max_batch``. A custom ``transport`` (texts -> (dim, embeddings)) can be
    injected for tests; by default sentences go over HTTP.
    """

    kind = "remote-text-encoder"

    def __init__(self, vocab: OAVocabulary, endpoint: str = "", dim: int | None = None,
                 timeout: float = 10.0, max_batch: int = 16, template_mode: str = "oa",
                 transport: Transport | None = None):
        if max_batch < 1:
            raise ValueError("max_batch must be positive")
        self.vocab = vocab
        self.endpoint = endpoint
        self.timeout = timeout
        self.max_batch = max_batch
        self.template_mode = template_mode
        self._dim = dim
        self._transport = transport or _http_transport(endpoint, timeout)
        self._cache: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    @property
    def dim(self) -> int:
        if self._dim is None:
            raise EmbeddingError("remote embedding width unknown before the first request")
        return self._dim

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        missing = [t for t in dict.fromkeys(texts) if t not in self._cache]
        for start in range(0, len(missing), self.max_batch):
            batch = missing[start:start + self.max_batch]
            dim, vectors = self._transport(batch)
            if self._dim is None:
                self._dim = dim
            if dim != self._dim:
                raise EmbeddingError(f"service width {dim} != expected {self._dim}")
            if len(vectors) != len(batch):
                raise EmbeddingError("service returned wrong number of embeddings")
            with self._lock:
                for text, vec in zip(batch, vectors):
                    arr = np.asarray(vec, dtype=np.float64)
                    if arr.shape != (dim,):
                        raise EmbeddingError("service returned a malformed embedding row")
                    self._cache[text] = arr
        if not texts:
            return np.zeros((0, self._dim or 0), dtype=np.float64)
        return np.stack([self._cache[t] for t in texts])

    def embed_pairs(self, pairs: Sequence[int]) -> np.ndarray:
        sentences = [templatize(p, self.vocab, self.template_mode) for p in pairs]
        return self.embed_texts(sentences)


Provider = OneHotProvider | TableProvider | RemoteProvider


def embed_pairs(pairs: Sequence[int], provider: Provider) -> np.ndarray:
    """|pairs| x d_e matrix of constant embedding rows, one per pair."""
    return provider.embed_pairs(pairs)


def project_semantic(raw: torch.Tensor, weight: torch.Tensor,
                     bias: torch.Tensor | None = None) -> torch.Tensor:
    """Affine map of raw embeddings (…, d_e) to model width (…, d)."""
    out = raw @ weight.t()
    if bias is not None:
        out = out + bias
    return out


def load_embeddings(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    doc = json.loads(Path(path).read_text())
    dim = int(doc["dim"])
    entries = {}
    for key, row in doc["entries"].items():
        arr = np.asarray(row, dtype=np.float64)
        if arr.shape != (dim,):
            raise ValueError(f"embeddings row {key!r} has width {arr.shape}, expected {dim}")
        entries[key] = arr
    return dim, entries


def save_embeddings(path: str | Path, dim: int, entries: dict[str, np.ndarray]) -> None:
    doc = {"dim": dim, "entries": {k: np.asarray(v).tolist() for k, v in entries.items()}}
    Path(path).write_text(json.dumps(doc))


def build_embedding_table(vocab: OAVocabulary, provider: Provider,
                          template_mode: str = "oa") -> tuple[int, dict[str, np.ndarray]]:
    """Materialize a full pairs-to-vectors table (e.g. to freeze remote output)."""
    del template_mode  # the remote provider carries its own mode
    pairs = list(range(vocab.n_pairs))
    matrix = provider.embed_pairs(pairs)
    return matrix.shape[1], {vocab.pair_key(p): matrix[i] for i, p in enumerate(pairs)}
