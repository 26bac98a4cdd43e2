"""Sentence encoders and kitchen-domain ranking of verbalized paths.

Each path is scored by its mean cosine similarity to a set of in-domain
reference sentences; the best ``max_paths`` survive.
"""

from __future__ import annotations

import hashlib
import logging
import re
import time
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Protocol, Sequence, runtime_checkable

import httpx
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from egograph._validation import as_text_list, check_positive_int
from egograph.resources import default_reference_sentences

if TYPE_CHECKING:
    from egograph.knowledge_net import SemanticPath

logger = logging.getLogger(__name__)


class EncoderError(RuntimeError):
    """Encoding failed; ``text`` is the input that could not be embedded."""

    def __init__(self, message: str, text: str | None = None):
        super().__init__(message if text is None else f"{message} (text: {text!r})")
        self.text = text


@runtime_checkable
class EmbeddingBackend(Protocol):
    def encode(self, texts: Sequence[str]) -> np.ndarray:
        """Return an ``(len(texts), dim)`` array of unit-norm rows."""
        ...


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise EncoderError("encoder returned a zero vector")
    return vectors / norms


_TOKEN = re.compile(r"\w+")


class HashingEncoder:
    """Deterministic offline encoder: sum of per-token pseudo-random projections.

    Texts sharing tokens get positively correlated vectors, so the ranking is
    weakly lexical. Meant for tests and offline runs, not for quality.
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        self.dim = check_positive_int(dim, "dim")
        self.seed = seed

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(f"{self.seed}:{token}".encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return rng.standard_normal(self.dim)

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim))
        for i, text in enumerate(texts):
            tokens = _TOKEN.findall(text.lower()) or [f"\x00{text}"]
            out[i] = np.sum([self._token_vector(t) for t in tokens], axis=0)
        return _unit_rows(out)


class LookupEncoder:
    """Encoder backed by a fixed text -> vector table. Unknown text is an error."""

    def __init__(self, table: dict[str, Sequence[float]]):
        self.table = {k: np.asarray(v, dtype=float) for k, v in table.items()}

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        rows = []
        for t in texts:
            if t not in self.table:
                raise EncoderError("no vector for text", t)
            rows.append(self.table[t])
        return _unit_rows(np.vstack(rows)) if rows else np.empty((0, 0))


class HttpEmbeddingClient:
    """Client for an embedding service.

    Request: ``POST url {"texts": [...]}``; response: ``{"vectors": [[...], ...]}``.
    Transport errors and 5xx/429 responses are retried with exponential backoff.
    """

    def __init__(
        self,
        url: str,
        timeout: float = 30.0,
        retries: int = 3,
        backoff: float = 0.5,
        batch_size: int = 64,
        client: httpx.Client | None = None,
    ):
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.batch_size = batch_size
        self._client = client or httpx.Client(timeout=timeout)

    def _post(self, texts: list[str]) -> np.ndarray:
        last: Exception | None = None
        for attempt in range(self.retries):
            try:
                resp = self._client.post(self.url, json={"texts": texts})
                if resp.status_code == 429 or resp.status_code >= 500:
                    raise httpx.HTTPStatusError(
                        f"server returned {resp.status_code}", request=resp.request, response=resp
                    )
                resp.raise_for_status()
                vectors = np.asarray(resp.json()["vectors"], dtype=float)
                if vectors.shape[0] != len(texts):
                    raise EncoderError(f"expected {len(texts)} vectors, got {vectors.shape[0]}")
                return _unit_rows(vectors)
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last = exc
                status = getattr(getattr(exc, "response", None), "status_code", None)
                if status is not None and status < 500 and status != 429:
                    break
                if attempt + 1 < self.retries:
                    time.sleep(self.backoff * 2**attempt)
            except (KeyError, ValueError) as exc:
                raise EncoderError(f"malformed embedding response: {exc}") from exc
        raise EncoderError(f"embedding request failed after {self.retries} attempts: {last}")

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        chunks = [self._post(texts[i : i + self.batch_size]) for i in range(0, len(texts), self.batch_size)]
        return np.vstack(chunks) if chunks else np.empty((0, 0))


class SentenceTransformerEncoder:
    """Adapter for a local ``sentence-transformers`` model (imported lazily)."""

    def __init__(self, model_name: str, device: str | None = None):
        from sentence_transformers import SentenceTransformer

        self.model = SentenceTransformer(model_name, device=device, trust_remote_code=True)

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        vecs = self.model.encode(list(texts), convert_to_numpy=True, normalize_embeddings=True)
        return np.asarray(vecs, dtype=float)


def encode_checked(encoder: EmbeddingBackend, texts: Sequence[str]) -> np.ndarray:
    """Encode ``texts``; on failure, re-encode one by one to name the culprit."""
    texts = list(texts)
    try:
        return np.asarray(encoder.encode(texts), dtype=float)
    except Exception as exc:
        if isinstance(exc, EncoderError) and exc.text is not None:
            raise
        for t in texts:
            try:
                encoder.encode([t])
            except Exception as inner:
                raise EncoderError(f"encoder failed: {inner}", t) from inner
        raise EncoderError(f"encoder failed on batch: {exc}") from exc


@dataclass
class DomainFilterConfig:
    reference_sentences: list[str] = field(default_factory=default_reference_sentences)
    max_paths: int = 30
    encoder: EmbeddingBackend = field(default_factory=HashingEncoder)

    def __post_init__(self):
        if not self.reference_sentences:
            raise ValueError("reference_sentences must be nonempty")
        check_positive_int(self.max_paths, "max_paths")


def _mean_cosine(path_vecs: np.ndarray, ref_vecs: np.ndarray) -> np.ndarray:
    # rows are unit norm, so the dot product is the cosine
    return (path_vecs @ ref_vecs.T).mean(axis=1)


def score_paths(paths: Sequence[SemanticPath], cfg: DomainFilterConfig) -> list[SemanticPath]:
    """Attach to each path its mean cosine similarity to the reference sentences."""
    if not paths:
        return []
    if any(p.text is None for p in paths):
        raise ValueError("paths must be rendered before scoring")
    refs = encode_checked(cfg.encoder, cfg.reference_sentences)
    vecs = encode_checked(cfg.encoder, [p.text for p in paths])
    scores = _mean_cosine(vecs, refs)
    return [replace(p, score=float(s)) for p, s in zip(paths, scores)]


def rank_paths(scored: Sequence[SemanticPath], max_paths: int = 30) -> list[SemanticPath]:
    """Best-first by score, ties by text; at most ``max_paths``."""
    max_paths = check_positive_int(max_paths, "max_paths")
    if any(p.score is None for p in scored):
        raise ValueError("all paths must be scored before filtering")
    return sorted(scored, key=lambda p: (-p.score, p.text or ""))[:max_paths]


def filter_paths(scored: Sequence[SemanticPath], max_paths: int = 30) -> list[str]:
    return [p.text for p in rank_paths(scored, max_paths)]


class DomainPathFilter(BaseEstimator):
    """Rank verbalized paths by relevance to a reference domain.

    ``fit`` embeds the reference sentences once; ``transform`` maps a list of
    rendered :class:`SemanticPath` to the kept texts.
    """

    def __init__(
        self,
        encoder: EmbeddingBackend | None = None,
        reference_sentences: Sequence[str] | None = None,
        max_paths: int = 30,
    ):
        self.encoder = encoder
        self.reference_sentences = reference_sentences
        self.max_paths = max_paths

    def fit(self, X=None, y=None):
        check_positive_int(self.max_paths, "max_paths")
        refs = (
            default_reference_sentences()
            if self.reference_sentences is None
            else as_text_list(self.reference_sentences, "reference_sentences")
        )
        if not refs:
            raise ValueError("reference_sentences must be nonempty")
        self.encoder_ = self.encoder if self.encoder is not None else HashingEncoder()
        self.reference_sentences_ = refs
        self.reference_embeddings_ = encode_checked(self.encoder_, refs)
        return self

    def score(self, paths: Sequence[SemanticPath]) -> list[SemanticPath]:
        check_is_fitted(self, "reference_embeddings_")
        if not paths:
            return []
        if any(p.text is None for p in paths):
            raise ValueError("paths must be rendered before scoring")
        vecs = encode_checked(self.encoder_, [p.text for p in paths])
        scores = _mean_cosine(vecs, self.reference_embeddings_)
        return [replace(p, score=float(s)) for p, s in zip(paths, scores)]

    def select(self, scored: Sequence[SemanticPath]) -> list[SemanticPath]:
        return rank_paths(scored, self.max_paths)

    def transform(self, X: Sequence[SemanticPath]) -> list[str]:
        return [p.text for p in self.select(self.score(X))]

    def fit_transform(self, X, y=None):
        return self.fit().transform(X)
