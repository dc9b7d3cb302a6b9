"""Dense retrieval over section chunks and article images.

Similarity is cosine over unit-normalized vectors, computed as a dot
product. Search is an exact brute-force scan: the matrices are small enough
at desk scale, and exactness is what the oracle tests check against. Rows
are stored sorted by (article_id, section_id) (or image_id for images), so a
stable sort on descending score breaks ties by ascending id without a
second key.

Two embedding providers share one duck-typed interface
(``embed(list[str]) -> ndarray``):

* ``DeterministicEmbedder`` hashes character trigrams into ``dimension``
  signed buckets (seeded, collision-style feature hashing) and normalizes.
  Same (seed, dimension, text) gives the same vector on any platform.
* ``RemoteEmbedder`` POSTs ``{"modality", "inputs"}`` to an HTTP endpoint
  and expects ``{"vectors": [[float]]}`` back. Input strings are refs the
  server resolves (image ids/uris for the image modality).
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .errors import BackendError
from .kb import Corpus

__all__ = [
    "EmbeddingError",
    "DeterministicEmbedder",
    "RemoteEmbedder",
    "RetrievalHit",
    "TextIndex",
    "ImageIndex",
    "embed_batch",
    "build_text_index",
    "build_image_index",
    "text_search",
    "image_search",
    "save_index",
    "load_index",
]

logger = logging.getLogger(__name__)

INDEX_FORMAT_VERSION = 1
_NORM_TOLERANCE = 1e-6


class EmbeddingError(BackendError):
    """Embedding provider failed; ``attempts`` counts tries when remote."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


@dataclass
class DeterministicEmbedder:
    """Seeded character-trigram feature hashing, L2-normalized.

    Shared substrings share trigrams, so near-identical strings land close
    in cosine; an identical string reproduces the stored vector exactly.
    Strings shorter than the n-gram size hash as a single feature.
    """

    dimension: int = 64
    seed: int = 0
    modality: str = "text"
    ngram: int = 3
    kind: str = field(default="deterministic_test", init=False)

    def _vector(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dimension, dtype=np.float64)
        grams = (
            [text[i : i + self.ngram] for i in range(len(text) - self.ngram + 1)]
            if len(text) >= self.ngram
            else [text]
        )
        prefix = f"{self.seed}:".encode("utf-8")
        for gram in grams:
            digest = hashlib.blake2b(prefix + gram.encode("utf-8"), digest_size=8).digest()
            value = int.from_bytes(digest, "big")
            bucket = value % self.dimension
            sign = 1.0 if (value >> 62) & 1 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            vec[0] = 1.0
            return vec
        return vec / norm

    def embed(self, inputs: Sequence[str]) -> np.ndarray:
        return np.stack([self._vector(text) for text in inputs])


@dataclass
class RemoteEmbedder:
    """HTTP embedding client; see module docstring for the wire shape.

    Args:
        url: endpoint accepting POST with the embed payload.
        modality: "text" or "image"; sent verbatim.
        dimension: expected vector width; mismatches are fatal.
        timeout: per-request timeout, seconds.
        retries: extra attempts after the first on transport failure.
    """

    url: str
    modality: str
    dimension: int
    api_key: str | None = None
    timeout: float = 30.0
    retries: int = 2
    kind: str = field(default="remote_http", init=False)

    def embed(self, inputs: Sequence[str]) -> np.ndarray:
        payload = {"modality": self.modality, "inputs": list(inputs)}
        headers = {"X-Request-Id": str(uuid.uuid4())}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        logger.debug("embed request %s: %d input(s)", headers["X-Request-Id"], len(inputs))
        last_error: Exception | None = None
        attempts = 0
        for attempt in range(self.retries + 1):
            attempts = attempt + 1
            try:
                resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                time.sleep(min(0.2 * (attempt + 1), 1.0))
                continue
            if resp.status_code >= 500:
                last_error = EmbeddingError(f"server error {resp.status_code}: {resp.text[:200]}")
                time.sleep(min(0.2 * (attempt + 1), 1.0))
                continue
            if resp.status_code != 200:
                raise EmbeddingError(
                    f"embed endpoint returned {resp.status_code}: {resp.text[:200]}", attempts
                )
            try:
                vectors = resp.json()["vectors"]
            except (ValueError, KeyError) as exc:
                raise EmbeddingError(f"malformed embed response: {exc}", attempts) from exc
            if len(vectors) != len(inputs):
                raise EmbeddingError(
                    f"embed endpoint returned {len(vectors)} vectors for {len(inputs)} inputs",
                    attempts,
                )
            matrix = np.asarray(vectors, dtype=np.float64)
            if matrix.ndim != 2 or matrix.shape[1] != self.dimension:
                raise EmbeddingError(
                    f"expected dimension {self.dimension}, got shape {matrix.shape}", attempts
                )
            return matrix
        raise EmbeddingError(
            f"embed endpoint unreachable after {attempts} attempt(s): {last_error}", attempts
        )


def embed_batch(provider, inputs: Sequence[str]) -> np.ndarray:
    """Embed a batch, preserving order; rows come back unit-normalized."""
    if not inputs:
        raise ValueError("embed_batch requires at least one input")
    for i, text in enumerate(inputs):
        if not text:
            raise ValueError(f"embed_batch input {i} is empty")
    matrix = np.asarray(provider.embed(list(inputs)), dtype=np.float64)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    # Zero rows cannot be normalized; pin them to the first basis vector so
    # downstream math stays finite and deterministic.
    zero = norms[:, 0] == 0.0
    if zero.any():
        matrix[zero] = 0.0
        matrix[zero, 0] = 1.0
        norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / norms


@dataclass(frozen=True)
class RetrievalHit:
    article_id: str
    score: float
    rank: int
    section_id: str | None = None
    image_id: str | None = None


@dataclass
class TextIndex:
    """Section-level index. ``keys[i]`` owns ``matrix[i]``; rows are sorted
    by (article_id, section_id)."""

    keys: list[tuple[str, str]]
    matrix: np.ndarray
    dimension: int
    modality: str = "text"

    def __len__(self) -> int:
        return len(self.keys)


@dataclass
class ImageIndex:
    """Image-level index. ``keys[i]`` is (image_id, article_id), sorted by
    image_id."""

    keys: list[tuple[str, str]]
    matrix: np.ndarray
    dimension: int
    modality: str = "image"

    def __len__(self) -> int:
        return len(self.keys)


def _embed_entries(provider, texts: list[str], labels: list[str], chunk: int = 128) -> np.ndarray:
    """Chunked embedding; on a failing chunk, retry singly to name the entry."""
    rows: list[np.ndarray] = []
    for start in range(0, len(texts), chunk):
        batch = texts[start : start + chunk]
        try:
            rows.append(embed_batch(provider, batch))
        except (EmbeddingError, ValueError):
            for offset, text in enumerate(batch):
                try:
                    rows.append(embed_batch(provider, [text]))
                except (EmbeddingError, ValueError) as exc:
                    raise EmbeddingError(
                        f"embedding failed for {labels[start + offset]}: {exc}"
                    ) from exc
    return np.vstack(rows)


def build_text_index(corpus: Corpus, provider) -> TextIndex:
    entries = sorted(
        ((a.article_id, s.section_id, s.text) for a in corpus.articles.values() for s in a.sections),
        key=lambda e: (e[0], e[1]),
    )
    if not entries:
        return TextIndex(keys=[], matrix=np.zeros((0, provider.dimension)), dimension=provider.dimension)
    labels = [f"(article {aid!r}, section {sid!r})" for aid, sid, _ in entries]
    matrix = _embed_entries(provider, [text for _, _, text in entries], labels)
    return TextIndex(
        keys=[(aid, sid) for aid, sid, _ in entries],
        matrix=matrix,
        dimension=matrix.shape[1],
    )


def build_image_index(corpus: Corpus, provider) -> ImageIndex:
    """Index KB images by embedding their id strings (the provider resolves
    refs; the test embedder hashes the string itself)."""
    entries = sorted(
        ((img.image_id, a.article_id) for a in corpus.articles.values() for img in a.images),
        key=lambda e: e[0],
    )
    if not entries:
        return ImageIndex(keys=[], matrix=np.zeros((0, provider.dimension)), dimension=provider.dimension)
    labels = [f"(image {iid!r}, article {aid!r})" for iid, aid in entries]
    matrix = _embed_entries(provider, [iid for iid, _ in entries], labels)
    return ImageIndex(keys=list(entries), matrix=matrix, dimension=matrix.shape[1])


def _ranked_order(matrix: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = matrix @ query
    # Stable sort + key-sorted rows == ties broken by ascending id.
    order = np.argsort(-scores, kind="stable")
    return order, scores


def text_search(index: TextIndex, provider, query: str, k: int = 3) -> list[RetrievalHit]:
    """Top-k sections by cosine; ties break by ascending (article_id, section_id)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not query or not query.strip():
        raise ValueError("text_search query is empty")
    if len(index) == 0:
        return []
    vec = embed_batch(provider, [query])[0]
    order, scores = _ranked_order(index.matrix, vec)
    hits = []
    for rank, row in enumerate(order[:k], start=1):
        aid, sid = index.keys[row]
        hits.append(RetrievalHit(article_id=aid, section_id=sid, score=float(scores[row]), rank=rank))
    return hits


def image_search(index: ImageIndex, provider, image_ref: str, k: int = 1) -> list[RetrievalHit]:
    """Top-k *articles* by best-scoring attached image.

    Articles are deduplicated: each keeps its best image (stable order means
    the first occurrence in rank order is the best; image-id ascending on
    ties). Returns fewer than k hits when fewer distinct articles exist.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not image_ref or not image_ref.strip():
        raise ValueError(f"image_search ref is empty: {image_ref!r}")
    if len(index) == 0:
        return []
    try:
        vec = embed_batch(provider, [image_ref])[0]
    except EmbeddingError as exc:
        raise EmbeddingError(f"could not resolve image ref {image_ref!r}: {exc}") from exc
    order, scores = _ranked_order(index.matrix, vec)
    hits: list[RetrievalHit] = []
    seen: set[str] = set()
    for row in order:
        iid, aid = index.keys[row]
        if aid in seen:
            continue
        seen.add(aid)
        hits.append(
            RetrievalHit(
                article_id=aid,
                section_id=None,
                image_id=iid,
                score=float(scores[row]),
                rank=len(hits) + 1,
            )
        )
        if len(hits) == k:
            break
    return hits


def save_index(index: TextIndex | ImageIndex, path: str | Path) -> None:
    """Persist as JSON with a self-describing header. Rebuilding the same
    corpus with the same provider writes byte-identical files."""
    path = Path(path)
    doc = {
        "format_version": INDEX_FORMAT_VERSION,
        "dimension": index.dimension,
        "count": len(index),
        "modality": index.modality,
        "entries": [
            {"key": list(key), "vector": [float(x) for x in index.matrix[i]]}
            for i, key in enumerate(index.keys)
        ],
    }
    path.write_text(json.dumps(doc, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def load_index(
    path: str | Path,
    expect_dimension: int | None = None,
    expect_modality: str | None = None,
) -> TextIndex | ImageIndex:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ValueError(f"{path}: unreadable index file: {exc}") from exc
    for field_name in ("format_version", "dimension", "count", "modality", "entries"):
        if field_name not in doc:
            raise ValueError(f"{path}: index header missing {field_name!r}")
    if doc["format_version"] != INDEX_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported index format_version {doc['format_version']}")
    if expect_modality is not None and doc["modality"] != expect_modality:
        raise ValueError(f"{path}: index modality {doc['modality']!r}, expected {expect_modality!r}")
    dimension = int(doc["dimension"])
    if expect_dimension is not None and dimension != expect_dimension:
        raise ValueError(f"{path}: index dimension {dimension}, expected {expect_dimension}")
    entries = doc["entries"]
    if len(entries) != doc["count"]:
        raise ValueError(f"{path}: header count {doc['count']} != {len(entries)} entries")
    keys = [tuple(e["key"]) for e in entries]
    matrix = (
        np.asarray([e["vector"] for e in entries], dtype=np.float64)
        if entries
        else np.zeros((0, dimension))
    )
    if entries and matrix.shape[1] != dimension:
        raise ValueError(f"{path}: vectors are {matrix.shape[1]}-dimensional, header says {dimension}")
    norms = np.linalg.norm(matrix, axis=1) if entries else np.zeros(0)
    if entries and np.abs(norms - 1.0).max() > _NORM_TOLERANCE:
        raise ValueError(f"{path}: stored vectors are not unit-normalized")
    cls = ImageIndex if doc["modality"] == "image" else TextIndex
    return cls(keys=keys, matrix=matrix, dimension=dimension, modality=doc["modality"])
