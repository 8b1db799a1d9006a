"""Label-tagged embedding knowledge bases with exhaustive cosine search.

Store format (``.xkb``)::

    b"XKB1"                       magic
    uint32 little-endian          header length in bytes
    JSON header (UTF-8)           {"embedder_id", "dim", "count", "dtype": "<f4",
                                   "entries": [{"sample_id", "label"}, ...]}
    count * dim little-endian float32 values, in entry order

Vectors are stored unnormalized; normalization happens at query time.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from xraybench.errors import BuildError, KnowledgeBaseError
from xraybench.runtime import EmbeddingVector, ModelHandle, embed, preprocess

log = logging.getLogger(__name__)

MAGIC = b"XKB1"
LABELS = ("positive", "negative")
MAX_FAILURE_RATE = 0.01
DEFAULT_K = 3


def cosine_similarity(u: EmbeddingVector | np.ndarray, v: EmbeddingVector | np.ndarray) -> float:
    a = np.asarray(getattr(u, "values", u), dtype=np.float64).reshape(-1)
    b = np.asarray(getattr(v, "values", v), dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class EmbeddingEntry:
    sample_id: str
    label: str
    vector: EmbeddingVector

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise ValueError(f"{self.sample_id}: label must be positive/negative, got {self.label!r}")


@dataclass(frozen=True)
class Neighbor:
    similarity: float
    label: str
    sample_id: str  # kept for auditing; never rendered into prompts


@dataclass(frozen=True)
class ContextSnippet:
    neighbors: tuple[Neighbor, ...]
    k: int

    def __post_init__(self) -> None:
        sims = [n.similarity for n in self.neighbors]
        if any(a < b for a, b in zip(sims, sims[1:])):
            raise ValueError("neighbors must be ordered by non-increasing similarity")


class KnowledgeBase:
    """Immutable set of labelled vectors from a single embedder."""

    def __init__(self, embedder_id: str, dim: int, sample_ids: Sequence[str],
                 labels: Sequence[str], matrix: np.ndarray):
        matrix = np.array(matrix, dtype=np.float32).reshape(len(sample_ids), dim)
        if len(labels) != len(sample_ids):
            raise KnowledgeBaseError("labels and sample_ids differ in length")
        if len(set(sample_ids)) != len(sample_ids):
            raise KnowledgeBaseError("duplicate sample_id in knowledge base")
        bad = [lab for lab in labels if lab not in LABELS]
        if bad:
            raise KnowledgeBaseError(f"invalid labels: {sorted(set(bad))}")
        self.embedder_id = embedder_id
        self.dim = int(dim)
        self.sample_ids: tuple[str, ...] = tuple(sample_ids)
        self.labels: tuple[str, ...] = tuple(labels)
        self._matrix = matrix
        self._matrix.setflags(write=False)
        m64 = matrix.astype(np.float64)
        norms = np.linalg.norm(m64, axis=1)
        if len(norms) and not np.all(norms > 0):
            raise KnowledgeBaseError("knowledge base contains a zero-norm vector")
        self._unit = m64 / norms[:, None] if len(norms) else m64
        # position of each entry in ascending sample_id order, for tie-breaking
        self._tiebreak = np.empty(len(self.sample_ids), dtype=np.int64)
        self._tiebreak[np.argsort(np.asarray(self.sample_ids, dtype=object), kind="stable")] = np.arange(len(self))

    @classmethod
    def from_entries(cls, embedder_id: str, entries: Iterable[EmbeddingEntry]) -> "KnowledgeBase":
        entries = list(entries)
        if not entries:
            return cls(embedder_id, 0, [], [], np.zeros((0, 0), dtype=np.float32))
        dim = entries[0].vector.dim
        for e in entries:
            if e.vector.dim != dim:
                raise KnowledgeBaseError(f"{e.sample_id}: dim {e.vector.dim} != {dim}")
            if e.vector.embedder_id != embedder_id:
                raise KnowledgeBaseError(f"{e.sample_id}: embedded by {e.vector.embedder_id}, not {embedder_id}")
        return cls(embedder_id, dim, [e.sample_id for e in entries], [e.label for e in entries],
                   np.stack([e.vector.values for e in entries]))

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def vectors(self) -> np.ndarray:
        return self._matrix

    def entries(self) -> list[EmbeddingEntry]:
        return [
            EmbeddingEntry(sid, lab, EmbeddingVector(self._matrix[i], self.embedder_id))
            for i, (sid, lab) in enumerate(zip(self.sample_ids, self.labels))
        ]

    def similarities(self, query: EmbeddingVector | np.ndarray) -> np.ndarray:
        q = np.asarray(getattr(query, "values", query), dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim and len(self):
            raise ValueError(f"query dim {q.shape[0]} != knowledge base dim {self.dim}")
        n = np.linalg.norm(q)
        if n == 0:
            raise ValueError("zero-norm query")
        return np.clip(self._unit @ (q / n), -1.0, 1.0)

    # -- persistence ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        header = {
            "embedder_id": self.embedder_id,
            "dim": self.dim,
            "count": len(self),
            "dtype": "<f4",
            "entries": [{"sample_id": s, "label": lab} for s, lab in zip(self.sample_ids, self.labels)],
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = np.ascontiguousarray(self._matrix, dtype="<f4").tobytes()
        return MAGIC + struct.pack("<I", len(hbytes)) + hbytes + body

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "KnowledgeBase":
        if data[:4] != MAGIC:
            raise KnowledgeBaseError("not a knowledge base file (bad magic)")
        (hlen,) = struct.unpack("<I", data[4:8])
        try:
            header = json.loads(data[8:8 + hlen].decode("utf-8"))
        except ValueError as exc:
            raise KnowledgeBaseError(f"corrupt header: {exc}") from exc
        count, dim = header["count"], header["dim"]
        body = data[8 + hlen:]
        if len(body) != count * dim * 4:
            raise KnowledgeBaseError(f"expected {count * dim * 4} vector bytes, found {len(body)}")
        matrix = np.frombuffer(body, dtype="<f4").reshape(count, dim)
        entries = header["entries"]
        return cls(header["embedder_id"], dim, [e["sample_id"] for e in entries],
                   [e["label"] for e in entries], matrix.copy())

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeBase":
        return cls.from_bytes(Path(path).read_bytes())

    @staticmethod
    def read_header(path: str | Path) -> dict:
        with open(path, "rb") as f:
            if f.read(4) != MAGIC:
                raise KnowledgeBaseError("not a knowledge base file (bad magic)")
            (hlen,) = struct.unpack("<I", f.read(4))
            return json.loads(f.read(hlen).decode("utf-8"))


def build(rows: Iterable[tuple[str, str, bytes | Callable[[], bytes]]], embedder: ModelHandle,
          *, max_failure_rate: float = MAX_FAILURE_RATE) -> KnowledgeBase:
    """Embed each ``(sample_id, label, image)`` row into a knowledge base.

    ``image`` may be the encoded bytes or a zero-argument loader. Rows that
    fail to load or embed are skipped with a warning; if more than
    ``max_failure_rate`` of rows fail the build aborts.
    """
    entries: list[EmbeddingEntry] = []
    failures: list[tuple[str, str]] = []
    total = 0
    for sample_id, label, image in rows:
        total += 1
        try:
            data = image() if callable(image) else image
            vec = embed(embedder, preprocess(data, embedder.config))
            entries.append(EmbeddingEntry(sample_id, label, vec))
        except Exception as exc:  # noqa: BLE001 - any per-image failure is skippable
            log.warning("skipping %s: %s", sample_id, exc)
            failures.append((sample_id, str(exc)))
    if total == 0:
        raise BuildError("manifest has no rows")
    if len(failures) > max_failure_rate * total:
        raise BuildError(
            f"{len(failures)}/{total} rows failed to embed (limit {max_failure_rate:.0%}); "
            f"first failure: {failures[0][0]}: {failures[0][1]}"
        )
    return KnowledgeBase.from_entries(embedder.id, entries)


def retrieve(kb: KnowledgeBase, query: EmbeddingVector | np.ndarray, k: int = DEFAULT_K) -> ContextSnippet:
    """Top-``k`` neighbours by cosine similarity; ties go to the smaller sample_id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(kb) == 0:
        return ContextSnippet((), k)
    sims = kb.similarities(query)
    # lexsort: last key is primary -> descending similarity, then sample_id rank
    order = np.lexsort((kb._tiebreak, -sims))[: min(k, len(kb))]
    return ContextSnippet(
        tuple(Neighbor(float(sims[i]), kb.labels[i], kb.sample_ids[i]) for i in order), k
    )


CONTEXT_HEADER = (
    "Reference comparisons: the uploaded X-ray was compared against previously "
    "diagnosed X-rays; the most similar cases are listed below."
)


def render_context(snippet: ContextSnippet) -> str:
    lines = [CONTEXT_HEADER]
    for i, n in enumerate(snippet.neighbors, start=1):
        lines.append(f"Reference case {i}: cosine similarity {n.similarity:.3f}, confirmed COVID-19 {n.label}")
    return "\n".join(lines)
