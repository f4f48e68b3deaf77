"""Exact cosine-similarity index and the retrieval entry points built on it."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datamodel import read_blob, write_blob
from .errors import FormatError, InputError, MissingModalityError


@dataclass(frozen=True)
class RankedResult:
    ids: tuple
    scores: tuple

    def __len__(self):
        return len(self.ids)

    def rank_of(self, entity_id) -> int | None:
        """1-based rank, or None if not in the result."""
        try:
            return self.ids.index(entity_id) + 1
        except ValueError:
            return None


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: tuple
    vectors: np.ndarray
    modality: str = ""

    def __len__(self):
        return len(self.ids)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        write_blob(path / "vectors.bin", self.vectors)
        (path / "ids.json").write_text(json.dumps({"modality": self.modality, "ids": list(self.ids)}, indent=1))

    @classmethod
    def load(cls, path) -> "EmbeddingIndex":
        path = Path(path)
        try:
            meta = json.loads((path / "ids.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad index manifest in {path}: {exc}") from None
        vecs = read_blob(path / "vectors.bin")
        if len(vecs) != len(meta["ids"]):
            raise FormatError("index id count does not match vector count")
        return cls(tuple(meta["ids"]), vecs, meta.get("modality", ""))


def _unit(v: np.ndarray, what) -> np.ndarray:
    n = np.linalg.norm(v)
    if not np.isfinite(v).all():
        raise InputError(f"non-finite vector for {what!r}")
    if n == 0:
        raise InputError(f"zero vector for {what!r}")
    return v / n


def build_index(embs: dict, modality: str = "") -> EmbeddingIndex:
    """Unit-normalised rows in ascending id order."""
    if not embs:
        raise InputError("cannot build an empty index")
    ids = list(embs)
    if len(set(ids)) != len(ids):
        raise InputError("duplicate ids")
    ids.sort()
    vecs = np.stack([_unit(np.asarray(embs[i], dtype=np.float64), i) for i in ids])
    return EmbeddingIndex(tuple(ids), vecs, str(modality))


def index_from_pairs(pairs, modality: str = "") -> EmbeddingIndex:
    """Like :func:`build_index` but rejects duplicate ids in a sequence of (id, vector)."""
    out = {}
    for i, v in pairs:
        if i in out:
            raise InputError(f"duplicate id {i!r}")
        out[i] = v
    return build_index(out, modality)


def rank(ids, scores, k: int | None = None) -> RankedResult:
    """Descending score, ties by ascending id."""
    ids = list(ids)
    scores = np.asarray(scores, dtype=np.float64)
    order = sorted(range(len(ids)), key=lambda j: (-scores[j], ids[j]))
    if k is not None:
        order = order[:k]
    return RankedResult(tuple(ids[j] for j in order), tuple(float(scores[j]) for j in order))


def query_topk(index: EmbeddingIndex, vec, k: int) -> RankedResult:
    if k < 1:
        raise InputError("k must be >= 1")
    q = _unit(np.asarray(vec, dtype=np.float64), "query")
    # row-wise sums: identical rows always get identical scores
    scores = np.sum(index.vectors * q, axis=1)
    k = min(k, len(index))
    if k < len(index):
        # partial selection, then widen to the whole tie class at the cut
        kth = np.partition(-scores, k - 1)[k - 1]
        cand = np.flatnonzero(-scores <= kth)
    else:
        cand = np.arange(len(index))
    return rank([index.ids[j] for j in cand], scores[cand], k)


def scene_retrieve(query_vec, db: dict, k: int, modality: str = "") -> RankedResult:
    """Rank database scenes (``{scene_id: vector}`` in the target encoder) against one query vector."""
    if query_vec is None:
        raise MissingModalityError("query scene cannot be encoded in the source modality")
    if not db:
        raise MissingModalityError("no database scene can be encoded in the target modality")
    return query_topk(build_index(db, modality), query_vec, k)


def instance_match(from_embs: dict, to_embs: dict) -> dict:
    """Within-scene matching: every query instance against all candidates of the target modality."""
    if not to_embs:
        raise MissingModalityError("scene has no candidate instances in the target modality")
    index = build_index(to_embs)
    return {qid: query_topk(index, v, len(index)) for qid, v in sorted(from_embs.items())}
