"""Evaluation suite: instance matching, scene-level matching and scene retrieval recalls.

This is the only module that reads category labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import INSTANCE_MODALITIES, SceneRecord, read_blob, write_blob
from .errors import FormatError, SetupError
from .retrieval import RankedResult, build_index, instance_match, query_topk

THRESHOLDS = (0.25, 0.5, 0.75)
KS = (1, 5, 10)
VARIANTS = ("matching", "category", "temporal", "intra_category")
SCENE_KEYS = ("S", "R", "I", "F", "P")


# ---------------------------------------------------------------------------
# embeddings container
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingSet:
    """``instances[(scene_id, modality)] = {instance_id: vec}``; ``scenes[key] = {scene_id: vec}``.

    Scene keys: ``S`` (fused), ``R`` (1D), ``I`` (2D frames), ``F`` (floorplan via 2D), ``P`` (3D).
    """

    instances: dict = field(default_factory=dict)
    scenes: dict = field(default_factory=dict)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        rows, manifest = [], {"instances": [], "scenes": []}
        for (sid, m), d in sorted(self.instances.items()):
            for iid, v in sorted(d.items()):
                manifest["instances"].append([sid, m, iid, len(rows)])
                rows.append(v)
        for key, d in sorted(self.scenes.items()):
            for sid, v in sorted(d.items()):
                manifest["scenes"].append([key, sid, len(rows)])
                rows.append(v)
        if not rows:
            raise FormatError("refusing to write an empty embedding set")
        write_blob(path / "embeddings.bin", np.stack(rows))
        (path / "embeddings.json").write_text(json.dumps(manifest, indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "EmbeddingSet":
        path = Path(path)
        try:
            manifest = json.loads((path / "embeddings.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"bad embedding manifest in {path}: {exc}") from None
        X = read_blob(path / "embeddings.bin")
        out = cls()
        for sid, m, iid, r in manifest["instances"]:
            out.instances.setdefault((sid, m), {})[iid] = X[r]
        for key, sid, r in manifest["scenes"]:
            out.scenes.setdefault(key, {})[sid] = X[r]
        return out


# ---------------------------------------------------------------------------
# recall table
# ---------------------------------------------------------------------------

@dataclass
class RecallTable:
    """``values[metric][column]`` in [0, 1] or None for "n/a"; ``counts[metric]`` = (queries, database)."""

    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def set(self, metric: str, column: str, value, queries: int = 0, database: int = 0):
        self.values.setdefault(metric, {})[column] = value
        self.counts[metric] = (queries, database)

    def get(self, metric: str, column: str):
        return self.values[metric][column]

    def to_json(self) -> str:
        return json.dumps({"values": self.values,
                           "counts": {k: list(v) for k, v in self.counts.items()}}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RecallTable":
        d = json.loads(text)
        return cls(d["values"], {k: tuple(v) for k, v in d["counts"].items()})

    def to_text(self) -> str:
        cols = []
        for row in self.values.values():
            for c in row:
                if c not in cols:
                    cols.append(c)
        names = sorted(self.values)
        w0 = max([len("metric")] + [len(n) for n in names])
        widths = [max(len(c), 5) for c in cols]
        head = "metric".ljust(w0) + "  " + "  ".join(c.rjust(w) for c, w in zip(cols, widths)) + "  queries    db"
        lines = [head, "-" * len(head)]
        for n in names:
            cells = []
            for c, w in zip(cols, widths):
                v = self.values[n].get(c, "")
                cells.append(("n/a" if v is None else "" if v == "" else f"{v:.3f}").rjust(w))
            q, d = self.counts.get(n, (0, 0))
            lines.append(n.ljust(w0) + "  " + "  ".join(cells) + f"  {q:7d} {d:5d}")
        return "\n".join(lines) + "\n"

    def __eq__(self, other):
        return isinstance(other, RecallTable) and self.values == other.values and self.counts == other.counts


# ---------------------------------------------------------------------------
# instance matching
# ---------------------------------------------------------------------------

@dataclass
class InstanceQuery:
    """One within-scene query: the ranking over all candidates plus candidate categories."""

    query_id: str
    truth: str
    ranking: RankedResult
    categories: dict


def restrict(q: InstanceQuery, mode: str) -> tuple:
    if mode == "all":
        return q.ranking.ids
    cat = q.categories[q.truth]
    if mode == "same":
        return tuple(c for c in q.ranking.ids if c == q.truth or q.categories[c] == cat)
    if mode == "diff":
        return tuple(c for c in q.ranking.ids if c == q.truth or q.categories[c] != cat)
    raise SetupError(f"unknown instance matching mode {mode!r}")


def instance_hit(q: InstanceQuery, k: int, mode: str = "all") -> bool:
    if q.truth not in q.ranking.ids:
        raise SetupError(f"query {q.query_id!r} has no ground-truth candidate")
    return q.truth in restrict(q, mode)[:k]


def instance_matching_recall(matches: list[InstanceQuery], k: int = 1, mode: str = "all") -> float:
    if not matches:
        raise SetupError("no instance queries")
    return sum(instance_hit(q, k, mode) for q in matches) / len(matches)


def scene_level_recall(per_scene, thresholds=THRESHOLDS) -> dict:
    """Fraction of scenes with matched/total >= t, for each threshold t."""
    per_scene = list(per_scene)
    if not per_scene:
        raise SetupError("no scenes")
    for m, n in per_scene:
        if n < 1:
            raise SetupError("scene with zero queries")
    return {t: sum((m / n) >= t for m, n in per_scene) / len(per_scene) for t in thresholds}


def scene_instance_queries(scene: SceneRecord, from_embs: dict, to_embs: dict) -> list[InstanceQuery]:
    """Queries for instances present in both modalities, candidates = all target-modality instances."""
    cats = {i.instance_id: i.category for i in scene.instances}
    queries = {k: v for k, v in from_embs.items() if k in to_embs}
    if not queries:
        return []
    return [InstanceQuery(qid, qid, r, cats) for qid, r in instance_match(queries, to_embs).items()]


# ---------------------------------------------------------------------------
# scene retrieval
# ---------------------------------------------------------------------------

@dataclass
class SceneMeta:
    category: str
    temporal_group: str


def scene_hit(qid: str, ranking: RankedResult, meta: dict, variant: str, k: int) -> bool:
    ids = ranking.ids
    if variant == "matching":
        return qid in ids[:k]
    if variant == "category":
        return any(meta[c].category == meta[qid].category for c in ids[:k])
    if variant == "temporal":
        rest = [c for c in ids if c != qid]
        return any(meta[c].temporal_group == meta[qid].temporal_group for c in rest[:k])
    if variant == "intra_category":
        filtered = [c for c in ids if meta[c].category == meta[qid].category]
        return qid in filtered[:k]
    raise SetupError(f"unknown retrieval variant {variant!r}")


def temporal_queries(query_ids, db_ids, meta: dict) -> list:
    db = set(db_ids)
    return [q for q in query_ids
            if any(c != q and meta[c].temporal_group == meta[q].temporal_group for c in db)]


def scene_retrieval_recall(rankings: dict, meta: dict, variant: str, k: int = 1) -> float:
    """``rankings[query_id]`` is the full database ranking for that query."""
    queries = sorted(rankings)
    if variant == "temporal":
        queries = [q for q in queries if any(c != q and meta[c].temporal_group == meta[q].temporal_group
                                             for c in rankings[q].ids)]
        if not queries:
            raise SetupError("temporal recall needs rescans in the database")
    if not queries:
        raise SetupError("no scene queries")
    return sum(scene_hit(q, rankings[q], meta, variant, k) for q in queries) / len(queries)


# ---------------------------------------------------------------------------
# the full suite
# ---------------------------------------------------------------------------

def _check_monotone(table: RecallTable) -> None:
    for name, row in table.values.items():
        keyed = [(c, v) for c, v in row.items() if v is not None]
        rk = [v for c, v in sorted(((int(c[2:]), v) for c, v in keyed if c.startswith("R@") and c[2:].isdigit()))]
        assert all(a <= b for a, b in zip(rk, rk[1:])), f"{name}: recall decreases in k"
        th = [v for c, v in sorted(((float(c[2:-1]), v) for c, v in keyed if c.endswith("%")))]
        assert all(a >= b for a, b in zip(th, th[1:])), f"{name}: recall increases with threshold"


def evaluate_embeddings(scenes: list[SceneRecord], emb: EmbeddingSet, ks=KS,
                        instance_modalities=INSTANCE_MODALITIES, scene_keys=SCENE_KEYS) -> RecallTable:
    table = RecallTable()
    ks = tuple(sorted(ks))
    # instance matching, within each scene
    for a in instance_modalities:
        for b in instance_modalities:
            if a == b:
                continue
            a, b = str(getattr(a, "value", a)), str(getattr(b, "value", b))
            name = f"instance/{a}->{b}"
            queries, per_scene, cands = [], [], 0
            for s in scenes:
                qs = scene_instance_queries(s, emb.instances.get((s.scene_id, a), {}),
                                            emb.instances.get((s.scene_id, b), {}))
                if qs:
                    queries += qs
                    per_scene.append((sum(instance_hit(q, 1) for q in qs), len(qs)))
                    cands += len(qs[0].ranking)
            for k in ks:
                table.set(f"{name}/all", f"R@{k}",
                          instance_matching_recall(queries, k) if queries else None, len(queries), cands)
            for mode in ("same", "diff"):
                table.set(f"{name}/{mode}", "R@1",
                          instance_matching_recall(queries, 1, mode) if queries else None, len(queries), cands)
            levels = scene_level_recall(per_scene) if per_scene else {t: None for t in THRESHOLDS}
            for t, v in levels.items():
                table.set(f"scene_level/{a}->{b}", f"R@{round(t * 100)}%", v, len(per_scene), len(per_scene))
    # scene retrieval
    meta = {s.scene_id: SceneMeta(s.category, s.temporal_group) for s in scenes}
    for a in scene_keys:
        for b in scene_keys:
            src, dst = emb.scenes.get(a, {}), emb.scenes.get(b, {})
            dst = {sid: v for sid, v in dst.items() if sid in meta}
            qids = sorted(sid for sid in src if sid in dst)
            rankings = {}
            if qids:
                index = build_index(dst, b)
                rankings = {q: query_topk(index, src[q], len(index)) for q in qids}
            for variant in VARIANTS:
                name = f"scene/{a}->{b}/{variant}"
                usable = rankings
                if variant == "temporal":
                    usable = {q: rankings[q] for q in temporal_queries(rankings, dst, meta)}
                for k in ks:
                    v = scene_retrieval_recall(usable, meta, variant, k) if usable else None
                    table.set(name, f"R@{k}", v, len(usable), len(dst))
    _check_monotone(table)
    return table
