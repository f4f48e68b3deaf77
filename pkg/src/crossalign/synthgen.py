"""Synthetic multimodal scenes with known latent structure, plus independent reference oracles.

Every instance carries a latent vector z.  Each modality observes it through
its own random linear map plus Gaussian noise, so an exact linear alignment
exists when the noise is zero.  Scene-level inputs are derived from the same
latents: each frame centres on one instance and also sees a random subset of
the others, a floorplan is the all-visible average frame, referrals describe
single instances, and point clouds encode a 4-D projection of z in the sub-voxel placement and density
of one small blob per instance.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .datamodel import (Dataset, FrameSet, InstanceRecord, Location, Modality, SceneRecord, modality,
                        round_to_f32)
from .errors import SpecError

DEFAULT_DIMS = {"I": 32, "P": 32, "M": 32, "R": 32, "frame": 24}


@dataclass
class SynthSpec:
    n_scenes: int = 64
    instances: tuple = (3, 8)
    latent_dim: int = 16
    dims: dict = field(default_factory=lambda: dict(DEFAULT_DIMS))
    noise: dict = field(default_factory=lambda: {"I": 0.1, "P": 0.1, "M": 0.1, "R": 0.1, "frame": 0.1})
    # "I-P": p drops P from an instance with probability p (the base modality I is never dropped)
    missing: dict = field(default_factory=dict)
    referrals_per_instance: tuple = (1, 3)
    temporal_fraction: float = 0.0
    sigma_t: float = 0.05
    n_categories: int = 6
    n_scene_categories: int = 3
    prototype_weight: float = 0.6
    frames_per_scene: int = 12
    visible_prob: float = 0.7
    scene_referrals_per_instance: int = 1
    point_clouds: bool = True
    voxel_size: float = 0.1
    room: tuple = (6.0, 6.0, 3.0)
    val_fraction: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.instances
        sig = [v for v in self.noise.values()] + [self.sigma_t]
        checks = [
            (self.n_scenes >= 1, "need at least one scene"),
            (1 <= lo <= hi, "instance range must satisfy 1 <= lo <= hi"),
            (self.latent_dim >= 1 and all(int(d) >= 1 for d in self.dims.values()), "dims must be >= 1"),
            (all(s >= 0 for s in sig), "noise levels must be >= 0"),
            (all(0.0 <= p <= 1.0 for p in self.missing.values()), "probabilities must be in [0, 1]"),
            (0.0 <= self.temporal_fraction <= 1.0 and 0.0 <= self.visible_prob <= 1.0, "bad fraction"),
            (0.0 <= self.val_fraction < 1.0, "val_fraction must be in [0, 1)"),
            (self.n_categories >= 1 and self.n_scene_categories >= 1, "need at least one category"),
            (self.frames_per_scene >= 0 and self.voxel_size > 0, "bad scene-level settings"),
            (self.referrals_per_instance[0] >= 1, "instances need at least one referral"),
            (not self.point_clouds or self.latent_dim >= 4, "point-cloud geometry needs latent_dim >= 4"),
        ]
        for ok, msg in checks:
            if not ok:
                raise SpecError(msg)
        for key in self.missing:
            a, _, b = key.partition("-")
            if modality(a) not in (Modality.IMAGE, Modality.POINTCLOUD, Modality.MESH, Modality.REFERRAL) or \
                    modality(b) is Modality.IMAGE:
                raise SpecError(f"bad missing-pair key {key!r}")


def _random_rotation_rows(rng, n: int, k: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return (q * np.sign(np.diag(r)))[:k]


class _Maps:
    def __init__(self, spec: SynthSpec, rng: np.random.Generator):
        L = spec.latent_dim
        self.feature = {m: rng.normal(0, 1 / np.sqrt(L), size=(spec.dims[m], L)) for m in ("I", "P", "M", "R")}
        f = spec.dims["frame"]
        self.cls, self.patch = (rng.normal(0, 1 / np.sqrt(L), size=(f, L)) for _ in range(2))
        self.prototypes = rng.normal(size=(spec.n_categories, L))
        self.scene_bias = rng.dirichlet(np.full(spec.n_categories, 0.5), size=spec.n_scene_categories)
        self.geometry = _random_rotation_rows(rng, L, 4) if spec.point_clouds else None


def _latents(spec: SynthSpec, maps: _Maps, cats: np.ndarray, rng) -> np.ndarray:
    w = spec.prototype_weight
    return w * maps.prototypes[cats] + np.sqrt(1 - w * w) * rng.normal(size=(len(cats), spec.latent_dim))


def _observe(A: np.ndarray, z: np.ndarray, sigma: float, rng) -> np.ndarray:
    return round_to_f32(z @ A.T + sigma * rng.normal(size=(*z.shape[:-1], A.shape[0])))


def _observe_set(A: np.ndarray, z: np.ndarray, weights: np.ndarray, sigma: float, rng) -> np.ndarray:
    """Mean of per-instance nonlinear features tanh(A z_i) over the rows of ``weights``, plus noise."""
    pooled = (weights @ np.tanh(z @ A.T)) / weights.sum(axis=1, keepdims=True)
    return round_to_f32(pooled + sigma * rng.normal(size=pooled.shape))


def _unit_quaternions(rng, n: int) -> np.ndarray:
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _scene(spec: SynthSpec, maps: _Maps, sid: str, scat: int, group: str, z: np.ndarray, cats: np.ndarray,
           centers: np.ndarray, extents: np.ndarray, rng) -> SceneRecord:
    n = len(z)
    sig = spec.noise
    instances = []
    for i in range(n):
        feats = {}
        for m in ("I", "P", "M"):
            feats[Modality(m)] = _observe(maps.feature[m], z[i], sig[m], rng)
        k = int(rng.integers(spec.referrals_per_instance[0], spec.referrals_per_instance[1] + 1))
        feats[Modality.REFERRAL] = _observe(maps.feature["R"], np.repeat(z[i][None], k, 0), sig["R"], rng)
        for key, p in sorted(spec.missing.items()):
            if rng.random() < p:
                feats.pop(modality(key.partition("-")[2]), None)
        instances.append(InstanceRecord(f"{sid}_o{i}", f"obj{cats[i]}",
                                        Location(round_to_f32(centers[i]), round_to_f32(extents[i])), feats))
    frames = None
    if spec.frames_per_scene:
        nf = spec.frames_per_scene
        vis = rng.random((nf, n)) < spec.visible_prob
        # each frame is centred on one instance, cycling through them in random order
        focus = rng.permutation(n)[np.arange(nf) % n]
        vis[np.arange(nf), focus] = True
        poses = np.concatenate([_unit_quaternions(rng, nf), rng.uniform(0, 1, (nf, 3)) * spec.room], axis=1)
        # class token: the focused instance; patches: pooled per-object features of everything visible
        frames = FrameSet(_observe_set(maps.cls, z, np.eye(n)[focus], sig["frame"], rng),
                          _observe_set(maps.patch, z, vis.astype(float), sig["frame"], rng),
                          round_to_f32(poses))
        # rounding can move |q| off 1 by ~1e-8, well inside the 1e-6 tolerance
    zs = np.repeat(z, spec.scene_referrals_per_instance, axis=0)
    referrals = _observe(maps.feature["R"], zs, sig["R"], rng) if len(zs) else None
    floorplan = np.concatenate([_observe_set(maps.cls, z, np.ones((1, n)), sig["frame"], rng)[0],
                                _observe_set(maps.patch, z, np.ones((1, n)), sig["frame"], rng)[0]])
    points = _points(spec, maps, z, centers, rng) if spec.point_clouds else None
    return SceneRecord(sid, f"room{scat}", group, instances, frames, referrals, points, floorplan)


def _points(spec: SynthSpec, maps: _Maps, z: np.ndarray, centers: np.ndarray, rng) -> np.ndarray:
    s = spec.voxel_size
    g = z @ maps.geometry.T
    blobs = []
    for i in range(len(z)):
        base = (np.floor(centers[i] / s) + 0.5) * s
        offset = 0.25 * s * np.tanh(0.5 * g[i, :3])
        count = int(np.clip(np.round(48 * np.exp(0.4 * g[i, 3])), 8, 400))
        blobs.append(base + offset + rng.normal(0, 0.03 * s, size=(count, 3)))
    return round_to_f32(np.concatenate(blobs))


def generate(spec: SynthSpec) -> Dataset:
    """Deterministic in ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    maps = _Maps(spec, rng)
    scenes, splits = [], []
    n_val = int(round(spec.val_fraction * spec.n_scenes))
    val = set(rng.permutation(spec.n_scenes)[:n_val].tolist())
    for b in range(spec.n_scenes):
        scat = int(rng.integers(spec.n_scene_categories))
        n = int(rng.integers(spec.instances[0], spec.instances[1] + 1))
        cats = rng.choice(spec.n_categories, size=n, p=maps.scene_bias[scat])
        z = _latents(spec, maps, cats, rng)
        room = np.asarray(spec.room, dtype=float)
        centers = 0.5 + rng.uniform(size=(n, 3)) * (room - 1.0)
        extents = np.abs(rng.normal(0.6, 0.2, size=(n, 3))) + 0.05
        sid = f"scene{b:04d}"
        group = f"group{b:04d}"
        split = "val" if b in val else "train"
        scenes.append(_scene(spec, maps, sid, scat, group, z, cats, centers, extents, rng))
        splits.append(split)
        if rng.random() < spec.temporal_fraction:
            z2 = z + spec.sigma_t * rng.normal(size=z.shape)
            scenes.append(_scene(spec, maps, f"{sid}_r1", scat, group, z2, cats, centers, extents, rng))
            splits.append(split)
    dims = {k: int(v) for k, v in spec.dims.items()}
    ds = Dataset(scenes, {s.scene_id: sp for s, sp in zip(scenes, splits)}, dims)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# disjoint modality-pair chunks
# ---------------------------------------------------------------------------

def disjoint_chunks(ds: Dataset, fractions, seed: int = 0) -> tuple[list[str], list[str]]:
    """Scene ids of the (I,P) chunk and the (I,M) chunk within the train split."""
    fa, fb = (float(f) for f in fractions)
    train = sorted(s.scene_id for s in ds.split("train"))
    if (fa, fb) == (1.0, 1.0):
        return train, list(train)
    if fa < 0 or fb < 0 or fa + fb > 1.0 + 1e-12:
        raise SpecError(f"chunk fractions {fractions} must be non-negative and sum to <= 1")
    order = [train[i] for i in np.random.default_rng(seed).permutation(len(train))]
    na, nb = int(round(fa * len(train))), int(round(fb * len(train)))
    if na + nb > len(train):
        nb = len(train) - na
    if na == 0 or nb == 0:
        raise SpecError(f"fractions {fractions} leave an empty chunk for {len(train)} training scenes")
    return sorted(order[:na]), sorted(order[na:na + nb])


def split_disjoint_pairs(ds: Dataset, fractions, seed: int = 0) -> Dataset:
    """Train scenes of chunk A keep (I,P) but lose M; chunk B keeps (I,M) but loses P.

    Training scenes in neither chunk are dropped; validation scenes are untouched.
    """
    a, b = disjoint_chunks(ds, fractions, seed)
    a, b = set(a), set(b)
    scenes = []
    for s in ds.scenes:
        if ds.splits[s.scene_id] != "train":
            scenes.append(s)
            continue
        if s.scene_id not in a and s.scene_id not in b:
            continue
        drop = set()
        if s.scene_id not in a:
            drop.add(Modality.POINTCLOUD)
        if s.scene_id not in b:
            drop.add(Modality.MESH)
        insts = [InstanceRecord(i.instance_id, i.category, i.location,
                                {m: f for m, f in i.feats.items() if m not in drop}) for i in s.instances]
        scenes.append(SceneRecord(s.scene_id, s.category, s.temporal_group, insts, s.frames, s.referrals,
                                  s.points, s.floorplan))
    out = Dataset(scenes, {s.scene_id: ds.splits[s.scene_id] for s in scenes}, dict(ds.dims))
    out.validate()
    return out


# ---------------------------------------------------------------------------
# reference oracles (deliberately independent of metrics/retrieval)
# ---------------------------------------------------------------------------

def _cos(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(np.dot(u / np.sqrt(np.dot(u, u)), v / np.sqrt(np.dot(v, v))))


def _beats(a, sa, b, sb) -> bool:
    """Does candidate a outrank candidate b?"""
    return sa > sb or (sa == sb and a < b)


def _rank_of(target, sims: dict) -> int:
    return 1 + sum(1 for c, s in sims.items() if c != target and _beats(c, s, target, sims[target]))


def _label(m) -> str:
    return str(getattr(m, "value", m))


def brute_force_oracle(scenes, emb, ks=(1, 5, 10), instance_modalities=("I", "P", "M", "R"),
                       scene_keys=("S", "R", "I", "F", "P")):
    """Every recall of the evaluation suite by exhaustive counting."""
    from .metrics import RecallTable  # container only

    table = RecallTable()
    ks = tuple(sorted(ks))
    for a, b in itertools.permutations([_label(m) for m in instance_modalities], 2):
        hits = {k: 0 for k in ks}
        same = diff = 0
        n_q = n_c = 0
        levels = []
        for s in scenes:
            src = emb.instances.get((s.scene_id, a), {})
            dst = emb.instances.get((s.scene_id, b), {})
            cat = {i.instance_id: i.category for i in s.instances}
            qs = [q for q in src if q in dst]
            if not qs:
                continue
            n_c += len(dst)
            top1 = 0
            for q in qs:
                n_q += 1
                sims = {c: _cos(src[q], v) for c, v in dst.items()}
                r = _rank_of(q, sims)
                for k in ks:
                    hits[k] += r <= k
                top1 += r == 1
                same += _rank_of(q, {c: x for c, x in sims.items() if cat[c] == cat[q]}) == 1
                diff += _rank_of(q, {c: x for c, x in sims.items() if c == q or cat[c] != cat[q]}) == 1
            levels.append((top1, len(qs)))
        name = f"instance/{a}->{b}"
        for k in ks:
            table.set(f"{name}/all", f"R@{k}", hits[k] / n_q if n_q else None, n_q, n_c)
        table.set(f"{name}/same", "R@1", same / n_q if n_q else None, n_q, n_c)
        table.set(f"{name}/diff", "R@1", diff / n_q if n_q else None, n_q, n_c)
        for pct in (25, 50, 75):
            v = sum(1 for m, n in levels if 100 * m >= pct * n) / len(levels) if levels else None
            table.set(f"scene_level/{a}->{b}", f"R@{pct}%", v, len(levels), len(levels))
    meta = {s.scene_id: (s.category, s.temporal_group) for s in scenes}
    for a in scene_keys:
        for b in scene_keys:
            src = emb.scenes.get(a, {})
            dst = {k: v for k, v in emb.scenes.get(b, {}).items() if k in meta}
            qs = sorted(q for q in src if q in dst)
            tq = [q for q in qs if any(c != q and meta[c][1] == meta[q][1] for c in dst)]
            sims = {q: {c: _cos(src[q], v) for c, v in dst.items()} for q in qs}
            for variant in ("matching", "category", "temporal", "intra_category"):
                queries = tq if variant == "temporal" else qs
                for k in ks:
                    if not queries:
                        table.set(f"scene/{a}->{b}/{variant}", f"R@{k}", None, 0, len(dst))
                        continue
                    n_hit = 0
                    for q in queries:
                        sq = sims[q]
                        if variant == "matching":
                            ok = _rank_of(q, sq) <= k
                        elif variant == "category":
                            ok = any(meta[c][0] == meta[q][0] and _rank_of(c, sq) <= k for c in sq)
                        elif variant == "temporal":
                            rest = {c: x for c, x in sq.items() if c != q}
                            ok = any(meta[c][1] == meta[q][1] and _rank_of(c, rest) <= k for c in rest)
                        else:
                            sub = {c: x for c, x in sq.items() if meta[c][0] == meta[q][0]}
                            ok = _rank_of(q, sub) <= k
                        n_hit += ok
                    table.set(f"scene/{a}->{b}/{variant}", f"R@{k}", n_hit / len(queries), len(queries), len(dst))
    return table


def least_squares_alignment(ds: Dataset, base: str = "I") -> dict:
    """Closed-form linear maps from every instance modality into the base feature space.

    Fit on the train split; returns ``{modality: W}`` with features @ W ~ base features.
    """
    base = modality(base)
    maps = {}
    for m in (Modality.IMAGE, Modality.POINTCLOUD, Modality.MESH, Modality.REFERRAL):
        X, Y = [], []
        for s in ds.split("train"):
            for i in s.instances:
                if m in i.feats and base in i.feats:
                    x = i.feats[m].mean(axis=0) if m is Modality.REFERRAL else i.feats[m]
                    X.append(x)
                    Y.append(i.feats[base])
        if X:
            maps[m] = np.linalg.lstsq(np.asarray(X), np.asarray(Y), rcond=None)[0]
    return maps
