"""Scene-level fusion of pooled instance embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import numcore as nc
from .config import RunConfig
from .datamodel import Dataset, Modality, SceneRecord
from .errors import ConfigError, ContractError, NoTermsError
from .instance_align import encode_scene_instances
from .losses import ModalityRows, _total, init_temperature, symmetric_loss, aligned_pair, temperature
from .numcore import ParamStore
from .training import StageRunner

PREFIX = "scene."
# order of the fusion weight vector w
FUSION_ORDER = (Modality.REFERRAL, Modality.IMAGE, Modality.POINTCLOUD, Modality.MESH)


@dataclass
class SceneEmbedding:
    vector: np.ndarray
    modalities: tuple


def init_scene_params(store: ParamStore, cfg: RunConfig, rng: np.random.Generator) -> None:
    store.add("scene.w", np.zeros(len(FUSION_ORDER)), decay=False)
    layers.init_head(store, "scene.mlp", cfg.dim, cfg.dim, rng)
    init_temperature(store, "scene.log_tau", cfg.tau_init)


def pool_scene_modality(scene: SceneRecord, m, instance_embs: dict) -> np.ndarray | None:
    """Mean over the scene's instances that have an embedding for ``m``; None if none do."""
    per = instance_embs.get(m, {})
    vecs = [per[i.instance_id] for i in scene.instances if i.instance_id in per]
    if not vecs:
        return None
    return np.mean(np.asarray(vecs, dtype=np.float64), axis=0)


def pooled_features(store: ParamStore, scene: SceneRecord, cfg: RunConfig) -> dict:
    """Per-modality pooled (unit-normalised) instance embeddings of one scene."""
    embs = encode_scene_instances(store, scene, cfg)
    unit = {m: {k: v / max(np.linalg.norm(v), 1e-12) for k, v in d.items()} for m, d in embs.items()}
    out = {}
    for m in FUSION_ORDER:
        p = pool_scene_modality(scene, m, unit)
        if p is not None:
            out[m] = p
    return out


def fusion_coefficients(w, available, mode: str = "as_written"):
    """Per-modality coefficients (rows of ``available``: S x Q bool).

    as_written divides exp(w_q) by the sum over the *other* available
    modalities; a lone modality gets coefficient 1.  softmax is the usual
    inclusive normalisation.  Absent modalities get 0.
    """
    avail = np.asarray(available, dtype=bool)
    if avail.ndim == 1:
        avail = avail[None, :]
    if not avail.any(axis=1).all():
        raise ContractError("fusion needs at least one available modality per scene")
    e = nc.exp(nc.as_tensor(w)) * avail.astype(np.float64)
    total = nc.sum(e, axis=1, keepdims=True)
    if mode == "softmax":
        denom = total
    elif mode == "as_written":
        single = (avail.sum(axis=1, keepdims=True) == 1).astype(np.float64)
        denom = total - e + e * single
    else:
        raise ContractError(f"unknown fusion mode {mode!r}")
    # absent entries have e = 0 and denom = total > 0
    return e / denom


def fuse_pre_mlp(pooled, available, w, mode: str = "as_written"):
    """Weighted sum of the pooled features (S x Q x D) before the scene MLP."""
    c = fusion_coefficients(w, available, mode)
    S, Q = c.shape
    weighted = nc.reshape(c, (S, Q, 1)) * nc.as_tensor(pooled)
    return nc.sum(weighted, axis=1)


def _stack(pooled_list: list[dict], dim: int):
    P = np.zeros((len(pooled_list), len(FUSION_ORDER), dim))
    A = np.zeros((len(pooled_list), len(FUSION_ORDER)), dtype=bool)
    for s, d in enumerate(pooled_list):
        for q, m in enumerate(FUSION_ORDER):
            if m in d:
                P[s, q] = d[m]
                A[s, q] = True
    return P, A


def fuse(pooled: dict, store: ParamStore, mode: str = "as_written", weights=None) -> SceneEmbedding:
    """Fuse a ``{modality: vector}`` map and project with the scene MLP."""
    pooled = {m: v for m, v in pooled.items() if v is not None}
    if not pooled:
        raise ContractError("cannot fuse an empty set of modalities")
    dim = len(next(iter(pooled.values())))
    P, A = _stack([pooled], dim)
    w = store["scene.w"] if weights is None else weights
    pre = fuse_pre_mlp(P, A, w, mode)
    vec = layers.head(store, "scene.mlp", pre).data[0]
    return SceneEmbedding(vec, tuple(m for m in FUSION_ORDER if m in pooled))


def scene_embedding(store: ParamStore, scene: SceneRecord, cfg: RunConfig, modalities=None) -> SceneEmbedding:
    """F_S for a scene; ``modalities`` restricts fusion (uni-modal inference)."""
    pooled = pooled_features(store, scene, cfg)
    if modalities is not None:
        keep = set(modalities)
        pooled = {m: v for m, v in pooled.items() if m in keep}
    return fuse(pooled, store, cfg.fusion_mode)


def scene_terms(store: ParamStore, P: np.ndarray, A: np.ndarray, cfg: RunConfig, *, train: bool = False,
                rng: np.random.Generator | None = None):
    """Scene objective on a batch: each projected modality vs projected images, and F_S vs each modality."""
    tau = temperature(store, "scene.log_tau")
    S, Q, D = P.shape
    flat = np.flatnonzero(A.reshape(-1))
    u = layers.head(store, "scene.mlp", P.reshape(-1, D)[flat], train=train, rng=rng, dropout=cfg.dropout)
    per = {}
    for q, m in enumerate(FUSION_ORDER):
        sel = np.flatnonzero(flat % Q == q)
        if sel.size:
            per[m] = ModalityRows(nc.take(u, sel), flat[sel] // Q)
    fused_rows = np.flatnonzero(A.any(axis=1))
    fs = layers.head(store, "scene.mlp", fuse_pre_mlp(P[fused_rows], A[fused_rows], store.var("scene.w"),
                                                       cfg.fusion_mode),
                     train=train, rng=rng, dropout=cfg.dropout)
    fused = ModalityRows(fs, fused_rows)
    terms = {}
    if Modality.IMAGE in per:
        for m in FUSION_ORDER:
            if m is Modality.IMAGE or m not in per:
                continue
            pair = aligned_pair(per[m], per[Modality.IMAGE])
            if pair is not None:
                terms[f"{m.value}-I"] = symmetric_loss(pair[0], pair[1], tau)
    for m, rows in per.items():
        pair = aligned_pair(fused, rows)
        terms[f"S-{m.value}"] = symmetric_loss(pair[0], pair[1], tau)
    if not terms:
        raise NoTermsError("no scene-level term available")
    return _total(terms), terms


def train_scene_stage(ds: Dataset, cfg: RunConfig, store: ParamStore,
                      runner: StageRunner | None = None) -> tuple[ParamStore, list[dict]]:
    if "inst.log_tau" not in store:
        raise ConfigError("scene stage needs trained instance parameters")
    train = ds.split("train")
    pooled = [pooled_features(store, s, cfg) for s in train]
    if not any(len(p) >= 2 for p in pooled):
        raise ConfigError("no training scene has two or more pooled modalities")
    if "scene.w" not in store:
        init_scene_params(store, cfg, np.random.default_rng([cfg.seed, 2]))
    P, A = _stack(pooled, cfg.dim)
    index = {s.scene_id: i for i, s in enumerate(train)}
    runner = runner or StageRunner("scene", cfg)

    def loss_fn(batch_scenes, rng):
        rows = np.array([index[s.scene_id] for s in batch_scenes])
        return scene_terms(store, P[rows], A[rows], cfg, train=True, rng=rng)

    history = runner.run(store, PREFIX, train, loss_fn)
    return store, history
