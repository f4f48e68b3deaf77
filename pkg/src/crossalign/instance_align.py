"""Instance-level multimodal interaction.

Each instance modality gets a projection head into the shared D-dim space.
Point-cloud tokens additionally carry an affine lift of the 6-D location and
pass through a transformer whose attention logits are biased by pairwise
spatial relations; mesh tokens use a separate transformer with neither
location nor relations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import numcore as nc
from .config import RunConfig
from .datamodel import Dataset, Modality, SceneRecord, modality
from .errors import ConfigError
from .losses import ModalityRows, init_temperature, instance_objective, temperature
from .numcore import ParamStore
from .training import StageRunner

PREFIX = "inst."
TOKEN_MODALITIES = (Modality.POINTCLOUD, Modality.MESH)
ROW_ORDER = (Modality.IMAGE, Modality.REFERRAL, Modality.POINTCLOUD, Modality.MESH)


def init_instance_params(store: ParamStore, dims: dict, cfg: RunConfig, rng: np.random.Generator) -> None:
    D = cfg.dim
    for m in ROW_ORDER:
        layers.init_head(store, f"inst.head.{m.value}", dims[m.value], D, rng)
    layers.init_linear(store, "inst.loc", 6, D, rng)
    layers.init_transformer(store, "inst.tfP", D, rng, layers=cfg.layers, heads=cfg.heads, relation_dim=5)
    layers.init_transformer(store, "inst.tfM", D, rng, layers=cfg.layers, heads=cfg.heads)
    init_temperature(store, "inst.log_tau", cfg.tau_init)


def spatial_relations(centers) -> np.ndarray:
    """``n x n x 5`` features [d, sin th_h, cos th_h, sin th_v, cos th_v] of the line i -> j.

    Undefined angles (coincident centres, vertical lines for th_h) are taken
    as 0, i.e. (sin, cos) = (0, 1).
    """
    c = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    delta = c[None, :, :] - c[:, None, :]
    horiz = np.hypot(delta[..., 0], delta[..., 1])
    dist = np.sqrt(horiz ** 2 + delta[..., 2] ** 2)
    hz = horiz > 0
    dz = dist > 0
    safe_h = np.where(hz, horiz, 1.0)
    safe_d = np.where(dz, dist, 1.0)
    return np.stack([
        dist,
        np.where(hz, delta[..., 1] / safe_h, 0.0),
        np.where(hz, delta[..., 0] / safe_h, 1.0),
        np.where(dz, delta[..., 2] / safe_d, 0.0),
        np.where(dz, horiz / safe_d, 1.0),
    ], axis=-1)


def mean_referral(referrals) -> np.ndarray | None:
    """Average pooling over an instance's referral features; ``None`` when there are none."""
    if referrals is None or len(referrals) == 0:
        return None
    return np.asarray(referrals, dtype=np.float64).mean(axis=0)


def pool_referrals(referrals, store: ParamStore, cfg: RunConfig | None = None) -> np.ndarray | None:
    pooled = mean_referral(referrals)
    if pooled is None:
        return None
    return layers.head(store, "inst.head.R", pooled[None, :]).data[0]


@dataclass
class TokenLayout:
    slots: np.ndarray          # B x n, index into the modality's rows, -1 for padding
    key_mask: np.ndarray       # B x n bool
    relations: np.ndarray | None


@dataclass
class InstanceBatch:
    keys: list                 # global row -> (scene_id, instance_id)
    inputs: dict               # modality -> stacked raw inputs (rows having it)
    rows: dict                 # modality -> sorted global row ids
    locations: np.ndarray      # all rows x 6
    layouts: dict              # P/M -> TokenLayout


def build_batch(scenes: list[SceneRecord]) -> InstanceBatch:
    keys, locs = [], []
    inputs = {m: [] for m in ROW_ORDER}
    rows = {m: [] for m in ROW_ORDER}
    per_scene = {m: [] for m in TOKEN_MODALITIES}
    for s in scenes:
        scene_tokens = {m: [] for m in TOKEN_MODALITIES}
        for inst in s.instances:
            r = len(keys)
            keys.append((s.scene_id, inst.instance_id))
            locs.append(inst.location.as_vector())
            for m in ROW_ORDER:
                if m not in inst.feats:
                    continue
                if m is Modality.REFERRAL:
                    x = mean_referral(inst.feats[m])
                    if x is None:
                        continue
                else:
                    x = inst.feats[m]
                if m in scene_tokens:
                    scene_tokens[m].append(len(rows[m]))
                rows[m].append(r)
                inputs[m].append(x)
        for m in TOKEN_MODALITIES:
            if scene_tokens[m]:
                per_scene[m].append(scene_tokens[m])
    locations = np.asarray(locs, dtype=np.float64).reshape(-1, 6)
    layouts = {}
    for m in TOKEN_MODALITIES:
        groups = per_scene[m]
        if not groups:
            continue
        n = max(len(g) for g in groups)
        slots = np.full((len(groups), n), -1, dtype=np.int64)
        for b, g in enumerate(groups):
            slots[b, :len(g)] = g
        rel = None
        if m is Modality.POINTCLOUD:
            rows_m = np.asarray(rows[m])
            rel = np.zeros((len(groups), n, n, 5))
            for b, g in enumerate(groups):
                rel[b, :len(g), :len(g)] = spatial_relations(locations[rows_m[g], :3])
        layouts[m] = TokenLayout(slots, slots >= 0, rel)
    return InstanceBatch(
        keys,
        {m: np.asarray(v, dtype=np.float64) for m, v in inputs.items() if v},
        {m: np.asarray(v, dtype=np.int64) for m, v in rows.items() if v},
        locations,
        layouts,
    )


def _run_tokens(store: ParamStore, name: str, tokens, layout: TokenLayout, heads: int):
    n_rows, D = tokens.shape
    padded = nc.concat([tokens, np.zeros((1, D))], axis=0)
    idx = np.where(layout.slots >= 0, layout.slots, n_rows)
    x = nc.take(padded, idx.reshape(-1))
    x = nc.reshape(x, (*layout.slots.shape, D))
    out = layers.transformer(store, name, x, layout.key_mask, layout.relations, heads=heads)
    flat = nc.reshape(out, (-1, D))
    order = np.flatnonzero(layout.slots.reshape(-1) >= 0)
    # slots are assigned in row order, so the valid flat positions sorted by slot are row-ordered
    order = order[np.argsort(layout.slots.reshape(-1)[order], kind="stable")]
    return nc.take(flat, order)


def encode_batch(store: ParamStore, batch: InstanceBatch, cfg: RunConfig, *, train: bool = False,
                 rng: np.random.Generator | None = None, modalities=ROW_ORDER) -> dict:
    """Instance embeddings per modality as :class:`ModalityRows` over the batch rows."""
    out = {}
    for m in ROW_ORDER:
        if m not in modalities or m not in batch.rows:
            continue
        h = layers.head(store, f"inst.head.{m.value}", batch.inputs[m], train=train, rng=rng,
                        dropout=cfg.dropout)
        if m is Modality.POINTCLOUD:
            h = h + layers.linear(store, "inst.loc", batch.locations[batch.rows[m]])
            h = _run_tokens(store, "inst.tfP", h, batch.layouts[m], cfg.heads)
        elif m is Modality.MESH:
            h = _run_tokens(store, "inst.tfM", h, batch.layouts[m], cfg.heads)
        out[m] = ModalityRows(h, batch.rows[m])
    return out


def encode_scene_instances(store: ParamStore, scene: SceneRecord, cfg: RunConfig, modalities=ROW_ORDER) -> dict:
    """``{modality: {instance_id: vector}}`` for one scene (evaluation mode)."""
    batch = build_batch([scene])
    embs = encode_batch(store, batch, cfg, modalities=modalities)
    return {m: {batch.keys[r][1]: e.values.data[j] for j, r in enumerate(e.rows)} for m, e in embs.items()}


def encode_pointcloud_instances(scene: SceneRecord, store: ParamStore, cfg: RunConfig) -> dict:
    return encode_scene_instances(store, scene, cfg, (Modality.POINTCLOUD,)).get(Modality.POINTCLOUD, {})


def encode_mesh_instances(scene: SceneRecord, store: ParamStore, cfg: RunConfig) -> dict:
    return encode_scene_instances(store, scene, cfg, (Modality.MESH,)).get(Modality.MESH, {})


def instance_terms(store: ParamStore, scenes: list[SceneRecord], cfg: RunConfig, *, train: bool = False,
                   rng: np.random.Generator | None = None):
    """Instance objective on a batch of scenes: ``(total, {pair: term})``."""
    batch = build_batch(scenes)
    embs = encode_batch(store, batch, cfg, train=train, rng=rng)
    return instance_objective(embs, temperature(store, "inst.log_tau"), cfg.alignment,
                              modality(cfg.base_modality))


def check_base_modality(scenes: list[SceneRecord], cfg: RunConfig) -> None:
    if cfg.alignment != "base_modality":
        return
    base = modality(cfg.base_modality)
    for s in scenes:
        for inst in s.instances:
            if base not in inst.feats:
                raise ConfigError(
                    f"base-modality training needs {base.value} for every instance; "
                    f"{s.scene_id}/{inst.instance_id} lacks it")


def train_instance_stage(ds: Dataset, cfg: RunConfig, store: ParamStore | None = None,
                         runner: StageRunner | None = None) -> tuple[ParamStore, list[dict]]:
    train = ds.split("train")
    if not train:
        raise ConfigError("instance stage needs a non-empty train split")
    check_base_modality(train, cfg)
    if store is None:
        store = ParamStore()
    if "inst.log_tau" not in store:
        init_instance_params(store, ds.dims, cfg, np.random.default_rng([cfg.seed, 1]))
    runner = runner or StageRunner("instance", cfg)

    def loss_fn(batch_scenes, rng):
        return instance_terms(store, batch_scenes, cfg, train=True, rng=rng)

    history = runner.run(store, PREFIX, train, loss_fn)
    return store, history
