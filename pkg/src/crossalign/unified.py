"""Unified dimensionality encoders (text / images+floorplans / point clouds) aligned to frozen F_S."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import layers
from . import numcore as nc
from .config import RunConfig
from .datamodel import Dataset, Modality, SceneRecord
from .errors import ConfigError, InputError, MissingModalityError, NoTermsError
from .losses import ModalityRows, init_temperature, temperature, unified_objective
from .numcore import ParamStore
from .training import StageRunner
from .viewsample import farthest_pose_sample, uniform_stride_sample

PREFIX = "uni."
TERMS = ("1D", "2D", "2D-floorplan", "3D")
# scene modality -> (encoder, loss term)
ENCODER_OF = {Modality.REFERRAL: "1D", Modality.IMAGE: "2D", Modality.FLOORPLAN: "2D", Modality.POINTCLOUD: "3D"}
VOXEL_FEATURES = 4


def init_unified_params(store: ParamStore, dims: dict, cfg: RunConfig, rng: np.random.Generator) -> None:
    D = cfg.dim
    layers.init_head(store, "uni.head1D", dims["R"], D, rng)
    layers.init_head(store, "uni.head2D", 2 * dims["frame"], D, rng)
    layers.init_linear(store, "uni.vox1", VOXEL_FEATURES, D, rng)
    layers.init_linear(store, "uni.vox2", D, D, rng)
    layers.init_head(store, "uni.head3D", 2 * D, D, rng)
    store.add("uni.loss_logits", np.zeros(3), decay=False)
    init_temperature(store, "uni.log_tau", cfg.tau_init)


def loss_weights(store: ParamStore):
    """(alpha, beta, gamma): positive, renormalised to sum to 3."""
    return nc.softmax(store.var("uni.loss_logits")) * 3.0


# ---------------------------------------------------------------------------
# voxelisation
# ---------------------------------------------------------------------------

@dataclass
class VoxelGrid:
    voxel_size: float
    coords: np.ndarray      # M0 x 3 integer voxel indices, lexicographic order
    offsets: np.ndarray     # M0 x 3 mean member offset from the voxel centre
    counts: np.ndarray      # M0 member counts

    @property
    def m0(self) -> int:
        return len(self.coords)

    def features(self) -> np.ndarray:
        """Encoder input: offsets in voxel units plus log(1 + count)."""
        return np.concatenate([self.offsets / self.voxel_size, np.log1p(self.counts)[:, None]], axis=1)


def voxelize(points, voxel_size: float) -> VoxelGrid:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InputError("voxelize needs at least one point")
    if not voxel_size > 0:
        raise InputError("voxel_size must be positive")
    if not np.isfinite(pts).all():
        raise InputError("point cloud contains non-finite coordinates")
    # sorting first makes the result independent of input order, bit for bit
    pts = pts[np.lexsort(pts.T[::-1])]
    idx = np.floor(pts / voxel_size).astype(np.int64)
    coords, inverse, counts = np.unique(idx, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    centers = (coords + 0.5) * voxel_size
    sums = np.zeros((len(coords), 3))
    np.add.at(sums, inverse, pts - centers[inverse])
    return VoxelGrid(float(voxel_size), coords, sums / counts[:, None], counts.astype(np.float64))


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def scene_seed(seed: int, scene_id: str) -> int:
    return int(np.random.default_rng([seed, zlib.crc32(scene_id.encode())]).integers(2 ** 31))


def sample_referrals(referrals: np.ndarray, t: int, seed) -> np.ndarray:
    n = len(referrals)
    if n == 0:
        raise MissingModalityError("scene has no referrals")
    pick = np.sort(np.random.default_rng(seed).choice(n, size=min(t, n), replace=False))
    return referrals[pick]


def sample_views(scene: SceneRecord, n: int, seed, strategy: str = "farthest",
                 rotation_weight: float = 1.0) -> list[int]:
    if not scene.has_scene_modality(Modality.IMAGE):
        raise MissingModalityError(f"scene {scene.scene_id} has no frames")
    if strategy == "uniform":
        return uniform_stride_sample(len(scene.frames), n)
    return farthest_pose_sample(scene.frames.poses, n, seed, rotation_weight)


# ---------------------------------------------------------------------------
# batched encoders
# ---------------------------------------------------------------------------

def _segments(blocks: list[np.ndarray]):
    counts = np.array([len(b) for b in blocks], dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.int64)
    return np.concatenate(blocks, axis=0), starts, counts


def pooled_head(store: ParamStore, name: str, blocks: list[np.ndarray], *, train=False, rng=None,
                dropout=0.1):
    """Shared head on every row, then mean over each block."""
    X, starts, counts = _segments(blocks)
    return nc.segment_mean(layers.head(store, name, X, train=train, rng=rng, dropout=dropout), starts, counts)


def encode_voxels(store: ParamStore, grids: list[VoxelGrid], *, train=False, rng=None, dropout=0.1):
    X, starts, counts = _segments([g.features() for g in grids])
    h = layers.linear(store, "uni.vox2", nc.gelu(layers.linear(store, "uni.vox1", X)))
    pooled = nc.concat([nc.segment_max(h, starts, counts), nc.segment_mean(h, starts, counts)], axis=1)
    return layers.head(store, "uni.head3D", pooled, train=train, rng=rng, dropout=dropout)


def scene_inputs(scene: SceneRecord, m: Modality, cfg: RunConfig, seed) -> np.ndarray | VoxelGrid:
    """Raw encoder input of one scene for a scene-level modality."""
    if not scene.has_scene_modality(m):
        raise MissingModalityError(f"scene {scene.scene_id} has no {m.value} input")
    if m is Modality.REFERRAL:
        return sample_referrals(scene.referrals, cfg.referrals_per_scene, seed)
    if m is Modality.IMAGE:
        idx = sample_views(scene, cfg.n_views, seed, cfg.view_strategy, cfg.rotation_weight)
        return scene.frames.features()[idx]
    if m is Modality.FLOORPLAN:
        return scene.floorplan[None, :]
    if m is Modality.POINTCLOUD:
        return voxelize(scene.points, cfg.voxel_size)
    raise MissingModalityError(f"{m.value} has no unified encoder")


def encode_inputs(store: ParamStore, m: Modality, inputs: list, cfg: RunConfig, *, train=False, rng=None):
    if m is Modality.POINTCLOUD:
        return encode_voxels(store, inputs, train=train, rng=rng, dropout=cfg.dropout)
    name = "uni.head1D" if m is Modality.REFERRAL else "uni.head2D"
    return pooled_head(store, name, inputs, train=train, rng=rng, dropout=cfg.dropout)


def encode_scenes(store: ParamStore, scenes: list[SceneRecord], m, cfg: RunConfig, seed: int | None = None) -> dict:
    """``{scene_id: vector}`` for the scenes that have modality ``m`` (evaluation mode)."""
    m = Modality(m) if not isinstance(m, Modality) else m
    seed = cfg.seed if seed is None else seed
    have = [s for s in scenes if s.has_scene_modality(m)]
    if not have:
        return {}
    inputs = [scene_inputs(s, m, cfg, scene_seed(seed, s.scene_id)) for s in have]
    out = encode_inputs(store, m, inputs, cfg).data
    return {s.scene_id: out[i] for i, s in enumerate(have)}


def encode_1d(store, scene, cfg, seed=None):
    return encode_scenes(store, [scene], Modality.REFERRAL, cfg, seed)[scene.scene_id]


def encode_2d(store, scene, cfg, seed=None):
    return encode_scenes(store, [scene], Modality.IMAGE, cfg, seed)[scene.scene_id]


def encode_floorplan(store, scene, cfg):
    return encode_scenes(store, [scene], Modality.FLOORPLAN, cfg)[scene.scene_id]


def encode_3d(store, points, cfg):
    return encode_voxels(store, [voxelize(points, cfg.voxel_size)]).data[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def unified_terms(store: ParamStore, scenes: list[SceneRecord], targets: np.ndarray, cfg: RunConfig, *,
                  train: bool = False, rng: np.random.Generator | None = None, voxel_cache: dict | None = None,
                  extra=None):
    """Weighted alignment of every available encoder output to the frozen F_S rows ``targets``."""
    rng = rng or np.random.default_rng(cfg.seed)
    w = loss_weights(store)
    weights = {"1D": nc.take(w, 0), "2D": nc.take(w, 1), "2D-floorplan": nc.take(w, 1), "3D": nc.take(w, 2)}
    mods = [Modality.REFERRAL, Modality.IMAGE, Modality.POINTCLOUD]
    if cfg.floorplan_in_training:
        mods.append(Modality.FLOORPLAN)
    dim_embs = {}
    for m in mods:
        rows = [i for i, s in enumerate(scenes) if s.has_scene_modality(m)]
        if not rows:
            continue
        if m is Modality.POINTCLOUD and voxel_cache is not None:
            inputs = [voxel_cache[scenes[i].scene_id] for i in rows]
        else:
            inputs = [scene_inputs(scenes[i], m, cfg, int(rng.integers(2 ** 31))) for i in rows]
        term = "2D-floorplan" if m is Modality.FLOORPLAN else ENCODER_OF[m]
        dim_embs[term] = ModalityRows(encode_inputs(store, m, inputs, cfg, train=train, rng=rng),
                                      np.asarray(rows, dtype=np.int64))
    scene_rows = ModalityRows(nc.as_tensor(targets), np.arange(len(scenes), dtype=np.int64))
    return unified_objective(scene_rows, dim_embs, weights, temperature(store, "uni.log_tau"),
                             all_pairs=cfg.unified_all_pairs, extra=extra)


def train_unified_stage(ds: Dataset, cfg: RunConfig, store: ParamStore, runner: StageRunner | None = None,
                        trainable: tuple[str, ...] | None = None) -> tuple[ParamStore, list[dict]]:
    from .instance_align import instance_terms
    from .scene_fusion import scene_embedding

    if "inst.log_tau" not in store or "scene.w" not in store:
        raise ConfigError("unified stage needs trained instance and scene parameters")
    train = ds.split("train")
    if not train:
        raise ConfigError("unified stage needs a non-empty train split")
    if "uni.log_tau" not in store:
        init_unified_params(store, ds.dims, cfg, np.random.default_rng([cfg.seed, 3]))
    targets = {s.scene_id: scene_embedding(store, s, cfg).vector for s in train}
    voxels = {s.scene_id: voxelize(s.points, cfg.voxel_size) for s in train
              if s.has_scene_modality(Modality.POINTCLOUD)}
    runner = runner or StageRunner("unified", cfg)

    def loss_fn(batch_scenes, rng):
        extra = None
        if cfg.unified_objective == "combined":
            try:
                extra = float(instance_terms(store, batch_scenes, cfg)[0].data)
            except NoTermsError:
                extra = None
        T = np.stack([targets[s.scene_id] for s in batch_scenes])
        return unified_terms(store, batch_scenes, T, cfg, train=True, rng=rng, voxel_cache=voxels, extra=extra)

    history = runner.run(store, PREFIX, train, loss_fn, trainable=trainable)
    return store, history
