"""Three-stage training driver with checkpoints and resume, plus embedding export and evaluation."""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import numcore as nc
from .config import RunConfig
from .datamodel import INSTANCE_MODALITIES, Dataset, Modality, load_feature_archive
from .errors import ConfigError
from .instance_align import encode_scene_instances, train_instance_stage
from .metrics import EmbeddingSet, RecallTable, evaluate_embeddings
from .numcore import ParamStore
from .scene_fusion import scene_embedding, train_scene_stage
from .training import StageRunner, state_from_tensors, state_to_tensors
from .unified import encode_scenes, train_unified_stage

STAGE_ORDER = ("instance", "scene", "unified")
UNIFIED_KEYS = {"R": Modality.REFERRAL, "I": Modality.IMAGE, "F": Modality.FLOORPLAN, "P": Modality.POINTCLOUD}


def checkpoint_path(out, stage: str, partial: bool = False) -> Path:
    return Path(out) / "checkpoints" / f"{stage}{'.partial' if partial else ''}.ck"


def load_params(out, stage: str) -> ParamStore:
    path = checkpoint_path(out, stage)
    if not path.exists():
        raise ConfigError(f"missing {stage} checkpoint at {path}")
    return ParamStore.from_state_dict(nc.load_checkpoint(path))


def _trim_log(path: Path, stage: str, step: int) -> None:
    """Forget epoch records a resumed stage is about to write again."""
    if not path.exists():
        return
    keep = [line for line in path.read_text().splitlines()
            if not (json.loads(line)["stage"] == stage and json.loads(line)["step"] > step)]
    path.write_text("".join(line + "\n" for line in keep))


def _stages(cfg: RunConfig) -> tuple:
    return STAGE_ORDER if cfg.stage == "all" else (cfg.stage,)


def train_all(ds: Dataset | str, cfg: RunConfig, out: str | None = None) -> ParamStore:
    """Run the configured stage(s), resuming from checkpoints in ``out`` when present."""
    out = Path(out or cfg.out)
    if not isinstance(ds, Dataset):
        ds = load_feature_archive(ds)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    cfg.save(out / "effective-config.json")
    stages = _stages(cfg)
    first = STAGE_ORDER.index(stages[0])
    store = ParamStore()
    if first > 0:
        store = load_params(out, STAGE_ORDER[first - 1])
    log_path = out / "train_log.jsonl"

    def on_epoch(rec):
        with log_path.open("a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def on_checkpoint(stage, st, state):
        nc.save_checkpoint(checkpoint_path(out, stage, partial=True),
                           {**st.state_dict(), **state_to_tensors(state)})

    for stage in stages:
        final = checkpoint_path(out, stage)
        if final.exists():
            store = load_params(out, stage)
            continue
        partial = checkpoint_path(out, stage, partial=True)
        state = None
        if partial.exists():
            tensors = nc.load_checkpoint(partial)
            store = ParamStore.from_state_dict(tensors)
            state = state_from_tensors(tensors)
            _trim_log(log_path, stage, state["step"])
        runner = StageRunner(stage, cfg, on_epoch=on_epoch, on_checkpoint=on_checkpoint, state=state)
        if stage == "instance":
            store, _ = train_instance_stage(ds, cfg, store, runner)
        elif stage == "scene":
            store, _ = train_scene_stage(ds, cfg, store, runner)
        else:
            store, _ = train_unified_stage(ds, cfg, store, runner)
        nc.save_checkpoint(final, store.state_dict())
        if partial.exists():
            partial.unlink()
    return store


def embed(ds: Dataset, store: ParamStore, cfg: RunConfig, split: str | None = "val", jobs: int = 1) -> EmbeddingSet:
    scenes = ds.split(split) if split else list(ds.scenes)
    emb = EmbeddingSet()

    def one(s):
        return s.scene_id, encode_scene_instances(store, s, cfg)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        results = list(pool.map(one, scenes))
    for sid, per in results:
        for m, d in per.items():
            emb.instances[(sid, m.value)] = d
    if "scene.w" in store:
        emb.scenes["S"] = {s.scene_id: scene_embedding(store, s, cfg).vector for s in scenes}
    if "uni.log_tau" in store:
        for key, m in UNIFIED_KEYS.items():
            vecs = encode_scenes(store, scenes, m, cfg)
            if vecs:
                emb.scenes[key] = vecs
    return emb


def evaluate(ds: Dataset, store: ParamStore, cfg: RunConfig, split: str = "val", jobs: int = 1,
             timing: dict | None = None) -> RecallTable:
    t0 = time.perf_counter()
    emb = embed(ds, store, cfg, split, jobs)
    t1 = time.perf_counter()
    table = evaluate_embeddings(ds.split(split), emb, instance_modalities=[m.value for m in INSTANCE_MODALITIES])
    if timing is not None:
        timing["embed_seconds"] = t1 - t0
        timing["metrics_seconds"] = time.perf_counter() - t1
    return table


def stage_params(out, cfg: RunConfig) -> ParamStore:
    """The latest available trained parameters in ``out`` (unified > scene > instance)."""
    for stage in reversed(STAGE_ORDER):
        if checkpoint_path(out, stage).exists():
            return load_params(out, stage)
    raise ConfigError(f"no checkpoint found under {out}; train first (missing instance checkpoint)")

