"""Command-line entry point: ``crossalign <subcommand> ...``.

Exit status 0 on success, 2 on configuration errors, 1 on any other failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datamodel import Modality, load_feature_archive, save_feature_archive
from .errors import ConfigError, CrossAlignError, SpecError
from .instance_align import encode_scene_instances
from .pipeline import embed, evaluate, stage_params, train_all
from .retrieval import instance_match, scene_retrieve
from .synthgen import SynthSpec, generate
from .unified import encode_scenes
from .viewsample import farthest_pose_sample

log = logging.getLogger("crossalign")


def _load_config(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    for key in ("stage", "seed", "out", "dataset"):
        val = getattr(args, key, None)
        if val is not None:
            data[key] = val
    cfg = RunConfig.from_dict(data)
    if not cfg.dataset:
        raise ConfigError("no dataset archive given (config 'dataset' or --dataset)")
    return cfg


def cmd_gen_synth(args) -> None:
    data = {}
    if args.config:
        data = json.loads(Path(args.config).read_text())
    known = {f.name for f in dataclasses.fields(SynthSpec)}
    if set(data) - known:
        raise SpecError(f"unknown synth spec keys: {sorted(set(data) - known)}")
    for key in ("instances", "referrals_per_instance", "room"):
        if key in data:
            data[key] = tuple(data[key])
    if args.scenes is not None:
        data["n_scenes"] = args.scenes
    if args.seed is not None:
        data["seed"] = args.seed
    ds = generate(SynthSpec(**data))
    save_feature_archive(ds, args.out)
    print(f"wrote {len(ds.scenes)} scenes to {args.out}")


def cmd_train(args) -> None:
    cfg = _load_config(args)
    t0 = time.perf_counter()
    train_all(cfg.dataset, cfg, cfg.out)
    print(f"training finished; checkpoints in {Path(cfg.out) / 'checkpoints'}")
    if args.timing:
        print(json.dumps({"train_seconds": time.perf_counter() - t0}))


def cmd_embed(args) -> None:
    cfg = _load_config(args)
    ds = load_feature_archive(cfg.dataset)
    store = stage_params(cfg.out, cfg)
    emb = embed(ds, store, cfg, args.split if args.split != "all" else None, args.jobs)
    target = Path(cfg.out) / "embeddings"
    emb.save(target)
    print(f"wrote embeddings to {target}")


def cmd_evaluate(args) -> None:
    cfg = _load_config(args)
    ds = load_feature_archive(cfg.dataset)
    store = stage_params(cfg.out, cfg)
    timing = {} if args.timing else None
    table = evaluate(ds, store, cfg, args.split, args.jobs, timing)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "recall.json").write_text(table.to_json() + "\n")
    (out / "recall.txt").write_text(table.to_text())
    sys.stdout.write(table.to_text())
    if timing is not None:
        print(json.dumps(timing, sort_keys=True))


def cmd_retrieve(args) -> None:
    cfg = _load_config(args)
    ds = load_feature_archive(cfg.dataset)
    store = stage_params(cfg.out, cfg)
    scene = ds.scene(args.query)
    if args.instances:
        a, b = Modality(args.source), Modality(args.target)
        embs = encode_scene_instances(store, scene, cfg, (a, b))
        res = instance_match(embs.get(a, {}), embs.get(b, {}))
        out = {q: [[i, s] for i, s in zip(r.ids[:args.k], r.scores[:args.k])] for q, r in res.items()}
    else:
        db_scenes = ds.split(args.split) if args.split != "all" else list(ds.scenes)
        query = encode_scenes(store, [scene], Modality(args.source), cfg).get(scene.scene_id)
        db = encode_scenes(store, db_scenes, Modality(args.target), cfg)
        r = scene_retrieve(query, db, args.k, args.target)
        out = [[i, s] for i, s in zip(r.ids, r.scores)]
    print(json.dumps(out, indent=1))


def cmd_sample_views(args) -> None:
    if args.poses:
        poses = np.asarray(json.loads(Path(args.poses).read_text()), dtype=np.float64)
    else:
        if not (args.dataset and args.scene):
            raise ConfigError("give --poses FILE or --dataset DIR --scene ID")
        scene = load_feature_archive(args.dataset).scene(args.scene)
        if scene.frames is None:
            raise ConfigError(f"scene {args.scene} has no frames")
        poses = scene.frames.poses
    seed = 0 if args.seed is None else args.seed
    print(json.dumps(farthest_pose_sample(poses, args.n, seed, args.rotation_weight)))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossalign", description="cross-modal scene alignment toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, split=True):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--dataset", help="feature archive directory (overrides config)")
        sp.add_argument("--stage", choices=("instance", "scene", "unified", "all"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="run directory (overrides config)")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--timing", action="store_true")
        if split:
            sp.add_argument("--split", default="val", help="train, val or all")

    g = sub.add_parser("gen-synth", help="write a synthetic feature archive")
    g.add_argument("--config", help="SynthSpec JSON file")
    g.add_argument("--scenes", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    t = sub.add_parser("train", help="run the training stages")
    common(t, split=False)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="export embeddings")
    common(e)
    e.set_defaults(func=cmd_embed)

    r = sub.add_parser("retrieve", help="scene retrieval or within-scene instance matching")
    common(r)
    r.add_argument("--query", required=True, help="query scene id")
    r.add_argument("--from", dest="source", required=True, help="R, I, F or P (scene); I, P, M or R with --instances")
    r.add_argument("--to", dest="target", required=True)
    r.add_argument("-k", type=int, default=5)
    r.add_argument("--instances", action="store_true", help="match instances inside the query scene")
    r.set_defaults(func=cmd_retrieve)

    v = sub.add_parser("evaluate", help="write the recall tables")
    common(v)
    v.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("sample-views", help="farthest-pose view selection")
    s.add_argument("--poses", help="JSON list of 7-tuples (qw qx qy qz tx ty tz)")
    s.add_argument("--dataset")
    s.add_argument("--scene")
    s.add_argument("-n", type=int, default=10)
    s.add_argument("--seed", type=int)
    s.add_argument("--rotation-weight", type=float, default=1.0)
    s.set_defaults(func=cmd_sample_views)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CROSSALIGN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ConfigError, SpecError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (CrossAlignError, OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
