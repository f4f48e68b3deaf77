"""Full three-stage pipeline, then find a scene from a sentence, a floorplan or a point cloud.

Stage one aligns objects, stage two fuses them into a scene embedding, and
stage three trains encoders that read raw scene inputs (referral text, camera
frames, floorplans, point clouds) into that same space.  The last part queries
a validation scene with its own point cloud and its own referrals and prints
the ranked database of floorplans.

This is sized to finish in about half a minute, so recalls sit well above
chance but far from perfect; the acceptance test for unified retrieval trains
on about a thousand scenes for several minutes.

    python demos/03_cross_modal_scene_retrieval.py [run-dir]
"""

import sys
import tempfile

from crossalign import Modality, RunConfig, SynthSpec, embed, evaluate_embeddings, generate, train_all
from crossalign.retrieval import scene_retrieve
from crossalign.unified import encode_scenes

out = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="crossalign-demo-")
ds = generate(SynthSpec(n_scenes=160, instances=(3, 8), latent_dim=4, visible_prob=0.9, seed=5,
                        dims={"I": 32, "P": 32, "M": 32, "R": 32, "frame": 64}))
steps = {"instance": 600, "scene": 400, "unified": 800}
cfg = RunConfig(dim=48, heads=4, layers=1, batch_scenes=16, epochs={k: 10 ** 6 for k in steps},
                max_steps=steps, restart_period=800, stage="all", out=out)
store = train_all(ds, cfg, out)
print(f"checkpoints written to {out}/checkpoints")

val = ds.split("val")
table = evaluate_embeddings(val, embed(ds, store, cfg, "val"), instance_modalities="",
                            scene_keys=("R", "I", "F", "P"))
print(f"scene matching top-1 over {len(val)} validation scenes (chance {1 / len(val):.3f})")
for a, b in (("R", "P"), ("P", "R"), ("I", "F"), ("F", "P"), ("P", "I")):
    print(f"  {a} -> {b}: {table.get(f'scene/{a}->{b}/matching', 'R@1'):.3f}")

query = val[0]
floorplans = encode_scenes(store, val, Modality.FLOORPLAN, cfg)
for source in (Modality.POINTCLOUD, Modality.REFERRAL):
    vec = encode_scenes(store, [query], source, cfg)[query.scene_id]
    ranked = scene_retrieve(vec, floorplans, 3, "F")
    hits = ", ".join(f"{i} ({s:.2f})" for i, s in zip(ranked.ids, ranked.scores))
    print(f"{query.scene_id} by {source.name.lower()} -> floorplans: {hits}")
