"""Align four instance modalities into one space and watch within-scene matching improve.

Each synthetic scene holds a handful of objects, each seen as an image crop (I),
a point cloud (P), a mesh (M) and one or more text referrals (R).  Every
modality is pulled towards the image embedding of the same object.  Before
training, matching an object's point cloud to its image inside the scene is
guesswork; afterwards it is close to perfect.

    python demos/01_instance_alignment.py
"""

import numpy as np

from crossalign import RunConfig, SynthSpec, embed, evaluate_embeddings, generate
from crossalign.instance_align import init_instance_params, train_instance_stage
from crossalign.numcore import ParamStore

ds = generate(SynthSpec(n_scenes=48, instances=(4, 8), seed=3))
val = ds.split("val")
print(f"{len(ds.scenes)} scenes, {sum(len(s.instances) for s in val)} objects in the {len(val)} validation scenes")

cfg = RunConfig(dim=32, heads=2, layers=1, batch_scenes=8, epochs={"instance": 10 ** 6},
                max_steps={"instance": 300}, restart_period=300)


def matching(store):
    table = evaluate_embeddings(val, embed(ds, store, cfg, "val"), instance_modalities="IPMR", scene_keys=())
    return {p: table.get(f"instance/{p}/all", "R@1") for p in ("P->I", "M->I", "R->I", "P->M")}


untrained = ParamStore()
init_instance_params(untrained, ds.dims, cfg, np.random.default_rng(0))
before = matching(untrained)

store, history = train_instance_stage(ds, cfg)
after = matching(store)
print(f"loss {history[0]['loss']:.3f} at the first step, {history[-1]['loss']:.3f} at the last")
print("within-scene top-1 matching   before   after")
for pair in before:
    print(f"  {pair:28s}{before[pair]:7.3f} {after[pair]:7.3f}")
# P->M never appears in the objective; it aligns because both sides align to I
