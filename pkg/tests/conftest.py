import numpy as np
import pytest

from crossalign.config import RunConfig
from crossalign.synthgen import SynthSpec, generate


def small_spec(**kw) -> SynthSpec:
    base = dict(n_scenes=6, instances=(2, 4), latent_dim=6,
                dims={"I": 8, "P": 8, "M": 8, "R": 8, "frame": 6}, frames_per_scene=4, seed=0)
    base.update(kw)
    return SynthSpec(**base)


def small_config(**kw) -> RunConfig:
    base = dict(dim=16, heads=2, layers=1, dropout=0.0, batch_scenes=4, referrals_per_scene=3, n_views=3,
                epochs={"instance": 1, "scene": 1, "unified": 1}, restart_period=50, seed=0)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def tiny_ds():
    return generate(small_spec())


@pytest.fixture
def tiny_cfg():
    return small_config()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_metric_fixture(rng, max_scenes=20, max_instances=10, dim=4):
    """Scenes plus an EmbeddingSet with missing entries, shared temporal groups and exact duplicate vectors."""
    from crossalign.datamodel import InstanceRecord, Location, Modality, SceneRecord
    from crossalign.metrics import EmbeddingSet

    n = int(rng.integers(1, max_scenes + 1))
    scene_cats = ["kitchen", "office", "bath"][:int(rng.integers(1, 4))]
    scenes, groups = [], {}
    for b in range(n):
        cat = str(rng.choice(scene_cats))
        # occasionally join an earlier group of the same category (a rescan)
        same = [g for g, c in groups.items() if c == cat]
        group = str(rng.choice(same)) if same and rng.random() < 0.3 else f"g{b}"
        groups[group] = cat
        insts = [InstanceRecord(f"o{j}", str(rng.choice(["chair", "table", "lamp"])), Location([0, 0, 0], [1, 1, 1]),
                                {Modality.IMAGE: np.zeros(1)})
                 for j in range(int(rng.integers(1, max_instances + 1)))]
        scenes.append(SceneRecord(f"s{b:02d}", cat, group, insts))
    pool = rng.normal(size=(6, dim))

    def vec():
        # one in four vectors is an exact copy from a small pool, which produces exact ties
        return pool[rng.integers(len(pool))].copy() if rng.random() < 0.25 else rng.normal(size=dim)

    emb = EmbeddingSet()
    for s in scenes:
        for m in "IPMR":
            d = {i.instance_id: vec() for i in s.instances if rng.random() < 0.8}
            if d:
                emb.instances[(s.scene_id, m)] = d
    for key in ("S", "R", "I", "F", "P"):
        d = {s.scene_id: vec() for s in scenes if rng.random() < 0.85}
        if d:
            emb.scenes[key] = d
    return scenes, emb


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
