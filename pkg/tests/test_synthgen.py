import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossalign.datamodel import INSTANCE_PAIRS, Modality, availability
from crossalign.errors import SpecError
from crossalign.metrics import EmbeddingSet
from crossalign.synthgen import (SynthSpec, brute_force_oracle, disjoint_chunks, generate, least_squares_alignment,
                                 split_disjoint_pairs)

from conftest import small_spec


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10_000))
def test_generation_is_deterministic(seed):
    spec = small_spec(seed=seed, temporal_fraction=0.5, missing={"I-P": 0.3})
    assert generate(spec) == generate(small_spec(seed=seed, temporal_fraction=0.5, missing={"I-P": 0.3}))


def test_different_seeds_differ():
    assert generate(small_spec(seed=1)) != generate(small_spec(seed=2))


def test_missing_probability_one_removes_pair():
    ds = generate(small_spec(n_scenes=10, missing={"I-M": 1.0}))
    mask = availability(ds)
    assert not any(mask.available(k, "I", "M") for k in mask.pairs)
    assert all(i.has(Modality.IMAGE) for s in ds.scenes for i in s.instances)


def test_spec_errors():
    for bad in (dict(instances=(0, 3)), dict(noise={"I": -0.1}), dict(missing={"I-P": 1.5}),
                dict(missing={"P-I": 0.5}), dict(n_scenes=0), dict(dims={"I": 0})):
        with pytest.raises(SpecError):
            generate(small_spec(**bad))


def test_temporal_rescans_share_group_and_split():
    ds = generate(small_spec(n_scenes=20, temporal_fraction=1.0))
    rescans = [s for s in ds.scenes if s.scene_id.endswith("_r1")]
    assert len(rescans) == 20
    for r in rescans:
        orig = ds.scene(r.scene_id[:-3])
        assert r.temporal_group == orig.temporal_group and r.category == orig.category
        assert ds.splits[r.scene_id] == ds.splits[orig.scene_id]


@pytest.mark.parametrize("fractions", [(0.5, 0.5), (0.25, 0.75), (0.75, 0.25), (0.3, 0.3)])
def test_disjoint_chunks(fractions):
    ds = generate(small_spec(n_scenes=41))
    n = len(ds.split("train"))
    a, b = disjoint_chunks(ds, fractions, seed=3)
    assert not set(a) & set(b)
    assert abs(len(a) - fractions[0] * n) <= 1 and abs(len(b) - fractions[1] * n) <= 1
    if sum(fractions) == 1.0:
        assert sorted(a + b) == sorted(s.scene_id for s in ds.split("train"))


def test_full_full_sees_everything_and_empty_chunk_fails():
    ds = generate(small_spec(n_scenes=8))
    a, b = disjoint_chunks(ds, (1, 1))
    assert a == b == sorted(s.scene_id for s in ds.split("train"))
    with pytest.raises(SpecError):
        disjoint_chunks(ds, (0.0, 1.0))
    with pytest.raises(SpecError):
        disjoint_chunks(ds, (0.7, 0.7))


def test_split_disjoint_pairs_never_leaks():
    ds = generate(small_spec(n_scenes=24))
    out = split_disjoint_pairs(ds, (0.5, 0.5), seed=0)
    for s in out.split("train"):
        has_p = any(i.has(Modality.POINTCLOUD) for i in s.instances)
        has_m = any(i.has(Modality.MESH) for i in s.instances)
        assert not (has_p and has_m)
    assert [s.scene_id for s in out.split("val")] == [s.scene_id for s in ds.split("val")]
    assert out.split("val") == ds.split("val")


def _linear_embeddings(ds, maps):
    emb = EmbeddingSet()
    for s in ds.split("val"):
        for m, W in maps.items():
            d = {}
            for i in s.instances:
                if m in i.feats:
                    x = i.feats[m].mean(axis=0) if m is Modality.REFERRAL else i.feats[m]
                    d[i.instance_id] = x @ W
            emb.instances[(s.scene_id, m.value)] = d
    return emb


def test_noiseless_admits_exact_linear_alignment():
    spec = small_spec(n_scenes=40, noise=dict.fromkeys(["I", "P", "M", "R", "frame"], 0.0))
    ds = generate(spec)
    table = brute_force_oracle(ds.split("val"), _linear_embeddings(ds, least_squares_alignment(ds)))
    for a, b in INSTANCE_PAIRS:
        assert table.get(f"instance/{a.value}->{b.value}/all", "R@1") == 1.0


def test_oracle_perfect_embeddings():
    ds = generate(small_spec(n_scenes=10))
    emb = EmbeddingSet()
    rng = np.random.default_rng(0)
    for s in ds.scenes:
        v = {i.instance_id: rng.normal(size=5) for i in s.instances}
        for m in "IP":
            emb.instances[(s.scene_id, m)] = v
    shared = {s.scene_id: rng.normal(size=5) for s in ds.scenes}
    emb.scenes = {"R": shared, "P": shared}
    t = brute_force_oracle(ds.scenes, emb, instance_modalities=("I", "P"), scene_keys=("R", "P"))
    assert t.get("instance/I->P/all", "R@1") == 1.0
    assert t.get("scene/R->P/matching", "R@1") == 1.0


def test_oracle_random_embeddings_at_chance():
    n, trials, hits = 20, 60, 0
    ds = generate(small_spec(n_scenes=n, val_fraction=0.0))
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        emb = EmbeddingSet(scenes={k: {s.scene_id: rng.normal(size=8) for s in ds.scenes} for k in "RP"})
        t = brute_force_oracle(ds.scenes, emb, instance_modalities=(), scene_keys=("R", "P"))
        hits += round(t.get("scene/R->P/matching", "R@1") * n)
    total = n * trials
    p = 1 / n
    assert abs(hits / total - p) <= 3 * np.sqrt(p * (1 - p) / total)
