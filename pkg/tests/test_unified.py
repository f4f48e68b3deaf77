import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from crossalign import layers
from crossalign.datamodel import Modality, SceneRecord
from crossalign.errors import ContractError, InputError, MissingModalityError
from crossalign.numcore import ParamStore
from crossalign.training import StageRunner
from crossalign.unified import (encode_1d, encode_2d, encode_3d, encode_floorplan, encode_scenes, encode_voxels,
                                init_unified_params, loss_weights, sample_referrals, unified_terms, voxelize)

from conftest import small_config

points = hnp.arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)), elements=st.floats(-5, 5))


@pytest.fixture
def uni(tiny_ds):
    cfg = small_config()
    store = ParamStore()
    init_unified_params(store, tiny_ds.dims, cfg, np.random.default_rng(0))
    return tiny_ds, cfg, store


# --- voxelisation --------------------------------------------------------------

def test_voxel_examples():
    pts = [(0.1, 0.1, 0.1), (0.9, 0.9, 0.9)]
    assert voxelize(pts, 1.0).m0 == 1
    assert voxelize(pts, 0.5).m0 == 2
    g = voxelize([(0.3, 1.2, -0.4)], 1.0)
    assert g.m0 == 1 and np.array_equal(g.coords[0], [0, 1, -1])
    assert np.allclose(g.offsets[0], np.array([0.3, 1.2, -0.4]) - [0.5, 1.5, -0.5], atol=1e-15, rtol=0)
    assert g.counts[0] == 1


def test_voxelize_errors():
    with pytest.raises(InputError):
        voxelize([(0.0, np.nan, 0.0)], 0.1)
    with pytest.raises(InputError):
        voxelize(np.zeros((0, 3)), 0.1)
    with pytest.raises(InputError):
        voxelize([(0, 0, 0)], 0.0)


@settings(max_examples=60, deadline=None)
@given(points, st.sampled_from([0.25, 0.5, 1.0]))
def test_every_point_in_exactly_one_voxel(pts, size):
    g = voxelize(pts, size)
    assert g.counts.sum() == len(pts) and g.m0 >= 1
    assert len({tuple(c) for c in g.coords}) == g.m0
    assert np.all(np.abs(g.offsets) <= size / 2 + 1e-12)


@settings(max_examples=40, deadline=None)
@given(points, st.integers(0, 2 ** 31))
def test_encode_3d_permutation_invariant(pts, seed):
    cfg = small_config()
    store = ParamStore()
    init_unified_params(store, {"R": 4, "frame": 3}, cfg, np.random.default_rng(1))
    perm = np.random.default_rng(seed).permutation(len(pts))
    assert np.array_equal(encode_3d(store, pts, cfg), encode_3d(store, pts[perm], cfg))


@settings(max_examples=40, deadline=None)
@given(points)
def test_duplicating_points_changes_only_counts(pts):
    a, b = voxelize(pts, 0.5), voxelize(np.concatenate([pts, pts]), 0.5)
    assert np.array_equal(a.coords, b.coords)
    assert np.allclose(a.offsets, b.offsets, atol=1e-12, rtol=0)
    assert np.array_equal(b.counts, 2 * a.counts)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.int64, st.tuples(st.integers(1, 30), st.just(3)), elements=st.integers(-64, 64)),
       hnp.arrays(np.int64, 3, elements=st.integers(-8, 8)))
def test_grid_shift_by_whole_voxels(grid_pts, shift):
    # dyadic coordinates keep the shift exact in floating point
    size = 0.25
    pts = grid_pts / 16.0
    moved = pts + shift * size
    a, b = voxelize(pts, size), voxelize(moved, size)
    assert np.array_equal(a.coords + shift, b.coords)
    assert np.array_equal(a.features(), b.features())
    cfg = small_config()
    store = ParamStore()
    init_unified_params(store, {"R": 4, "frame": 3}, cfg, np.random.default_rng(2))
    assert np.array_equal(encode_voxels(store, [a]).data, encode_voxels(store, [b]).data)


# --- 1D / 2D encoders --------------------------------------------------------

def test_referral_sampling_examples(uni):
    ds, cfg, store = uni
    scene = ds.scenes[0]
    v = scene.referrals[:1]
    scene.referrals = v
    single = layers.head(store, "uni.head1D", v).data[0]
    assert np.allclose(encode_1d(store, scene, cfg), single, atol=1e-14, rtol=0)
    scene.referrals = np.repeat(v, 20, axis=0)
    assert np.allclose(encode_1d(store, scene, small_config(referrals_per_scene=10)), single, atol=1e-14, rtol=0)


def test_full_sample_independent_of_seed(uni):
    ds, cfg, store = uni
    scene = ds.scenes[0]
    cfg = small_config(referrals_per_scene=len(scene.referrals), n_views=len(scene.frames))
    assert np.array_equal(encode_1d(store, scene, cfg, seed=1), encode_1d(store, scene, cfg, seed=99))
    assert np.array_equal(sample_referrals(scene.referrals, 100, 5), scene.referrals)


def test_2d_single_and_identical_frames(uni):
    ds, cfg, store = uni
    scene = ds.scenes[0]
    frames = scene.frames
    frames.cls, frames.patch, frames.poses = frames.cls[:1], frames.patch[:1], frames.poses[:1]
    single = encode_2d(store, scene, cfg)
    assert np.array_equal(single, layers.head(store, "uni.head2D", frames.features()).data[0])
    frames.cls, frames.patch = np.repeat(frames.cls, 5, 0), np.repeat(frames.patch, 5, 0)
    frames.poses = np.repeat(frames.poses, 5, 0)
    assert np.allclose(encode_2d(store, scene, small_config(n_views=5)), single, atol=1e-14, rtol=0)


def test_floorplan_shares_2d_weights(uni):
    ds, cfg, store = uni
    scene = ds.scenes[0]
    f = scene.frames
    f.cls, f.patch, f.poses = f.cls[:1], f.patch[:1], f.poses[:1]
    scene.floorplan = f.features()[0].copy()
    assert np.array_equal(encode_floorplan(store, scene, cfg), encode_2d(store, scene, cfg))


def test_encode_scenes_skips_missing(uni):
    ds, cfg, store = uni
    ds.scenes[0].points = None
    out = encode_scenes(store, ds.scenes, Modality.POINTCLOUD, cfg)
    assert ds.scenes[0].scene_id not in out and len(out) == len(ds.scenes) - 1
    with pytest.raises(MissingModalityError):
        sample_referrals(np.zeros((0, 8)), 3, 0)


# --- objective ---------------------------------------------------------------

def test_loss_weights_positive_and_sum_three(uni):
    _, _, store = uni
    for logits in ([0, 0, 0], [5.0, -3.0, 0.2], [-40, 40, 0]):
        store["uni.loss_logits"][:] = logits
        w = loss_weights(store).data
        assert np.all(w > 0) and abs(w.sum() - 3) < 1e-12


def test_masked_scene_contributes_alpha_beta_only(uni):
    ds, cfg, store = uni
    scenes = ds.scenes[:3]
    for s in scenes:
        s.points = None
    T = np.random.default_rng(0).normal(size=(3, cfg.dim))
    _, terms = unified_terms(store, scenes, T, cfg)
    assert set(terms) == {"1D", "2D", "2D-floorplan"}


def test_fully_masked_batch_leaves_params_unchanged(uni):
    ds, cfg, store = uni
    scenes = [SceneRecord(s.scene_id, s.category, s.temporal_group, s.instances) for s in ds.scenes]
    before = store.copy()
    T = np.zeros((len(scenes), cfg.dim))
    runner = StageRunner("unified", small_config(epochs={"unified": 2}))
    hist = runner.run(store, "uni.", scenes, lambda b, rng: unified_terms(store, b, T[:len(b)], cfg, rng=rng))
    assert hist == []
    for k in before.names():
        assert np.array_equal(before[k], store[k])


def test_upstream_trainable_is_contract_error(uni):
    ds, cfg, store = uni
    with pytest.raises(ContractError):
        StageRunner("unified", cfg).run(store, "uni.", ds.scenes, lambda b, r: None, trainable=("uni.", "inst."))


def test_schedule_reaching_zero_rate_skips_the_update(uni):
    ds, cfg, store = uni
    T = np.zeros((len(ds.scenes), cfg.dim))
    run_cfg = small_config(epochs={"unified": 1}, batch_scenes=1, restart_period=1, lr_min=0.0)
    seen = []

    def loss_fn(b, rng):
        seen.append(store.copy())
        return unified_terms(store, b, T[:len(b)], cfg, rng=rng)

    hist = StageRunner("unified", run_cfg).run(store, "uni.", ds.split("train")[:3], loss_fn)
    assert [r["lr"] for r in hist] == [run_cfg.lr, 0.0, run_cfg.lr]
    for k in seen[1].names():
        assert np.array_equal(seen[1][k], seen[2][k])
