import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossalign.errors import InputError
from crossalign.viewsample import canonical_poses, farthest_pose_sample, uniform_stride_sample


def random_poses(rng, n):
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return np.concatenate([q, rng.uniform(-3, 3, size=(n, 3))], axis=1)


def greedy_is_optimal(poses, chosen, weight=1.0):
    P = canonical_poses(poses)
    P[:, :4] *= weight
    for t in range(1, len(chosen)):
        prefix = chosen[:t]
        def score(c):
            return min(np.linalg.norm(P[c] - P[p]) for p in prefix)
        rest = [c for c in range(len(P)) if c not in prefix]
        best = max(score(c) for c in rest)
        if score(chosen[t]) != best or chosen[t] != min(c for c in rest if score(c) == best):
            return False
    return True


def test_hand_example():
    poses = [[1, 0, 0, 0, x, 0, 0] for x in (0.0, 1.0, 10.0)]
    assert farthest_pose_sample(poses, 2, start=0) == [0, 2]


def test_n_one_and_n_all():
    rng = np.random.default_rng(0)
    P = random_poses(rng, 7)
    first = farthest_pose_sample(P, 1, seed=3)
    assert len(first) == 1 and first[0] == int(np.random.default_rng(3).integers(7))
    full = farthest_pose_sample(P, 20, seed=3)
    assert sorted(full) == list(range(7)) and full[0] == first[0]


@pytest.mark.parametrize("n", range(1, 51, 7))
def test_greedy_optimal_exhaustive(n):
    rng = np.random.default_rng(n)
    P = random_poses(rng, n)
    for seed in range(3):
        chosen = farthest_pose_sample(P, n, seed=seed)
        assert len(set(chosen)) == len(chosen) == n
        assert greedy_is_optimal(P, chosen)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 30), st.integers(1, 12))
def test_sign_invariance_and_determinism(seed, count, n):
    rng = np.random.default_rng(seed)
    P = random_poses(rng, count)
    flip = P.copy()
    mask = rng.random(count) < 0.5
    flip[mask, :4] *= -1
    a = farthest_pose_sample(P, n, seed=seed)
    assert a == farthest_pose_sample(flip, n, seed=seed)
    assert a == farthest_pose_sample(P.copy(), n, seed=seed)


def test_sign_invariance_with_zero_scalar_part():
    P = np.array([[0, 0, 1, 0, 0, 0, 0], [0, 0, -1, 0, 0, 0, 0], [0, 1, 0, 0, 1, 0, 0]], dtype=float)
    c = canonical_poses(P)
    assert np.array_equal(c[0], c[1])


def test_ties_go_to_lowest_index():
    poses = [[1, 0, 0, 0, 0, 0, 0], [1, 0, 0, 0, 1, 0, 0], [1, 0, 0, 0, -1, 0, 0]]
    assert farthest_pose_sample(poses, 2, start=0) == [0, 1]


def test_rotation_weight_changes_geometry():
    poses = [[1, 0, 0, 0, 0, 0, 0], [0, 1, 0, 0, 0.5, 0, 0], [1, 0, 0, 0, 1.0, 0, 0]]
    assert farthest_pose_sample(poses, 2, start=0) == [0, 1]
    assert farthest_pose_sample(poses, 2, start=0, rotation_weight=0.0) == [0, 2]


def test_errors():
    with pytest.raises(InputError):
        farthest_pose_sample(np.zeros((0, 7)), 1)
    with pytest.raises(InputError):
        farthest_pose_sample([[1, 0, 0, 0, 0, 0, 0]], 0)


def test_uniform_stride():
    assert uniform_stride_sample(10, 3) == [0, 4, 9]
    assert uniform_stride_sample(3, 10) == [0, 1, 2]
