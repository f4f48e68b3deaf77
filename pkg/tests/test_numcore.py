import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from crossalign import numcore as nc
from crossalign.errors import ContractError, DimensionError, FormatError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def leaf_grad(fn, *arrays):
    """Gradient of fn(*leaves) w.r.t. each array via a fresh tape."""
    with nc.Tape() as tape:
        leaves = [tape.variable(f"x{i}", a) for i, a in enumerate(arrays)]
        loss = fn(*leaves)
    g = nc.backward(tape, loss)
    return [g[f"x{i}"] for i in range(len(arrays))]


def numeric_grad(fn, *arrays, h=1e-5):
    arrays = [np.array(a, dtype=float) for a in arrays]
    res = nc.finite_difference_grad(lambda: float(fn(*arrays).data), arrays, h)
    return [d.reshape(a.shape) for (_, d), a in zip(res, arrays)]


def assert_grad_close(fn, *arrays, tol=1e-6):
    ana = leaf_grad(fn, *arrays)
    num = numeric_grad(fn, *arrays)
    for a, n in zip(ana, num):
        scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
        assert np.abs(a - n).max() / scale < tol


# --- affine -----------------------------------------------------------------

def test_affine_identity():
    assert np.array_equal(nc.affine([[1.0, 2.0]], np.eye(2), [0.0, 0.0]).data, [[1, 2]])


def test_affine_zero_input_gives_bias():
    W = np.random.default_rng(0).normal(size=(2, 2))
    assert np.array_equal(nc.affine([[0.0, 0.0]], W, [3.0, 4.0]).data, [[3, 4]])


def test_affine_hand_product():
    assert np.array_equal(nc.affine([[1.0, 1.0]], [[1.0, 2.0], [3.0, 4.0]], [0.0, 0.0]).data, [[4, 6]])


def test_affine_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        nc.affine(np.ones((1, 3)), np.ones((2, 2)), np.zeros(2))


# --- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_row():
    out = nc.layer_norm([[5.0, 5.0, 5.0]], np.ones(3), np.zeros(3)).data
    assert np.array_equal(out, [[0, 0, 0]])


def test_layer_norm_two_values():
    out = nc.layer_norm([[-1.0, 1.0]], np.ones(2), np.zeros(2), eps=1e-12).data
    assert np.allclose(out, [[-1, 1]], atol=1e-10)


def test_layer_norm_zero_gain_gives_bias():
    x = np.random.default_rng(1).normal(size=(3, 4))
    b = np.array([1.0, -2.0, 3.0, 0.5])
    assert np.array_equal(nc.layer_norm(x, np.zeros(4), b).data, np.tile(b, (3, 1)))


# --- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    assert np.allclose(nc.softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logits_stable():
    out = nc.softmax([1000.0, 0.0]).data
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_ln2():
    assert np.allclose(nc.softmax([math.log(2), 0.0]).data, [2 / 3, 1 / 3], atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = nc.softmax(x).data
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12, rtol=0)
    assert np.allclose(nc.softmax(x + c).data, s, atol=1e-12, rtol=0)


# --- backward -----------------------------------------------------------------

def test_backward_sum_gives_ones():
    (g,) = leaf_grad(lambda x: nc.sum(x), np.arange(5.0))
    assert np.array_equal(g, np.ones(5))


def test_backward_half_square():
    (g,) = leaf_grad(lambda x: nc.sum(x * x * 0.5), np.array(3.0))
    assert g == 3.0


def test_backward_rejects_non_scalar():
    with nc.Tape() as tape:
        x = tape.variable("x", np.ones(3))
        y = x * 2.0
    with pytest.raises(ContractError):
        nc.backward(tape, y)


def test_backward_reports_exactly_participating_params():
    store = nc.ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.ones(2))
    with nc.Tape() as tape:
        loss = nc.sum(store.var("a") * 3.0)
    g = nc.backward(tape, loss)
    assert set(g) == {"a"} and np.array_equal(g["a"], [3.0, 3.0])


PRIMITIVES = {
    "add": (lambda a, b: nc.sum(nc.add(a, b) * nc.add(a, b)), [(3, 4), (4,)]),
    "mul_div": (lambda a, b: nc.sum(nc.div(nc.mul(a, b), nc.exp(b))), [(3, 4), (3, 4)]),
    "exp_log": (lambda a: nc.sum(nc.log(nc.exp(a) + 1.0)), [(2, 5)]),
    "tanh_gelu": (lambda a: nc.sum(nc.tanh(a) * nc.gelu(a)), [(4, 3)]),
    "matmul": (lambda a, b: nc.sum(nc.tanh(nc.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    "affine": (lambda x, W, b: nc.sum(nc.tanh(nc.affine(x, W, b))), [(3, 4), (4, 2), (2,)]),
    "layer_norm": (lambda x, g, b: nc.sum(nc.tanh(nc.layer_norm(x, g, b))), [(3, 5), (5,), (5,)]),
    "softmax": (lambda x: nc.sum(nc.softmax(x) * np.arange(6.0)), [(2, 6)]),
    "logsumexp": (lambda x: nc.sum(nc.logsumexp(x, axis=1)), [(3, 4)]),
    "l2_normalize": (lambda x: nc.sum(nc.l2_normalize(x) * np.arange(4.0)), [(3, 4)]),
    "reshape_transpose": (lambda x: nc.sum(nc.tanh(nc.transpose(nc.reshape(x, (3, 2, 2)), (2, 0, 1)))
                                           * np.arange(12.0).reshape(2, 3, 2)), [(4, 3)]),
    "concat_take": (lambda a, b: nc.sum(nc.tanh(nc.take(nc.concat([a, b], axis=0), [0, 3, 3, 1]))), [(2, 3), (2, 3)]),
    "segment_mean_max": (lambda x: nc.sum(nc.tanh(nc.segment_mean(x, np.array([0, 2]), np.array([2, 3]))
                                                  + nc.segment_max(x, np.array([0, 2]), np.array([2, 3])))),
                         [(5, 3)]),
    "mean": (lambda x: nc.sum(nc.mean(nc.tanh(x), axis=0) * np.arange(3.0)), [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn, shapes = PRIMITIVES[name]
    rng = np.random.default_rng(abs(hash(name)) % 2 ** 32)
    for _ in range(5):
        arrays = [rng.normal(size=s) for s in shapes]
        assert_grad_close(fn, *arrays)


def test_dropout_inverted_scaling_and_eval_identity():
    x = np.ones((200, 50))
    rng = np.random.default_rng(0)
    y = nc.dropout(x, 0.1, rng, train=True).data
    assert set(np.unique(y)) <= {0.0, 1 / 0.9}
    assert abs(y.mean() - 1.0) < 0.02
    assert np.array_equal(nc.dropout(x, 0.1, rng, train=False).data, x)


# --- AdamW --------------------------------------------------------------------

def test_adamw_first_step_hand_value():
    ps = nc.ParamStore()
    ps.add("t", np.array(1.0))
    nc.adamw_step(ps, {"t": np.array(1.0)}, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0)
    # m_hat = v_hat = 1 after bias correction
    assert ps["t"] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert ps["t"] == pytest.approx(0.9, abs=1e-8)
    assert ps.t["t"] == 1


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.integers(1, 6), elements=finite), st.integers(1, 5))
def test_adamw_zero_grad_no_decay_is_noop(theta, steps):
    ps = nc.ParamStore()
    ps.add("p", theta)
    for _ in range(steps):
        nc.adamw_step(ps, {"p": np.zeros_like(theta)}, lr=0.01, weight_decay=0.0)
    assert np.array_equal(ps["p"], theta)


def test_adamw_decoupled_decay():
    ps = nc.ParamStore()
    ps.add("p", np.array([2.0, -4.0]))
    nc.adamw_step(ps, {"p": np.zeros(2)}, lr=0.1, weight_decay=0.05)
    assert np.allclose(ps["p"], np.array([2.0, -4.0]) * (1 - 0.1 * 0.05), atol=1e-15)


def test_adamw_skips_no_decay_params():
    ps = nc.ParamStore()
    ps.add("b", np.array([2.0]), decay=False)
    nc.adamw_step(ps, {"b": np.zeros(1)}, lr=0.1, weight_decay=0.5)
    assert ps["b"][0] == 2.0


def test_adamw_shape_mismatch():
    ps = nc.ParamStore()
    ps.add("p", np.zeros(3))
    with pytest.raises(ContractError):
        nc.adamw_step(ps, {"p": np.zeros(2)}, lr=0.1)


def test_adamw_deterministic():
    def run():
        ps = nc.ParamStore()
        rng = np.random.default_rng(3)
        ps.add("p", rng.normal(size=(4, 4)))
        for _ in range(20):
            nc.adamw_step(ps, {"p": rng.normal(size=(4, 4))}, lr=1e-2)
        return ps["p"]
    assert np.array_equal(run(), run())


# --- schedule -----------------------------------------------------------------

def test_cosine_endpoints():
    assert nc.cosine_restart_lr(0, 100, 1e-3, 1e-5) == 1e-3
    assert nc.cosine_restart_lr(100, 100, 1e-3, 1e-5) == pytest.approx(1e-5, abs=1e-18)
    assert nc.cosine_restart_lr(50, 100, 1e-3, 0.0) == pytest.approx(5e-4, abs=1e-18)


def test_cosine_restarts_and_mult():
    assert nc.cosine_restart_lr(101, 100, 1.0) == 1.0
    assert nc.cosine_restart_lr(101 + 200, 100, 1.0, 0.0, mult=2.0) == pytest.approx(0.0, abs=1e-15)
    assert nc.cosine_restart_lr(101 + 201, 100, 1.0, 0.0, mult=2.0) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 5000), st.integers(1, 300), st.floats(1.0, 3.0))
def test_cosine_bounded(step, period, mult):
    lr = nc.cosine_restart_lr(step, period, 1e-3, 1e-4, mult)
    assert 1e-4 - 1e-18 <= lr <= 1e-3 + 1e-18


# --- checkpoint ---------------------------------------------------------------

def test_checkpoint_round_trip_and_layout(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(3.5), "ü": np.array([1e-300, -0.0])}
    p = tmp_path / "x.ck"
    nc.save_checkpoint(p, tensors)
    back = nc.load_checkpoint(p)
    assert list(back) == ["a", "b", "ü"]
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes() and back[k].shape == v.shape
    raw = p.read_bytes()
    assert raw[:8] == b"CROSSCK1" and int.from_bytes(raw[8:12], "little") == 1
    # size accounting: header + per entry (4 + name + 4 + 8*rank + 8*count)
    expect = 12 + sum(4 + len(k.encode()) + 4 + 8 * v.ndim + 8 * v.size for k, v in tensors.items())
    assert len(raw) == expect


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.ck"
    p.write_bytes(b"NOTMAGIC" + b"\0" * 8)
    with pytest.raises(FormatError):
        nc.load_checkpoint(p)


def test_checkpoint_truncated(tmp_path):
    p = tmp_path / "t.ck"
    nc.save_checkpoint(p, {"w": np.ones((3, 3))})
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError):
        nc.load_checkpoint(p)


def test_paramstore_state_round_trip():
    ps = nc.ParamStore()
    ps.add("w", np.ones((2, 2)))
    ps.add("b", np.zeros(2), decay=False)
    nc.adamw_step(ps, {"w": np.ones((2, 2)), "b": np.ones(2)}, lr=0.1)
    back = nc.ParamStore.from_state_dict(ps.state_dict())
    assert back.no_decay == {"b"} and back.t == ps.t
    for k in ps.values:
        assert np.array_equal(back[k], ps[k]) and np.array_equal(back.m[k], ps.m[k])
