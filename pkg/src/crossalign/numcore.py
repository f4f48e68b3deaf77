"""Float64 tensors with tape-based reverse-mode gradients, AdamW, LR schedule.

Forward ops record onto the innermost active :class:`Tape`; outside a tape
they run as plain numpy (the evaluation fast path).  ``backward`` replays a
tape in reverse and returns a gradient map keyed by parameter name.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError

_TAPES: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of primitive applications for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.params: dict[str, Tensor] = {}

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def variable(self, name: str, data) -> Tensor:
        """Leaf that receives a gradient; repeated requests share one leaf."""
        leaf = self.params.get(name)
        if leaf is None:
            leaf = Tensor(data, requires_grad=True, name=name)
            self.params[name] = leaf
        return leaf


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = active_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(out)
    node = Tensor(out, tuple(parents), backward_fn, requires_grad=True)
    tape.nodes.append(node)
    return node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)

    return _record(out, (a, b), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, so gradient checks stay clean)."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _record(out, (a,), bw)


def dropout(a, rate: float, rng: np.random.Generator | None, train: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is zero."""
    if not train or rate <= 0.0 or rng is None:
        return as_tensor(a)
    keep = (rng.random(as_tensor(a).shape) >= rate).astype(np.float64) / (1.0 - rate)
    return mul(a, keep)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return _record(out, ts, bw)


def take(a, index, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (repeated indices accumulate in the gradient)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        gg = g if index.ndim == 0 else np.moveaxis(g, axis, 0)
        np.add.at(np.moveaxis(full, axis, 0), index, gg)
        return (full,)

    return _record(out, (a,), bw)


def segment_mean(a, starts: np.ndarray, counts: np.ndarray) -> Tensor:
    """Mean over contiguous row segments ``[starts[s], starts[s]+counts[s])``."""
    a = as_tensor(a)
    counts = np.asarray(counts)
    seg = np.repeat(np.arange(len(counts)), counts)
    out = np.add.reduceat(a.data, starts, axis=0) / counts[:, None]

    def bw(g):
        return ((g / counts[:, None])[seg],)

    return _record(out, (a,), bw)


def segment_max(a, starts: np.ndarray, counts: np.ndarray) -> Tensor:
    """Column-wise max over contiguous row segments; gradient goes to the first argmax."""
    a = as_tensor(a)
    out = np.maximum.reduceat(a.data, starts, axis=0)

    def bw(g):
        full = np.zeros_like(a.data)
        cols = np.arange(a.shape[1])
        for s, (st, n) in enumerate(zip(starts, counts)):
            rows = st + np.argmax(a.data[st:st + n], axis=0)
            full[rows, cols] += g[s]
        return (full,)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and fused layers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw)


def affine(x, W, b) -> Tensor:
    """``x @ W + b`` over the last axis of ``x`` (any number of leading axes)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(
            f"affine shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    n, m = W.shape
    out = x.data @ W.data + b.data

    def bw(g):
        g2 = g.reshape(-1, m)
        gx = (g @ W.data.T) if x.requires_grad else None
        gW = (x.data.reshape(-1, n).T @ g2) if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _record(out, (x, W, b), bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Standardise the last axis (population variance), then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.shape[-1] != gain.shape[-1] or gain.shape != bias.shape:
        raise DimensionError(
            f"layer_norm shape mismatch: x{x.shape} gain{gain.shape} bias{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data
    n = x.shape[-1]

    def bw(g):
        gx = ggain = gbias = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            ggain = (g * xhat).reshape(-1, n).sum(axis=0)
        if bias.requires_grad:
            gbias = g.reshape(-1, n).sum(axis=0)
        return gx, ggain, gbias

    return _record(out, (x, gain, bias), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bw)


def logsumexp(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def bw(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _record(out, (x,), bw)


def l2_normalize(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    norm = np.maximum(np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True)), 1e-12)
    out = x.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    """Replay ``tape`` in reverse from scalar ``loss``.

    Every variable registered on the tape gets an entry (zeros if it did not
    reach the loss); nothing else does.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError(f"loss must be a scalar tensor, got shape {np.shape(getattr(loss, 'data', loss))}")
    if not loss.requires_grad:
        raise ContractError("loss was not produced on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            grads[k] = grads[k] + pg if k in grads else pg
    out = {}
    for name, leaf in tape.params.items():
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        out[name] = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return out


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------

class ParamStore:
    """Named trainable arrays plus AdamW moments and per-parameter step counts."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}
        self.no_decay: set[str] = set()
        self.trainable: tuple[str, ...] | None = None

    def add(self, name: str, value, decay: bool = True) -> None:
        if name in self.values:
            raise ContractError(f"parameter {name!r} already exists")
        self.values[name] = np.array(value, dtype=np.float64)
        if not decay:
            self.no_decay.add(name)

    def __contains__(self, name):
        return name in self.values

    def __getitem__(self, name) -> np.ndarray:
        return self.values[name]

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def is_trainable(self, name: str) -> bool:
        return self.trainable is None or name.startswith(self.trainable)

    def var(self, name: str) -> Tensor:
        """The parameter as a tensor: a tape leaf if trainable and a tape is active."""
        tape = active_tape()
        if tape is not None and self.is_trainable(name):
            return tape.variable(name, self.values[name])
        return Tensor(self.values[name])

    def copy(self) -> "ParamStore":
        new = ParamStore()
        new.values = {k: v.copy() for k, v in self.values.items()}
        new.m = {k: v.copy() for k, v in self.m.items()}
        new.v = {k: v.copy() for k, v in self.v.items()}
        new.t = dict(self.t)
        new.no_decay = set(self.no_decay)
        new.trainable = self.trainable
        return new

    def update(self, other: "ParamStore") -> None:
        for k, v in other.values.items():
            self.values[k] = v.copy()
        self.no_decay |= other.no_decay

    def state_dict(self, optimizer: bool = True) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.values.items()}
        out.update({f"nodecay/{k}": np.zeros(()) for k in self.no_decay})
        if optimizer:
            out.update({f"adam.m/{k}": v for k, v in self.m.items()})
            out.update({f"adam.v/{k}": v for k, v in self.v.items()})
            out.update({f"adam.t/{k}": np.array(float(v)) for k, v in self.t.items()})
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "ParamStore":
        ps = cls()
        for key, arr in state.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                ps.values[name] = np.array(arr, dtype=np.float64)
            elif kind == "nodecay":
                ps.no_decay.add(name)
            elif kind == "adam.m":
                ps.m[name] = np.array(arr, dtype=np.float64)
            elif kind == "adam.v":
                ps.v[name] = np.array(arr, dtype=np.float64)
            elif kind == "adam.t":
                ps.t[name] = int(arr)
        return ps


def adamw_step(params: ParamStore, grads: dict[str, np.ndarray], lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
               weight_decay: float = 0.05) -> None:
    """In-place AdamW update (decoupled decay, bias-corrected moments)."""
    if lr <= 0 or not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ContractError(f"invalid AdamW hyper-parameters lr={lr} betas=({beta1}, {beta2})")
    for name, g in grads.items():
        p = params.values[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = params.m.get(name)
        if m is None:
            m = params.m[name] = np.zeros_like(p)
            params.v[name] = np.zeros_like(p)
        v = params.v[name]
        t = params.t.get(name, 0) + 1
        params.t[name] = t
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        if weight_decay and name not in params.no_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_restart_lr(step: int, period: int, lr_max: float, lr_min: float = 0.0,
                      mult: float = 1.0) -> float:
    """Cosine annealing with warm restarts.

    Cycle ``i`` lasts ``T_i + 1`` steps with ``T_i = round(period * mult**i)``:
    the rate starts at ``lr_max``, reaches ``lr_min`` at ``t_cur == T_i`` and
    restarts on the following step.
    """
    if period < 1 or not lr_max >= lr_min >= 0 or mult < 1:
        raise ContractError("cosine_restart_lr needs period>=1, lr_max>=lr_min>=0, mult>=1")
    t_cur, i = step, 0
    while True:
        T_i = max(1, int(round(period * mult ** i)))
        if t_cur <= T_i:
            break
        t_cur -= T_i + 1
        i += 1
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t_cur / T_i))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CROSSCK1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays, sorted by name, little-endian."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name in sorted(tensors):
        arr = np.array(tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:8]!r}")
    (version,) = struct.unpack_from("<I", buf, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    pos, out = 12, {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 8 * count > len(buf):
                raise FormatError(f"{path}: truncated payload for {name}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    return out


def finite_difference_grad(f: Callable[[], float], arrays: Iterable[np.ndarray],
                           h: float = 1e-5, index_sample: int | None = None,
                           rng: np.random.Generator | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Central differences of scalar ``f`` w.r.t. entries of each array (mutated in place).

    Returns ``(flat_indices, derivatives)`` per array; ``index_sample`` limits
    the number of probed entries per array.
    """
    results = []
    for arr in arrays:
        flat = arr.reshape(-1)
        idx = np.arange(flat.size)
        if index_sample is not None and flat.size > index_sample:
            idx = np.sort((rng or np.random.default_rng(0)).choice(flat.size, index_sample, replace=False))
        d = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = f()
            flat[i] = old - h
            fm = f()
            flat[i] = old
            d[j] = (fp - fm) / (2 * h)
        results.append((idx, d))
    return results


def gradient_check(store: "ParamStore", loss_fn: Callable[[], Tensor], h: float = 1e-5,
                   sample: int | None = 6, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients, per parameter tensor.

    ``loss_fn`` must be deterministic (seed any dropout inside it).  The error
    for a tensor is max |analytic - numeric| over probed entries divided by
    the largest gradient magnitude of that tensor, so entries whose true
    gradient is ~0 do not blow up the ratio.
    """
    rng = rng or np.random.default_rng(0)
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss)
    out = {}
    for name, g in grads.items():
        (idx, num), = finite_difference_grad(lambda: float(loss_fn().data), [store.values[name]], h, sample, rng)
        ana = g.reshape(-1)[idx]
        scale = max(np.abs(g).max(), np.abs(num).max(), 1e-12)
        out[name] = float(np.abs(ana - num).max() / scale)
    return out
