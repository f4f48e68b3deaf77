"""Parameterised building blocks shared by the three training stages."""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .numcore import ParamStore, Tensor

MASK_LOGIT = -1e9


def init_linear(store: ParamStore, name: str, n_in: int, n_out: int, rng: np.random.Generator,
                scale: float = 1.0, bias: bool = True) -> None:
    store.add(f"{name}.W", rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)))
    if bias:
        store.add(f"{name}.b", np.zeros(n_out), decay=False)


def linear(store: ParamStore, name: str, x) -> Tensor:
    if f"{name}.b" not in store:
        return nc.matmul(x, store.var(f"{name}.W"))
    return nc.affine(x, store.var(f"{name}.W"), store.var(f"{name}.b"))


def init_layer_norm(store: ParamStore, name: str, n: int) -> None:
    store.add(f"{name}.g", np.ones(n), decay=False)
    store.add(f"{name}.b", np.zeros(n), decay=False)


def layer_norm(store: ParamStore, name: str, x) -> Tensor:
    return nc.layer_norm(x, store.var(f"{name}.g"), store.var(f"{name}.b"))


# ---------------------------------------------------------------------------
# projection head: Linear -> LayerNorm -> GELU -> Dropout -> Linear
# ---------------------------------------------------------------------------

def init_head(store: ParamStore, name: str, n_in: int, d: int, rng: np.random.Generator) -> None:
    init_linear(store, f"{name}.fc1", n_in, d, rng)
    init_layer_norm(store, f"{name}.ln", d)
    init_linear(store, f"{name}.fc2", d, d, rng)


def head(store: ParamStore, name: str, x, *, train: bool = False,
         rng: np.random.Generator | None = None, dropout: float = 0.1) -> Tensor:
    h = linear(store, f"{name}.fc1", x)
    h = nc.gelu(layer_norm(store, f"{name}.ln", h))
    h = nc.dropout(h, dropout, rng, train)
    return linear(store, f"{name}.fc2", h)


# ---------------------------------------------------------------------------
# pre-LN transformer encoder with an optional pairwise relation bias
# ---------------------------------------------------------------------------

def init_transformer(store: ParamStore, name: str, d: int, rng: np.random.Generator, *,
                     layers: int = 2, heads: int = 4, ffn: int | None = None,
                     relation_dim: int = 0) -> None:
    ffn = ffn or 2 * d
    for k in range(layers):
        p = f"{name}.l{k}"
        init_layer_norm(store, f"{p}.ln1", d)
        # key and relation intercepts would shift a whole softmax row, so they are left out
        for proj in ("q", "k", "v", "o"):
            init_linear(store, f"{p}.{proj}", d, d, rng, bias=proj != "k")
        init_layer_norm(store, f"{p}.ln2", d)
        init_linear(store, f"{p}.ff1", d, ffn, rng)
        init_linear(store, f"{p}.ff2", ffn, d, rng)
        if relation_dim:
            store.add(f"{p}.rel.W", rng.normal(0.0, 0.1, size=(relation_dim, heads)))
    init_layer_norm(store, f"{name}.ln_out", d)


def transformer_layers(store: ParamStore, name: str) -> int:
    k = 0
    while f"{name}.l{k}.q.W" in store:
        k += 1
    return k


def attention(store: ParamStore, p: str, x: Tensor, heads: int, key_bias: np.ndarray,
              relations: np.ndarray | None) -> Tensor:
    B, n, d = x.shape
    dh = d // heads

    def split(t):
        return nc.transpose(nc.reshape(t, (B, n, heads, dh)), (0, 2, 1, 3))

    q = split(linear(store, f"{p}.q", x))
    k = split(linear(store, f"{p}.k", x))
    v = split(linear(store, f"{p}.v", x))
    logits = nc.matmul(q, nc.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if relations is not None and f"{p}.rel.W" in store:
        bias = nc.matmul(relations, store.var(f"{p}.rel.W"))
        logits = logits + nc.transpose(bias, (0, 3, 1, 2))
    logits = logits + key_bias
    out = nc.matmul(nc.softmax(logits, axis=-1), v)
    out = nc.reshape(nc.transpose(out, (0, 2, 1, 3)), (B, n, d))
    return linear(store, f"{p}.o", out)


def transformer(store: ParamStore, name: str, tokens, key_mask: np.ndarray,
                relations: np.ndarray | None = None, heads: int = 4) -> Tensor:
    """Encode padded token batches ``B x n x d``; ``key_mask`` marks real tokens.

    ``relations`` (``B x n x n x r``) feeds a per-layer linear map to one
    additive logit per head; without it this is plain self-attention.
    """
    x = nc.as_tensor(tokens)
    key_bias = np.where(key_mask, 0.0, MASK_LOGIT)[:, None, None, :]
    for k in range(transformer_layers(store, name)):
        p = f"{name}.l{k}"
        x = x + attention(store, p, layer_norm(store, f"{p}.ln1", x), heads, key_bias, relations)
        h = nc.gelu(linear(store, f"{p}.ff1", layer_norm(store, f"{p}.ln2", x)))
        x = x + linear(store, f"{p}.ff2", h)
    return layer_norm(store, f"{name}.ln_out", x)
