"""InfoNCE with learnable temperature, its symmetric form, and the composite objectives."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .datamodel import Modality, modality
from .errors import ContractError, NoTermsError
from .numcore import ParamStore, Tensor

BASE_PAIRS = {
    m: tuple((m, o) for o in (Modality.POINTCLOUD, Modality.MESH, Modality.REFERRAL, Modality.IMAGE) if o is not m)
    for m in (Modality.IMAGE, Modality.POINTCLOUD, Modality.MESH, Modality.REFERRAL)
}
ALL_PAIRS = tuple(itertools.combinations(
    (Modality.IMAGE, Modality.POINTCLOUD, Modality.MESH, Modality.REFERRAL), 2))


def init_temperature(store: ParamStore, name: str, tau: float = 0.07) -> None:
    store.add(name, np.array(np.log(tau)), decay=False)


def temperature(store: ParamStore, name: str) -> Tensor:
    """tau = exp(rho), so it stays positive whatever rho does."""
    return nc.exp(store.var(name))


@dataclass
class PairBatch:
    q: object
    k: object
    mask: np.ndarray | None = None


def info_nce(q, k, tau, mask: np.ndarray | None = None, normalize: bool = True) -> Tensor:
    """Mean over unmasked anchors i of -log softmax_j(q_i.k_j / tau)[i].

    Masked rows are dropped before anything else, so they are neither anchors
    nor negatives and the value equals the loss of the filtered sub-batch.
    """
    q, k = nc.as_tensor(q), nc.as_tensor(k)
    if q.shape != k.shape or q.ndim != 2:
        raise ContractError(f"q and k must be matching B x D batches, got {q.shape} and {k.shape}")
    if mask is not None:
        idx = np.flatnonzero(np.asarray(mask, dtype=bool))
        if idx.size == 0:
            raise ContractError("every row of the pair batch is masked")
        q, k = nc.take(q, idx), nc.take(k, idx)
    if q.shape[0] == 0:
        raise ContractError("empty pair batch")
    if normalize:
        q, k = nc.l2_normalize(q), nc.l2_normalize(k)
    logits = nc.matmul(q, nc.transpose(k, (1, 0))) / tau
    diag = nc.sum(logits * np.eye(q.shape[0]), axis=1)
    return nc.mean(nc.logsumexp(logits, axis=1) - diag)


def symmetric_loss(q, k, tau, mask: np.ndarray | None = None, normalize: bool = True) -> Tensor:
    return info_nce(q, k, tau, mask, normalize) + info_nce(k, q, tau, mask, normalize)


# ---------------------------------------------------------------------------
# composite objectives
# ---------------------------------------------------------------------------

@dataclass
class ModalityRows:
    """Embeddings for the subset ``rows`` (sorted global row ids) of a batch."""

    values: Tensor
    rows: np.ndarray


def aligned_pair(a: ModalityRows, b: ModalityRows):
    common = np.intersect1d(a.rows, b.rows)
    if common.size == 0:
        return None
    return (nc.take(a.values, np.searchsorted(a.rows, common)),
            nc.take(b.values, np.searchsorted(b.rows, common)), common)


def objective_pairs(strategy: str, base=Modality.IMAGE):
    if strategy == "base_modality":
        return BASE_PAIRS[modality(base)]
    if strategy == "all_pairs":
        return ALL_PAIRS
    raise ContractError(f"unknown alignment strategy {strategy!r}")


def instance_objective(embs: dict, tau, strategy: str = "base_modality", base=Modality.IMAGE):
    """Sum of symmetric terms over the available modality pairs.

    Returns ``(total, terms)``; pairs with no common row are skipped (masked).
    """
    terms = {}
    for a, b in objective_pairs(strategy, base):
        if a not in embs or b not in embs:
            continue
        pair = aligned_pair(embs[a], embs[b])
        if pair is None:
            continue
        terms[(a, b)] = symmetric_loss(pair[0], pair[1], tau)
    if not terms:
        raise NoTermsError("no modality pair is available in this batch")
    return _total(terms), terms


def unified_objective(scene_emb, dim_embs: dict, weights: dict, tau, all_pairs: bool = False,
                      extra=None):
    """Weighted symmetric alignment of each dimensionality encoder to the scene embedding.

    ``scene_emb`` is a :class:`ModalityRows` of fused scene vectors;
    ``dim_embs`` maps a term name (``"1D"``, ``"2D"``, ``"2D-floorplan"``,
    ``"3D"``) to ModalityRows; ``weights`` maps the same names to the
    scalar weight (alpha/beta/gamma).  ``extra`` (a tensor) is added as-is,
    which is how the combined objective folds in the instance terms.
    """
    terms = {}
    for name, rows in dim_embs.items():
        pair = aligned_pair(scene_emb, rows)
        if pair is None:
            continue
        terms[name] = weights[name] * symmetric_loss(pair[0], pair[1], tau)
    if all_pairs:
        for a, b in itertools.combinations(sorted(dim_embs), 2):
            pair = aligned_pair(dim_embs[a], dim_embs[b])
            if pair is not None:
                terms[f"{a}|{b}"] = symmetric_loss(pair[0], pair[1], tau)
    if extra is not None:
        terms["instance"] = nc.as_tensor(extra)
    if not terms:
        raise NoTermsError("no unified loss term is available in this batch")
    return _total(terms), terms


def _total(terms: dict) -> Tensor:
    total = None
    for t in terms.values():
        total = t if total is None else total + t
    return total
