"""Loss functions with hand-derived gradients.

* ``dice_loss`` - soft dice on the vessel mask
* ``centerness_loss`` - inverse-square weighted smooth-L1 regression of the
  centerline distance map, restricted to the vessel mask
* ``topology_pair_loss`` / ``topology_total_loss`` - embedding distance should
  equal ``alpha * D`` (tree arc length) within a tree and exceed a margin
  across trees
* ``cosine_pair_loss`` / ``cosine_total_loss`` - cosine-similarity baseline

Every function returns ``(value, gradient)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .volume import LabelVolume, ScalarVolume


class PairSample(NamedTuple):
    i: int
    j: int
    same_label: bool
    D: Optional[float] = None


@dataclass
class TopologyLossParams:
    alpha: float = 1.0 / 15.0
    gamma: float = 1.0 / 3.0
    margin: float = 3.0
    neighborhood_radius: float = 15.0

    def __post_init__(self):
        for name in ("alpha", "gamma", "margin", "neighborhood_radius"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not math.isclose(self.alpha * self.neighborhood_radius, 1.0, rel_tol=1e-9):
            warnings.warn(
                "alpha * neighborhood_radius != 1: same-tree targets are no longer normalized to [0, 1]",
                stacklevel=2,
            )


class PairSet:
    """Pairs as parallel arrays, canonically sorted by (i, j) with i < j.

    ``D`` is NaN for cross-label pairs.
    """

    def __init__(self, i, j, same, D):
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        same = np.asarray(same, dtype=bool)
        D = np.asarray(D, dtype=np.float64)
        if np.any(i == j):
            raise ValueError("pair with i == j")
        if np.any(same & ~np.isfinite(D)):
            raise ValueError("same-label pair without topological distance D")
        if np.any(same & (D < 0)):
            raise ValueError("negative topological distance D")
        D = np.where(same, D, np.nan)
        lo, hi = np.minimum(i, j), np.maximum(i, j)
        order = np.lexsort((hi, lo))
        self.i, self.j, self.same, self.D = lo[order], hi[order], same[order], D[order]

    @classmethod
    def from_samples(cls, samples: Sequence[PairSample]) -> "PairSet":
        if not len(samples):
            return cls([], [], [], [])
        for p in samples:
            if p.same_label and p.D is None:
                raise ValueError(f"same-label pair ({p.i}, {p.j}) is missing D")
            if not p.same_label and p.D is not None:
                raise ValueError(f"cross-label pair ({p.i}, {p.j}) must not carry D")
        return cls(
            [p.i for p in samples],
            [p.j for p in samples],
            [p.same_label for p in samples],
            [np.nan if p.D is None else p.D for p in samples],
        )

    def __len__(self):
        return len(self.i)

    def __iter__(self):
        for a, b, s, d in zip(self.i, self.j, self.same, self.D):
            yield PairSample(int(a), int(b), bool(s), float(d) if s else None)

    def __eq__(self, other):
        return (
            isinstance(other, PairSet)
            and np.array_equal(self.i, other.i)
            and np.array_equal(self.j, other.j)
            and np.array_equal(self.same, other.same)
            and np.array_equal(self.D, other.D, equal_nan=True)
        )


def smooth_l1(x):
    """Huber-style smooth L1 with unit transition; returns (value, derivative)."""
    x = np.asarray(x, dtype=np.float64)
    ax = np.abs(x)
    quad = ax < 1.0
    value = np.where(quad, 0.5 * x * x, ax - 0.5)
    deriv = np.where(quad, x, np.sign(x))
    if value.ndim == 0:
        return float(value), float(deriv)
    return value, deriv


def dice_loss(v, v_pred):
    """1 - 2 sum(v v') / (sum v + sum v'); gradient w.r.t. v_pred."""
    v = np.asarray(v, dtype=np.float64).ravel()
    p = np.asarray(v_pred, dtype=np.float64).ravel()
    if v.shape != p.shape or v.size == 0:
        raise ValueError("dice inputs must be non-empty and of equal length")
    denom = v.sum() + p.sum()
    if denom <= 0:
        raise ValueError("degenerate dice")
    inter = np.dot(v, p)
    value = 1.0 - 2.0 * inter / denom
    grad = -2.0 * (v * denom - inter) / denom**2
    return float(value), grad


def _centerness_weight(S):
    # 1/S^2 blows up on the centerline; clamp S at one voxel
    return 1.0 / np.maximum(S, 1.0) ** 2


def centerness_loss(S: ScalarVolume, S_pred: ScalarVolume, vessel_mask: LabelVolume):
    """Weighted smooth-L1 regression on the vessel mask; gradient w.r.t. S_pred (array shaped like the volume)."""
    if S.dims != S_pred.dims or S.dims != vessel_mask.dims:
        raise ValueError("centerness inputs have mismatched dims")
    inside = vessel_mask.data > 0
    n = int(inside.sum())
    if n == 0:
        raise ValueError("empty vessel mask")
    s = S.data.astype(np.float64)[inside]
    sp = S_pred.data.astype(np.float64)[inside]
    w = _centerness_weight(s)
    val, der = smooth_l1(s - sp)
    grad = np.zeros(S.dims.shape)
    grad[inside] = -w * der / n
    return float(np.sum(w * val) / n), grad


def centerness_loss_arrays(S, S_pred, mask):
    """Same as ``centerness_loss`` on flat arrays (mask: truthy = vessel)."""
    S = np.asarray(S, dtype=np.float64)
    S_pred = np.asarray(S_pred, dtype=np.float64)
    inside = np.asarray(mask) > 0
    n = int(inside.sum())
    if n == 0:
        raise ValueError("empty vessel mask")
    w = _centerness_weight(S[inside])
    val, der = smooth_l1(S[inside] - S_pred[inside])
    grad = np.zeros_like(S_pred)
    grad[inside] = -w * der / n
    return float(np.sum(w * val) / n), grad


def _topology_terms(diff, same, D, params: TopologyLossParams):
    """Per-pair loss and d(loss)/d(x_i) for difference vectors ``diff = x_i - x_j``."""
    r = np.linalg.norm(diff, axis=1)
    safe = np.where(r > 0, r, 1.0)
    unit = np.where((r > 0)[:, None], diff / safe[:, None], 0.0)
    target = params.alpha * np.where(same, D, 0.0)
    sl, dsl = smooth_l1(r - target)
    sl, dsl = np.atleast_1d(sl), np.atleast_1d(dsl)
    hinge = np.maximum(0.0, params.margin - r)
    value = np.where(same, sl, params.gamma * hinge)
    dr = np.where(same, dsl, np.where(r < params.margin, -params.gamma, 0.0))
    return value, dr[:, None] * unit


def topology_pair_loss(x_i, x_j, pair: PairSample, params: TopologyLossParams = None):
    """Returns (loss, grad_i, grad_j)."""
    params = params or TopologyLossParams()
    if pair.same_label and pair.D is None:
        raise ValueError("same-label pair requires D")
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    D = np.array([pair.D if pair.same_label else 0.0])
    value, g = _topology_terms((x_i - x_j)[None, :], np.array([pair.same_label]), D, params)
    return float(value[0]), g[0], -g[0]


def topology_total_loss(embeddings, pairs, params: TopologyLossParams = None):
    """Mean pair loss over ``pairs``; returns (loss, gradient array shaped like the embedding matrix).

    ``embeddings`` is an (n, dim) array or an EmbeddingTable whose rows are
    addressed by id. Accumulation follows ascending (i, j) order.
    """
    params = params or TopologyLossParams()
    X, rows = _matrix(embeddings)
    P = pairs if isinstance(pairs, PairSet) else PairSet.from_samples(list(pairs))
    if not len(P):
        raise ValueError("empty pair set")
    a, b = rows(P.i), rows(P.j)
    value, g = _topology_terms(X[a] - X[b], P.same, P.D, params)
    n = len(P)
    grad = np.zeros_like(X)
    np.add.at(grad, a, g / n)
    np.add.at(grad, b, -g / n)
    return _ordered_mean(value), grad


def _cosine_terms(A, B, same):
    na2 = np.einsum("ij,ij->i", A, A)
    nb2 = np.einsum("ij,ij->i", B, B)
    if np.any(na2 == 0) or np.any(nb2 == 0):
        raise ValueError("undefined cosine: zero-norm vector")
    na, nb = np.sqrt(na2), np.sqrt(nb2)
    # one square root of the product: sqrt(fl(x*x)) == x, so S is exactly 1 for a == b
    S = np.einsum("ij,ij->i", A, B) / np.sqrt(na2 * nb2)
    dS_da = B / (na * nb)[:, None] - S[:, None] * A / (na**2)[:, None]
    dS_db = A / (na * nb)[:, None] - S[:, None] * B / (nb**2)[:, None]
    sign = np.where(same, -0.5, 0.5)
    value = np.where(same, 1.0 - 0.5 * (1.0 + S), 0.5 * (1.0 + S))
    return value, sign[:, None] * dS_da, sign[:, None] * dS_db


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na2, nb2 = a @ a, b @ b
    if na2 == 0 or nb2 == 0:
        raise ValueError("undefined cosine: zero-norm vector")
    return float(a @ b / np.sqrt(na2 * nb2))


def cosine_pair_loss(x_i, x_j, same_label: bool):
    """Returns (loss, grad_i, grad_j) with signed cosine similarity."""
    A = np.asarray(x_i, dtype=np.float64)[None, :]
    B = np.asarray(x_j, dtype=np.float64)[None, :]
    value, ga, gb = _cosine_terms(A, B, np.array([bool(same_label)]))
    return float(value[0]), ga[0], gb[0]


def cosine_total_loss(embeddings, pairs):
    X, rows = _matrix(embeddings)
    P = pairs if isinstance(pairs, PairSet) else PairSet.from_samples(list(pairs))
    if not len(P):
        raise ValueError("empty pair set")
    a, b = rows(P.i), rows(P.j)
    value, ga, gb = _cosine_terms(X[a], X[b], P.same)
    n = len(P)
    grad = np.zeros_like(X)
    np.add.at(grad, a, ga / n)
    np.add.at(grad, b, gb / n)
    return _ordered_mean(value), grad


def _ordered_mean(values) -> float:
    # fsum is exactly rounded, hence independent of pair order
    return math.fsum(values.tolist()) / len(values)


def _matrix(embeddings):
    if hasattr(embeddings, "vectors") and hasattr(embeddings, "row_of"):
        return embeddings.vectors, embeddings.row_of
    X = np.asarray(embeddings, dtype=np.float64)
    return X, lambda ids: np.asarray(ids, dtype=np.int64)
