"""Prototype construction, distance-softmax classification and the episodic loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

DISTANCES = ("squared_euclidean", "euclidean")


@dataclass(frozen=True)
class ClassDistribution:
    """Per-query class distribution kept as logits (negative distances)."""

    logits: Tensor

    @property
    def probs(self) -> Tensor:
        return nx.softmax(self.logits, axis=-1)

    @property
    def log_probs(self) -> Tensor:
        return nx.log_softmax(self.logits, axis=-1)

    @property
    def way(self) -> int:
        return self.logits.shape[-1]

    @classmethod
    def from_probs(cls, probs) -> ClassDistribution:
        arr = np.asarray(probs, dtype=np.float64)
        return cls(Tensor(np.log(arr)))


def prototypes(z_s: Tensor) -> Tensor:
    """Per-class mean over the shot axis: ``[n, k, m] -> [n, m]``."""
    if z_s.ndim != 3:
        raise ShapeError(f"prototypes expects [n, k, m], got {z_s.shape}")
    return nx.mean(z_s, axis=1)


def _distance(a: Tensor, b: Tensor, kind: str) -> Tensor:
    if kind == "squared_euclidean":
        return nx.euclidean_sq(a, b)
    if kind == "euclidean":
        return nx.euclidean(a, b)
    raise ValueError(f"unknown distance {kind!r}; expected one of {DISTANCES}")


def classify(z_q: Tensor, protos: Tensor, distance_kind: str = "squared_euclidean") -> ClassDistribution:
    """Softmax over classes of the negative query-to-prototype distance.

    ``z_q`` is ``[Q, m]``, or ``[n, Q, m]`` when each class has its own
    adapted copy of the queries; then query ``t`` is compared with prototype
    ``i`` through ``z_q[i, t]``.
    """
    n, m = protos.shape
    if z_q.shape[-1] != m:
        raise ShapeError(f"classify: query width {z_q.shape[-1]} != prototype width {m}")
    if z_q.ndim == 2:
        d = _distance(z_q, protos, distance_kind)
    elif z_q.ndim == 3 and z_q.shape[0] == n:
        per_class = _distance(z_q, nx.reshape(protos, (n, 1, m)), distance_kind)
        d = nx.swap_last(nx.reshape(per_class, (n, z_q.shape[1])))
    else:
        raise ShapeError(f"classify: queries {z_q.shape} incompatible with prototypes {protos.shape}")
    return ClassDistribution(nx.mul(d, -1.0))


def _check_labels(labels: np.ndarray, dist: ClassDistribution) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    rows, way = dist.logits.shape
    if labels.shape != (rows,):
        raise ShapeError(f"{labels.shape[0] if labels.ndim else 'scalar'} labels for {rows} queries")
    if labels.size and (labels.min() < 0 or labels.max() >= way):
        raise ValueError(f"query labels must lie in [0, {way}), got range [{labels.min()}, {labels.max()}]")
    return labels


def episode_loss(dist: ClassDistribution, query_labels) -> Tensor:
    """Mean negative log-probability of each query's true class."""
    labels = _check_labels(query_labels, dist)
    return nx.mul(nx.mean(nx.pick(dist.log_probs, labels)), -1.0)


def episode_accuracy(dist: ClassDistribution, query_labels) -> float:
    """Fraction of queries whose most probable class is correct; ties go to the lowest index."""
    labels = _check_labels(query_labels, dist)
    return float(np.mean(np.argmax(dist.logits.data, axis=-1) == labels))
