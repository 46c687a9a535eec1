"""Shared attention block that co-adapts support and query embeddings.

One :class:`MABParameters` instance serves both directions:

* support adaptation attends from every query to the shots of each class,
  averages the score rows over queries and pools the class shots into a
  prototype that is added to each shot;
* query adaptation attends from every shot to the query set, averages the
  score rows over shots and classes and pools the queries into one query
  prototype that is added to each query.

Both directions read the original (unadapted) embeddings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

MODES = ("full", "support_only", "query_only", "self_only", "none", "nonparam")
QUERY_AGGREGATIONS = ("mean", "per_class")

_PROJECTIONS = ("q", "k", "v", "o")


@dataclass(frozen=True)
class MABParameters:
    """Projection maps ``x @ W + b`` for query/key/value/output plus layer-norm affine.

    With ``parametric=False`` every projection is the identity and
    ``tensors`` holds no projection weights.  ``feedforward`` toggles the
    ``x + relu(f_o(x))`` stage and ``use_norm`` the final layer norm.
    """

    dim: int
    tensors: dict[str, Tensor] = field(default_factory=dict)
    use_norm: bool = True
    parametric: bool = True
    feedforward: bool = True

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def with_arrays(self, arrays: dict[str, np.ndarray], requires_grad: bool = False) -> MABParameters:
        tensors = {
            name: Tensor(arrays[name], requires_grad=requires_grad, name=f"mab.{name}") for name in self.tensors
        }
        return replace(self, tensors=tensors)

    def project(self, x: Tensor, which: str) -> Tensor:
        if not self.parametric:
            return x
        return nx.add(nx.matmul(x, self.tensors[f"w_{which}"]), self.tensors[f"b_{which}"])

    def finish(self, x: Tensor) -> Tensor:
        """``Phi(x + relu(f_o(x)))`` with each stage behind its flag."""
        if self.feedforward:
            x = nx.add(x, nx.relu(self.project(x, "o")))
        if self.use_norm:
            x = nx.layer_normalize(x, self.tensors["norm_gain"], self.tensors["norm_bias"])
        return x


def init_mab(dim: int, seed: int, use_norm: bool = True, dtype=np.float64, requires_grad: bool = True) -> MABParameters:
    """Fan-in-scaled uniform projections; layer-norm gain 1 and bias 0."""
    rng = np.random.default_rng(seed)
    bound = math.sqrt(1.0 / dim)
    arrays = {}
    for which in _PROJECTIONS:
        arrays[f"w_{which}"] = rng.uniform(-bound, bound, size=(dim, dim)).astype(dtype)
        arrays[f"b_{which}"] = rng.uniform(-bound, bound, size=(dim,)).astype(dtype)
    if use_norm:
        arrays["norm_gain"] = np.ones(dim, dtype=dtype)
        arrays["norm_bias"] = np.zeros(dim, dtype=dtype)
    tensors = {n: Tensor(a, requires_grad=requires_grad, name=f"mab.{n}") for n, a in arrays.items()}
    return MABParameters(dim, tensors, use_norm=use_norm)


def nonparametric_mab(dim: int, feedforward: bool = False) -> MABParameters:
    """Identity projections, no norm; by default also no feed-forward stage."""
    return MABParameters(dim, {}, use_norm=False, parametric=False, feedforward=feedforward)


@dataclass(frozen=True)
class CADOutput:
    adapted: Tensor
    prototype: Tensor
    raw_scores: Tensor
    pooled_scores: Tensor


@dataclass(frozen=True)
class AdaptationResult:
    """Adapted embeddings and the attention scores that produced them.

    Score fields are ``None`` for directions a mode does not run.  In
    ``self_only`` mode the score matrices are ``[n, k, k]`` and ``[Q, Q]``
    and no prototypes are formed.
    """

    z_s_adapted: Tensor
    z_q_adapted: Tensor
    scores_support: Tensor | None = None
    scores_query: Tensor | None = None
    pooled_support: Tensor | None = None
    pooled_query: Tensor | None = None
    proto_support: Tensor | None = None
    proto_query: Tensor | None = None


def attention(Q: Tensor, K: Tensor, V: Tensor) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention; scores are softmaxed over the key axis."""
    m = Q.shape[-1]
    if K.shape[-1] != m or V.shape[-1] != m:
        raise ShapeError(f"attention: feature extents differ: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise ShapeError(f"attention: K {K.shape} and V {V.shape} have different set sizes")
    logits = nx.div(nx.matmul(Q, nx.swap_last(K)), math.sqrt(m))
    scores = nx.softmax(logits, axis=-1)
    return nx.matmul(scores, V), scores


def _check_dims(params: MABParameters, *tensors: Tensor):
    for t in tensors:
        if t.shape[-1] != params.dim:
            raise ShapeError(f"feature extent {t.shape[-1]} does not match block dimension {params.dim}")


def mab_original(Q: Tensor, K: Tensor, V: Tensor, params: MABParameters, return_scores: bool = False):
    """Attention block with the residual taken on the projected ``Q``; output has ``Q``'s shape."""
    _check_dims(params, Q, K, V)
    q = params.project(Q, "q")
    out, scores = attention(q, params.project(K, "k"), params.project(V, "v"))
    result = params.finish(nx.add(out, q))
    return (result, scores) if return_scores else result


def mab_cad(Q: Tensor, K: Tensor, V: Tensor, params: MABParameters, avg_axis=-2) -> CADOutput:
    """Attention block with the residual taken on the projected ``K``.

    Raw scores ``[..., r, s]`` are averaged over ``avg_axis`` (the query-side
    axis, or a tuple of axes).  The pooled row times the projected values is
    a prototype that is broadcast-added to every projected key before the
    feed-forward and norm stages.  The adapted tensor has ``K``'s shape
    whenever the pooling collapses all of ``Q``'s batch structure.
    """
    _check_dims(params, Q, K, V)
    if K is not V and (K.shape != V.shape or not np.array_equal(K.data, V.data)):
        raise ValueError("mab_cad requires key and value to be the same tensor")
    q = params.project(Q, "q")
    k = params.project(K, "k")
    v = params.project(V, "v")
    _, scores = attention(q, k, v)
    pooled = nx.mean(scores, axis=avg_axis, keepdims=True)
    prototype = nx.matmul(pooled, v)
    phi = nx.add(prototype, k)
    if phi.shape != K.shape and phi.size == K.size:
        phi = nx.reshape(phi, K.shape)
    return CADOutput(params.finish(phi), prototype, scores, pooled)


def co_adapt(
    z_s: Tensor,
    z_q: Tensor,
    params: MABParameters | None,
    mode: str = "full",
    query_aggregation: str = "mean",
) -> AdaptationResult:
    """Adapt support ``[n, k, m]`` and query ``[Q, m]`` embeddings with one shared block.

    ``query_aggregation="per_class"`` keeps one adapted query set per class
    (``z_q_adapted`` becomes ``[n, Q, m]``) instead of averaging the class
    score rows into a single query prototype.
    """
    if mode not in MODES:
        raise ValueError(f"unknown adaptation mode {mode!r}; expected one of {MODES}")
    if query_aggregation not in QUERY_AGGREGATIONS:
        raise ValueError(f"unknown query aggregation {query_aggregation!r}")
    if z_s.ndim != 3 or z_q.ndim != 2 or z_s.shape[-1] != z_q.shape[-1]:
        raise ShapeError(f"co_adapt expects z_s [n, k, m] and z_q [Q, m], got {z_s.shape} and {z_q.shape}")
    n, k, m = z_s.shape

    if mode == "none":
        return AdaptationResult(z_s, z_q)
    if mode == "nonparam":
        params = nonparametric_mab(m)
    if params is None:
        raise ValueError(f"mode {mode!r} needs attention parameters")

    if mode == "self_only":
        zs2, s_scores = mab_original(z_s, z_s, z_s, params, return_scores=True)
        zq2, q_scores = mab_original(z_q, z_q, z_q, params, return_scores=True)
        return AdaptationResult(
            zs2,
            zq2,
            scores_support=s_scores,
            scores_query=q_scores,
            pooled_support=nx.mean(s_scores, axis=-2),
            pooled_query=nx.mean(q_scores, axis=-2),
        )

    zs_out, zq_out = z_s, z_q
    fields = {}
    if mode in ("full", "support_only", "nonparam"):
        sup = mab_cad(z_q, z_s, z_s, params, avg_axis=-2)
        zs_out = sup.adapted
        fields.update(
            scores_support=sup.raw_scores,
            pooled_support=nx.reshape(sup.pooled_scores, (n, k)),
            proto_support=nx.reshape(sup.prototype, (n, m)),
        )
    if mode in ("full", "query_only", "nonparam"):
        axes = (0, 1) if query_aggregation == "mean" else -2
        qry = mab_cad(z_s, z_q, z_q, params, avg_axis=axes)
        zq_out = qry.adapted
        if query_aggregation == "mean":
            fields.update(
                pooled_query=nx.reshape(qry.pooled_scores, (z_q.shape[0],)),
                proto_query=nx.reshape(qry.prototype, (m,)),
            )
        else:
            fields.update(
                pooled_query=nx.reshape(qry.pooled_scores, (n, z_q.shape[0])),
                proto_query=nx.reshape(qry.prototype, (n, m)),
            )
        fields["scores_query"] = qry.raw_scores
    return AdaptationResult(zs_out, zq_out, **fields)
