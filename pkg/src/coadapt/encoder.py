"""Feature extractors mapping raw inputs to m-dimensional embeddings.

Two kinds are supported: an MLP over flat feature vectors and a small
conv stack over ``[B, H, W, C]`` images finished by global average pooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor

KINDS = ("mlp", "conv")


@dataclass(frozen=True)
class EncoderParameters:
    kind: str
    dims: tuple[int, ...]
    tensors: dict[str, Tensor]

    @property
    def embedding_dim(self) -> int:
        return self.dims[-1]

    @property
    def depth(self) -> int:
        return len(self.dims) - 1

    def num_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.tensors.items()}

    def with_arrays(self, arrays: dict[str, np.ndarray], requires_grad: bool = False) -> EncoderParameters:
        missing = set(self.tensors) - set(arrays)
        if missing:
            raise KeyError(f"missing encoder tensors: {sorted(missing)}")
        tensors = {
            name: Tensor(arrays[name], requires_grad=requires_grad, name=f"encoder.{name}") for name in self.tensors
        }
        return EncoderParameters(self.kind, self.dims, tensors)


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_encoder(kind: str, dims, seed: int, dtype=np.float64, requires_grad: bool = True) -> EncoderParameters:
    """Seeded fan-in-scaled uniform initialization.

    ``dims`` is ``(D_in, hidden..., m)`` for ``mlp`` and
    ``(C_in, channels..., m)`` for ``conv``.
    """
    dims = tuple(int(d) for d in dims)
    if kind not in KINDS:
        raise ValueError(f"unknown encoder kind {kind!r}; expected one of {KINDS}")
    if len(dims) < 2 or min(dims) < 1:
        raise ValueError(f"encoder dims must list at least input and output extents, got {dims}")
    if kind == "conv" and not 2 <= len(dims) - 1 <= 4:
        raise ValueError(f"conv encoder uses 2-4 blocks, got {len(dims) - 1}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (fin, fout) in enumerate(zip(dims[:-1], dims[1:])):
        if kind == "mlp":
            arrays[f"w{i}"] = _uniform(rng, (fin, fout), fin, dtype)
            arrays[f"b{i}"] = _uniform(rng, (fout,), fin, dtype)
        else:
            arrays[f"w{i}"] = _uniform(rng, (3, 3, fin, fout), 9 * fin, dtype)
            arrays[f"b{i}"] = _uniform(rng, (fout,), 9 * fin, dtype)
    tensors = {n: Tensor(a, requires_grad=requires_grad, name=f"encoder.{n}") for n, a in arrays.items()}
    return EncoderParameters(kind, dims, tensors)


def identity_encoder(dim: int, dtype=np.float64) -> EncoderParameters:
    """Single linear layer with identity weights and zero bias."""
    tensors = {
        "w0": Tensor(np.eye(dim, dtype=dtype), name="encoder.w0"),
        "b0": Tensor(np.zeros(dim, dtype=dtype), name="encoder.b0"),
    }
    return EncoderParameters("mlp", (dim, dim), tensors)


def encode(params: EncoderParameters, batch) -> Tensor:
    """Embed a batch: ``[B, D_in]`` (mlp) or ``[B, H, W, C]`` (conv) -> ``[B, m]``."""
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch), dtype=_param_dtype(params))
    if params.kind == "mlp":
        return _encode_mlp(params, x)
    return _encode_conv(params, x)


def _param_dtype(params: EncoderParameters):
    return next(iter(params.tensors.values())).dtype


def _encode_mlp(params: EncoderParameters, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != params.dims[0]:
        raise ShapeError(f"mlp encoder expects [B, {params.dims[0]}], got {x.shape}")
    h = x
    for i in range(params.depth):
        h = nx.add(nx.matmul(h, params.tensors[f"w{i}"]), params.tensors[f"b{i}"])
        if i < params.depth - 1:
            h = nx.relu(h)
    return h


def _encode_conv(params: EncoderParameters, x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[-1] != params.dims[0]:
        raise ShapeError(f"conv encoder expects [B, H, W, {params.dims[0]}], got {x.shape}")
    h = x
    for i in range(params.depth):
        h = nx.relu(nx.add(nx.conv2d(h, params.tensors[f"w{i}"]), params.tensors[f"b{i}"]))
        if h.shape[1] >= 2 and h.shape[2] >= 2:
            h = nx.max_pool2x2(h)
    return global_average_pool(h)


def global_average_pool(feature_map: Tensor) -> Tensor:
    """``[B, H, W, C] -> [B, C]`` by spatial mean."""
    return nx.mean(feature_map, axis=(1, 2))
