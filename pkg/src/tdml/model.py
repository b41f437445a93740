"""Embedding network with hand-derived gradients.

Architecture, front to back: optional 3x3 same-padding convolution with
ReLU (map inputs only), global average pooling (map inputs), a stack of
dense layers with ReLU between trainable layers and none after the last,
an optional final FC reduction layer, then L2 normalization of each row.

All math is float64 numpy. ``forward`` caches what ``backward`` consumes
in a :class:`ForwardTrace`; nothing is recomputed and nothing external is
needed for training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError
from .numerics import NORM_EPS

_INPUT_KINDS = ("vector", "map")


@dataclass(frozen=True)
class ModelConfig:
    """Static shape description of one embedding network.

    input_kind: "vector" (flat features of length ``input_dim``) or "map"
        (H x W x ``in_channels`` feature maps; H and W may vary per record).
    conv_channels: output channels of the optional 3x3 conv (map inputs only).
    dense_dims: output widths of the dense stack; the last entry is the
        embedding width unless ``fc_reduction`` is set.
    fc_reduction: optional width of a final linear layer, must be smaller
        than the last dense width.
    """

    input_kind: str
    input_dim: int | None = None
    in_channels: int | None = None
    conv_channels: int | None = None
    dense_dims: tuple[int, ...] = ()
    fc_reduction: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "dense_dims", tuple(int(d) for d in self.dense_dims))
        if self.input_kind not in _INPUT_KINDS:
            raise InvalidArgumentError(
                f"input_kind must be one of {_INPUT_KINDS}, got {self.input_kind!r}"
            )
        if self.input_kind == "vector":
            if self.input_dim is None or self.input_dim < 1:
                raise InvalidArgumentError("vector input requires input_dim >= 1")
            if self.in_channels is not None or self.conv_channels is not None:
                raise InvalidArgumentError("vector input takes no channel settings")
        else:
            if self.in_channels is None or self.in_channels < 1:
                raise InvalidArgumentError("map input requires in_channels >= 1")
            if self.input_dim is not None:
                raise InvalidArgumentError("map input does not take input_dim")
            if self.conv_channels is not None and self.conv_channels < 1:
                raise InvalidArgumentError("conv_channels must be >= 1 when set")
        if not self.dense_dims:
            raise InvalidArgumentError("at least one dense layer is required")
        if any(d < 1 for d in self.dense_dims):
            raise InvalidArgumentError("dense widths must all be >= 1")
        if self.fc_reduction is not None:
            if not 1 <= self.fc_reduction < self.dense_dims[-1]:
                raise InvalidArgumentError(
                    "fc_reduction must satisfy 1 <= r < last dense width, "
                    f"got {self.fc_reduction} vs {self.dense_dims[-1]}"
                )

    @property
    def dense_input_dim(self) -> int:
        if self.input_kind == "vector":
            return self.input_dim
        return self.conv_channels if self.conv_channels is not None else self.in_channels

    @property
    def embedding_dim(self) -> int:
        return self.fc_reduction if self.fc_reduction is not None else self.dense_dims[-1]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Trainable array shapes in their stable flattening order."""
    shapes: dict[str, tuple[int, ...]] = {}
    if config.input_kind == "map" and config.conv_channels is not None:
        shapes["conv.w"] = (3, 3, config.in_channels, config.conv_channels)
        shapes["conv.b"] = (config.conv_channels,)
    prev = config.dense_input_dim
    for i, width in enumerate(config.dense_dims):
        shapes[f"dense{i}.w"] = (prev, width)
        shapes[f"dense{i}.b"] = (width,)
        prev = width
    if config.fc_reduction is not None:
        shapes["reduce.w"] = (prev, config.fc_reduction)
        shapes["reduce.b"] = (config.fc_reduction,)
    return shapes


class ParamSet:
    """Ordered mapping of trainable arrays, tied to a ModelConfig.

    Key order is the order of :func:`param_shapes`, which fixes the layout
    of :meth:`flatten`; ``unflatten(flatten())`` is an exact identity.
    """

    def __init__(self, config: ModelConfig, arrays: dict[str, np.ndarray]):
        expected = param_shapes(config)
        if list(arrays.keys()) != list(expected.keys()):
            raise InvalidArgumentError(
                f"parameter names {sorted(arrays)} do not match config names {sorted(expected)}"
            )
        clean: dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise InvalidArgumentError(
                    f"parameter {name} has shape {arr.shape}, expected {shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise InvalidArgumentError(f"parameter {name} contains non-finite entries")
            clean[name] = arr
        self.config = config
        self.arrays = clean

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def keys(self):
        return self.arrays.keys()

    def items(self):
        return self.arrays.items()

    def copy(self) -> "ParamSet":
        return ParamSet(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def unflatten(self, flat) -> "ParamSet":
        vec = np.asarray(flat, dtype=np.float64).ravel()
        total = sum(v.size for v in self.arrays.values())
        if vec.size != total:
            raise InvalidArgumentError(f"flat vector has {vec.size} entries, expected {total}")
        out: dict[str, np.ndarray] = {}
        pos = 0
        for name, arr in self.arrays.items():
            out[name] = vec[pos : pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        return ParamSet(self.config, out)


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """He-style init: weights uniform on +-sqrt(6/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
            continue
        fan_in = 9 * shape[2] if name == "conv.w" else shape[0]
        limit = math.sqrt(6.0 / fan_in)
        arrays[name] = rng.uniform(-limit, limit, size=shape)
    return ParamSet(config, arrays)


def gap(feature_map) -> np.ndarray:
    """Global average pooling: per-channel spatial mean of an H x W x C map."""
    arr = np.asarray(feature_map, dtype=np.float64)
    if arr.ndim != 3 or arr.size == 0:
        raise InvalidArgumentError(f"feature map must be non-empty 3-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("feature map contains non-finite entries")
    return arr.mean(axis=(0, 1))


def _conv3x3_same(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    h, wd, cin = x.shape
    xp = np.zeros((h + 2, wd + 2, cin))
    xp[1:-1, 1:-1] = x
    out = np.tile(b, (h, wd, 1))
    for dh in range(3):
        for dw in range(3):
            out += np.tensordot(xp[dh : dh + h, dw : dw + wd], w[dh, dw], axes=([2], [0]))
    return out


def _conv3x3_same_backward(x: np.ndarray, w: np.ndarray, g_out: np.ndarray):
    h, wd, cin = x.shape
    xp = np.zeros((h + 2, wd + 2, cin))
    xp[1:-1, 1:-1] = x
    g_xp = np.zeros_like(xp)
    g_w = np.zeros_like(w)
    for dh in range(3):
        for dw in range(3):
            patch = xp[dh : dh + h, dw : dw + wd]
            g_w[dh, dw] = np.tensordot(patch, g_out, axes=([0, 1], [0, 1]))
            g_xp[dh : dh + h, dw : dw + wd] += np.tensordot(g_out, w[dh, dw], axes=([2], [1]))
    g_b = g_out.sum(axis=(0, 1))
    return g_w, g_b, g_xp[1:-1, 1:-1].copy()


@dataclass
class ForwardTrace:
    """Activations cached by ``forward`` for one batch, consumed by ``backward``."""

    params: ParamSet
    record_ids: list[str]
    # Per record: (payload_f64, conv_pre | None); empty list for vector input.
    map_caches: list = field(default_factory=list)
    dense_inputs: list = field(default_factory=list)
    dense_pre: list = field(default_factory=list)
    reduce_input: np.ndarray | None = None
    pre_norm: np.ndarray | None = None
    norms: np.ndarray | None = None
    embeddings: np.ndarray | None = None


def forward(params: ParamSet, batch) -> tuple[np.ndarray, ForwardTrace]:
    """Embed a batch of records.

    ``batch`` is a sequence of objects with ``id`` and ``payload`` fields.
    Returns (embeddings, trace) where embeddings is (n, embedding_dim) with
    unit rows. A record whose payload collapses to a zero vector before
    normalization raises DegenerateInputError naming the record id.
    """
    config = params.config
    if len(batch) < 1:
        raise InvalidArgumentError("batch must contain at least one record")

    trace = ForwardTrace(params=params, record_ids=[str(r.id) for r in batch])
    rows = []
    for rec in batch:
        payload = np.asarray(rec.payload, dtype=np.float64)
        if config.input_kind == "vector":
            if payload.ndim != 1 or payload.shape[0] != config.input_dim:
                raise InvalidArgumentError(
                    f"record {rec.id!r}: expected vector of length {config.input_dim}, "
                    f"got shape {payload.shape}"
                )
            rows.append(payload)
        else:
            if payload.ndim != 3 or payload.shape[2] != config.in_channels:
                raise InvalidArgumentError(
                    f"record {rec.id!r}: expected H x W x {config.in_channels} map, "
                    f"got shape {payload.shape}"
                )
            if payload.shape[0] < 1 or payload.shape[1] < 1:
                raise InvalidArgumentError(f"record {rec.id!r}: empty feature map")
            if config.conv_channels is not None:
                pre = _conv3x3_same(payload, params["conv.w"], params["conv.b"])
                pooled = np.maximum(pre, 0.0).mean(axis=(0, 1))
                trace.map_caches.append((payload, pre))
            else:
                pooled = payload.mean(axis=(0, 1))
                trace.map_caches.append((payload, None))
            rows.append(pooled)

    x = np.vstack(rows)
    n_dense = len(config.dense_dims)
    has_reduce = config.fc_reduction is not None
    for i in range(n_dense):
        trace.dense_inputs.append(x)
        z = x @ params[f"dense{i}.w"] + params[f"dense{i}.b"]
        trace.dense_pre.append(z)
        relu_after = i < n_dense - 1 or has_reduce
        x = np.maximum(z, 0.0) if relu_after else z
    if has_reduce:
        trace.reduce_input = x
        x = x @ params["reduce.w"] + params["reduce.b"]

    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    bad = np.flatnonzero(norms <= NORM_EPS)
    if bad.size:
        rid = trace.record_ids[int(bad[0])]
        raise DegenerateInputError(
            f"record {rid!r} embeds to a near-zero vector; cannot L2-normalize"
        )
    trace.pre_norm = x
    trace.norms = norms
    trace.embeddings = x / norms[:, None]
    return trace.embeddings, trace


def backward(trace: ForwardTrace, grad_embeddings) -> tuple[ParamSet, list]:
    """Backpropagate d(loss)/d(embeddings) through the traced forward pass.

    Returns (param_grads, input_grads) where param_grads mirrors the
    ParamSet layout and input_grads is one array per record, shaped like
    its payload.
    """
    config = trace.params.config
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if trace.embeddings is None or g.shape != trace.embeddings.shape:
        raise InvalidArgumentError(
            f"gradient shape {g.shape} does not match trace embeddings "
            f"{None if trace.embeddings is None else trace.embeddings.shape}"
        )

    # L2 normalization: with y = x/|x|, J^T g = (g - (g.y) y) / |x|.
    y = trace.embeddings
    dots = np.einsum("ij,ij->i", g, y)
    gx = (g - dots[:, None] * y) / trace.norms[:, None]

    grads = {name: np.zeros(shape) for name, shape in param_shapes(config).items()}
    if config.fc_reduction is not None:
        grads["reduce.w"] = trace.reduce_input.T @ gx
        grads["reduce.b"] = gx.sum(axis=0)
        gx = gx @ trace.params["reduce.w"].T

    n_dense = len(config.dense_dims)
    for i in reversed(range(n_dense)):
        relu_after = i < n_dense - 1 or config.fc_reduction is not None
        gz = gx * (trace.dense_pre[i] > 0.0) if relu_after else gx
        grads[f"dense{i}.w"] = trace.dense_inputs[i].T @ gz
        grads[f"dense{i}.b"] = gz.sum(axis=0)
        gx = gz @ trace.params[f"dense{i}.w"].T

    input_grads: list[np.ndarray] = []
    if config.input_kind == "vector":
        input_grads = [gx[j].copy() for j in range(gx.shape[0])]
    else:
        for j, (payload, conv_pre) in enumerate(trace.map_caches):
            h, wd = payload.shape[:2]
            # GAP spreads each channel gradient evenly over H*W cells.
            g_map = np.tile(gx[j] / (h * wd), (h, wd, 1))
            if conv_pre is None:
                input_grads.append(g_map)
                continue
            g_pre = g_map * (conv_pre > 0.0)
            g_w, g_b, g_in = _conv3x3_same_backward(payload, trace.params["conv.w"], g_pre)
            grads["conv.w"] += g_w
            grads["conv.b"] += g_b
            input_grads.append(g_in)

    return ParamSet(config, grads), input_grads
