"""Small convolutional encoder, projection head and classifier with manual backprop.

Layout conventions: images enter as ``N x C x H x W``; the encoder works in
NHWC internally and emits the activation map flattened in height, width,
channel order, one row per sample. The projection head reads that flat row;
the classifier reads its global average over spatial positions.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import NORM_EPS, RandomStream, ShapeError, l2_normalize_rows, softmax_rows


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    input_size: int = 32
    input_channels: int = 3
    conv_blocks: tuple[tuple[int, int, int], ...] = ((8, 3, 2), (16, 3, 2), (32, 3, 2))
    projection_dims: tuple[int, ...] = (100, 50, 25)

    def __post_init__(self):
        if self.input_size < 1 or self.input_channels < 1:
            raise ConfigError("input_size and input_channels must be positive")
        if len(self.projection_dims) < 1:
            raise ConfigError("projection head needs at least one layer")
        for out, k, s in self.conv_blocks:
            if out < 1 or k < 1 or s < 1:
                raise ConfigError(f"invalid conv block {(out, k, s)}")
        h, w, _ = self.activation_shape
        if h < 1 or w < 1:
            raise ConfigError(f"conv blocks reduce a {self.input_size}px input to {h}x{w}")

    @property
    def activation_shape(self) -> tuple[int, int, int]:
        size = self.input_size
        channels = self.input_channels
        for out, k, s in self.conv_blocks:
            size = (size + 2 * (k // 2) - k) // s + 1
            channels = out
        return size, size, channels

    @property
    def activation_map_channels(self) -> int:
        return self.activation_shape[2]

    @property
    def activation_dim(self) -> int:
        h, w, c = self.activation_shape
        return h * w * c


@dataclass
class ModelParams:
    """Named parameter tensors plus the architecture that interprets them."""

    config: EncoderConfig
    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def num_classes(self) -> int:
        return self.tensors["classifier.weight"].shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def replace(self, **updates: np.ndarray) -> "ModelParams":
        tensors = dict(self.tensors)
        for k, v in updates.items():
            if k not in tensors:
                raise KeyError(k)
            tensors[k] = v
        return ModelParams(self.config, tensors)

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> "ModelParams":
        merged = dict(self.tensors)
        merged.update(tensors)
        return ModelParams(self.config, merged)

    def equal(self, other: "ModelParams") -> bool:
        if self.config != other.config or list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and np.array_equal(a, b)
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def _conv_names(i: int) -> tuple[str, str]:
    return f"encoder.conv{i}.weight", f"encoder.conv{i}.bias"


def _fc_names(j: int) -> tuple[str, str]:
    return f"projection.fc{j}.weight", f"projection.fc{j}.bias"


def parameter_groups(params: ModelParams) -> dict[str, list[str]]:
    groups: dict[str, list[str]] = {"encoder": [], "projection": [], "classifier": []}
    for name in params:
        groups[name.split(".", 1)[0]].append(name)
    return groups


def init_params(config: EncoderConfig, num_classes: int, seed: int) -> ModelParams:
    """He-normal weights (std = sqrt(2 / fan_in)) and zero biases, keyed per tensor."""
    if num_classes < 1:
        raise ConfigError("num_classes must be positive")
    root = RandomStream(seed).split("init")
    tensors: dict[str, np.ndarray] = {}

    def he(name, shape, fan_in):
        std = np.sqrt(2.0 / fan_in)
        return (root.split(name).normal(0.0, std, size=shape)).astype(np.float32)

    in_ch = config.input_channels
    for i, (out, k, _) in enumerate(config.conv_blocks):
        wn, bn = _conv_names(i)
        tensors[wn] = he(wn, (out, in_ch, k, k), in_ch * k * k)
        tensors[bn] = np.zeros(out, dtype=np.float32)
        in_ch = out
    width = config.activation_dim
    for j, out in enumerate(config.projection_dims):
        wn, bn = _fc_names(j)
        tensors[wn] = he(wn, (width, out), width)
        tensors[bn] = np.zeros(out, dtype=np.float32)
        width = out
    c = config.activation_map_channels
    tensors["classifier.weight"] = he("classifier.weight", (c, num_classes), c)
    tensors["classifier.bias"] = np.zeros(num_classes, dtype=np.float32)
    return ModelParams(config, tensors)


# --- layer primitives -------------------------------------------------------


def _rowwise(a, b):
    # BLAS picks kernels by row count, so a sample's output would depend on its
    # batch; einsum accumulates every output element in one fixed order.
    return np.einsum("mk,kn->mn", a, b)


def _conv_forward(x, w, b, stride):
    """x: N,H,W,C (NHWC); w: O,C,k,k. Zero padding of k//2 on each side."""
    n, h, wd, c = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    cols = win.reshape(n * ho * wo, c * k * k)
    out = _rowwise(cols, w.reshape(o, -1).T) + b
    return out.reshape(n, ho, wo, o), (cols, x.shape, stride, k)


def _conv_backward(dout, w, cache, need_dx):
    cols, xshape, stride, k = cache
    n, ho, wo, o = dout.shape
    d2 = dout.reshape(-1, o)
    dw = (d2.T @ cols).reshape(w.shape)
    db = d2.sum(axis=0)
    if not need_dx:
        return dw, db, None
    _, h, wd, c = xshape
    p = k // 2
    dcols = (d2 @ w.reshape(o, -1)).reshape(n, ho, wo, c, k, k)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride, :] += dcols[..., i, j]
    return dw, db, dxp[:, p : p + h, p : p + wd, :]


def _normalize_backward(y, u, du):
    norms = np.sqrt(np.sum(y.astype(np.float64) ** 2, axis=1, keepdims=True))
    small = norms < NORM_EPS
    safe = np.where(small, 1.0, norms)
    dy = (du - u * np.sum(u * du, axis=1, keepdims=True)) / safe
    return np.where(small, du, dy).astype(du.dtype, copy=False)


def _softmax_backward(probs, dprobs):
    return probs * (dprobs - np.sum(dprobs * probs, axis=1, keepdims=True))


# --- model forward / backward ----------------------------------------------


@dataclass
class ForwardTrace:
    """Activations cached by a forward call; consumed by :func:`backward`."""

    encoder: list | None = None
    projection: list | None = None
    classifier: tuple | None = None
    input_shape: tuple | None = None
    activation_shape: tuple | None = None


def encoder_forward(params: ModelParams, images: np.ndarray):
    cfg = params.config
    expected = (cfg.input_channels, cfg.input_size, cfg.input_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"expected images of shape N x {expected}, got {images.shape}")
    x = np.ascontiguousarray(images.transpose(0, 2, 3, 1))
    caches = []
    for i, (_, _, stride) in enumerate(cfg.conv_blocks):
        wn, bn = _conv_names(i)
        z, cache = _conv_forward(x, params[wn], params[bn], stride)
        mask = z > 0
        x = np.where(mask, z, 0).astype(z.dtype, copy=False)
        caches.append((cache, mask))
    activation = x.reshape(x.shape[0], -1)
    trace = ForwardTrace(encoder=caches, input_shape=images.shape, activation_shape=x.shape)
    return activation, trace


def projection_forward(params: ModelParams, activation: np.ndarray):
    """Three-layer head, ReLU between layers, L2-normalized output rows."""
    if activation.ndim != 2 or activation.shape[1] != params.config.activation_dim:
        raise ShapeError(
            f"projection head expects width {params.config.activation_dim}, got {activation.shape}"
        )
    caches = []
    x = activation
    n_layers = len(params.config.projection_dims)
    for j in range(n_layers):
        wn, bn = _fc_names(j)
        y = _rowwise(x, params[wn]) + params[bn]
        mask = (y > 0) if j < n_layers - 1 else None
        caches.append((x, mask))
        x = np.where(mask, y, 0).astype(y.dtype, copy=False) if mask is not None else y
    z = l2_normalize_rows(x)
    caches.append((x, z))
    return z, ForwardTrace(projection=caches)


def _pool(params: ModelParams, activation: np.ndarray) -> np.ndarray:
    h, w, c = params.config.activation_shape
    return activation.reshape(activation.shape[0], h * w, c).mean(axis=1)


def classifier_logits(params: ModelParams, activation: np.ndarray):
    if activation.ndim != 2 or activation.shape[1] != params.config.activation_dim:
        raise ShapeError(
            f"classifier expects width {params.config.activation_dim}, got {activation.shape}"
        )
    pooled = _pool(params, activation)
    return _rowwise(pooled, params["classifier.weight"]) + params["classifier.bias"], pooled


def classifier_forward(params: ModelParams, activation: np.ndarray):
    logits, pooled = classifier_logits(params, activation)
    probs = softmax_rows(logits)
    return probs, ForwardTrace(classifier=(pooled, probs))


def forward(params: ModelParams, images: np.ndarray, projection=True, classifier=True):
    """Run the encoder and the requested heads; returns (outputs, combined trace)."""
    activation, trace = encoder_forward(params, images)
    out = {"activation": activation}
    if projection:
        out["embeddings"], t = projection_forward(params, activation)
        trace.projection = t.projection
    if classifier:
        out["probabilities"], t = classifier_forward(params, activation)
        trace.classifier = t.classifier
    return out, trace


def backward(
    trace: ForwardTrace,
    params: ModelParams,
    upstream: Mapping[str, np.ndarray],
    input_grad: bool = False,
) -> dict[str, np.ndarray]:
    """Backpropagate upstream gradients through whatever the trace recorded.

    ``upstream`` may carry gradients for ``activation``, ``embeddings``,
    ``probabilities`` or ``logits``. Returns gradients for every parameter the
    traced forward touched. When the trace has no encoder part, the gradient
    reaching the activation map is returned under ``"activation"``; with
    ``input_grad`` the image gradient (N x C x H x W) is returned as ``"input"``.
    """
    grads: dict[str, np.ndarray] = {}
    d_act = None

    def add_act(g):
        nonlocal d_act
        d_act = g if d_act is None else d_act + g

    if "activation" in upstream:
        add_act(np.array(upstream["activation"]))

    if "embeddings" in upstream:
        if trace.projection is None:
            raise ValueError("trace has no projection-head record")
        caches = trace.projection
        y_last, z = caches[-1]
        dx = _normalize_backward(y_last, z, upstream["embeddings"].astype(y_last.dtype, copy=False))
        n_layers = len(caches) - 1
        for j in reversed(range(n_layers)):
            x_in, mask = caches[j]
            if mask is not None:
                dx = dx * mask
            wn, bn = _fc_names(j)
            if params[wn].shape[0] != x_in.shape[1]:
                raise ShapeError("trace does not match projection parameters")
            grads[wn] = x_in.T @ dx
            grads[bn] = dx.sum(axis=0)
            dx = dx @ params[wn].T
        add_act(dx)

    if "probabilities" in upstream or "logits" in upstream:
        if trace.classifier is None:
            raise ValueError("trace has no classifier record")
        pooled, probs = trace.classifier
        dlogits = 0
        if "probabilities" in upstream:
            dlogits = _softmax_backward(probs, upstream["probabilities"].astype(probs.dtype, copy=False))
        if "logits" in upstream:
            dlogits = dlogits + upstream["logits"]
        w = params["classifier.weight"]
        if w.shape[0] != pooled.shape[1]:
            raise ShapeError("trace does not match classifier parameters")
        grads["classifier.weight"] = pooled.T @ dlogits
        grads["classifier.bias"] = np.sum(dlogits, axis=0)
        dpooled = dlogits @ w.T
        h, wd, c = params.config.activation_shape
        dmap = np.repeat(dpooled[:, None, :] / (h * wd), h * wd, axis=1)
        add_act(dmap.reshape(dpooled.shape[0], -1))

    if trace.encoder is None:
        if d_act is not None:
            grads["activation"] = d_act
        return grads

    n = trace.input_shape[0]
    if d_act is None:
        d_act = np.zeros((n, params.config.activation_dim), dtype=params["encoder.conv0.weight"].dtype)
    if len(trace.encoder) != len(params.config.conv_blocks):
        raise ShapeError("trace does not match encoder parameters")
    dx = d_act.reshape(trace.activation_shape)
    for i in reversed(range(len(trace.encoder))):
        cache, mask = trace.encoder[i]
        dz = dx * mask
        wn, bn = _conv_names(i)
        need_dx = i > 0 or input_grad
        dw, db, dx = _conv_backward(dz, params[wn], cache, need_dx)
        grads[wn] = dw
        grads[bn] = db
    if input_grad:
        grads["input"] = dx.transpose(0, 3, 1, 2)
    return grads


# --- optimizer --------------------------------------------------------------


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.algorithm!r}")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")


def optimizer_step(params: ModelParams, grads: Mapping[str, np.ndarray], state: OptimizerState):
    """Apply one Adam (or plain SGD) step; parameters absent from ``grads`` are skipped."""
    state.step += 1
    t = state.step
    updated = {}
    for name, g in grads.items():
        if name not in params.tensors:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        g = g.astype(p.dtype, copy=False)
        if state.algorithm == "sgd":
            updated[name] = p - p.dtype.type(state.lr) * g
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        state.m[name] = m.astype(p.dtype, copy=False)
        state.v[name] = v.astype(p.dtype, copy=False)
        updated[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params.with_tensors(updated), state


# --- checkpoints ------------------------------------------------------------

MAGIC = b"SRCL"
VERSION = 1
_META = "meta.architecture"


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def _arch_tensor(cfg: EncoderConfig) -> np.ndarray:
    vals = [cfg.input_size, cfg.input_channels, len(cfg.conv_blocks)]
    for block in cfg.conv_blocks:
        vals.extend(block)
    vals.append(len(cfg.projection_dims))
    vals.extend(cfg.projection_dims)
    return np.array(vals, dtype=np.float32)


def _arch_from_tensor(t: np.ndarray) -> EncoderConfig:
    vals = [int(x) for x in t]
    size, ch, nb = vals[0], vals[1], vals[2]
    blocks = tuple(tuple(vals[3 + 3 * i : 6 + 3 * i]) for i in range(nb))
    rest = vals[3 + 3 * nb :]
    return EncoderConfig(size, ch, blocks, tuple(rest[1 : 1 + rest[0]]))


def _tensor_records(named: Iterable[tuple[str, np.ndarray]]) -> bytes:
    named = list(named)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    named = [(_META, _arch_tensor(params.config))] + list(params.items())
    Path(path).write_bytes(_tensor_records(named))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends inside {what} at byte {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path: str | Path) -> ModelParams:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (count,) = struct.unpack("<I", r.take(4, "tensor count"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", r.take(4, "name length"))
        name = r.take(nlen, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<I", r.take(4, f"rank of {name}"))
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"shape of {name}"))
        size = int(np.prod(shape, dtype=np.int64))
        data = r.take(4 * size, f"data of {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - r.pos} trailing bytes")
    if _META not in tensors:
        raise CheckpointError(f"{path}: missing {_META} record")
    config = _arch_from_tensor(tensors.pop(_META))
    return ModelParams(config, tensors)
