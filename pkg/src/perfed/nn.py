"""Minimal dense/conv neural network engine on float64 numpy arrays.

Tensors are plain numpy ``float64`` arrays (row-major); a model's parameters
live in one flat 1-D vector holding each layer's weights then biases in layer
order, so aggregation and communication accounting can treat models as flat
vectors. Backpropagation is hand-written per layer kind (no autodiff), and
every operation is a pure function of its inputs plus an explicit seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .rng import stream

# Probabilities are clamped to [PROB_FLOOR, 1 - PROB_FLOOR] before any log.
PROB_FLOOR = 1e-9


class ShapeError(ValueError):
    """Layer shapes do not chain, or an input does not fit a model."""


# ---------------------------------------------------------------------------
# Layer and model specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv3x3:
    in_channels: int
    out_channels: int


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Dense | Conv3x3 | MaxPool2x2 | ReLU | Softmax | Flatten

_KIND_NAMES = {
    Dense: "dense",
    Conv3x3: "conv3x3",
    MaxPool2x2: "maxpool2x2",
    ReLU: "relu",
    Softmax: "softmax",
    Flatten: "flatten",
}


def _layer_out_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    """Output shape of ``layer`` on input ``shape`` (no batch dim), or raise."""
    if isinstance(layer, Dense):
        if shape != (layer.in_dim,):
            raise ShapeError(f"{_fmt_shape(shape)} vs {layer.in_dim}")
        return (layer.out_dim,)
    if isinstance(layer, Conv3x3):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"{_fmt_shape(shape)} vs Conv3x3(in_channels={layer.in_channels})")
        c, h, w = shape
        if h < 3 or w < 3:
            raise ShapeError(f"spatial dims {h}x{w} too small for a 3x3 kernel")
        return (layer.out_channels, h - 2, w - 2)
    if isinstance(layer, MaxPool2x2):
        if len(shape) != 3:
            raise ShapeError(f"{_fmt_shape(shape)} vs MaxPool2x2 (needs channels, height, width)")
        c, h, w = shape
        if h < 2 or w < 2:
            raise ShapeError(f"spatial dims {h}x{w} too small for 2x2 pooling")
        return (c, h // 2, w // 2)
    if isinstance(layer, Softmax):
        if len(shape) != 1:
            raise ShapeError(f"{_fmt_shape(shape)} vs Softmax (needs a flat vector)")
        return shape
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, ReLU):
        return shape
    raise TypeError(f"unknown layer kind: {layer!r}")


def _fmt_shape(shape: tuple[int, ...]) -> str:
    if len(shape) == 1:
        return str(shape[0])
    return "(" + ", ".join(str(d) for d in shape) + ")"


@dataclass(frozen=True)
class ModelSpec:
    """Declarative layer stack with its input shape and class count."""

    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        if not self.layers:
            raise ShapeError("model needs at least one layer")
        if any(d <= 0 for d in self.input_shape):
            raise ShapeError(f"input dims must be positive, got {self.input_shape}")
        if self.num_classes <= 0:
            raise ShapeError("num_classes must be positive")
        shapes = self.layer_output_shapes()
        if shapes[-1] != (self.num_classes,):
            raise ShapeError(
                f"final layer produces {_fmt_shape(shapes[-1])}, expected {self.num_classes} classes"
            )

    def layer_output_shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes; raises naming the offending layer pair."""
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = _layer_out_shape(layer, shape)
            except ShapeError as exc:
                if i == 0:
                    raise ShapeError(f"input incompatible with layer 1: {exc}") from None
                raise ShapeError(f"layer {i}->{i + 1} incompatible: {exc}") from None
            shapes.append(shape)
        return shapes

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    def parametric_layer_indices(self) -> list[int]:
        return [i for i, l in enumerate(self.layers) if isinstance(l, (Dense, Conv3x3))]


def _layer_param_count(layer: LayerSpec) -> int:
    if isinstance(layer, Dense):
        return layer.in_dim * layer.out_dim + layer.out_dim
    if isinstance(layer, Conv3x3):
        return 9 * layer.in_channels * layer.out_channels + layer.out_channels
    return 0


def param_count(spec: ModelSpec) -> int:
    """Total trainable scalars: Dense in*out+out, Conv3x3 9*ci*co+co."""
    return sum(_layer_param_count(l) for l in spec.layers)


def layer_offsets(spec: ModelSpec) -> tuple[tuple[int, int], ...]:
    """(start, length) into the flat parameter vector, one per layer."""
    offsets = []
    start = 0
    for layer in spec.layers:
        n = _layer_param_count(layer)
        offsets.append((start, n))
        start += n
    return tuple(offsets)


def spec_to_dict(spec: ModelSpec) -> dict:
    layers = []
    for layer in spec.layers:
        entry: dict = {"kind": _KIND_NAMES[type(layer)]}
        if isinstance(layer, Dense):
            entry.update({"in": layer.in_dim, "out": layer.out_dim})
        elif isinstance(layer, Conv3x3):
            entry.update({"in_channels": layer.in_channels, "out_channels": layer.out_channels})
        layers.append(entry)
    return {
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "layers": layers,
    }


def spec_from_dict(obj: dict) -> ModelSpec:
    layers: list[LayerSpec] = []
    for i, entry in enumerate(obj["layers"]):
        kind = entry.get("kind")
        if kind == "dense":
            layers.append(Dense(int(entry["in"]), int(entry["out"])))
        elif kind == "conv3x3":
            layers.append(Conv3x3(int(entry["in_channels"]), int(entry["out_channels"])))
        elif kind == "maxpool2x2":
            layers.append(MaxPool2x2())
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "softmax":
            layers.append(Softmax())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ValueError(f"layers[{i}]: unknown layer kind {kind!r}")
    return ModelSpec(
        layers=tuple(layers),
        input_shape=tuple(int(d) for d in obj["input_shape"]),
        num_classes=int(obj["num_classes"]),
    )


# ---------------------------------------------------------------------------
# Models and parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Model:
    """A spec plus its flat parameter vector. Treated as immutable."""

    spec: ModelSpec
    params: np.ndarray
    offsets: tuple[tuple[int, int], ...]

    def with_params(self, params: np.ndarray) -> "Model":
        if params.shape != self.params.shape:
            raise ValueError(f"parameter length {params.size} != {self.params.size}")
        return replace(self, params=np.ascontiguousarray(params, dtype=np.float64))

    def layer_weights(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        """(weights, biases) views for parametric layer ``index``."""
        layer = self.spec.layers[index]
        start, n = self.offsets[index]
        if n == 0:
            raise ValueError(f"layer {index} has no parameters")
        sl = self.params[start : start + n]
        if isinstance(layer, Dense):
            w = sl[: layer.in_dim * layer.out_dim].reshape(layer.in_dim, layer.out_dim)
            b = sl[layer.in_dim * layer.out_dim :]
        else:
            assert isinstance(layer, Conv3x3)
            nw = 9 * layer.in_channels * layer.out_channels
            w = sl[:nw].reshape(layer.out_channels, layer.in_channels, 3, 3)
            b = sl[nw:]
        return w, b


def build_model(spec: ModelSpec, seed: int) -> Model:
    """Instantiate ``spec`` with fan-scaled uniform weights and zero biases.

    Weights of each Dense/Conv layer are drawn uniformly from
    +-sqrt(6 / (fan_in + fan_out)); for Conv3x3, fans include the 3x3
    receptive field. Deterministic given (spec, seed).
    """
    spec.layer_output_shapes()  # raises on incompatible stacks
    rng = stream(seed, "model-init")
    chunks: list[np.ndarray] = []
    for layer in spec.layers:
        if isinstance(layer, Dense):
            bound = math.sqrt(6.0 / (layer.in_dim + layer.out_dim))
            w = rng.uniform(-bound, bound, size=layer.in_dim * layer.out_dim)
            chunks.append(w)
            chunks.append(np.zeros(layer.out_dim))
        elif isinstance(layer, Conv3x3):
            fan_in = 9 * layer.in_channels
            fan_out = 9 * layer.out_channels
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-bound, bound, size=9 * layer.in_channels * layer.out_channels)
            chunks.append(w)
            chunks.append(np.zeros(layer.out_channels))
    params = np.concatenate(chunks) if chunks else np.zeros(0)
    return Model(spec=spec, params=params, offsets=layer_offsets(spec))


def model_from_params(spec: ModelSpec, params: np.ndarray) -> Model:
    """Wrap an existing flat parameter vector for ``spec``."""
    params = np.ascontiguousarray(params, dtype=np.float64)
    expected = param_count(spec)
    if params.ndim != 1 or params.size != expected:
        raise ValueError(f"parameter length {params.size} != param_count {expected}")
    return Model(spec=spec, params=params, offsets=layer_offsets(spec))


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _coerce_batch(spec: ModelSpec, batch: np.ndarray) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 0:
        raise ShapeError("batch must have a leading batch dimension")
    if x.shape[1:] == spec.input_shape:
        return x
    if x.ndim == 2 and x.shape[1] == spec.input_dim:
        return x.reshape((x.shape[0],) + spec.input_shape)
    raise ShapeError(
        f"batch shape {x.shape[1:]} incompatible with model input {spec.input_shape}"
    )


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    b, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    windows = (
        x[:, :, : ho * 2, : wo * 2]
        .reshape(b, c, ho, 2, wo, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, ho, wo, 4)
    )
    idx = windows.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def _pool_backward(g: np.ndarray, cache: tuple) -> np.ndarray:
    shape, idx = cache
    b, c, h, w = shape
    ho, wo = h // 2, w // 2
    gwin = np.zeros((b, c, ho, wo, 4))
    np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
    gx = np.zeros(shape)
    gx[:, :, : ho * 2, : wo * 2] = (
        gwin.reshape(b, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, ho * 2, wo * 2)
    )
    return gx


def _conv_forward(x: np.ndarray, w: np.ndarray, bias: np.ndarray) -> np.ndarray:
    b, c, h, wd = x.shape
    ho, wo = h - 2, wd - 2
    out = np.broadcast_to(bias[None, :, None, None], (b, w.shape[0], ho, wo)).copy()
    for di in range(3):
        for dj in range(3):
            out += np.einsum(
                "bchw,oc->bohw", x[:, :, di : di + ho, dj : dj + wo], w[:, :, di, dj]
            )
    return out


def _conv_backward(
    g: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    ho, wo = g.shape[2], g.shape[3]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    gb = g.sum(axis=(0, 2, 3))
    for di in range(3):
        for dj in range(3):
            xs = x[:, :, di : di + ho, dj : dj + wo]
            gx[:, :, di : di + ho, dj : dj + wo] += np.einsum("bohw,oc->bchw", g, w[:, :, di, dj])
            gw[:, :, di, dj] = np.einsum("bohw,bchw->oc", g, xs)
    return gx, gw, gb


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _forward_pass(model: Model, batch: np.ndarray, keep_cache: bool):
    x = _coerce_batch(model.spec, batch)
    caches: list = []
    for i, layer in enumerate(model.spec.layers):
        if isinstance(layer, Dense):
            w, b = model.layer_weights(i)
            out = x @ w + b
            if keep_cache:
                caches.append(x)
        elif isinstance(layer, Conv3x3):
            w, b = model.layer_weights(i)
            out = _conv_forward(x, w, b)
            if keep_cache:
                caches.append(x)
        elif isinstance(layer, MaxPool2x2):
            out, cache = _pool_forward(x)
            if keep_cache:
                caches.append(cache)
        elif isinstance(layer, ReLU):
            out = np.maximum(x, 0.0)
            if keep_cache:
                caches.append(x)
        elif isinstance(layer, Softmax):
            out = _softmax(x)
            if keep_cache:
                caches.append(out)
        else:
            assert isinstance(layer, Flatten)
            out = x.reshape(x.shape[0], -1)
            if keep_cache:
                caches.append(x.shape)
        x = out
    return x, caches


def forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Run the layer stack on a batch; output shape (batch, num_classes)."""
    out, _ = _forward_pass(model, batch, keep_cache=False)
    return out


def _backward_pass(model: Model, caches: list, g: np.ndarray) -> np.ndarray:
    """Backpropagate output gradient ``g``; returns the flat parameter gradient."""
    grad = np.zeros_like(model.params)
    for i in range(len(model.spec.layers) - 1, -1, -1):
        layer = model.spec.layers[i]
        if isinstance(layer, Dense):
            x = caches[i]
            w, _ = model.layer_weights(i)
            gw = x.T @ g
            gb = g.sum(axis=0)
            g = g @ w.T
            start, n = model.offsets[i]
            grad[start : start + n] = np.concatenate([gw.ravel(), gb])
        elif isinstance(layer, Conv3x3):
            x = caches[i]
            w, _ = model.layer_weights(i)
            g, gw, gb = _conv_backward(g, x, w)
            start, n = model.offsets[i]
            grad[start : start + n] = np.concatenate([gw.ravel(), gb])
        elif isinstance(layer, MaxPool2x2):
            g = _pool_backward(g, caches[i])
        elif isinstance(layer, ReLU):
            g = g * (caches[i] > 0.0)
        elif isinstance(layer, Softmax):
            p = caches[i]
            g = p * (g - (g * p).sum(axis=1, keepdims=True))
        else:  # Flatten
            g = g.reshape(caches[i])
    return grad


def _require_softmax(model: Model) -> None:
    if not isinstance(model.spec.layers[-1], Softmax):
        raise ShapeError("cross-entropy loss needs a terminal Softmax layer")


def loss_and_grad(
    model: Model, batch_x: np.ndarray, batch_y: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its flat parameter gradient.

    Probabilities are clamped to [1e-9, 1 - 1e-9] before the log; the
    gradient is exact for the clamped loss (zero where the clamp binds).
    """
    _require_softmax(model)
    y = np.asarray(batch_y)
    if y.ndim != 1 or len(y) == 0:
        raise ValueError("labels must be a non-empty 1-D array")
    c = model.spec.num_classes
    if y.min() < 0 or y.max() >= c:
        raise ValueError(f"label out of range [0, {c}): {int(y.min())}..{int(y.max())}")
    p, caches = _forward_pass(model, batch_x, keep_cache=True)
    n = p.shape[0]
    rows = np.arange(n)
    pl = p[rows, y]
    clamped = np.clip(pl, PROB_FLOOR, 1.0 - PROB_FLOOR)
    loss = float(-np.mean(np.log(clamped)))
    active = ((pl > PROB_FLOOR) & (pl < 1.0 - PROB_FLOOR)).astype(np.float64)
    gp = np.zeros_like(p)
    gp[rows, y] = -active / (n * clamped)
    return loss, _backward_pass(model, caches, gp)


def soft_loss_and_grad(
    model: Model, batch_x: np.ndarray, targets: np.ndarray
) -> tuple[float, np.ndarray]:
    """Cross-entropy against soft target rows (each row a distribution)."""
    _require_softmax(model)
    t = np.asarray(targets, dtype=np.float64)
    p, caches = _forward_pass(model, batch_x, keep_cache=True)
    if t.shape != p.shape:
        raise ValueError(f"target shape {t.shape} != output shape {p.shape}")
    n = p.shape[0]
    clamped = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    loss = float(-np.mean((t * np.log(clamped)).sum(axis=1)))
    active = ((p > PROB_FLOOR) & (p < 1.0 - PROB_FLOOR)).astype(np.float64)
    gp = -(t * active) / (n * clamped)
    return loss, _backward_pass(model, caches, gp)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if not math.isfinite(self.learning_rate) or self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be finite and positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass(frozen=True)
class LayerMask:
    """Per-layer trainable flags, aligned with ModelSpec.layers."""

    trainable: tuple[bool, ...]

    @classmethod
    def all_layers(cls, spec: ModelSpec) -> "LayerMask":
        return cls(tuple(True for _ in spec.layers))

    @classmethod
    def none(cls, spec: ModelSpec) -> "LayerMask":
        return cls(tuple(False for _ in spec.layers))

    @classmethod
    def from_trainable_indices(cls, spec: ModelSpec, indices) -> "LayerMask":
        idx = set(int(i) for i in indices)
        bad = [i for i in idx if i < 0 or i >= len(spec.layers)]
        if bad:
            raise ValueError(f"layer indices out of range: {sorted(bad)}")
        return cls(tuple(i in idx for i in range(len(spec.layers))))

    @classmethod
    def after_first_parametric(cls, spec: ModelSpec) -> "LayerMask":
        """Everything trainable except the first weight-bearing layer."""
        parametric = spec.parametric_layer_indices()
        if not parametric:
            return cls.none(spec)
        first = parametric[0]
        return cls(tuple(i != first for i in range(len(spec.layers))))

    def num_trainable_parametric(self, spec: ModelSpec) -> int:
        return sum(
            1 for i in spec.parametric_layer_indices() if self.trainable[i]
        )


def _mask_grad(grad: np.ndarray, model: Model, mask: LayerMask) -> None:
    for i, flag in enumerate(mask.trainable):
        if not flag:
            start, n = model.offsets[i]
            if n:
                grad[start : start + n] = 0.0


def sgd_step(model: Model, grad: np.ndarray, lr: float) -> Model:
    """params' = params - lr * grad, elementwise."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.params.shape:
        raise ValueError(f"gradient length {grad.size} != parameter length {model.params.size}")
    return model.with_params(model.params - lr * grad)


def _sgd_epochs(model, x, target, cfg, mask, loss_fn):
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    current = model
    for epoch in range(cfg.epochs):
        perm = stream(cfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            # the shuffle picks batch membership; within a batch, samples are
            # consumed in ascending dataset order so reductions are order-stable
            idx = np.sort(perm[start : start + cfg.batch_size])
            loss, grad = loss_fn(current, x[idx], target[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            if mask is not None:
                _mask_grad(grad, current, mask)
            current = sgd_step(current, grad, cfg.learning_rate)
    return current


def train_local(
    model: Model,
    x: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    mask: LayerMask | None = None,
) -> Model:
    """Mini-batch SGD with seeded per-epoch shuffling.

    Layers excluded by ``mask`` keep their parameters bit-identical to the
    input model. The final partial batch of each epoch is used as-is.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"feature/label count mismatch: {x.shape[0]} vs {y.shape[0]}")
    return _sgd_epochs(model, x, y, cfg, mask, loss_and_grad)


def distill_local(
    model: Model,
    x: np.ndarray,
    targets: np.ndarray,
    cfg: TrainConfig,
    mask: LayerMask | None = None,
) -> Model:
    """Like train_local, but fits soft target rows instead of hard labels."""
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if x.shape[0] != targets.shape[0]:
        raise ValueError(f"feature/target count mismatch: {x.shape[0]} vs {targets.shape[0]}")
    return _sgd_epochs(model, x, targets, cfg, mask, soft_loss_and_grad)


def evaluate(model: Model, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of correct argmax predictions; ties go to the lowest class."""
    y = np.asarray(y)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty set")
    out = forward(model, np.asarray(x, dtype=np.float64))
    preds = out.argmax(axis=1)
    return float(np.mean(preds == y))


# ---------------------------------------------------------------------------
# Parameter vector serialization (checkpoint format)
# ---------------------------------------------------------------------------


def params_to_bytes(params: np.ndarray) -> bytes:
    """Little-endian float64 payload behind an 8-byte length header."""
    v = np.ascontiguousarray(params, dtype="<f8")
    if v.ndim != 1:
        raise ValueError("parameter vector must be 1-D")
    return struct.pack("<Q", v.size) + v.tobytes()


def params_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < 8:
        raise ValueError("truncated parameter blob")
    (n,) = struct.unpack_from("<Q", data, 0)
    if len(data) != 8 + 8 * n:
        raise ValueError(f"parameter blob length {len(data)} != expected {8 + 8 * n}")
    return np.frombuffer(data, dtype="<f8", offset=8).astype(np.float64)


def save_params(params: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
