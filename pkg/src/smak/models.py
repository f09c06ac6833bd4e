"""Small CNN classifiers: architecture specs, init, training, persistence.

Three architecturally distinct convnets ship as the desk-scale stand-ins
for the source/target models of the transfer benchmark. Training is plain
SGD with momentum on cross-entropy, single-threaded and bitwise
reproducible from (spec, seed, dataset, hyperparameters). Trained
parameters are immutable in practice: attacks and evaluation never write
to them, so one model can serve many concurrent workers.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, InputError, TrainingError, UsageError
from .tensor import Tape, Tensor

CHECKPOINT_MAGIC = b"SMAK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Layered CNN description; layers chain from input_shape to num_classes."""

    name: str
    layers: tuple
    input_shape: tuple  # (C, H, W)
    num_classes: int

    def validate(self) -> None:
        shapes = infer_shapes(self)
        final = shapes[-1]
        if final != (self.num_classes,):
            raise ConfigError(
                f"spec {self.name!r}: final layer yields {final}, "
                f"expected ({self.num_classes},)"
            )


def infer_shapes(spec: ModelSpec) -> list:
    """Per-layer output shapes (without batch dim); raises ConfigError on breaks."""
    shape = tuple(spec.input_shape)
    out = []
    for i, layer in enumerate(spec.layers):
        op = layer["op"]
        if op == "conv2d":
            if len(shape) != 3:
                raise ConfigError(f"layer {i}: conv2d needs [C,H,W] input, got {shape}")
            c, h, w = shape
            k, s, p = layer["kernel"], layer.get("stride", 1), layer.get("padding", 0)
            if (h + 2 * p - k) % s or (w + 2 * p - k) % s:
                raise ConfigError(f"layer {i}: conv2d output size not integral")
            shape = (layer["filters"], (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        elif op == "relu":
            pass
        elif op == "max_pool2d":
            c, h, w = shape
            k = layer.get("size", 2)
            s = layer.get("stride", k)
            shape = (c, (h - k) // s + 1, (w - k) // s + 1)
        elif op == "flatten":
            shape = (int(np.prod(shape)),)
        elif op == "dense":
            if len(shape) != 1:
                raise ConfigError(f"layer {i}: dense needs flattened input, got {shape}")
            shape = (layer["units"],)
        else:
            raise ConfigError(f"layer {i}: unknown op {op!r}")
        out.append(shape)
    return out


def _conv(filters, kernel, stride=1, padding=0):
    return {"op": "conv2d", "filters": filters, "kernel": kernel, "stride": stride, "padding": padding}


# three distinct depths/kernels/filter counts so that source != target
# transfer is architecturally nontrivial
ARCHITECTURES = {
    "convnet_a": (
        _conv(8, 3, 1, 1), {"op": "relu"}, {"op": "max_pool2d", "size": 2},
        _conv(16, 3, 1, 1), {"op": "relu"}, {"op": "max_pool2d", "size": 2},
        {"op": "flatten"}, {"op": "dense", "units": 10},
    ),
    "convnet_b": (
        _conv(12, 5, 1, 2), {"op": "relu"}, {"op": "max_pool2d", "size": 2},
        _conv(16, 3, 1, 1), {"op": "relu"}, {"op": "max_pool2d", "size": 2},
        {"op": "flatten"}, {"op": "dense", "units": 48}, {"op": "relu"},
        {"op": "dense", "units": 10},
    ),
    "convnet_c": (
        _conv(8, 3, 1, 1), {"op": "relu"},
        _conv(12, 3, 1, 1), {"op": "relu"}, {"op": "max_pool2d", "size": 2},
        _conv(16, 3, 1, 1), {"op": "relu"}, {"op": "max_pool2d", "size": 2},
        {"op": "flatten"}, {"op": "dense", "units": 10},
    ),
}


def make_spec(arch: str, input_shape=(1, 28, 28), num_classes: int = 10) -> ModelSpec:
    if arch not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch!r}; have {sorted(ARCHITECTURES)}")
    layers = tuple(dict(layer) for layer in ARCHITECTURES[arch])
    if num_classes != 10:
        layers = layers[:-1] + ({"op": "dense", "units": num_classes},)
    spec = ModelSpec(arch, layers, tuple(input_shape), num_classes)
    spec.validate()
    return spec


@dataclass
class ModelParams:
    spec: ModelSpec
    weights: dict  # name -> Tensor
    train_seed: int
    metadata: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.spec,
            {k: v.copy() for k, v in self.weights.items()},
            self.train_seed,
            dict(self.metadata),
        )


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """He-scaled random weights, zero biases, deterministic per seed."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    weights = {}
    shape = tuple(spec.input_shape)
    shapes = [shape] + infer_shapes(spec)
    for i, layer in enumerate(spec.layers):
        op = layer["op"]
        if op == "conv2d":
            c = shapes[i][0]
            k = layer["kernel"]
            fan_in = c * k * k
            weights[f"layer{i}.w"] = Tensor(
                rng.standard_normal((layer["filters"], c, k, k)) * np.sqrt(2.0 / fan_in)
            )
            weights[f"layer{i}.b"] = Tensor(np.zeros(layer["filters"]))
        elif op == "dense":
            fan_in = shapes[i][0]
            weights[f"layer{i}.w"] = Tensor(
                rng.standard_normal((fan_in, layer["units"])) * np.sqrt(2.0 / fan_in)
            )
            weights[f"layer{i}.b"] = Tensor(np.zeros(layer["units"]))
    return ModelParams(spec, weights, seed, {})


def forward(params: ModelParams, x: Tensor, tape: Tape | None = None) -> Tensor:
    """Run the spec's layer chain; records on `tape` when given."""
    h = x
    for i, layer in enumerate(params.spec.layers):
        op = layer["op"]
        if op == "conv2d":
            h = T.conv2d(h, params.weights[f"layer{i}.w"],
                         layer.get("stride", 1), layer.get("padding", 0), tape)
            h = T.bias_add(h, params.weights[f"layer{i}.b"], tape)
        elif op == "relu":
            h = T.relu(h, tape)
        elif op == "max_pool2d":
            h = T.max_pool2d(h, layer.get("size", 2), layer.get("stride"), tape)
        elif op == "flatten":
            h = T.flatten(h, tape)
        elif op == "dense":
            h = T.dense(h, params.weights[f"layer{i}.w"], params.weights[f"layer{i}.b"], tape)
    return h


def _as_batch(params: ModelParams, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape == tuple(params.spec.input_shape):
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != tuple(params.spec.input_shape):
        raise InputError(
            f"input shape {arr.shape} does not match model input "
            f"{tuple(params.spec.input_shape)}"
        )
    return arr


def predict(params: ModelParams, x, batch_size: int = 256):
    """Deterministic forward pass without a tape: (logits [B,C], labels [B])."""
    arr = _as_batch(params, x)
    chunks = [
        forward(params, Tensor(arr[i : i + batch_size])).data
        for i in range(0, len(arr), batch_size)
    ]
    logits = np.concatenate(chunks, axis=0)
    return logits, logits.argmax(axis=1)


def accuracy(params: ModelParams, images, labels, batch_size: int = 256) -> float:
    _, pred = predict(params, images, batch_size)
    return float((pred == np.asarray(labels)).mean())


def ensemble_logits(models, x: Tensor, weights=None, tape: Tape | None = None) -> Tensor:
    """(Weighted) mean of per-model logits; differentiable through `tape`."""
    models = list(models)
    if not models:
        raise UsageError("ensemble_logits needs at least one model")
    ncls = models[0].spec.num_classes
    if any(m.spec.num_classes != ncls for m in models):
        raise UsageError("ensemble models must share num_classes")
    if weights is None:
        weights = [1.0 / len(models)] * len(models)
    if len(weights) != len(models):
        raise UsageError("one weight per model required")
    out = None
    for m, w in zip(models, weights):
        term = T.scale(forward(m, x, tape), float(w), tape)
        out = term if out is None else T.add(out, term, tape)
    return out


def loss_and_input_grad(model, x: np.ndarray, y) -> tuple:
    """Cross-entropy loss and its gradient w.r.t. the input batch.

    `model` is a ModelParams or a list of them (attacked as a uniform
    logit-ensemble). Returns (loss_scalar, grad ndarray like x).
    """
    tape = Tape()
    xt = Tensor(x)
    if isinstance(model, ModelParams):
        logits = forward(model, xt, tape)
    else:
        logits = ensemble_logits(model, xt, tape=tape)
    loss = T.softmax_cross_entropy(logits, y, tape)
    grad = T.backward(tape, loss, wrt=(xt,))[xt]
    return loss.scalar, grad


def train(
    params: ModelParams,
    train_images: np.ndarray,
    train_labels: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    momentum: float = 0.9,
    test_images=None,
    test_labels=None,
    adv_crafter=None,
    adv_fraction: float = 0.5,
    progress=None,
) -> ModelParams:
    """SGD-with-momentum minimization of cross-entropy.

    `adv_crafter(params, x, y) -> x_adv`, when given, replaces
    `adv_fraction` of every batch with adversarial examples crafted
    against the current weights (the adversarially-trained target model).
    Deterministic given (params.train_seed, data, hyperparameters).
    """
    if len(train_images) == 0:
        raise TrainingError("empty training set")
    out = params.copy()
    if epochs < 1:
        return out
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((params.train_seed, 1)))
    velocity = {k: np.zeros_like(v.data) for k, v in out.weights.items()}
    wkeys = sorted(out.weights)
    n = len(train_images)
    last_loss = None
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            xb = train_images[idx]
            yb = train_labels[idx]
            if adv_crafter is not None and adv_fraction > 0:
                k = int(round(len(idx) * adv_fraction))
                if k:
                    xb = xb.copy()
                    xb[:k] = adv_crafter(out, xb[:k], yb[:k])
            tape = Tape()
            loss = T.softmax_cross_entropy(forward(out, Tensor(xb), tape), yb, tape)
            if not np.isfinite(loss.scalar):
                raise TrainingError(
                    f"loss diverged to {loss.scalar} at epoch {epoch}, "
                    f"batch starting {start} (lr={lr})"
                )
            grads = T.backward(tape, loss, wrt=set(out.weights.values()))
            for k in wkeys:
                w = out.weights[k]
                velocity[k] = momentum * velocity[k] - lr * grads[w]
                w.data += velocity[k]
            last_loss = loss.scalar
        if progress is not None:
            progress(epoch, last_loss)
    out.metadata.update(
        {
            "epochs": epochs,
            "lr": lr,
            "batch_size": batch_size,
            "momentum": momentum,
            "final_train_loss": last_loss,
        }
    )
    if adv_crafter is not None:
        out.metadata["adv_fraction"] = adv_fraction
    if test_images is not None:
        out.metadata["test_accuracy"] = accuracy(out, test_images, test_labels)
    return out


# ---------------------------------------------------------------------------
# persistence: one binary container for checkpoints and tensor archives
# ---------------------------------------------------------------------------


def save_tensors(path, header: dict, tensors: dict) -> None:
    """magic 'SMAK', u32 version, length-prefixed JSON header, named tensors
    (u32 name length, name, u32 ndim, u32 dims, little-endian float64)."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype=np.float64)
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype("<f8", copy=False).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_tensors(path):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{path}: truncated file")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (hlen,) = struct.unpack("<I", take(4))
    try:
        header = json.loads(bytes(take(hlen)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(take(size * 8), dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return header, tensors


def save_checkpoint(params: ModelParams, path) -> None:
    header = {
        "kind": "model",
        "spec": {
            "name": params.spec.name,
            "layers": list(params.spec.layers),
            "input_shape": list(params.spec.input_shape),
            "num_classes": params.spec.num_classes,
        },
        "train_seed": params.train_seed,
        "metadata": params.metadata,
    }
    save_tensors(path, header, {k: v.data for k, v in params.weights.items()})


def load_checkpoint(path) -> ModelParams:
    header, tensors = load_tensors(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path}: not a model checkpoint")
    s = header["spec"]
    spec = ModelSpec(
        s["name"],
        tuple(dict(layer) for layer in s["layers"]),
        tuple(s["input_shape"]),
        s["num_classes"],
    )
    spec.validate()
    params = ModelParams(
        spec,
        {k: Tensor(v) for k, v in tensors.items()},
        header["train_seed"],
        header.get("metadata", {}),
    )
    # shapes must match what the spec implies
    check = init_params(spec, 0)
    for name, ref in check.weights.items():
        if name not in params.weights:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if params.weights[name].shape != ref.shape:
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape "
                f"{params.weights[name].shape}, spec implies {ref.shape}"
            )
    return params


def file_checksum(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
