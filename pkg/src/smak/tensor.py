"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: every operation a classifier forward pass
needs (dense, conv2d, relu, max_pool2d, flatten, bias_add, softmax cross
entropy) plus the scalar combinators the tests use. Operations work on plain
numpy under the hood and optionally record themselves on a Tape; backward()
replays the tape once in reverse and returns gradients for both parameters
and inputs, so the same machinery serves training and input-space attacks.

Tapes are single-threaded objects: one tape per worker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, InputError, UsageError


class Tensor:
    """n-dimensional array of float64 values, row-major."""

    __slots__ = ("data",)

    def __init__(self, data):
        # asarray keeps 0-d scalars 0-d (ascontiguousarray would not)
        self.data = np.asarray(data, dtype=np.float64, order="C")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


@dataclass
class LossValue:
    """Scalar loss; `value` is the 0-d tensor recorded on the tape."""

    value: Tensor
    kind: str = "cross_entropy"

    @property
    def scalar(self) -> float:
        return float(self.value.data)


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended in execution order, which is automatically a
    topological order (an op's inputs exist before it runs). The backward
    pass walks the list once in reverse.
    """

    __slots__ = ("nodes", "_recorded")

    def __init__(self):
        # each node: (output Tensor, input Tensors tuple, backward callable)
        # backward(grad_out, needs) -> tuple of grads aligned with inputs,
        # entries may be None where needs[i] is False.
        self.nodes = []
        self._recorded = set()

    def record(self, output: Tensor, inputs: tuple, backward_fn) -> None:
        self.nodes.append((output, inputs, backward_fn))
        self._recorded.add(id(output))
        for t in inputs:
            self._recorded.add(id(t))

    def recorded(self, t: Tensor) -> bool:
        return id(t) in self._recorded

    def __len__(self):
        return len(self.nodes)


def backward(tape: Tape, loss, wrt=None) -> dict:
    """Reverse-mode sweep from `loss` over everything `tape` recorded.

    Returns a dict mapping Tensor -> gradient ndarray. With the default
    wrt=None the map covers every tensor that appears on the tape; passing
    an iterable of tensors restricts the work (and the returned map) to the
    gradients actually needed, which roughly halves the cost of attack
    iterations that only want d(loss)/d(input).
    """
    root = loss.value if isinstance(loss, LossValue) else loss
    if not isinstance(root, Tensor) or root.data.ndim != 0:
        raise UsageError("backward requires a scalar (0-d) loss tensor")
    if not tape.recorded(root):
        raise UsageError("loss tensor was not recorded on this tape")

    if wrt is None:
        needed_ids = None
    else:
        # forward sweep: a tensor needs a gradient if it is a requested
        # tensor or any op consuming a needed tensor produced it.
        needed_ids = {id(t) for t in wrt}
        for out, inputs, _ in tape.nodes:
            if any(id(t) in needed_ids for t in inputs):
                needed_ids.add(id(out))

    grads: dict[int, np.ndarray] = {id(root): np.ones((), dtype=np.float64)}
    tensors: dict[int, Tensor] = {id(root): root}

    for out, inputs, backward_fn in reversed(tape.nodes):
        g_out = grads.get(id(out))
        if g_out is None:
            continue
        needs = tuple(
            needed_ids is None or id(t) in needed_ids for t in inputs
        )
        if not any(needs):
            continue
        in_grads = backward_fn(g_out, needs)
        for t, g in zip(inputs, in_grads):
            if g is None:
                continue
            k = id(t)
            tensors[k] = t
            if k in grads:
                grads[k] = grads[k] + g
            else:
                grads[k] = g

    result = {tensors[k]: g for k, g in grads.items()}
    if wrt is None:
        # zero-fill participants the loss does not depend on
        for out, inputs, _ in tape.nodes:
            for t in (out, *inputs):
                if t not in result:
                    result[t] = np.zeros_like(t.data)
    else:
        for t in wrt:
            if t not in result:
                result[t] = np.zeros_like(t.data)
    return result


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """out[i,o] = sum_k x[i,k] w[k,o] + b[o]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ConfigError("dense expects x[B,I], w[I,O], b[O]")
    if x.shape[1] != w.shape[0] or w.shape[1] != b.shape[0]:
        raise ConfigError(
            f"dense shape mismatch: x{x.shape} w{w.shape} b{b.shape}"
        )
    out = Tensor(x.data @ w.data + b.data)
    if tape is not None:
        xd, wd = x.data, w.data

        def _backward(g, needs):
            gx = g @ wd.T if needs[0] else None
            gw = xd.T @ g if needs[1] else None
            gb = g.sum(axis=0) if needs[2] else None
            return gx, gw, gb

        tape.record(out, (x, w, b), _backward)
    return out


def _conv_windows(xp: np.ndarray, kh: int, kw: int, stride: int):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sb, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(b, c, ho, wo, kh, kw),
        strides=(sb, sc, sh * stride, sw * stride, sh, sw),
    )


def conv2d(
    x: Tensor,
    k: Tensor,
    stride: int = 1,
    padding: int = 0,
    tape: Tape | None = None,
) -> Tensor:
    """Cross-correlation of x[B,C,H,W] with k[F,C,Kh,Kw]."""
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ConfigError("conv2d expects x[B,C,H,W] and k[F,C,Kh,Kw]")
    bsz, c, h, w = x.shape
    f, kc, kh, kw = k.shape
    if kc != c:
        raise ConfigError(f"conv2d channel mismatch: x has {c}, kernel {kc}")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d needs stride >= 1 and padding >= 0")
    if (h + 2 * padding - kh) % stride or (w + 2 * padding - kw) % stride:
        raise ConfigError(
            f"conv2d output size not integral for input {h}x{w}, "
            f"kernel {kh}x{kw}, stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError("conv2d kernel larger than padded input")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = (
        _conv_windows(xp, kh, kw, stride)
        .transpose(0, 2, 3, 1, 4, 5)
        .reshape(bsz * ho * wo, c * kh * kw)
    )
    kmat = k.data.reshape(f, c * kh * kw)
    out = Tensor(
        np.ascontiguousarray(
            (cols @ kmat.T).reshape(bsz, ho, wo, f).transpose(0, 3, 1, 2)
        )
    )
    if tape is not None:

        def _backward(g, needs):
            gmat = g.transpose(0, 2, 3, 1).reshape(bsz * ho * wo, f)
            gk = (gmat.T @ cols).reshape(k.shape) if needs[1] else None
            gx = None
            if needs[0]:
                gwin = (
                    (gmat @ kmat)
                    .reshape(bsz, ho, wo, c, kh, kw)
                    .transpose(0, 3, 1, 2, 4, 5)
                )
                gxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        gxp[
                            :,
                            :,
                            i : i + ho * stride : stride,
                            j : j + wo * stride : stride,
                        ] += gwin[:, :, :, :, i, j]
                gx = (
                    gxp[:, :, padding : padding + h, padding : padding + w]
                    if padding
                    else gxp
                )
                gx = np.ascontiguousarray(gx)
            return gx, gk

        tape.record(out, (x, k), _backward)
    return out


def bias_add(x: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Per-channel bias for feature maps: x[B,C,H,W] + b[C]."""
    if x.data.ndim != 4 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ConfigError(f"bias_add shape mismatch: x{x.shape} b{b.shape}")
    out = Tensor(x.data + b.data[None, :, None, None])
    if tape is not None:

        def _backward(g, needs):
            gx = g if needs[0] else None
            gb = g.sum(axis=(0, 2, 3)) if needs[1] else None
            return gx, gb

        tape.record(out, (x, b), _backward)
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data > 0.0

        def _backward(g, needs):
            return (g * mask if needs[0] else None,)

        tape.record(out, (x,), _backward)
    return out


def max_pool2d(
    x: Tensor, size: int = 2, stride: int | None = None, tape: Tape | None = None
) -> Tensor:
    """Max pooling; ties go to the first element in row-major window order."""
    if x.data.ndim != 4:
        raise ConfigError("max_pool2d expects x[B,C,H,W]")
    if size < 1:
        raise ConfigError("max_pool2d needs size >= 1")
    stride = size if stride is None else stride
    bsz, c, h, w = x.shape
    if h < size or w < size:
        raise ConfigError("max_pool2d window larger than input")
    ho = (h - size) // stride + 1
    wo = (w - size) // stride + 1
    win = _conv_windows(x.data, size, size, stride).reshape(
        bsz, c, ho, wo, size * size
    )
    # argmax picks the first occurrence on ties (row-major within the window)
    idx = win.argmax(axis=-1)
    out = Tensor(np.take_along_axis(win, idx[..., None], axis=-1)[..., 0])
    if tape is not None:

        def _backward(g, needs):
            if not needs[0]:
                return (None,)
            gx = np.zeros_like(x.data)
            bi, ci, oi, oj = np.ogrid[0:bsz, 0:c, 0:ho, 0:wo]
            rows = oi * stride + idx // size
            cols = oj * stride + idx % size
            np.add.at(gx, (bi, ci, rows, cols), g)
            return (gx,)

        tape.record(out, (x,), _backward)
    return out


def flatten(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    bsz = x.shape[0]
    out = Tensor(x.data.reshape(bsz, -1))
    if tape is not None:

        def _backward(g, needs):
            return (g.reshape(x.shape) if needs[0] else None,)

        tape.record(out, (x,), _backward)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ConfigError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:

        def _backward(g, needs):
            return (g if needs[0] else None, g if needs[1] else None)

        tape.record(out, (a, b), _backward)
    return out


def scale(x: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c)
    if tape is not None:

        def _backward(g, needs):
            return (g * c if needs[0] else None,)

        tape.record(out, (x,), _backward)
    return out


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor(x.data.sum())
    if tape is not None:

        def _backward(g, needs):
            return (np.full_like(x.data, float(g)) if needs[0] else None,)

        tape.record(out, (x,), _backward)
    return out


def softmax_cross_entropy(
    logits: Tensor, labels, tape: Tape | None = None
) -> LossValue:
    """Mean over the batch of -log softmax(logits)[label].

    Numerically stabilized by subtracting the per-row maximum before
    exponentiation.
    """
    if logits.data.ndim != 2:
        raise ConfigError("softmax_cross_entropy expects logits[B,C]")
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y[None]
    y = y.astype(np.int64, copy=False)
    bsz, ncls = logits.shape
    if y.shape != (bsz,):
        raise InputError(f"labels shape {y.shape} does not match batch {bsz}")
    if y.min(initial=0) < 0 or y.max(initial=0) >= ncls:
        raise InputError(f"labels must lie in [0, {ncls})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    loss = Tensor(-logp[np.arange(bsz), y].mean())
    if tape is not None:

        def _backward(g, needs):
            if not needs[0]:
                return (None,)
            gl = probs.copy()
            gl[np.arange(bsz), y] -= 1.0
            gl *= float(g) / bsz
            return (gl,)

        tape.record(loss, (logits,), _backward)
    return LossValue(loss)


def finite_diff_grad(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    This is the independent oracle the autodiff tests are checked against;
    it never touches the tape machinery.
    """
    if h <= 0:
        raise ConfigError("finite_diff_grad needs h > 0")
    base = x.data.copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(base)))
        flat[i] = orig - h
        fm = float(f(Tensor(base)))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return Tensor(grad)
