"""Differentiable primitives.

Each primitive is a class with a ``forward(ctx, *arrays, **attrs)`` that
returns a numpy array and a ``backward(ctx, grad)`` that returns one gradient
(or ``None``) per input.  The public functions at the bottom wrap them in
``Tensor`` objects and record them on the active tape.

Feature maps are channel-first: ``(c, h, w)`` for one sample and
``(N, c, h, w)`` for a batch.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NumericError, ShapeError, Tensor, active_tape

LOG_FLOOR = 1e-12


def _apply(op, inputs: Sequence[Tensor], **attrs) -> Tensor:
    ctx: dict = {}
    out = op.forward(ctx, *(t.data for t in inputs), **attrs)
    requires_grad = any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=requires_grad)
    tape = active_tape()
    if tape is not None and requires_grad:
        tape.record(op, inputs, result, ctx, attrs)
    return result


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Add:
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
        return a + b

    @staticmethod
    def backward(ctx, g):
        return g, g


class Scale:
    @staticmethod
    def forward(ctx, a, factor):
        ctx["factor"] = factor
        return a * a.dtype.type(factor)

    @staticmethod
    def backward(ctx, g):
        return (g * g.dtype.type(ctx["factor"]),)


def _channel_broadcast_ok(a_shape, b_shape) -> bool:
    if len(a_shape) != len(b_shape) or len(a_shape) < 3:
        return False
    return b_shape[-3] == 1 and b_shape[-2:] == a_shape[-2:] and b_shape[:-3] == a_shape[:-3]


class ElementwiseMul:
    @staticmethod
    def forward(ctx, a, b):
        if a.shape == b.shape:
            ctx["broadcast"] = False
        elif _channel_broadcast_ok(a.shape, b.shape):
            ctx["broadcast"] = True
        else:
            raise ShapeError(f"elementwise_mul: cannot combine {a.shape} with {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a * b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        ga = g * b
        gb = g * a
        if ctx["broadcast"]:
            gb = gb.sum(axis=-3, keepdims=True)
        return ga, gb


class MatMul:
    @staticmethod
    def forward(ctx, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        ctx["a"], ctx["b"] = a, b
        return a @ b

    @staticmethod
    def backward(ctx, g):
        a, b = ctx["a"], ctx["b"]
        return g @ b.T, a.T @ g


class Linear:
    """``x @ weight + bias`` with x of shape (N, in) or (in,)."""

    @staticmethod
    def forward(ctx, x, weight, bias):
        if x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
        ctx["x"], ctx["w"] = x, weight
        return x @ weight + bias

    @staticmethod
    def backward(ctx, g):
        x, w = ctx["x"], ctx["w"]
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return g @ w.T, x2.T @ g2, g2.sum(axis=0)


class ReLU:
    @staticmethod
    def forward(ctx, x):
        mask = x > 0
        ctx["mask"] = mask
        return np.where(mask, x, x.dtype.type(0))

    @staticmethod
    def backward(ctx, g):
        return (g * ctx["mask"],)


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


class Conv2d:
    """Cross-correlation of (N, C, H, W) with (O, C, kh, kw), plus per-channel bias."""

    @staticmethod
    def forward(ctx, x, kernel, bias, stride=1, padding=0):
        if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
            raise ShapeError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
        if stride < 1 or padding < 0:
            raise ValueError(f"conv2d: bad stride={stride} / padding={padding}")
        n, c, h, w = x.shape
        o, _, kh, kw = kernel.shape
        ho = conv_output_size(h, kh, stride, padding)
        wo = conv_output_size(w, kw, stride, padding)
        if ho < 1 or wo < 1:
            raise ValueError(f"conv2d: output size {ho}x{wo} is not positive")
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} for {o} output channels")
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        # win: (N, C, Ho, Wo, kh, kw)
        out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
        out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
        ctx.update(win=win, kernel=kernel, xshape=x.shape, stride=stride, padding=padding)
        return np.ascontiguousarray(out)

    @staticmethod
    def backward(ctx, g):
        win, kernel = ctx["win"], ctx["kernel"]
        s, p = ctx["stride"], ctx["padding"]
        n, c, h, w = ctx["xshape"]
        o, _, kh, kw = kernel.shape
        ho, wo = g.shape[2], g.shape[3]
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
        gb = g.sum(axis=(0, 2, 3))
        gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                contrib = np.tensordot(g, kernel[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
                gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += contrib.transpose(0, 3, 1, 2)
        gx = gxp[:, :, p : p + h, p : p + w] if p else gxp
        return gx, gk, gb


class GlobalAvgPool:
    """Mean over the two trailing (spatial) axes."""

    @staticmethod
    def forward(ctx, x):
        if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
            raise ShapeError(f"global_avg_pool: empty spatial dims in {x.shape}")
        ctx["shape"] = x.shape
        return x.mean(axis=(-2, -1))

    @staticmethod
    def backward(ctx, g):
        shape = ctx["shape"]
        area = shape[-1] * shape[-2]
        return (np.broadcast_to((g / area)[..., None, None], shape).copy(),)


class MaxReduceSet:
    """Elementwise max over a list of equal-shape arrays; ties go to the lowest index."""

    @staticmethod
    def forward(ctx, *xs):
        if not xs:
            raise ShapeError("max_reduce_set: empty input set")
        first = xs[0].shape
        for x in xs:
            if x.shape != first:
                raise ShapeError(f"max_reduce_set: mixed shapes {first} and {x.shape}")
        stacked = np.stack(xs, axis=0)
        idx = np.argmax(stacked, axis=0)
        ctx["idx"], ctx["count"] = idx, len(xs)
        return np.take_along_axis(stacked, idx[None], axis=0)[0]

    @staticmethod
    def backward(ctx, g):
        idx = ctx["idx"]
        return tuple(np.where(idx == k, g, g.dtype.type(0)) for k in range(ctx["count"]))


class Softmax:
    @staticmethod
    def forward(ctx, z):
        if np.isnan(z).any():
            raise NumericError("softmax: NaN in logits")
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
        ctx["p"] = p
        return p

    @staticmethod
    def backward(ctx, g):
        p = ctx["p"]
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)


class CrossEntropy:
    """Mean over the batch of -log(max(p[label], 1e-12))."""

    @staticmethod
    def forward(ctx, probs, labels):
        single = probs.ndim == 1
        p2 = probs[None] if single else probs
        lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if lab.shape[0] != p2.shape[0]:
            raise ShapeError(f"cross_entropy: {lab.shape[0]} labels for {p2.shape[0]} rows")
        if lab.min() < 0 or lab.max() >= p2.shape[1]:
            raise IndexError(f"cross_entropy: label out of range for C={p2.shape[1]}")
        rows = np.arange(p2.shape[0])
        picked = p2[rows, lab]
        clipped = np.maximum(picked, LOG_FLOOR)
        ctx.update(shape=probs.shape, single=single, lab=lab, picked=picked, clipped=clipped)
        return np.asarray(-np.log(clipped).mean(), dtype=probs.dtype)

    @staticmethod
    def backward(ctx, g):
        lab, picked, clipped = ctx["lab"], ctx["picked"], ctx["clipped"]
        n = lab.shape[0]
        shape = ctx["shape"]
        gp = np.zeros((n,) + shape[-1:], dtype=clipped.dtype)
        live = picked >= LOG_FLOOR
        gp[np.arange(n), lab] = np.where(live, -g / (n * clipped), 0)
        return (gp[0] if ctx["single"] else gp), None


class Reshape:
    @staticmethod
    def forward(ctx, x, shape):
        ctx["shape"] = x.shape
        return x.reshape(shape)

    @staticmethod
    def backward(ctx, g):
        return (g.reshape(ctx["shape"]),)


class Slice:
    @staticmethod
    def forward(ctx, x, key):
        ctx["shape"], ctx["key"] = x.shape, key
        return np.ascontiguousarray(x[key])

    @staticmethod
    def backward(ctx, g):
        full = np.zeros(ctx["shape"], dtype=g.dtype)
        full[ctx["key"]] = g
        return (full,)


class Sum:
    @staticmethod
    def forward(ctx, x):
        ctx["shape"] = x.shape
        return np.asarray(x.sum(), dtype=x.dtype)

    @staticmethod
    def backward(ctx, g):
        return (np.full(ctx["shape"], g, dtype=g.dtype),)


class Mean:
    @staticmethod
    def forward(ctx, x):
        ctx["shape"] = x.shape
        return np.asarray(x.mean(), dtype=x.dtype)

    @staticmethod
    def backward(ctx, g):
        shape = ctx["shape"]
        return (np.full(shape, g / max(int(np.prod(shape)), 1), dtype=g.dtype),)


# -- public API ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return _apply(Add, [_as_tensor(a), _as_tensor(b)])


def scale(a: Tensor, factor: float) -> Tensor:
    return _apply(Scale, [a], factor=float(factor))


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """Product of equal shapes, or ``b`` with a size-1 channel axis broadcast over ``a``'s channels."""
    return _apply(ElementwiseMul, [_as_tensor(a), _as_tensor(b)])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return _apply(MatMul, [_as_tensor(a), _as_tensor(b)])


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return _apply(Linear, [x, weight, bias])


def relu(x: Tensor) -> Tensor:
    return _apply(ReLU, [x])


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if bias is None:
        bias = Tensor(np.zeros(kernel.shape[0], dtype=kernel.dtype))
    return _apply(Conv2d, [_as_tensor(x), kernel, bias], stride=int(stride), padding=int(padding))


def global_avg_pool(x: Tensor) -> Tensor:
    return _apply(GlobalAvgPool, [x])


def max_reduce_set(features: Sequence[Tensor]) -> Tensor:
    if len(features) == 0:
        raise ShapeError("max_reduce_set: empty input set")
    return _apply(MaxReduceSet, list(features))


def softmax(logits: Tensor) -> Tensor:
    return _apply(Softmax, [_as_tensor(logits)])


def cross_entropy(probs: Tensor, label) -> Tensor:
    labels = Tensor(np.atleast_1d(np.asarray(label, dtype=np.float64)))
    return _apply(_CrossEntropyTensorLabels, [probs, labels])


class _CrossEntropyTensorLabels:
    # labels travel as a (non-differentiable) tensor so the tape can replay them

    @staticmethod
    def forward(ctx, probs, labels):
        return CrossEntropy.forward(ctx, probs, labels.astype(np.int64))

    @staticmethod
    def backward(ctx, g):
        return CrossEntropy.backward(ctx, g)


def reshape(x: Tensor, shape) -> Tensor:
    return _apply(Reshape, [x], shape=tuple(shape))


def slice_(x: Tensor, key) -> Tensor:
    return _apply(Slice, [x], key=key)


def sum_(x: Tensor) -> Tensor:
    return _apply(Sum, [x])


def mean(x: Tensor) -> Tensor:
    return _apply(Mean, [x])
