"""Reverse-mode differentiation over a fixed vocabulary of layer ops.

Arrays are plain numpy arrays (float32 for storage). Kernels accumulate in
float64 and return the dtype of their input, so the same kernels serve the
float32 training path and float64 gradient checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

OP_KINDS = (
    "leaf",
    "conv2d",
    "avgpool2d",
    "linear",
    "relu",
    "qrelu",
    "dropout",
    "scale",
    "add",
    "softmax-cross-entropy",
    "synop-penalty",
)


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def _conv_windows(x, kh, kw, stride, padding):
    sh, sw = stride
    ph, pw = padding
    xp = np.pad(x.astype(np.float64, copy=False), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::sh, ::sw]


def conv2d(x, weight, stride=1, padding=0):
    """Bias-free cross-correlation. x: [N,C,H,W], weight: [K,C,kh,kw]."""
    stride, padding = _pair(stride), _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    k, wc, kh, kw = weight.shape
    if c != wc:
        raise DimensionError(f"conv2d channel mismatch: input has {c}, weight expects {wc}")
    if kh > h + 2 * padding[0] or kw > w + 2 * padding[1]:
        raise DimensionError(f"kernel {kh}x{kw} larger than padded input {h}x{w}")
    win = _conv_windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, weight.astype(np.float64, copy=False), axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2)).astype(x.dtype, copy=False)


def conv2d_backward(grad_out, x, weight, stride=1, padding=0):
    """Gradients of conv2d with respect to its input and weight."""
    stride, padding = _pair(stride), _pair(padding)
    n, c, h, w = x.shape
    k, _, kh, kw = weight.shape
    oh = _out_size(h, kh, stride[0], padding[0])
    ow = _out_size(w, kw, stride[1], padding[1])
    if grad_out.shape != (n, k, oh, ow):
        raise DimensionError(f"grad_out shape {grad_out.shape} != conv output {(n, k, oh, ow)}")
    g = grad_out.astype(np.float64, copy=False)
    win = _conv_windows(x, kh, kw, stride, padding)
    grad_w = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))

    sh, sw = stride
    ph, pw = padding
    gxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
    w64 = weight.astype(np.float64, copy=False)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, w64[:, :, i, j], axes=([1], [0]))  # n,oh,ow,c
            gxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += contrib.transpose(0, 3, 1, 2)
    grad_x = gxp[:, :, ph : ph + h, pw : pw + w]
    return grad_x.astype(x.dtype), grad_w.astype(weight.dtype)


def avgpool2d(x, kernel=2, stride=None):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d expects 4-d input, got {x.shape}")
    if kh > x.shape[2] or kw > x.shape[3]:
        raise DimensionError(f"pool window {kh}x{kw} larger than input {x.shape[2:]}")
    win = sliding_window_view(x.astype(np.float64, copy=False), (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    return win.mean(axis=(-2, -1)).astype(x.dtype)


def avgpool2d_backward(grad_out, x, kernel=2, stride=None):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    _, _, oh, ow = grad_out.shape
    g = grad_out.astype(np.float64) / (kh * kw)
    gx = np.zeros(x.shape)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += g
    return gx.astype(x.dtype)


def linear(x, weight):
    """x: [N, ...] flattened to [N, D]; weight: [M, D]."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear expects {weight.shape[1]} input features, got {flat.shape[1]}")
    out = flat.astype(np.float64, copy=False) @ weight.astype(np.float64, copy=False).T
    return out.astype(x.dtype)


def linear_backward(grad_out, x, weight):
    flat = x.reshape(x.shape[0], -1).astype(np.float64, copy=False)
    g = grad_out.astype(np.float64, copy=False)
    grad_x = (g @ weight.astype(np.float64, copy=False)).reshape(x.shape)
    grad_w = g.T @ flat
    return grad_x.astype(x.dtype), grad_w.astype(weight.dtype)


def relu(x):
    return np.where(x > 0, x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out, x):
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def qrelu(x):
    """0 for x <= 0, floor(x) otherwise."""
    return np.where(x > 0, np.floor(x), 0).astype(x.dtype, copy=False)


# surrogate: the ReLU derivative stands in for the (zero almost everywhere) true one
qrelu_backward = relu_backward


def dropout_mask(shape, p, rng):
    """Inverted-dropout mask: zeros with probability p, survivors scaled by 1/(1-p)."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout p must lie in [0, 1), got {p}")
    if p == 0:
        return None
    keep = rng.random(shape) >= p
    return keep.astype(np.float32) / np.float32(1 - p)


def dropout(x, p, train, rng=None):
    if not train or p == 0:
        return x
    mask = dropout_mask(x.shape, p, rng)
    return (x * mask).astype(x.dtype)


def softmax_cross_entropy(logits, targets):
    """Mean over the batch of -log softmax(logits)[target]. Returns (loss, grad_logits)."""
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise DimensionError(f"expected {n} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise IndexError(f"target index out of range for {k} classes")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    logp = z - lse[:, None]
    loss = -logp[np.arange(n), targets].mean()
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    grad /= n
    return float(loss), grad.astype(logits.dtype)


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class Node:
    """One value in the computation graph.

    ``backward_fn`` maps this node's gradient to a tuple of gradients, one per
    input node.
    """

    __slots__ = ("op", "inputs", "value", "grad", "backward_fn", "requires_grad")

    def __init__(self, op, value, inputs=(), backward_fn=None, requires_grad=None):
        if op not in OP_KINDS:
            raise ValueError(f"unknown op kind {op!r}")
        self.op = op
        self.value = value
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.grad = None
        if requires_grad is None:
            requires_grad = any(i.requires_grad for i in self.inputs)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Node({self.op}, shape={self.shape})"

    def backward(self, grad=None):
        order = _topological(self)
        for node in order:
            node.grad = None
        if grad is None:
            grad = np.ones_like(self.value, dtype=np.float64)
        self.grad = np.asarray(grad)
        for node in reversed(order):
            if node.backward_fn is None or node.grad is None:
                continue
            grads = node.backward_fn(node.grad)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = g
                else:
                    inp.grad = inp.grad + g


def _topological(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))
    return order


def leaf(value, requires_grad=False):
    return Node("leaf", value, requires_grad=requires_grad)


def conv2d_node(x, w, stride=1, padding=0):
    out = conv2d(x.value, w.value, stride, padding)

    def back(g):
        return conv2d_backward(g, x.value, w.value, stride, padding)

    return Node("conv2d", out, (x, w), back)


def avgpool2d_node(x, kernel=2, stride=None):
    out = avgpool2d(x.value, kernel, stride)
    return Node("avgpool2d", out, (x,), lambda g: (avgpool2d_backward(g, x.value, kernel, stride),))


def linear_node(x, w):
    out = linear(x.value, w.value)
    return Node("linear", out, (x, w), lambda g: linear_backward(g, x.value, w.value))


def relu_node(x):
    return Node("relu", relu(x.value), (x,), lambda g: (relu_backward(g, x.value),))


def qrelu_node(x):
    return Node("qrelu", qrelu(x.value), (x,), lambda g: (qrelu_backward(g, x.value),))


def dropout_node(x, p, train, rng=None):
    if not train or p == 0:
        return x
    mask = dropout_mask(x.shape, p, rng)
    out = (x.value * mask).astype(x.value.dtype)
    return Node("dropout", out, (x,), lambda g: ((g * mask).astype(g.dtype),))


def scale_node(x, factor):
    return Node("scale", x.value * factor, (x,), lambda g: (g * factor,))


def add_node(a, b):
    return Node("add", a.value + b.value, (a, b), lambda g: (g, g))


def softmax_cross_entropy_node(logits, targets):
    loss, grad = softmax_cross_entropy(logits.value, targets)
    return Node(
        "softmax-cross-entropy",
        np.float64(loss),
        (logits,),
        lambda g: ((grad * float(g)).astype(grad.dtype),),
    )


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    # False: L2 term added to the gradient before the moment updates;
    # True: weights shrunk directly by lr * weight_decay.
    decoupled: bool = False
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, **kw):
        state = cls(**kw)
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in params]
        return state


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and optimizer state disagree in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        p64 = p.astype(np.float64)
        g64 = g.astype(np.float64)
        if state.weight_decay and not state.decoupled:
            g64 = g64 + state.weight_decay * p64
        m *= b1
        m += (1 - b1) * g64
        v *= b2
        v += (1 - b2) * g64 * g64
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            p64 = p64 * (1 - state.lr * state.weight_decay)
        p[...] = (p64 - update).astype(p.dtype)
    return params


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def numerical_gradient(f, x, h=1e-3):
    """Central differences of scalar ``f`` with respect to float64 array ``x``."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float((np.abs(a - n) / denom).max()) if a.size else 0.0
