"""Reverse-mode differentiation over a fixed set of dense-array operations.

A :class:`Tensor` wraps a float64 numpy array and remembers how it was
produced; calling :meth:`Tensor.backward` on a scalar result accumulates
gradients into every upstream tensor created with ``requires_grad=True``.
The op set is deliberately closed: convolutions, the activation suite,
pooling/resampling, small linear algebra, and masked reductions. There is
no general broadcasting graph, no views, no higher-order gradients.

Spatial tensors are channel-last, either ``(H, W, C)`` or batched
``(B, H, W, C)``. All data is float64.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "parameter",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose2",
    "reshape",
    "stack_rows",
    "sum_all",
    "mean_all",
    "relu",
    "sigmoid",
    "softmax",
    "conv2d",
    "batchnorm",
    "BnState",
    "avg_pool2",
    "upsample2_nearest",
    "global_avg_pool",
    "global_max_pool",
    "linear",
    "masked_mean",
    "l2_normalize",
    "custom_op",
]


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined by an op."""


class Tensor:
    """A float64 array plus the tape node that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in _parents
        )
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        """Backpropagate from this tensor through the recorded tape."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.broadcast_to(grad, self.data.shape))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data):
    """A leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(inputs, value, backward_fns):
    """Register one tape node with a precomputed value.

    ``backward_fns[i]`` maps the output gradient to the gradient of
    ``inputs[i]``; use ``None`` for inputs that do not need gradients.
    """
    inputs = tuple(inputs)
    grads_needed = [t for t in inputs if t.requires_grad]
    if not grads_needed:
        return Tensor(value)

    def backward(g):
        for t, fn in zip(inputs, backward_fns):
            if t.requires_grad and fn is not None:
                t._accumulate(fn(g))

    return Tensor(value, _parents=inputs, _backward=backward)


def _unbroadcast(g, shape):
    """Reduce gradient ``g`` back down to ``shape`` after broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return custom_op(
        (a, b),
        out,
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


def sub(a, b):
    return add(a, scale(_as_tensor(b), -1.0))


def mul(a, b):
    """Elementwise product with numpy broadcasting (used for attention gating)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data
    return custom_op(
        (a, b),
        out,
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def scale(a, c):
    a = _as_tensor(a)
    c = float(c)
    return custom_op((a,), a.data * c, (lambda g: g * c,))


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return custom_op(
        (a, b),
        out,
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def transpose2(a):
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose2 expects a 2-D tensor, got {a.shape}")
    return custom_op((a,), a.data.T.copy(), (lambda g: g.T,))


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape
    return custom_op((a,), a.data.reshape(shape), (lambda g: g.reshape(old),))


def stack_rows(tensors):
    """Stack same-shape 1-D tensors into a ``(k, D)`` tensor."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack_rows needs at least one tensor")
    out = np.stack([t.data for t in tensors], axis=0)
    fns = [
        (lambda i: lambda g: g[i])(i) for i in range(len(tensors))
    ]
    return custom_op(tuple(tensors), out, tuple(fns))


def sum_all(a):
    a = _as_tensor(a)
    return custom_op((a,), np.sum(a.data), (lambda g: np.full(a.data.shape, float(g)),))


def mean_all(a):
    a = _as_tensor(a)
    n = a.data.size
    return custom_op(
        (a,), np.mean(a.data), (lambda g: np.full(a.data.shape, float(g) / n),)
    )


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0.0
    return custom_op((a,), np.where(mask, a.data, 0.0), (lambda g: g * mask,))


def sigmoid(a):
    a = _as_tensor(a)
    # Stable piecewise evaluation keeps exp() bounded on both tails.
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    return custom_op((a,), out, (lambda g: g * out * (1.0 - out),))


def softmax(a, axis=-1):
    """Softmax along one axis; channel axis for per-pixel class probabilities."""
    a = _as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def grad_in(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return out * (g - dot)

    return custom_op((a,), out, (grad_in,))


def _promote_image(x):
    """Return (4-D view of x, had_batch_dim)."""
    if x.ndim == 3:
        return x[None, ...], False
    if x.ndim == 4:
        return x, True
    raise ShapeError(f"expected (H, W, C) or (B, H, W, C), got {x.shape}")


def _corr_same(x4, w4):
    """Same-padding stride-1 correlation. x4 (B,H,W,Ci), w4 (kh,kw,Ci,Co)."""
    kh, kw, cin, cout = w4.shape
    b, h, w, _ = x4.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x4, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (B, H, W, Ci, kh, kw) -> columns (B*H*W, kh*kw*Ci)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, kh * kw * cin)
    out = cols @ w4.reshape(kh * kw * cin, cout)
    return out.reshape(b, h, w, cout), cols


def conv2d(x, kernel, bias=None):
    """2-D convolution (cross-correlation), zero-padded to the input size.

    ``x`` is (H, W, Cin) or (B, H, W, Cin); ``kernel`` is (kh, kw, Cin, Cout)
    with odd kh, kw. Gradients flow to input, kernel and bias.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    x4, batched = _promote_image(x.data)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be (kh, kw, Cin, Cout), got {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd for same padding, got {kh}x{kw}")
    if x4.shape[-1] != cin:
        raise ShapeError(
            f"input has {x4.shape[-1]} channels but kernel expects {cin} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    out4, cols = _corr_same(x4, kernel.data)
    b, h, w, _ = x4.shape
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"bias must be ({cout},), got {bias.shape}")
        out4 = out4 + bias.data

    def grad_x(g):
        g4 = g if g.ndim == 4 else g[None, ...]
        # Adjoint of same-padding correlation: correlate with the spatially
        # flipped kernel, in/out channels swapped.
        wt = kernel.data[::-1, ::-1].transpose(0, 1, 3, 2)
        gx, _ = _corr_same(g4, wt)
        return gx if batched else gx[0]

    def grad_w(g):
        gf = g.reshape(b * h * w, cout)
        return (cols.T @ gf).reshape(kh, kw, cin, cout)

    def grad_b(g):
        return g.reshape(-1, cout).sum(axis=0)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    fns = (grad_x, grad_w) if bias is None else (grad_x, grad_w, grad_b)
    return custom_op(inputs, out4 if batched else out4[0], fns)


class BnState:
    """Running statistics for one batchnorm layer (not trainable)."""

    def __init__(self, channels):
        self.mean = np.zeros(channels)
        self.var = np.ones(channels)
        self.channels = channels


def batchnorm(x, gamma, beta, state, training, momentum=0.1, eps=1e-5):
    """Per-channel batch normalization over all leading axes.

    Train mode normalizes with batch statistics and updates ``state``;
    eval mode uses the stored running statistics.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"gamma/beta must be ({c},)")
    axes = tuple(range(x.ndim - 1))
    if training:
        m = x.data.size // c
        if m < 2:
            raise ValueError("batchnorm train mode needs at least 2 samples per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        state.mean = (1.0 - momentum) * state.mean + momentum * mu
        state.var = (1.0 - momentum) * state.var + momentum * var
    else:
        mu, var = state.mean, state.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = gamma.data * xhat + beta.data

    def grad_x(g):
        gh = g * gamma.data
        if not training:
            return gh * inv_std
        m = x.data.size // c
        s1 = gh.sum(axis=axes)
        s2 = (gh * xhat).sum(axis=axes)
        return (inv_std / m) * (m * gh - s1 - xhat * s2)

    def grad_gamma(g):
        return (g * xhat).sum(axis=axes)

    def grad_beta(g):
        return g.sum(axis=axes)

    return custom_op((x, gamma, beta), out, (grad_x, grad_gamma, grad_beta))


def avg_pool2(x):
    """2x2 average pooling with stride 2; spatial extents must be even."""
    x = _as_tensor(x)
    x4, batched = _promote_image(x.data)
    b, h, w, c = x4.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    out = x4.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def grad_x(g):
        g4 = g if g.ndim == 4 else g[None, ...]
        gx = np.repeat(np.repeat(g4, 2, axis=1), 2, axis=2) * 0.25
        return gx if batched else gx[0]

    return custom_op((x,), out if batched else out[0], (grad_x,))


def upsample2_nearest(x):
    """Nearest-neighbor 2x spatial upsampling."""
    x = _as_tensor(x)
    x4, batched = _promote_image(x.data)
    out = np.repeat(np.repeat(x4, 2, axis=1), 2, axis=2)

    def grad_x(g):
        g4 = g if g.ndim == 4 else g[None, ...]
        b, h2, w2, c = g4.shape
        gx = g4.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
        return gx if batched else gx[0]

    return custom_op((x,), out if batched else out[0], (grad_x,))


def global_avg_pool(x):
    """Mean over spatial positions, output (..., 1, 1, C)."""
    x = _as_tensor(x)
    x4, batched = _promote_image(x.data)
    b, h, w, c = x4.shape
    out = x4.mean(axis=(1, 2), keepdims=True)

    def grad_x(g):
        g4 = g if g.ndim == 4 else g[None, ...]
        gx = np.broadcast_to(g4 / (h * w), x4.shape).copy()
        return gx if batched else gx[0]

    return custom_op((x,), out if batched else out[0], (grad_x,))


def global_max_pool(x):
    """Max over spatial positions, output (..., 1, 1, C)."""
    x = _as_tensor(x)
    x4, batched = _promote_image(x.data)
    b, h, w, c = x4.shape
    flat = x4.reshape(b, h * w, c)
    idx = np.argmax(flat, axis=1)  # (B, C), first occurrence on ties
    out = np.take_along_axis(flat, idx[:, None, :], axis=1).reshape(b, 1, 1, c)

    def grad_x(g):
        g4 = (g if g.ndim == 4 else g[None, ...]).reshape(b, 1, c)
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[:, None, :], g4, axis=1)
        gx = gx.reshape(x4.shape)
        return gx if batched else gx[0]

    return custom_op((x,), out if batched else out[0], (grad_x,))


def linear(x, weight, bias=None):
    """Affine map on the last axis: ``y = x @ weight.T + bias``.

    ``weight`` is (Dout, Din); ``x`` is (..., Din).
    """
    x, weight = _as_tensor(x), _as_tensor(weight)
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear: input last dim {x.shape[-1]} != Din {din}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (dout,):
            raise ShapeError(f"linear bias must be ({dout},), got {bias.shape}")
        out = out + bias.data

    def grad_x(g):
        return g @ weight.data

    def grad_w(g):
        return g.reshape(-1, dout).T @ x.data.reshape(-1, din)

    def grad_b(g):
        return g.reshape(-1, dout).sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    fns = (grad_x, grad_w) if bias is None else (grad_x, grad_w, grad_b)
    return custom_op(inputs, out, fns)


def masked_mean(x, mask):
    """Mean of feature vectors at True mask positions.

    ``x`` is (H, W, C), ``mask`` a boolean (H, W) with at least one True
    pixel; output is (C,). The divisor is the mask pixel count, so the
    result does not depend on instance size.
    """
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"masked_mean: x {x.shape} vs mask {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        raise ValueError("masked_mean over an empty mask")
    out = x.data[mask].mean(axis=0)

    def grad_x(g):
        gx = np.zeros_like(x.data)
        gx[mask] = g / n
        return gx

    return custom_op((x,), out, (grad_x,))


def l2_normalize(v):
    """Scale a 1-D vector to unit Euclidean norm."""
    v = _as_tensor(v)
    if v.ndim != 1:
        raise ShapeError(f"l2_normalize expects a vector, got {v.shape}")
    n = float(np.linalg.norm(v.data))
    if n < 1e-12:
        raise ValueError("cannot normalize a (near-)zero vector")
    out = v.data / n

    def grad_v(g):
        return g / n - out * float(np.dot(out, g)) / n

    return custom_op((v,), out, (grad_v,))
