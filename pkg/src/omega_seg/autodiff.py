"""Dense tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Graph` (entered with a
``with`` block) whenever one of their inputs requires a gradient.  Outside a
graph every operation is a plain numpy computation, which is what inference
uses.

Image tensors use N, C, H, W layout throughout.
"""

import threading

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of a differentiation graph."""


_local = threading.local()


def current_graph():
    return getattr(_local, "graph", None)


class Tensor:
    """An n-dimensional array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_graph")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._graph = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def as_tensor(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Graph:
    """Records operations in execution (topological) order.

    ``training`` is the mode flag consulted by mode-dependent layers such as
    batch normalization when no explicit mode is given.
    """

    def __init__(self, training=True):
        self.training = training
        self.nodes = []
        self._done = False
        self._prev = None

    def __enter__(self):
        self._prev = current_graph()
        _local.graph = self
        return self

    def __exit__(self, *exc):
        _local.graph = self._prev
        return False

    def record(self, out, inputs, backward):
        if self._done:
            raise GraphError("graph has already been differentiated; record a new one")
        for t in inputs:
            if t._graph is not None and t._graph is not self:
                raise GraphError(f"{t!r} belongs to a different graph")
        out._graph = self
        self.nodes.append(_Node(out, inputs, backward))
        return out

    def backward(self, loss):
        """Accumulate d(loss)/d(tensor) into ``.grad`` of every tensor that requires it."""
        if self._done:
            raise GraphError("backward called twice on the same graph")
        if loss._graph is not self:
            raise GraphError("loss was not produced by this graph")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._done = True
        loss.grad = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            gout = node.out.grad
            if gout is None:
                continue
            grads = node.backward(gout)
            for t, g in zip(node.inputs, grads):
                if g is None or not t.requires_grad:
                    continue
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += g
            node.backward = None
        # drop the tape: nodes reference their outputs, which reference the
        # graph, and that cycle would otherwise keep every activation alive
        # until a full garbage collection
        self.nodes = []
        return loss


def _make(data, inputs, backward):
    """Wrap an op result; record it when a graph is active and a gradient is needed."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    g = current_graph()
    if g is not None and needs:
        g.record(out, tuple(inputs), backward)
    return out


def _training_mode(mode):
    if mode is not None:
        return mode == "training" if isinstance(mode, str) else bool(mode)
    g = current_graph()
    return g.training if g is not None else False


# ---------------------------------------------------------------------------
# Elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x, c):
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


def square(x):
    return _make(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def relu(x):
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sum_all(x):
    return _make(np.asarray(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape),))


def mean_all(x):
    n = x.size
    return _make(np.asarray(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape),))


def mse_mean(a, b):
    """mean((a - b)^2); ``b`` may be a constant array."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse_mean: {a.shape} vs {b.shape}")
    d = a.data - b.data
    n = d.size

    def backward(g):
        ga = (2.0 / n) * g * d
        return ga, -ga

    return _make(np.asarray((d * d).mean()), (a, b), backward)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def column(x, j):
    """x[:, j] of a 2-D tensor."""
    if x.ndim != 2:
        raise ShapeError("column expects a 2-D tensor")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, j] = g
        return (gx,)

    return _make(x.data[:, j].copy(), (x,), backward)


def wrap_angle(x):
    """mod(x + pi, 2 pi) - pi; derivative 1 away from the wrap boundary."""
    return _make(np.mod(x.data + np.pi, 2 * np.pi) - np.pi, (x,), lambda g: (g,))


def concat_channels(tensors):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: {ref} vs {t.shape}")
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=1)
    return _make(data, tensors, lambda g: tuple(np.split(g, splits, axis=1)))


# ---------------------------------------------------------------------------
# Dense and convolutional layers
# ---------------------------------------------------------------------------

def fully_connected(x, w, b=None):
    """x: (N, in), w: (out, in), b: (out,)."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} vs weight {w.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)

    def backward(g):
        grads = [g @ w.data, g.T @ x.data]
        if b is not None:
            grads.append(g.sum(0))
        return grads

    return _make(out, inputs, backward)


def conv2d(x, kernel, bias=None):
    """Stride-1 convolution (cross-correlation) with zero 'same' padding.

    ``kernel`` has shape (F, C, k, k) with odd k; the networks use k = 3.
    """
    x = as_tensor(x)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError("conv2d expects (N,C,H,W) input and (F,C,k,k) kernel")
    N, C, H, W = x.shape
    F, Ck, k, k2 = kernel.shape
    if Ck != C:
        raise ShapeError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square and odd, got {k}x{k2}")
    if bias is not None and bias.shape != (F,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({F},)")
    out, ctx = _kernels.conv_forward(x.data, kernel.data, None if bias is None else bias.data)
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gx, gw, gb = _kernels.conv_backward(ctx, g, kernel.data, x.requires_grad)
        return [gx, gw] if bias is None else [gx, gw, gb]

    return _make(out, inputs, backward)


def maxpool2(x):
    """2x2 max pooling, stride 2; ties send the gradient to the first element."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {x.shape}")
    out, arg = _kernels.maxpool2_forward(x.data)
    return _make(out, (x,), lambda g: (_kernels.maxpool2_backward(g, arg),))


def upsample2(x):
    """Nearest-neighbour 2x upsampling."""
    if x.ndim != 4:
        raise ShapeError("upsample2 expects (N,C,H,W)")
    N, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return _make(out, (x,),
                 lambda g: (g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)),))


def global_avg_pool(x):
    N, C, H, W = x.shape
    n = H * W
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / n, x.shape),))


class BatchNormStats:
    """Running statistics of one batch-normalization layer."""

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.initialized = False

    def update(self, mean, var):
        # stored in float32 so checkpoints round-trip exactly
        if not self.initialized:
            self.mean = np.asarray(mean, dtype=np.float32)
            self.var = np.asarray(var, dtype=np.float32)
            self.initialized = True
        else:
            m = self.momentum
            self.mean = (m * self.mean + (1 - m) * mean).astype(np.float32)
            self.var = (m * self.var + (1 - m) * var).astype(np.float32)


def batchnorm(x, gamma, beta, stats, mode=None):
    """Per-channel batch normalization of (N,C,H,W) or (N,C) input.

    ``mode`` is ``"training"``/``"inference"`` (or a bool); by default the
    active graph's mode is used, and inference outside any graph.
    """
    training = _training_mode(mode)
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batchnorm: gamma/beta must have shape ({C},)")
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        stats.update(mean, var)
    else:
        if not stats.initialized:
            raise GraphError("batchnorm running statistics are uninitialized")
        mean = stats.mean.astype(x.dtype)
        var = stats.var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + stats.eps)).astype(x.dtype)
    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)
    m = x.size // C

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shape)
        if training:
            gx = (inv_std.reshape(shape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(shape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
        else:
            gx = dxhat * inv_std.reshape(shape)
        return gx, ggamma, gbeta

    return _make(out.astype(x.dtype, copy=False), (x, gamma, beta), backward)


def softmax_channels(x):
    """Softmax over axis 1, stabilized by subtracting the per-pixel maximum."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _make(p, (x,), backward)


def cce(probs, target, clip=1e-7):
    """-(1/(N*H*W)) * sum target * log(clip(probs)); target is a constant array."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target)
    if target.shape != probs.shape:
        raise ShapeError(f"cce: probs {probs.shape} vs target {target.shape}")
    n = probs.shape[0] * int(np.prod(probs.shape[2:]))
    pc = np.clip(probs.data, clip, 1.0 - clip)
    loss = -(target * np.log(pc)).sum() / n
    inside = (probs.data >= clip) & (probs.data <= 1.0 - clip)

    def backward(g):
        return (np.where(inside, -g * target / (pc * n), 0.0).astype(probs.dtype),)

    return _make(np.asarray(loss, dtype=probs.dtype), (probs,), backward)


# ---------------------------------------------------------------------------
# Spatial-transformer primitives
# ---------------------------------------------------------------------------

def similarity_matrix(params, parts="SRT"):
    """Batched 2x3 matrices T, RT or SRT from params (N, 4) = [t_x, t_y, theta, s]."""
    if params.ndim != 2 or params.shape[1] != 4:
        raise ShapeError(f"similarity_matrix expects (N, 4) params, got {params.shape}")
    if parts not in ("T", "RT", "SRT"):
        raise ValueError(f"unknown matrix composition {parts!r}")
    tx, ty, th, s = (params.data[:, i] for i in range(4))
    N = params.shape[0]
    M = np.zeros((N, 2, 3), dtype=params.dtype)
    if parts == "T":
        M[:, 0, 0] = M[:, 1, 1] = 1.0
        M[:, 0, 2] = tx
        M[:, 1, 2] = ty
    else:
        c, sn = np.cos(th), np.sin(th)
        base = np.stack([np.stack([c, -sn, c * tx - sn * ty], -1),
                         np.stack([sn, c, sn * tx + c * ty], -1)], 1)
        k = s if parts == "SRT" else np.ones_like(s)
        M[:] = k[:, None, None] * base

    def backward(g):
        gp = np.zeros_like(params.data)
        if parts == "T":
            gp[:, 0] = g[:, 0, 2]
            gp[:, 1] = g[:, 1, 2]
            return (gp,)
        gp[:, 0] = k * (g[:, 0, 2] * c + g[:, 1, 2] * sn)
        gp[:, 1] = k * (-g[:, 0, 2] * sn + g[:, 1, 2] * c)
        # dR/dtheta = [[-sin, -cos], [cos, -sin]]
        dth = (-g[:, 0, 0] * sn - g[:, 0, 1] * c + g[:, 1, 0] * c - g[:, 1, 1] * sn
               - g[:, 0, 2] * (sn * tx + c * ty) + g[:, 1, 2] * (c * tx - sn * ty))
        gp[:, 2] = k * dth
        if parts == "SRT":
            gp[:, 3] = (g * base).sum(axis=(1, 2))
        return (gp,)

    return _make(M, (params,), backward)


def transform_grid(grid, M):
    """Apply batched 2x3 matrices to a base grid (2, H', W') of (x, y) points.

    Returns (N, 2, H', W'); channel 0 is x (columns), channel 1 is y (rows).
    """
    grid = np.asarray(grid.data if isinstance(grid, Tensor) else grid)
    if grid.ndim != 3 or grid.shape[0] != 2:
        raise ShapeError(f"grid must be (2, H', W'), got {grid.shape}")
    if M.ndim != 3 or M.shape[1:] != (2, 3):
        raise ShapeError(f"matrices must be (N, 2, 3), got {M.shape}")
    g = grid.astype(M.dtype, copy=False)
    out = (np.einsum("nij,jhw->nihw", M.data[:, :, :2], g)
           + M.data[:, :, 2][:, :, None, None])

    def backward(gout):
        gM = np.empty_like(M.data)
        gM[:, :, 0] = (gout * g[0]).sum(axis=(2, 3))
        gM[:, :, 1] = (gout * g[1]).sum(axis=(2, 3))
        gM[:, :, 2] = gout.sum(axis=(2, 3))
        return (gM,)

    return _make(out, (M,), backward)


def _snap(p, size):
    # rounding in the normalized->pixel map must not move pixel centres off
    # their integer position, otherwise identity sampling is not exact
    tol = 16 * np.finfo(p.dtype).eps * max(size, 1)
    r = np.rint(p)
    return np.where(np.abs(p - r) <= tol, r, p)


def grid_to_pixels(grid, H, W):
    """Normalized [-1, 1] coordinates to 0-based pixel coordinates.

    p = (g + 1) (size - 1) / 2, with values within a few ulps of an integer
    snapped onto it.
    """
    px = _snap((grid[:, 0] + 1.0) * (W - 1) / 2.0, W)
    py = _snap((grid[:, 1] + 1.0) * (H - 1) / 2.0, H)
    return px, py


def bilinear_sample(image, grid):
    """Bilinear resampling of (N,C,H,W) images at grid points (N,2,H',W').

    Points outside the image read zero.  Differentiable with respect to both
    the image and the grid (a subgradient on pixel-cell boundaries).
    """
    image, grid = as_tensor(image), as_tensor(grid)
    if image.ndim != 4 or grid.ndim != 4 or grid.shape[1] != 2 or grid.shape[0] != image.shape[0]:
        raise ShapeError(f"bilinear_sample: image {image.shape}, grid {grid.shape}")
    N, C, H, W = image.shape
    px, py = grid_to_pixels(grid.data.astype(image.dtype, copy=False), H, W)
    out = _kernels.bilinear_forward(image.data, px, py)

    def backward(g):
        dimg, dpx, dpy = _kernels.bilinear_backward(image.data, px, py, g)
        dgrid = np.stack([dpx * ((W - 1) / 2.0), dpy * ((H - 1) / 2.0)], axis=1)
        return dimg, dgrid.astype(grid.dtype, copy=False)

    return _make(out, (image, grid), backward)
