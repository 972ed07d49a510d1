"""Dense tensors, a recording tape, and reverse-mode differentiation.

The forward operations cover exactly what the building blocks need:
convolution, batch normalization, ReLU, pooling, affine layers, channel
mixing, and softmax cross-entropy. Every operation executed while a
:class:`Graph` is active is appended to the tape; :func:`backward` and
:func:`vjp` walk the tape in reverse to produce gradients.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "Node",
    "BatchNormState",
    "conv2d",
    "batch_norm",
    "relu",
    "global_avg_pool",
    "dense",
    "add",
    "channel_mix",
    "reduce_sum",
    "softmax_cross_entropy",
    "backward",
    "vjp",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense N-dimensional array, optionally participating in gradients.

    ``data`` is always a float32 or float64 numpy array; anything else is
    promoted to float64. Tensors hash by identity, which is what the tape
    and gradient maps key on.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None,
                 dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.ascontiguousarray(arr, dtype=dtype)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class Node:
    """One executed operation: inputs, output, replay closure, and VJP."""

    __slots__ = ("op", "inputs", "output", "forward_fn", "vjp_fn")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 forward_fn: Callable, vjp_fn: Callable):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.forward_fn = forward_fn
        self.vjp_fn = vjp_fn


_ACTIVE_GRAPHS: list["Graph"] = []


class Graph:
    """Tape of executed operations, in recording order.

    Recording order is a topological order of the computation, so reverse
    iteration is sufficient for backpropagation.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Graph":
        _ACTIVE_GRAPHS.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_GRAPHS.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self) -> dict:
        """Recompute every node from its recorded inputs, in order.

        Returns a map from output tensor to the recomputed array. Earlier
        replayed values feed later nodes, so in deterministic settings the
        result must match the recorded outputs bit for bit.
        """
        env: dict[Tensor, np.ndarray] = {}
        for node in self.nodes:
            args = [env.get(t, t.data) for t in node.inputs]
            env[node.output] = node.forward_fn(*args)
        return env


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
            forward_fn: Callable, vjp_fn: Callable) -> Tensor:
    out = Tensor(out_data, requires_grad=any(t.requires_grad for t in inputs))
    if _ACTIVE_GRAPHS:
        _ACTIVE_GRAPHS[-1].nodes.append(Node(op, inputs, out, forward_fn, vjp_fn))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# convolution

def _conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    """Gather kh*kw shifted views of the padded input into one array.

    Output layout (N, C, kh, kw, ho, wo); the fill is nine contiguous-ish
    strided copies for a 3x3 kernel, which is the fast path here.
    """
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride,
                                  j:j + stride * wo:stride]
    return cols


def _col2im(gcols: np.ndarray, xp_shape: tuple, stride: int) -> np.ndarray:
    """Scatter-add column gradients back onto the padded input."""
    n, c, kh, kw, ho, wo = gcols.shape
    gxp = np.zeros(xp_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride,
                j:j + stride * wo:stride] += gcols[:, :, i, j]
    return gxp


def conv2d(x, kernel, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D convolution (cross-correlation) over NCHW input, OIHW kernel.

    Supports grouped convolution; ``groups == channels`` gives the
    depthwise case. Linear in both input and kernel.
    """
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    xd, kd = x.data, kernel.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input, got shape {xd.shape}")
    if kd.ndim != 4:
        raise ValueError(f"conv2d expects OIHW kernel, got shape {kd.shape}")
    n, c, h, w = xd.shape
    o, cg, kh, kw = kd.shape
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be non-negative, got {padding}")
    if c % groups != 0 or o % groups != 0:
        raise ValueError(
            f"channels in={c}, out={o} must both be divisible by groups={groups}")
    if cg != c // groups:
        raise ValueError(
            f"kernel expects {cg} input channels per group, input supplies "
            f"{c // groups} ({c} channels / {groups} groups)")
    ho = _conv_out_size(h, kh, stride, padding)
    wo = _conv_out_size(w, kw, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ValueError(
            f"kernel {kh}x{kw} with stride {stride}, padding {padding} does not "
            f"fit input {h}x{w}")

    og = o // groups
    k_per_group = cg * kh * kw

    def fwd(xd: np.ndarray, kd: np.ndarray):
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) \
            if padding else xd
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        colsg = cols.reshape(n, groups, k_per_group, ho * wo)
        kmat = kd.reshape(groups, og, k_per_group)
        out = np.matmul(kmat, colsg)          # (n, groups, og, ho*wo)
        return out.reshape(n, o, ho, wo), colsg

    out_data, colsg = fwd(xd, kd)
    xp_shape = (n, c, h + 2 * padding, w + 2 * padding)

    def vjp_fn(g: np.ndarray):
        gg = g.reshape(n, groups, og, ho * wo)
        gx = gk = None
        if kernel.requires_grad:
            gk = np.matmul(gg, colsg.transpose(0, 1, 3, 2)).sum(axis=0)
            gk = gk.reshape(kd.shape)
        if x.requires_grad:
            kmat = kd.reshape(groups, og, k_per_group)
            gcols = np.matmul(kmat.transpose(0, 2, 1), gg)
            gcols = gcols.reshape(n, c, kh, kw, ho, wo)
            gxp = _col2im(gcols, xp_shape, stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding \
                else gxp
        return gx, gk

    return _record("conv2d", (x, kernel), out_data,
                   lambda a, b: fwd(a, b)[0], vjp_fn)


# ---------------------------------------------------------------------------
# batch normalization

class BatchNormState:
    """Running mean/variance buffers for one batch-norm layer."""

    __slots__ = ("running_mean", "running_var")

    def __init__(self, channels: int, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def copy(self) -> "BatchNormState":
        st = BatchNormState.__new__(BatchNormState)
        st.running_mean = self.running_mean.copy()
        st.running_var = self.running_var.copy()
        return st


def batch_norm(x, gamma, beta, state: BatchNormState, mode: str = "train",
               eps: float = 1e-5, momentum: float = 0.9) -> Tensor:
    """Per-channel batch normalization over NCHW input.

    ``train`` normalizes with batch statistics and updates the running
    buffers by exponential moving average; ``eval`` uses the stored
    running statistics. Variance is the biased (ddof=0) estimator in both
    the batch computation and the running buffers.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"batch_norm expects NCHW input, got shape {xd.shape}")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ValueError(
            f"gamma/beta must have shape ({c},), got {gamma.data.shape} and "
            f"{beta.data.shape}")
    if n == 0:
        raise ValueError("batch_norm requires a non-empty batch")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    m = n * h * w

    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        ex2 = np.einsum("nchw,nchw->c", xd, xd) / m
        var = np.maximum(ex2 - mu * mu, 0.0)
        state.running_mean *= momentum
        state.running_mean += (1.0 - momentum) * mu
        state.running_var *= momentum
        state.running_var += (1.0 - momentum) * var
    else:
        mu = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)

    invstd = 1.0 / np.sqrt(var + eps)
    scale = (gamma.data * invstd).astype(xd.dtype)
    shift = (beta.data - mu * scale).astype(xd.dtype)
    out_data = xd * scale[None, :, None, None] + shift[None, :, None, None]

    def fwd(xd: np.ndarray, gd: np.ndarray, bd: np.ndarray):
        # pure recomputation of the recorded normalization (no state update)
        if mode == "train":
            mu_ = xd.mean(axis=(0, 2, 3))
            var_ = np.maximum(np.einsum("nchw,nchw->c", xd, xd) / m - mu_ * mu_, 0.0)
        else:
            mu_, var_ = mu, var
        s = (gd / np.sqrt(var_ + eps)).astype(xd.dtype)
        return xd * s[None, :, None, None] + \
            (bd - mu_ * s).astype(xd.dtype)[None, :, None, None]

    mu_c = mu.astype(xd.dtype)
    invstd_c = invstd.astype(xd.dtype)

    def vjp_fn(g: np.ndarray):
        gx = ggamma = gbeta = None
        xhat = (xd - mu_c[None, :, None, None]) * invstd_c[None, :, None, None]
        gsum = g.sum(axis=(0, 2, 3))
        gx_hat_sum = np.einsum("nchw,nchw->c", g, xhat)
        if beta.requires_grad:
            gbeta = gsum.astype(beta.dtype)
        if gamma.requires_grad:
            ggamma = gx_hat_sum.astype(gamma.dtype)
        if x.requires_grad:
            if mode == "train":
                coeff = (gamma.data.astype(xd.dtype) * invstd_c) / m
                gx = coeff[None, :, None, None] * (
                    m * g
                    - gsum[None, :, None, None]
                    - xhat * gx_hat_sum[None, :, None, None])
            else:
                gx = g * scale[None, :, None, None]
        return gx, ggamma, gbeta

    return _record("batch_norm", (x, gamma, beta), out_data, fwd, vjp_fn)


# ---------------------------------------------------------------------------
# elementwise and reductions

def relu(x) -> Tensor:
    """Elementwise max(x, 0); the gradient at exactly zero is zero."""
    x = _as_tensor(x)
    out_data = np.maximum(x.data, 0)
    mask = x.data > 0

    def vjp_fn(g: np.ndarray):
        return (g * mask if x.requires_grad else None,)

    return _record("relu", (x,), out_data, lambda a: np.maximum(a, 0), vjp_fn)


def global_avg_pool(x) -> Tensor:
    """Spatial mean: NCHW -> NC."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"global_avg_pool expects NCHW input, got {x.shape}")
    n, c, h, w = x.data.shape
    out_data = x.data.mean(axis=(2, 3))

    def vjp_fn(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        gx = np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w))
        return (np.ascontiguousarray(gx),)

    return _record("global_avg_pool", (x,), out_data,
                   lambda a: a.mean(axis=(2, 3)), vjp_fn)


def dense(x, weight, bias=None) -> Tensor:
    """Affine layer: (N,C) @ (K,C)^T + (K,) -> (N,K)."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ValueError(
            f"dense expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.data.shape[1] != weight.data.shape[1]:
        raise ValueError(
            f"dense input has {x.data.shape[1]} features, weight expects "
            f"{weight.data.shape[1]}")
    if bias is None:
        out_data = x.data @ weight.data.T

        def vjp2(g: np.ndarray):
            gx = g @ weight.data if x.requires_grad else None
            gw = g.T @ x.data if weight.requires_grad else None
            return gx, gw

        return _record("dense", (x, weight), out_data, lambda a, b: a @ b.T, vjp2)

    bias = _as_tensor(bias)
    if bias.data.shape != (weight.data.shape[0],):
        raise ValueError(
            f"bias must have shape ({weight.data.shape[0]},), got {bias.data.shape}")
    out_data = x.data @ weight.data.T + bias.data

    def vjp3(g: np.ndarray):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _record("dense", (x, weight, bias), out_data,
                   lambda a, b, c: a @ b.T + c, vjp3)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def vjp_fn(g: np.ndarray):
        ga = _unbroadcast(g, a.data.shape) if a.requires_grad else None
        gb = _unbroadcast(g, b.data.shape) if b.requires_grad else None
        return ga, gb

    return _record("add", (a, b), out_data, lambda x, y: x + y, vjp_fn)


def channel_mix(x, matrix: np.ndarray) -> Tensor:
    """Apply a fixed channel-mixing matrix at every spatial position.

    Equivalent to a 1x1 convolution with constant kernel; the matrix is a
    non-trainable buffer, so the only gradient is matrix^T @ g into x.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ValueError(f"channel_mix expects NCHW input, got {x.shape}")
    n, c, h, w = x.data.shape
    mat = np.asarray(matrix)
    if mat.shape != (c, c):
        raise ValueError(
            f"mixing matrix has shape {mat.shape}, input has {c} channels")
    mat = mat.astype(x.dtype, copy=False)
    mat_t = np.ascontiguousarray(mat.T)

    def fwd(xd: np.ndarray) -> np.ndarray:
        return np.matmul(mat, xd.reshape(n, c, h * w)).reshape(n, c, h, w)

    def vjp_fn(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        gx = np.matmul(mat_t, g.reshape(n, c, h * w)).reshape(n, c, h, w)
        return (gx,)

    return _record("channel_mix", (x,), fwd(x.data), fwd, vjp_fn)


def reduce_sum(x) -> Tensor:
    """Sum of all entries, as a scalar tensor."""
    x = _as_tensor(x)
    out_data = np.asarray(x.data.sum())

    def vjp_fn(g: np.ndarray):
        if not x.requires_grad:
            return (None,)
        return (np.full(x.data.shape, g, dtype=x.dtype),)

    return _record("reduce_sum", (x,), out_data, lambda a: np.asarray(a.sum()),
                   vjp_fn)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer labels."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be (N, K), got {logits.shape}")
    n, k = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(
            f"labels must lie in [0, {k}), got range "
            f"[{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)

    def fwd(ld: np.ndarray) -> np.ndarray:
        shifted = ld - ld.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1)) + ld.max(axis=1)
        return np.asarray((lse - ld[np.arange(n), labels]).mean())

    out_data = fwd(logits.data)

    def vjp_fn(g: np.ndarray):
        if not logits.requires_grad:
            return (None,)
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return _record("softmax_cross_entropy", (logits,), out_data, fwd, vjp_fn)


# ---------------------------------------------------------------------------
# reverse pass

def vjp(graph: Graph, output: Tensor, seed: Optional[np.ndarray] = None,
        wrt: Optional[Iterable[Tensor]] = None) -> dict:
    """Vector-Jacobian product through a recorded graph.

    Seeds the cotangent at ``output`` (ones by default) and accumulates
    into every tensor reached walking the tape backwards. Returns a map
    from tensor to gradient array; restricted to ``wrt`` when given.
    """
    if seed is None:
        seed = np.ones(output.data.shape, dtype=output.dtype)
    else:
        seed = np.asarray(seed, dtype=output.dtype)
        if seed.shape != output.data.shape:
            raise ValueError(
                f"seed shape {seed.shape} does not match output {output.data.shape}")
    grads: dict[Tensor, np.ndarray] = {output: seed}
    for node in reversed(graph.nodes):
        g = grads.get(node.output)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.vjp_fn(g)):
            if gi is None:
                continue
            acc = grads.get(t)
            grads[t] = gi if acc is None else acc + gi
    if wrt is not None:
        return {t: grads[t] for t in wrt if t in grads}
    return grads


def backward(graph: Graph, loss: Tensor) -> dict:
    """Gradient of a scalar loss for every requires_grad tensor in the graph.

    Fan-out accumulates; the graph itself is left untouched and can be
    walked again (e.g. for extra vector-Jacobian probes).
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    grads = vjp(graph, loss, seed=np.ones_like(loss.data))
    return {t: Tensor(g) for t, g in grads.items() if t.requires_grad}
