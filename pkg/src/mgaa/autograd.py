"""Minimal reverse-mode autodiff over the handful of ops the network needs.

Every op takes and returns :class:`Tensor` objects and records a closure that
pushes the upstream gradient to its parents. Arrays keep whatever float dtype
they were created with, so the same graph runs in float32 for training and in
float64 for gradient checks.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Tuple["Tensor", ...] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        name: str = "",
    ):
        self.data = np.asarray(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name!r})"

    def _accum(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Propagate gradients from this node to every reachable leaf."""
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
        if grad is None:
            grad = np.ones_like(self.data)
        self.grad = np.array(grad, dtype=self.data.dtype)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # every consumer has already run; drop the closure so its
                # saved activations can be released before the next op
                node.grad = None
                node._backward = None
                node._parents = ()

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def as_tensor(x, requires_grad: bool = False) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=requires_grad)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        a._accum(_unbroadcast(g, a.shape))
        b._accum(_unbroadcast(g, b.shape))

    return Tensor(a.data + b.data, parents=(a, b), backward=bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return Tensor(a.data * b.data, parents=(a, b), backward=bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor(x.data * mask, parents=(x,), backward=lambda g: x._accum(g * mask))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return Tensor(out, parents=(x,), backward=lambda g: x._accum(g * out * (1.0 - out)))


def gated_product(x: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """x * a * b with broadcasting, as one node (saves the x*a intermediate)."""

    def bw(g):
        if x.requires_grad:
            x._accum(_unbroadcast(g * a.data * b.data, x.shape))
        if a.requires_grad:
            a._accum(_unbroadcast(g * x.data * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * x.data * a.data, b.shape))

    return Tensor(x.data * a.data * b.data, parents=(x, a, b), backward=bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        x._accum(out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return Tensor(out, parents=(x,), backward=bw)


def weighted_sum(weights: Tensor, branches: Sequence[Tensor]) -> Tensor:
    """sum_i weights[:, i] * branches[i] with weights of shape (B, n)."""
    w = weights.data
    out = np.zeros_like(branches[0].data)
    for i, br in enumerate(branches):
        out += w[:, i, None, None, None] * br.data

    def bw(g):
        if weights.requires_grad:
            gw = np.stack([(g * br.data).sum(axis=(1, 2, 3)) for br in branches], axis=1)
            weights._accum(gw)
        for i, br in enumerate(branches):
            br._accum(g * w[:, i, None, None, None])

    return Tensor(out, parents=(weights, *branches), backward=bw)


def mean(x: Tensor, axis, keepdims: bool = True) -> Tensor:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.ndim for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        x._accum(np.broadcast_to(g / n, x.shape))

    return Tensor(out, parents=(x,), backward=bw)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    src = x.shape
    return Tensor(x.data.reshape(shape), parents=(x,), backward=lambda g: x._accum(g.reshape(src)))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or p == 0."""
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return Tensor(x.data * keep, parents=(x,), backward=lambda g: x._accum(g * keep))


# ---------------------------------------------------------------------------
# linear algebra and convolutions


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """x @ w.T + b with w of shape (out, in)."""
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        if x.requires_grad:
            x._accum(g @ w.data)
        w._accum(g.T @ x.data)
        if b is not None:
            b._accum(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=bw)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], padding: Tuple[int, int]) -> Tensor:
    """Dense stride-1 convolution (cross-correlation), NCHW, weight (O, C, kh, kw).

    im2col on a channels-last copy followed by one GEMM. The column matrix is
    rebuilt in the backward pass rather than kept alive between passes.
    """
    B, C, H, W = x.shape
    O, C2, kh, kw = w.shape
    if C2 != C:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {C2}")
    ph, pw = padding
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    def padded():
        return np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (ph, ph), (pw, pw), (0, 0)))

    def im2col(xp):
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))  # B,Ho,Wo,C,kh,kw
        return win.reshape(B * Ho * Wo, C * kh * kw)

    wmat = w.data.reshape(O, C * kh * kw)
    out = im2col(padded()) @ wmat.T
    if b is not None:
        out += b.data
    out_nchw = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, O)
        xp = padded()
        w._accum((g2.T @ im2col(xp)).reshape(w.shape))
        if b is not None:
            b._accum(g2.sum(axis=0))
        if x.requires_grad:
            gcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + Ho, j : j + Wo, :] += gcols[..., i, j]
            x._accum(gxp[:, ph : ph + H, pw : pw + W, :].transpose(0, 3, 1, 2))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out_nchw, parents=parents, backward=bw)


def pointwise_conv(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """1x1 convolution with weight (O, C); works on any spatial shape."""
    C = x.shape[1]
    O = w.shape[0]
    lead = (x.shape[0],) + x.shape[2:]

    def channels_last():
        return np.ascontiguousarray(np.moveaxis(x.data, 1, -1)).reshape(-1, C)

    out = channels_last() @ w.data.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(np.moveaxis(out.reshape(*lead, O), -1, 1))

    def bw(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, 1, -1)).reshape(-1, O)
        w._accum(g2.T @ channels_last())
        if b is not None:
            b._accum(g2.sum(axis=0))
        if x.requires_grad:
            x._accum(np.moveaxis((g2 @ w.data).reshape(*lead, C), -1, 1))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=bw)


def pointwise_gate(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """sigmoid(pointwise_conv(x, w, b)) without keeping the pre-activation."""
    pre = pointwise_conv(x, w, b)
    out = expit(pre.data)
    pre_bw = pre._backward

    def bw(g):
        pre_bw(g * out * (1.0 - out))

    return Tensor(out, parents=(x, w, b), backward=bw)


def _band(w: np.ndarray, n: int) -> np.ndarray:
    """(C, k) kernels -> (C, n, n) banded matrices A with A[c, i, i + j - p] = w[c, j]."""
    C, k = w.shape
    p = (k - 1) // 2
    A = np.zeros((C, n, n), dtype=w.dtype)
    for j in range(k):
        d = j - p
        rows = np.arange(max(0, -d), min(n, n - d))
        A[:, rows, rows + d] = w[:, j, None]
    return A


def _unband(gA: np.ndarray, k: int) -> np.ndarray:
    C, n, _ = gA.shape
    p = (k - 1) // 2
    return np.stack([np.trace(gA, offset=j - p, axis1=1, axis2=2) for j in range(k)], axis=1)


def depthwise_conv2d(x: Tensor, w: Tensor, b: Optional[Tensor], padding: Tuple[int, int]) -> Tensor:
    """Per-channel convolution, weight (C, kh, kw), zero padding.

    Kernels that are 1-D along one axis with 'same' padding (the only shape
    the attention branches use) run as a batched banded matmul per channel.
    """
    C2, kh, kw = w.shape
    if C2 != x.shape[1]:
        raise ValueError(f"depthwise_conv2d: input has {x.shape[1]} channels, kernel has {C2}")
    ph, pw = padding
    if kw == 1 and pw == 0 and kh % 2 == 1 and 2 * ph == kh - 1:
        return _depthwise_banded(x, w, b, axis=2)
    if kh == 1 and ph == 0 and kw % 2 == 1 and 2 * pw == kw - 1:
        return _depthwise_banded(x, w, b, axis=3)
    return _depthwise_direct(x, w, b, padding)


def _depthwise_banded(x: Tensor, w: Tensor, b: Optional[Tensor], axis: int) -> Tensor:
    B, C, H, W = x.shape
    k = w.shape[1] if axis == 2 else w.shape[2]
    wk = w.data.reshape(C, k)
    if axis == 2:
        xt = np.ascontiguousarray(x.data.transpose(1, 2, 0, 3)).reshape(C, H, B * W)
        A = _band(wk, H)
        out = (A @ xt).reshape(C, H, B, W).transpose(2, 0, 1, 3)
    else:
        xt = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(C, B * H, W)
        A = _band(wk, W)
        out = (xt @ A.transpose(0, 2, 1)).reshape(C, B, H, W).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        if axis == 2:
            gt = np.ascontiguousarray(g.transpose(1, 2, 0, 3)).reshape(C, H, B * W)
            gA = gt @ xt.transpose(0, 2, 1)
            if x.requires_grad:
                x._accum((A.transpose(0, 2, 1) @ gt).reshape(C, H, B, W).transpose(2, 0, 1, 3))
        else:
            gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(C, B * H, W)
            gA = gt.transpose(0, 2, 1) @ xt
            if x.requires_grad:
                x._accum((gt @ A).reshape(C, B, H, W).transpose(1, 0, 2, 3))
        w._accum(_unband(gA, k).reshape(w.shape))
        if b is not None:
            b._accum(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=bw)


def _depthwise_direct(x: Tensor, w: Tensor, b: Optional[Tensor], padding: Tuple[int, int]) -> Tensor:
    B, C, H, W = x.shape
    _, kh, kw = w.shape
    ph, pw = padding
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((B, C, Ho, Wo), dtype=x.data.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i : i + Ho, j : j + Wo] * w.data[None, :, i, j, None, None]
    if b is not None:
        out += b.data[None, :, None, None]

    def bw(g):
        gw = np.empty_like(w.data)
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(kh):
            for j in range(kw):
                gw[:, i, j] = np.einsum("bchw,bchw->c", xp[:, :, i : i + Ho, j : j + Wo], g)
                if gxp is not None:
                    gxp[:, :, i : i + Ho, j : j + Wo] += g * w.data[None, :, i, j, None, None]
        w._accum(gw)
        if b is not None:
            b._accum(g.sum(axis=(0, 2, 3)))
        if gxp is not None:
            x._accum(gxp[:, :, ph : ph + H, pw : pw + W])

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=bw)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling, stride = size, trailing remainder dropped.

    Ties route the gradient to the first window position in row-major order.
    """
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    offsets = [(i, j) for i in range(size) for j in range(size)]
    views = [x.data[:, :, i : Ho * size : size, j : Wo * size : size] for i, j in offsets]
    out = views[0].copy()
    idx = np.zeros(out.shape, dtype=np.int8)
    for n, v in enumerate(views[1:], start=1):
        better = v > out
        np.copyto(out, v, where=better)
        idx[better] = n

    def bw(g):
        gx = np.zeros_like(x.data)
        for n, (i, j) in enumerate(offsets):
            gx[:, :, i : Ho * size : size, j : Wo * size : size] = g * (idx == n)
        x._accum(gx)

    return Tensor(out, parents=(x,), backward=bw)


# ---------------------------------------------------------------------------
# normalisation


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch norm over every axis except 1 (channels / features).

    In training mode the running buffers are updated in place with the
    unbiased batch variance, as torch does.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // x.shape[1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    mu = mu.astype(x.data.dtype).reshape(shape)
    inv = inv.reshape(shape)
    out = (x.data - mu) * inv
    out *= gamma.data.reshape(shape)
    out += beta.data.reshape(shape)

    def bw(g):
        # normalised input rebuilt from the saved statistics, not stored
        xhat = (x.data - mu) * inv
        gamma._accum((g * xhat).sum(axis=axes))
        beta._accum(g.sum(axis=axes))
        if not x.requires_grad:
            return
        gx = g * gamma.data.reshape(shape)
        if training:
            gx = (gx - gx.mean(axis=axes, keepdims=True) - xhat * (gx * xhat).mean(axis=axes, keepdims=True)) * inv
            x._accum(gx)
        else:
            x._accum(gx * inv)

    return Tensor(out, parents=(x, gamma, beta), backward=bw)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, groups: int, eps: float = 1e-5) -> Tensor:
    B, C = x.shape[:2]
    if C % groups:
        raise ValueError(f"group_norm: {C} channels not divisible into {groups} groups")
    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xg - mu) * inv
    shape = [1, C] + [1] * (x.ndim - 2)
    xhat_full = xhat.reshape(x.shape)
    out = (xhat_full * gamma.data.reshape(shape) + beta.data.reshape(shape)).astype(x.data.dtype, copy=False)

    def bw(g):
        red = (0,) + tuple(range(2, x.ndim))
        gamma._accum((g * xhat_full).sum(axis=red))
        beta._accum(g.sum(axis=red))
        if not x.requires_grad:
            return
        gx = (g * gamma.data.reshape(shape)).reshape(B, groups, -1)
        gx = (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True)) * inv
        x._accum(gx.reshape(x.shape))

    return Tensor(out, parents=(x, gamma, beta), backward=bw)


# ---------------------------------------------------------------------------
# loss


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("cross_entropy: non-finite logits")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,) or labels.min(initial=0) < 0 or labels.max(initial=0) >= K:
        raise ValueError(f"cross_entropy: labels must be ints in [0, {K}) with shape ({B},)")
    lsm = log_softmax(logits.data, axis=1)
    loss = -lsm[np.arange(B), labels].mean()

    def bw(g):
        p = np.exp(lsm)
        p[np.arange(B), labels] -= 1.0
        logits._accum(g * p / B)

    return Tensor(np.asarray(loss, dtype=logits.data.dtype), parents=(logits,), backward=bw)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
