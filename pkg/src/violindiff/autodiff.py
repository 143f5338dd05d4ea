"""Minimal reverse-mode automatic differentiation on numpy arrays.

Every op builds a node holding its parents and a closure that scatters the
output gradient back to them; Tensor.backward() runs the closures in reverse
topological order. float64 throughout so finite-difference checks at step
1e-4 stay meaningful.

Only what the two models need is implemented. Recurrent layers and a few
other hot spots (conv1d, layernorm, softmax) are fused ops with hand-written
backward passes; everything else composes from the primitives below.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True
_CHECK_FINITE = False


@contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_check(enabled: bool) -> None:
    """Debug mode: verify every op output is finite."""
    global _CHECK_FINITE
    _CHECK_FINITE = enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents=(), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if grad is None:
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        _acc(self, np.asarray(grad, dtype=np.float64))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operators ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -_ensure(other))

    def __rsub__(self, other):
        return add(_ensure(other), -self)

    def __truediv__(self, other):
        other = _ensure(other)
        return mul(self, other ** -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _ensure(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _node(data: np.ndarray, parents, backward) -> Tensor:
    if _CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values in op output")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=tuple(parents), backward=backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data + b.data

    def backward(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return _node(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data * b.data

    def backward(g):
        _acc(a, _unbroadcast(g * b.data, a.shape))
        _acc(b, _unbroadcast(g * a.data, b.shape))

    return _node(out_data, (a, b), backward)


def power(a, exponent: float) -> Tensor:
    a = _ensure(a)
    out_data = a.data ** exponent

    def backward(g):
        _acc(a, g * exponent * a.data ** (exponent - 1.0))

    return _node(out_data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _ensure(a), _ensure(b)
    out_data = a.data @ b.data

    def backward(g):
        _acc(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _acc(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))

    return _node(out_data, (a, b), backward)


def exp(a) -> Tensor:
    a = _ensure(a)
    out_data = np.exp(a.data)

    def backward(g):
        _acc(a, g * out_data)

    return _node(out_data, (a,), backward)


def log(a) -> Tensor:
    a = _ensure(a)
    out_data = np.log(a.data)

    def backward(g):
        _acc(a, g / a.data)

    return _node(out_data, (a,), backward)


def tanh(a) -> Tensor:
    a = _ensure(a)
    out_data = np.tanh(a.data)

    def backward(g):
        _acc(a, g * (1.0 - out_data ** 2))

    return _node(out_data, (a,), backward)


def sigmoid(a) -> Tensor:
    a = _ensure(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data))

    def backward(g):
        _acc(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward)


def relu(a) -> Tensor:
    a = _ensure(a)
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        _acc(a, g * (a.data > 0.0))

    return _node(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = _ensure(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _acc(a, out_data * (g - dot))

    return _node(out_data, (a,), backward)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape).copy())

    return _node(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _ensure(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _ensure(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        _acc(a, g.reshape(a.shape))

    return _node(out_data, (a,), backward)


def transpose(a, axes) -> Tensor:
    a = _ensure(a)
    axes = tuple(axes)
    out_data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _acc(a, g.transpose(inverse))

    return _node(out_data, (a,), backward)


def take(a, key) -> Tensor:
    """Basic slicing/indexing; gradient scatters back into place."""
    a = _ensure(a)
    out_data = a.data[key]

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, key, g)
        _acc(a, buf)

    return _node(out_data, (a,), backward)


def take_rows(table, indices) -> Tensor:
    """Embedding lookup: rows of a (N, D) table by an integer index array."""
    table = _ensure(table)
    idx = np.asarray(indices, dtype=np.intp)
    out_data = table.data[idx]

    def backward(g):
        buf = np.zeros_like(table.data)
        np.add.at(buf, idx, g)
        _acc(table, buf)

    return _node(out_data, (table,), backward)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [_ensure(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _acc(t, piece)

    return _node(out_data, tuple(tensors), backward)


def where_const(cond: np.ndarray, a, b) -> Tensor:
    """Select by a constant boolean mask (no gradient through cond)."""
    a, b = _ensure(a), _ensure(b)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        _acc(a, _unbroadcast(np.where(cond, g, 0.0), a.shape))
        _acc(b, _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _node(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# fused layers

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    x, gamma, beta = _ensure(x), _ensure(gamma), _ensure(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out_data = gamma.data * xhat + beta.data

    def backward(g):
        reduce_axes = tuple(range(g.ndim - 1))
        _acc(gamma, (g * xhat).sum(axis=reduce_axes))
        _acc(beta, g.sum(axis=reduce_axes))
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        _acc(x, dx)

    return _node(out_data, (x, gamma, beta), backward)


def conv1d(x, w, b) -> Tensor:
    """Non-causal same-padding 1-D convolution.

    x: (B, Cin, T), w: (Cout, Cin, K) with K odd, b: (Cout,). Zero padding of
    (K-1)/2 on both sides keeps T fixed.
    """
    x, w, b = _ensure(x), _ensure(w), _ensure(b)
    B, Cin, T = x.shape
    Cout, _, K = w.shape
    pad = (K - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad))) if pad else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, K, axis=2)  # (B,Cin,T,K)
    out_data = np.einsum("bitk,oik->bot", windows, w.data, optimize=True) + b.data[:, None]

    def backward(g):
        _acc(w, np.einsum("bitk,bot->oik", windows, g, optimize=True))
        _acc(b, g.sum(axis=(0, 2)))
        gp = np.pad(g, ((0, 0), (0, 0), (K - 1 - pad, pad))) if K > 1 else g
        gwin = np.lib.stride_tricks.sliding_window_view(gp, K, axis=2)  # (B,Cout,T,K)
        _acc(x, np.einsum("botk,oik->bit", gwin, w.data[:, :, ::-1], optimize=True))

    return _node(out_data, (x, w, b), backward)


def gru_layer(x, wx, wh, bx, bh, reverse: bool = False) -> Tensor:
    """One GRU direction over (B, T, Cin) input, returning all hidden states.

    Gate layout is (r, z, n) along the 3H axis:
        r = sigmoid(x W_r + h U_r + b), z likewise,
        n = tanh(x W_n + b_n + r * (h U_n + c_n)), h' = (1-z) n + z h.
    The whole sequence runs as one op with a hand-written BPTT backward,
    which is what makes CPU training tolerable.
    """
    x, wx, wh, bx, bh = _ensure(x), _ensure(wx), _ensure(wh), _ensure(bx), _ensure(bh)
    B, T, Cin = x.shape
    H = wh.shape[0]
    xd = x.data[:, ::-1] if reverse else x.data
    xw = xd @ wx.data + bx.data  # (B, T, 3H)

    rs = np.empty((B, T, H))
    zs = np.empty((B, T, H))
    ns = np.empty((B, T, H))
    hs = np.empty((B, T, H))
    hhn = np.empty((B, T, H))
    h = np.zeros((B, H))
    for t in range(T):
        hh = h @ wh.data + bh.data
        r = 1.0 / (1.0 + np.exp(-(xw[:, t, :H] + hh[:, :H])))
        z = 1.0 / (1.0 + np.exp(-(xw[:, t, H:2 * H] + hh[:, H:2 * H])))
        n = np.tanh(xw[:, t, 2 * H:] + r * hh[:, 2 * H:])
        h = (1.0 - z) * n + z * h
        rs[:, t], zs[:, t], ns[:, t], hs[:, t], hhn[:, t] = r, z, n, h, hh[:, 2 * H:]
    out_data = hs[:, ::-1].copy() if reverse else hs.copy()

    def backward(g):
        gr = g[:, ::-1] if reverse else g
        dxw = np.empty((B, T, 3 * H))
        dwh = np.zeros_like(wh.data)
        dbh = np.zeros_like(bh.data)
        dh = np.zeros((B, H))
        for t in range(T - 1, -1, -1):
            dh_t = gr[:, t] + dh
            h_prev = hs[:, t - 1] if t > 0 else np.zeros((B, H))
            dn = dh_t * (1.0 - zs[:, t])
            dz = dh_t * (h_prev - ns[:, t])
            dh = dh_t * zs[:, t]
            dn_pre = dn * (1.0 - ns[:, t] ** 2)
            dr = dn_pre * hhn[:, t]
            dhh_n = dn_pre * rs[:, t]
            dr_pre = dr * rs[:, t] * (1.0 - rs[:, t])
            dz_pre = dz * zs[:, t] * (1.0 - zs[:, t])
            dxw[:, t, :H] = dr_pre
            dxw[:, t, H:2 * H] = dz_pre
            dxw[:, t, 2 * H:] = dn_pre
            dhh = np.concatenate([dr_pre, dz_pre, dhh_n], axis=1)  # (B, 3H)
            dwh += h_prev.T @ dhh
            dbh += dhh.sum(axis=0)
            dh += dhh @ wh.data.T
        _acc(wh, dwh)
        _acc(bh, dbh)
        _acc(bx, dxw.sum(axis=(0, 1)))
        _acc(wx, xd.reshape(-1, Cin).T @ dxw.reshape(-1, 3 * H))
        dx = dxw @ wx.data.T
        _acc(x, dx[:, ::-1] if reverse else dx)

    return _node(out_data, (x, wx, wh, bx, bh), backward)


# ---------------------------------------------------------------------------
# verification

def grad_check(params: dict, loss_fn, n_coords: int = 200, step: float = 1e-4,
               seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples n_coords coordinates across all parameters (every parameter gets
    at least one). Relative error is |a - n| / max(1, |n|).
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    rng = np.random.default_rng(seed)
    names = sorted(params)
    coords = [(k, int(rng.integers(params[k].data.size))) for k in names]
    while len(coords) < n_coords:
        k = names[int(rng.integers(len(names)))]
        coords.append((k, int(rng.integers(params[k].data.size))))

    worst = 0.0
    for k, flat_idx in coords:
        p = params[k]
        idx = np.unravel_index(flat_idx, p.data.shape)
        orig = p.data[idx]
        p.data[idx] = orig + step
        with no_grad():
            hi = loss_fn().item()
        p.data[idx] = orig - step
        with no_grad():
            lo = loss_fn().item()
        p.data[idx] = orig
        numeric = (hi - lo) / (2.0 * step)
        err = abs(analytic[k][idx] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
