"""Dense float64 tensors with define-by-run reverse-mode autodiff.

Every op builds a node holding its parents and a closure mapping the output
gradient to one gradient per parent. ``Tensor.backward`` walks the graph in
reverse topological order, accumulates gradients and then frees the graph, so
each forward pass can be differentiated once.

Gradient tracking is decided per op from its inputs: when no input requires a
gradient the result is a plain constant and no graph is recorded. Freezing a
module is therefore just clearing ``requires_grad`` on its parameters.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

from . import kernels

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible with the op."""


class GraphError(RuntimeError):
    """``backward`` was called in a way the graph cannot honour."""


def _as_array(value):
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=np.float64)


def _lift(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id",
                 "_parents", "_backward", "op", "_consumed")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._consumed = False

    # -- construction -------------------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.grad = None
        out.node_id = next(_ids)
        out.op = op
        out._consumed = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        """Populate ``.grad`` on every ancestor that requires a gradient."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise GraphError("graph already consumed; run the forward pass again")
        self._consumed = True
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.node_id in seen:
                continue
            seen.add(node.node_id)
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and parent.node_id not in seen:
                    stack.append((parent, False))

        pending = {self.node_id: np.ones_like(self.data)}
        for node in reversed(order):
            g = pending.pop(node.node_id, None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = parent.node_id
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
                node._parents = ()
                node._backward = None
                node._consumed = True

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms -------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)

    def log_softmax(self, axis=-1):
        return log_softmax(self, axis)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


# -- elementwise -------------------------------------------------------------

def add(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = _lift(a), _lift(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b),
                        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._make(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = _lift(a), _lift(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._make(out, (a, b), backward, "div")


def power(a, exponent):
    a = _lift(a)
    p = float(exponent)
    ad = a.data
    return Tensor._make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a):
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor._make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a):
    x = a.data
    keep = x > 0
    return Tensor._make(x * keep, (a,), lambda g: (g * keep,), "relu")


def gelu(a):
    """Exact (erf-based) GELU."""
    out, slope = kernels.gelu(a.data)
    return Tensor._make(out, (a,), lambda g: (g * slope,), "gelu")


def where(mask, a, b):
    """Select ``a`` where the boolean array ``mask`` is set, else ``b``."""
    a, b = _lift(a), _lift(b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(np.where(mask, g, 0.0), sa) if a.requires_grad else None,
                _unbroadcast(np.where(mask, 0.0, g), sb) if b.requires_grad else None)

    return Tensor._make(out, (a, b), backward, "where")


# -- reductions and shape ops -------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False):
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum_(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,),
                        lambda g: (g.transpose(inverse),), "transpose")


def _is_fancy(index):
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray, Tensor)) for p in parts)


def getitem(a, index):
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    shape = a.shape
    fancy = _is_fancy(index)

    def backward(g):
        full = np.zeros(shape)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return Tensor._make(np.array(a.data[index]), (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors),
                        lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    count = len(tensors)

    def backward(g):
        return tuple(np.squeeze(piece, axis=axis)
                     for piece in np.split(g, count, axis=axis))

    return Tensor._make(out, tuple(tensors), backward, "stack")


def pad(a, axis, before, after):
    """Zero-pad ``before``/``after`` entries around ``axis``."""
    if before < 0 or after < 0:
        raise ShapeError(f"negative padding ({before}, {after})")
    if before == 0 and after == 0:
        return a
    axis = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    n = a.shape[axis]
    keep = tuple(slice(before, before + n) if i == axis else slice(None) for i in range(a.ndim))
    return Tensor._make(np.pad(a.data, widths), (a,), lambda g: (g[keep],), "pad")


def pad_right(a, axis, amount):
    """Zero-pad ``amount`` entries at the end of ``axis``."""
    return pad(a, axis, 0, amount)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """Matrix product with numpy batching rules (operands of rank >= 2).

    Rank-1 operands are promoted the usual way and squeezed back out.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim == 1:
        return reshape(matmul(reshape(a, (1,) + a.shape), b), b.shape[:-2] + b.shape[-1:])
    if b.ndim == 1:
        return reshape(matmul(a, reshape(b, b.shape + (1,))), a.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), backward, "matmul")


def conv1d(x, w, bias=None, stride=1, padding=0, channels_last=False):
    """1-D cross-correlation.

    ``x`` is (C_in, L) or (B, C_in, L); with ``channels_last`` it is
    (L, C_in) or (B, L, C_in) and the output follows the same layout.
    ``w`` is (C_out, C_in, K). Zero padding of ``padding`` samples is applied
    to both ends.
    """
    x, w = _lift(x), _lift(w)
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if w.ndim != 3:
        raise ShapeError(f"conv weight must be (C_out, C_in, K), got {w.shape}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv input must have rank 2 or 3, got {x.shape}")
    if not channels_last:
        xd = xd.transpose(0, 2, 1)
    c_out, c_in, k = w.shape
    if xd.shape[2] != c_in:
        raise ShapeError(f"conv input has {xd.shape[2]} channels, weight expects {c_in}")
    length = xd.shape[1]
    padded = length + 2 * padding
    if padded < k:
        raise ShapeError(f"kernel {k} longer than padded input {padded}")
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (0, 0)))
    cols = kernels.unfold1d(xd, k, stride)                  # (B, L_out, K*C_in)
    w2 = w.data.transpose(2, 1, 0).reshape(k * c_in, c_out)  # (K*C_in, C_out)
    out = cols @ w2
    if bias is not None:
        bias = _lift(bias)
        out = out + bias.data
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if unbatched:
            g = g[None]
        if not channels_last:
            g = g.transpose(0, 2, 1)
        g = np.ascontiguousarray(g)
        gx = gw = gb = None
        if x.requires_grad:
            gcols = g @ w2.T
            gx = kernels.fold1d(gcols, padded, k, stride)
            if padding:
                gx = gx[:, padding:padding + length]
            if not channels_last:
                gx = gx.transpose(0, 2, 1)
            if unbatched:
                gx = gx[0]
        if w.requires_grad:
            gw2 = cols.reshape(-1, k * c_in).T @ g.reshape(-1, c_out)
            gw = gw2.reshape(k, c_in, c_out).transpose(2, 1, 0)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return (gx, gw) if bias is None else (gx, gw, gb)

    if not channels_last:
        out = out.transpose(0, 2, 1)
    if unbatched:
        out = out[0]
    return Tensor._make(out, parents, backward, "conv1d")


def conv_output_length(length, kernel, stride, padding=0):
    return (length + 2 * padding - kernel) // stride + 1


# -- normalisation and softmax ------------------------------------------------

def standardize(x, axis=-1, eps=1e-5):
    """(x - mean) / sqrt(var + eps) along ``axis`` (biased variance)."""
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    centered = xd - mu
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=axis, keepdims=True) + eps)
    y = centered * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return Tensor._make(y, (x,), backward, "standardize")


def layer_norm(x, gamma, beta, eps=1e-5):
    return standardize(x, -1, eps) * gamma + beta


def softmax(x, axis=-1):
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (x,), backward, "log_softmax")


def gumbel_softmax(logits, temperature, hard=False, rng=None, noise=None):
    """Relaxed categorical sample over the last axis.

    With ``hard`` the forward value is the one-hot argmax of the relaxed
    sample while the gradient is that of the soft sample (straight-through).
    ``noise`` may supply the Gumbel perturbation explicitly; otherwise it is
    drawn from ``rng``.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    logits = _lift(logits)
    if noise is None:
        if rng is None:
            raise ValueError("gumbel_softmax needs an rng or explicit noise")
        u = rng.random(logits.shape)
        noise = -np.log(-np.log(np.clip(u, 1e-12, 1.0 - 1e-12)))
    soft = softmax((logits + noise) * (1.0 / temperature), -1)
    if not hard:
        return soft
    picks = soft.data.argmax(axis=-1)
    one_hot = np.zeros_like(soft.data)
    np.put_along_axis(one_hot, picks[..., None], 1.0, axis=-1)
    return Tensor._make(one_hot, (soft,), lambda g: (g,), "straight_through")


# -- composites ----------------------------------------------------------------

def sinusoidal_positions(length, dim):
    """Fixed sine/cosine position table of shape (length, dim)."""
    pos = np.arange(length)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * rates)
    table[:, 1::2] = np.cos(pos * rates[: dim // 2])
    return table


def add_positional_encoding(x):
    """Add the sinusoidal table to a (..., T, d) tensor."""
    return x + sinusoidal_positions(x.shape[-2], x.shape[-1])


def scaled_dot_product_attention(q, k, v, key_mask=None):
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    ``key_mask`` (boolean, broadcastable to the score shape) removes keys
    where it is False.
    """
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)))
    scores = scores * scale
    if key_mask is not None:
        scores = where(key_mask, scores, -1e30)
    return matmul(softmax(scores, -1), v)


def lstm_step(x, h, c, w_ih, w_hh, b):
    """One LSTM cell update; gate order is (input, forget, cell, output)."""
    a = matmul(x, w_ih) + matmul(h, w_hh) + b
    n = h.shape[-1]
    i = sigmoid(a[..., :n])
    f = sigmoid(a[..., n:2 * n])
    g = tanh(a[..., 2 * n:3 * n])
    o = sigmoid(a[..., 3 * n:])
    c_new = f * c + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new


# -- finite differences ----------------------------------------------------------

def numerical_gradient(fn, inputs, h=1e-5):
    """Central-difference gradient of scalar ``fn(*inputs)`` w.r.t. each input."""
    grads = []
    for t in inputs:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs).item()
            flat[i] = orig - h
            fm = fn(*inputs).item()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.shape))
    return grads


def gradcheck(fn, inputs, h=1e-5, atol=1e-8):
    """Largest relative error between analytic and finite-difference grads.

    The error for one input is ``|a - n| / max(|a|, |n|)`` in 2-norm over the
    whole gradient. Inputs whose gradients both have norm below ``atol`` score
    0: their difference is roundoff (a bias cancelled by a later
    normalisation has true gradient zero, but its finite difference is noise).
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    fn(*inputs).backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    numeric = numerical_gradient(fn, inputs, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale <= atol:
            continue
        worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst


def directional_gradcheck(fn, inputs, rng, directions=3, h=1e-5):
    """Relative error of analytic vs central-difference directional derivatives.

    Cheaper than ``gradcheck`` for many parameters: each random unit
    direction costs two evaluations of ``fn``.
    """
    for t in inputs:
        t.grad = None
        t.requires_grad = True
    fn(*inputs).backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    for _ in range(directions):
        dirs = [rng.standard_normal(t.shape) for t in inputs]
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        exact = sum(float((a * d).sum()) for a, d in zip(analytic, dirs))
        originals = [t.data.copy() for t in inputs]
        for t, o, d in zip(inputs, originals, dirs):
            t.data = o + h * d
        fp = fn(*inputs).item()
        for t, o, d in zip(inputs, originals, dirs):
            t.data = o - h * d
        fm = fn(*inputs).item()
        for t, o in zip(inputs, originals):
            t.data = o
        numeric = (fp - fm) / (2.0 * h)
        scale = max(abs(exact), abs(numeric))
        if scale > 0.0:
            worst = max(worst, abs(exact - numeric) / scale)
    return worst
