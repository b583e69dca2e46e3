"""Dense float64 tensors with reverse-mode autodiff, plus Adam.

Every differentiable op builds a node that remembers its parents and a
closure that pushes the output gradient back to them. ``Tensor.backward``
walks the resulting graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


def _unbroadcast(grad, shape):
    """Sum ``grad`` over the axes that broadcasting stretched to reach it."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"shapes {a} and {b} are not broadcastable") from None


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
        for i in items
    )


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    # make ndarray <op> Tensor defer to the reflected Tensor methods
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.name = name

    # -- construction helpers ------------------------------------------------

    @classmethod
    def _make(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- backward --------------------------------------------------------------

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf.

        Only scalar roots are accepted unless an explicit seed is given.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")
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
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- elementwise arithmetic -----------------------------------------------

    def _binary(self, other, fwd, bwd_a, bwd_b, op):
        other = other if isinstance(other, Tensor) else Tensor(other)
        _broadcast_shape(self.shape, other.shape)
        a, b = self.data, other.data
        out_data = fwd(a, b)
        need_a, need_b = self.requires_grad, other.requires_grad

        def backward(g):
            return (
                _unbroadcast(bwd_a(g, a, b), a.shape) if need_a else None,
                _unbroadcast(bwd_b(g, a, b), b.shape) if need_b else None,
            )

        return Tensor._make(out_data, (self, other), backward, op)

    def __add__(self, other):
        return self._binary(other, np.add, lambda g, a, b: g, lambda g, a, b: g, "add")

    def __sub__(self, other):
        return self._binary(other, np.subtract, lambda g, a, b: g, lambda g, a, b: -g, "sub")

    def __mul__(self, other):
        return self._binary(
            other, np.multiply, lambda g, a, b: g * b, lambda g, a, b: g * a, "mul"
        )

    def __truediv__(self, other):
        return self._binary(
            other,
            np.divide,
            lambda g, a, b: g / b,
            lambda g, a, b: -g * a / (b * b),
            "div",
        )

    def __radd__(self, other):
        return Tensor(other) + self

    def __rsub__(self, other):
        return Tensor(other) - self

    def __rmul__(self, other):
        return Tensor(other) * self

    def __rtruediv__(self, other):
        return Tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("only constant exponents are supported")
        p = float(exponent)
        a = self.data
        return Tensor._make(a**p, (self,), lambda g: (g * p * a ** (p - 1),), "pow")

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        if isinstance(idx, Tensor):
            idx = idx.data.astype(np.intp)
        a = self.data
        out_data = a[idx]
        basic = _is_basic_index(idx)

        def backward(g):
            full = np.zeros_like(a)
            if basic:
                full[idx] += g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(out_data, (self,), backward, "getitem")

    # -- reductions and shape ops ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self.data
        out_data = a.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(np.asarray(out_data), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        a = self.data
        if axis is None:
            n = a.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            n = math.prod(a.shape[ax] for ax in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out_data = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(str(exc)) from None
        return Tensor._make(out_data, (self,), lambda g: (g.reshape(src),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),), "transpose"
        )

    def swapaxes(self, a1, a2):
        axes = list(range(self.ndim))
        axes[a1], axes[a2] = axes[a2], axes[a1]
        return self.transpose(tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def expand_dims(self, axis):
        src = self.shape
        return Tensor._make(
            np.expand_dims(self.data, axis), (self,), lambda g: (g.reshape(src),), "expand_dims"
        )

    # -- unary math ---------------------------------------------------------------

    def exp(self):
        y = np.exp(self.data)
        return Tensor._make(y, (self,), lambda g: (g * y,), "exp")

    def log(self):
        a = self.data
        return Tensor._make(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        y = np.sqrt(self.data)
        return Tensor._make(y, (self,), lambda g: (g * 0.5 / y,), "sqrt")

    def sin(self):
        a = self.data
        return Tensor._make(np.sin(a), (self,), lambda g: (g * np.cos(a),), "sin")

    def cos(self):
        a = self.data
        return Tensor._make(np.cos(a), (self,), lambda g: (-g * np.sin(a),), "cos")

    def tanh(self):
        y = np.tanh(self.data)
        return Tensor._make(y, (self,), lambda g: (g * (1.0 - y * y),), "tanh")

    def sigmoid(self):
        y = 0.5 * (np.tanh(0.5 * self.data) + 1.0)
        return Tensor._make(y, (self,), lambda g: (g * y * (1.0 - y),), "sigmoid")

    def relu(self):
        a = self.data
        return Tensor._make(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),), "relu")

    def silu(self):
        a = self.data
        s = 0.5 * (np.tanh(0.5 * a) + 1.0)
        return Tensor._make(
            a * s, (self,), lambda g: (g * (s * (1.0 + a * (1.0 - s))),), "silu"
        )

    def square(self):
        a = self.data
        return Tensor._make(a * a, (self,), lambda g: (2.0 * g * a,), "square")


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def parameter(data, name=None):
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- functional forms -------------------------------------------------------------

_ELEMENTWISE = {
    "add": Tensor.__add__,
    "sub": Tensor.__sub__,
    "mul": Tensor.__mul__,
    "div": Tensor.__truediv__,
}


def elementwise(kind, a, b):
    """Apply a broadcasting binary op by name (add, sub, mul, div)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    return fn(as_tensor(a), b)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2])
    x, y = a.data, b.data
    out_data = x @ y

    need_a, need_b = a.requires_grad, b.requires_grad

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(y, -1, -2), x.shape) if need_a else None
        gb = _unbroadcast(np.swapaxes(x, -1, -2) @ g, y.shape) if need_b else None
        return ga, gb

    return Tensor._make(out_data, (a, b), backward, "matmul")


def softmax_rows(a):
    """Softmax over the trailing axis, max-shifted for stability."""
    a = as_tensor(a)
    if np.isnan(a.data).any():
        raise NumericError("softmax_rows received NaN input")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (a,), backward, "softmax")


def atan2(y, x):
    y, x = as_tensor(y), as_tensor(x)
    _broadcast_shape(y.shape, x.shape)
    yd, xd = y.data, x.data
    r2 = xd * xd + yd * yd

    def backward(g):
        return _unbroadcast(g * xd / r2, yd.shape), _unbroadcast(-g * yd / r2, xd.shape)

    return Tensor._make(np.arctan2(yd, xd), (y, x), backward, "atan2")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out_data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out_data, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    return concat([as_tensor(t).expand_dims(axis) for t in tensors], axis=axis)


def where(cond, a, b):
    """Select from ``a`` where ``cond`` holds, else ``b``; ``cond`` is constant."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.where(cond, a.data, b.data)

    def backward(g):
        return (
            _unbroadcast(np.where(cond, g, 0.0), a.shape),
            _unbroadcast(np.where(cond, 0.0, g), b.shape),
        )

    return Tensor._make(out_data, (a, b), backward, "where")


def mse(a, b):
    d = as_tensor(a) - b
    return (d * d).mean()


def check_finite(t, what):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite value in {what}")


# -- modules ------------------------------------------------------------------------


class Module:
    """Parameter container; parameters are discovered from attributes."""

    def named_parameters(self, prefix=""):
        out = []
        for key, value in vars(self).items():
            out.extend(_collect(value, f"{prefix}{key}"))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _collect(value, name):
    if isinstance(value, Tensor):
        return [(name, value)] if value.requires_grad else []
    if isinstance(value, Module):
        return value.named_parameters(prefix=name + ".")
    if isinstance(value, (list, tuple)):
        out = []
        for i, v in enumerate(value):
            out.extend(_collect(v, f"{name}.{i}"))
        return out
    return []


def glorot(rng, fan_in, fan_out, shape):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    """Dense map over the trailing axis: ``x @ W + b``."""

    def __init__(self, n_in, n_out, rng, bias=True, zero=False):
        w = np.zeros((n_in, n_out)) if zero else glorot(rng, n_in, n_out, (n_in, n_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv1x1(Module):
    """Pointwise channel mixing for channel-first ``(..., C, L)`` inputs."""

    def __init__(self, n_in, n_out, rng, zero=False):
        w = np.zeros((n_out, n_in)) if zero else glorot(rng, n_in, n_out, (n_out, n_in))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros((n_out, 1)))

    def forward(self, x):
        return matmul(self.weight, x) + self.bias


def layer_norm(x, axis=-1, eps=1e-5):
    """Zero-mean, unit-variance normalization along ``axis`` (no affine)."""
    x = as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    d = x.data - mu
    inv = 1.0 / np.sqrt((d * d).mean(axis=axis, keepdims=True) + eps)
    y = d * inv

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gym),)

    return Tensor._make(y, (x,), backward, "layer_norm")


class LayerNorm(Module):
    """Normalizes over ``axis`` with a learned per-feature affine."""

    def __init__(self, n, axis=-1, eps=1e-5):
        self.axis = axis
        self.eps = eps
        shape = (n,) if axis == -1 else (n, 1)
        self.gain = parameter(np.ones(shape))
        self.shift = parameter(np.zeros(shape))

    def forward(self, x):
        return layer_norm(x, self.axis, self.eps) * self.gain + self.shift


# -- optimizer ------------------------------------------------------------------------


class Adam:
    """Bias-corrected Adam over a fixed list of parameter tensors."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError("one gradient per parameter is required")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        return {"step": self.step_count, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


_TOEPLITZ_CACHE = {}


def _toeplitz_index(L):
    """Lags ``l - m`` laid out as [m, l] (clipped at 0) and the causal mask."""
    hit = _TOEPLITZ_CACHE.get(L)
    if hit is None:
        lag = np.arange(L)[None, :] - np.arange(L)[:, None]
        hit = (np.where(lag >= 0, lag, 0), (lag >= 0).astype(np.float64))
        _TOEPLITZ_CACHE[L] = hit
    return hit


def causal_conv(x, k):
    """Per-channel causal convolution ``y[..., h, l] = sum_j k[h, j] x[..., h, l - j]``.

    ``x`` has shape (..., H, L) and ``k`` has shape (H, L). Evaluated as a
    batched Toeplitz product; direct O(L^2) work per channel.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim < 2 or k.ndim != 2 or x.shape[-2:] != k.shape:
        raise ShapeError(f"causal_conv expects x (..., H, L) and k (H, L); got {x.shape}, {k.shape}")
    H, L = k.shape
    lag, causal = _toeplitz_index(L)
    toe_t = np.take(k.data, lag, axis=1)  # (H, L, L), [h, m, l] = k[h, l - m]
    toe_t *= causal
    # reversed or strided views would miss the BLAS path in the batched product
    xh = np.moveaxis(np.ascontiguousarray(x.data).reshape(-1, H, L), 1, 0)  # (H, B, L)
    y = np.moveaxis(xh @ toe_t, 0, 1).reshape(x.shape)

    def backward(g):
        gh = np.moveaxis(np.ascontiguousarray(g).reshape(-1, H, L), 1, 0)
        gx = np.moveaxis(gh @ np.swapaxes(toe_t, 1, 2), 0, 1).reshape(x.shape)
        # kernel lag j collects the j-th superdiagonal of sum_b x^T g
        outer = np.swapaxes(xh, 1, 2) @ gh
        gk = np.stack([np.trace(outer, offset=j, axis1=1, axis2=2) for j in range(L)], axis=1)
        return gx, gk

    return Tensor._make(y, (x, k), backward, "causal_conv")
