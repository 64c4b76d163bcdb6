"""Minimal neural toolkit: a reverse-mode tape over float64 numpy arrays.

Parameters live in flat dicts of numpy arrays. Forward functions wrap them in
Tensor leaves per call, so training code stays functional: loss_fn(params) ->
value_and_grad -> adam_step. No global state beyond the grad-mode flag.
"""
from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np

from .core import MalformedHeader, TruncatedPayload

CHECKPOINT_MAGIC = b"WOVC"
CHECKPOINT_VERSION = 1

_grad_enabled = True


@contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Array node on the tape. vjps map the output gradient to each parent."""

    __slots__ = ("data", "grad", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad=False, vjps=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._vjps = vjps  # list of (parent, fn) or None for leaves

    @property
    def shape(self):
        return self.data.shape

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
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
            if node._vjps:
                for parent, _ in node._vjps:
                    if id(parent) not in seen:
                        stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if not node._vjps or node.grad is None:
                continue
            for parent, fn in node._vjps:
                if not parent.requires_grad:
                    continue
                g = _unbroadcast(fn(node.grad), parent.data.shape)
                parent.grad = g if parent.grad is None else parent.grad + g

    # -- operator sugar ----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        return mul(self, power(as_tensor(other), -1))

    def __rtruediv__(self, other):
        return mul(power(self, -1), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, n):
        return power(self, n)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, vjps) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p, _ in vjps):
        return Tensor(data, requires_grad=True, vjps=vjps)
    return Tensor(data)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, [(a, lambda g: g), (b, lambda g: g)])


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, [(a, lambda g: g * b.data), (b, lambda g: g * a.data)])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim == 1:
        out = a.data @ b.data
        return _make(out, [(a, lambda g: g @ b.data.T), (b, lambda g: np.outer(a.data, g))])
    return _make(a.data @ b.data, [(a, lambda g: g @ b.data.T), (b, lambda g: a.data.T @ g)])


def power(a, n) -> Tensor:
    a = as_tensor(a)
    n = int(n)
    return _make(a.data**n, [(a, lambda g: g * n * a.data ** (n - 1))])


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, [(a, lambda g: g * out)])


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), [(a, lambda g: g / a.data)])


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), [(a, lambda g: g * mask)])


def _sigmoid_raw(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_raw(a.data)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a) -> Tensor:
    """log(1 + e^x), evaluated stably; gradient is the logistic function."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, [(a, lambda g: g * _sigmoid_raw(a.data))])


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the gradient goes to the first argument."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(out, [(a, lambda g: g * take_a), (b, lambda g: g * ~take_a)])


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)
    return _make(out, [(a, lambda g: g * take_a), (b, lambda g: g * ~take_a)])


def clip(a, lo, hi) -> Tensor:
    """Clamp with pass-through gradient strictly inside [lo, hi]."""
    return minimum(maximum(a, lo), hi)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return np.broadcast_to(g, a.data.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, a.data.shape).copy()

    return _make(out, [(a, back)])


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    vjps = []
    offset = 0
    for p in parts:
        width = p.data.shape[axis]
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(offset, offset + width)
        vjps.append((p, lambda g, sl=tuple(sl): g[sl]))
        offset += width
    return _make(out, vjps)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), [(a, lambda g: g.reshape(a.data.shape))])


def narrow(a, axis, start, length) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    a = as_tensor(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def back(g, sl=sl):
        full = np.zeros_like(a.data)
        full[sl] = g
        return full

    return _make(a.data[sl].copy(), [(a, back)])


def value_and_grad(loss_fn, params: dict):
    """Evaluate loss_fn over Tensor leaves for params; return (value, grads)."""
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = loss_fn(leaves)
    out.backward()
    grads = {
        k: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for k, t in leaves.items()
    }
    return float(out.data), grads


# ---------------------------------------------------------------------------
# Layers


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    """Plain fully connected stack, tanh hidden activations, linear output.

    Holds only the architecture; weights live in an external params dict under
    keys "<name>.w{i}" / "<name>.b{i}". zero_init_last makes the final layer
    start at exactly zero, so the block initially contributes nothing.
    """

    def __init__(self, name: str, sizes: list[int], zero_init_last=False, activation="tanh"):
        if len(sizes) < 2:
            raise ValueError("need at least an input and an output size")
        if activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.name = name
        self.sizes = list(sizes)
        self.zero_init_last = zero_init_last
        self.activation = activation

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def init(self, rng: np.random.Generator) -> dict:
        params = {}
        for i in range(self.n_layers):
            fan_in, fan_out = self.sizes[i], self.sizes[i + 1]
            last = i == self.n_layers - 1
            if last and self.zero_init_last:
                params[f"{self.name}.w{i}"] = np.zeros((fan_in, fan_out))
            else:
                params[f"{self.name}.w{i}"] = xavier_uniform(rng, fan_in, fan_out)
            params[f"{self.name}.b{i}"] = np.zeros(fan_out)
        return params

    def __call__(self, params: dict, x):
        h = as_tensor(x)
        act = tanh if self.activation == "tanh" else relu
        for i in range(self.n_layers):
            h = matmul(h, as_tensor(params[f"{self.name}.w{i}"]))
            h = add(h, as_tensor(params[f"{self.name}.b{i}"]))
            if i < self.n_layers - 1:
                h = act(h)
        return h

    def apply(self, params: dict, x: np.ndarray) -> np.ndarray:
        """Inference path: raw arrays in, raw arrays out, no tape."""
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            h = h @ params[f"{self.name}.w{i}"] + params[f"{self.name}.b{i}"]
            if i < self.n_layers - 1:
                h = np.tanh(h) if self.activation == "tanh" else np.maximum(h, 0.0)
        return h


# ---------------------------------------------------------------------------
# Adam


def adam_init(params: dict) -> dict:
    return {
        "step": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params, grads, state, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update. Returns new params; mutates state."""
    state["step"] += 1
    t = state["step"]
    out = {}
    for k, p in params.items():
        g = grads[k]
        state["m"][k] = beta1 * state["m"][k] + (1.0 - beta1) * g
        state["v"][k] = beta2 * state["v"][k] + (1.0 - beta2) * g * g
        m_hat = state["m"][k] / (1.0 - beta1**t)
        v_hat = state["v"][k] / (1.0 - beta2**t)
        out[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


# ---------------------------------------------------------------------------
# Checkpoints: sorted-key binary dump so identical params give identical bytes.


def save_params(path, params: dict):
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes([CHECKPOINT_VERSION]))
        fh.write(struct.pack("<I", len(params)))
        for name in sorted(params):
            # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
            arr = np.asarray(params[name], dtype=np.float64)
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def load_params(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 9 or data[:4] != CHECKPOINT_MAGIC:
        raise MalformedHeader("bad checkpoint magic")
    if data[4] != CHECKPOINT_VERSION:
        raise MalformedHeader(f"unsupported checkpoint version {data[4]}")
    (count,) = struct.unpack_from("<I", data, 5)
    offset = 9
    params = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset : offset + name_len].decode()
            offset += name_len
            (ndim,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}I", data, offset)
            offset += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
            offset += 8 * size
            params[name] = arr.reshape(shape).copy()
    except (struct.error, ValueError) as exc:
        raise TruncatedPayload(f"checkpoint ended early: {exc}") from exc
    if offset != len(data):
        raise MalformedHeader("trailing bytes after checkpoint payload")
    return params
