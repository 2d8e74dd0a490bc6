"""Small reverse-mode autodiff engine and the layers built on top of it.

Every differentiable op returns a :class:`Tensor` that remembers its parents
and a backward closure. Calling :meth:`Tensor.backward` walks that recorded
graph in reverse topological order, so gradients are exact (up to float64
rounding) and never computed by finite differences.

Arrays are float64 throughout; the gradient checks in the test-suite rely on it.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np


class ContractError(ValueError):
    """Raised when an op receives inputs that violate its shape contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a state, gradient or loss stops being finite."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward = _backward

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    # -- graph construction ---------------------------------------------
    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        live = tuple(p for p in parents if p.requires_grad)
        if not live:
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)

    def backward(self, grad: np.ndarray | float | None = None) -> None:
        """Propagate ``grad`` (default ones) to every upstream tensor that requires grad."""
        if grad is None:
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.broadcast_to(np.asarray(grad, dtype=np.float64), self.shape).copy()}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(a.data + b.data, (a, b),
                            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other))

    def __rsub__(self, other):
        return as_tensor(other) + (-self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(a.data * b.data, (a, b),
                            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        out = a.data / b.data
        return Tensor._make(out, (a, b),
                            lambda g: (_unbroadcast(g / b.data, a.shape),
                                       _unbroadcast(-g * out / b.data, b.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        a = self
        return Tensor._make(a.data ** exponent, (a,),
                            lambda g: (g * exponent * a.data ** (exponent - 1),))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ContractError(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def back(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a.data @ b.data, (a, b), back)

    def __getitem__(self, idx):
        a = self

        def back(g):
            full = np.zeros_like(a.data)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(a.data[idx], (a,), back)

    # -- shape ops ----------------------------------------------------------
    def reshape(self, *shape):
        a = self
        return Tensor._make(a.data.reshape(*shape), (a,), lambda g: (g.reshape(a.shape),))

    def swapaxes(self, i: int, j: int):
        a = self
        return Tensor._make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))

    def sum(self, axis=None, keepdims: bool = False):
        a = self

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, a.shape).copy(),)

        return Tensor._make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else np.prod([self.shape[ax] for ax in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise nonlinearities -----------------------------------------
    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self):
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._make(out, (self,), lambda g: (g * out * (1.0 - out),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        out = np.sqrt(self.data)
        return Tensor._make(out, (self,), lambda g: (g * 0.5 / out,))

    def softmax(self, axis: int = -1):
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, (self,), back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y, x = as_tensor(y), as_tensor(x)
    r2 = x.data ** 2 + y.data ** 2
    return Tensor._make(np.arctan2(y.data, x.data), (y, x),
                        lambda g: (_unbroadcast(g * x.data / r2, y.shape),
                                   _unbroadcast(-g * y.data / r2, x.shape)))


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - as_tensor(target)
    return (diff * diff).mean()


# ---------------------------------------------------------------------------
# Parameters and layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_dim: int
    out_dim: int
    hidden_dim: int = 256

    def __post_init__(self):
        if self.kind not in {"dense", "lstm_cell", "self_attention", "time_embedding"}:
            raise ContractError(f"unknown layer kind {self.kind!r}")
        if min(self.in_dim, self.out_dim, self.hidden_dim) <= 0:
            raise ContractError(f"layer dims must be positive: {self}")


def param(values: np.ndarray, name: str) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Owns a flat ``name -> Tensor`` parameter table; submodules are prefixed."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, values: np.ndarray) -> Tensor:
        t = param(values, name)
        self._params[name] = t
        return t

    def add_module(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + k, v) for k, v in self._params.items()]
        for cname, child in self._children.items():
            out.extend(child.named_parameters(prefix + cname + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise ContractError(f"checkpoint missing parameters: {sorted(missing)}")
        for k, p in own.items():
            if state[k].shape != p.shape:
                raise ContractError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "identity": lambda t: t,
    "tanh": Tensor.tanh,
    "sigmoid": Tensor.sigmoid,
}


class Dense(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, activation: str = "identity"):
        super().__init__()
        LayerSpec("dense", in_dim, out_dim)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.activation = activation
        self.W = self.add_param("W", uniform_init(rng, in_dim, (in_dim, out_dim)))
        self.b = self.add_param("b", uniform_init(rng, in_dim, (out_dim,)))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"dense expects last dim {self.in_dim}, got {x.shape}")
        return ACTIVATIONS[self.activation](x @ self.W + self.b)


def dense_apply(layer: Dense, x) -> Tensor:
    return layer(x)


class LSTMCell(Module):
    """Gate layout along the 4H axis is (input, forget, candidate, output)."""

    def __init__(self, in_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        LayerSpec("lstm_cell", in_dim, hidden_dim, hidden_dim)
        self.in_dim, self.hidden_dim = in_dim, hidden_dim
        fan = in_dim + hidden_dim
        self.Wx = self.add_param("Wx", uniform_init(rng, fan, (in_dim, 4 * hidden_dim)))
        self.Wh = self.add_param("Wh", uniform_init(rng, fan, (hidden_dim, 4 * hidden_dim)))
        self.b = self.add_param("b", uniform_init(rng, fan, (4 * hidden_dim,)))

    def initial_state(self, batch: int) -> tuple[Tensor, Tensor]:
        z = np.zeros((batch, self.hidden_dim))
        return Tensor(z), Tensor(z.copy())

    def __call__(self, x, state: tuple[Tensor, Tensor]) -> tuple[Tensor, tuple[Tensor, Tensor]]:
        x = as_tensor(x)
        h, c = state
        if x.shape[-1] != self.in_dim or h.shape[-1] != self.hidden_dim:
            raise ContractError(f"lstm shapes: x {x.shape}, h {h.shape}")
        if not (np.all(np.isfinite(h.data)) and np.all(np.isfinite(c.data))):
            raise NonFiniteError("non-finite LSTM state")
        H = self.hidden_dim
        z = x @ self.Wx + h @ self.Wh + self.b
        i = z[..., 0:H].sigmoid()
        f = z[..., H:2 * H].sigmoid()
        g = z[..., 2 * H:3 * H].tanh()
        o = z[..., 3 * H:4 * H].sigmoid()
        c_new = f * c + i * g
        h_new = o * c_new.tanh()
        return h_new, (h_new, c_new)


def lstm_step(cell: LSTMCell, x, state):
    return cell(x, state)


class SelfAttentionBlock(Module):
    """Single-head self-attention with residual, then a tanh feedforward with residual."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden_dim: int = 256):
        super().__init__()
        LayerSpec("self_attention", dim, dim, hidden_dim)
        self.dim = dim
        self.Wq = self.add_param("Wq", uniform_init(rng, dim, (dim, dim)))
        self.Wk = self.add_param("Wk", uniform_init(rng, dim, (dim, dim)))
        self.Wv = self.add_param("Wv", uniform_init(rng, dim, (dim, dim)))
        self.ff1 = self.add_module("ff1", Dense(dim, hidden_dim, rng, "tanh"))
        self.ff2 = self.add_module("ff2", Dense(hidden_dim, dim, rng))

    def __call__(self, tokens) -> Tensor:
        tokens = as_tensor(tokens)
        if tokens.ndim < 2 or tokens.shape[-2] == 0:
            raise ContractError("attention needs a non-empty token sequence")
        if tokens.shape[-1] != self.dim:
            raise ContractError(f"attention expects width {self.dim}, got {tokens.shape}")
        q = tokens @ self.Wq
        k = tokens @ self.Wk
        v = tokens @ self.Wv
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.dim))
        attended = scores.softmax(axis=-1) @ v
        mid = tokens + attended
        return mid + self.ff2(self.ff1(mid))


def attention_block_apply(block: SelfAttentionBlock, tokens) -> Tensor:
    return block(tokens)


def time_embedding(k, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Sinusoidal embedding of integer step(s) ``k``; returns shape (..., dim)."""
    LayerSpec("time_embedding", 1, dim, dim)
    k = np.asarray(k, dtype=np.float64)[..., None]
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / max(half, 1))
    emb = np.concatenate([np.sin(k * freqs), np.cos(k * freqs)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


class MLP(Module):
    def __init__(self, sizes: Sequence[int], rng: np.random.Generator,
                 hidden_activation: str = "tanh", out_activation: str = "identity"):
        super().__init__()
        self.layers: list[Dense] = []
        for n, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            act = out_activation if n == len(sizes) - 2 else hidden_activation
            self.layers.append(self.add_module(f"l{n}", Dense(a, b, rng, act)))

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: Iterable[tuple[str, Tensor]], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        if lr < 0:
            raise ContractError("learning rate must be non-negative")
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
        self.t += 1
        b1, b2 = self.betas
        for name, p in self.params:
            g = np.zeros_like(p.data) if p.grad is None else p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            if lr == 0.0:
                continue
            m_hat = self.m[name] / (1 - b1 ** self.t)
            v_hat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(opt: Adam, lr: float | None = None) -> None:
    opt.step(lr)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------
# Layout (little endian):
#   magic b"RISCKPT\0", u32 version, u32 count, then per entry:
#   u32 name_len, name utf-8, u32 ndim, u32 dims[ndim], f64 values[prod(dims)]

_MAGIC = b"RISCKPT\x00"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise ContractError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return out
