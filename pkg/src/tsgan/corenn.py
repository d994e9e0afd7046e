"""Small reverse-mode differentiation core built on numpy float64 arrays.

Values flow through :class:`Var` nodes recorded on a :class:`Tape`.  Layers
(LSTM, dense) are fused tape operations with hand-written backward passes so
that a whole sequence costs one tape node instead of thousands.
"""
from __future__ import annotations

import struct
import weakref
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from ._kernels import lstm_backward_kernel, lstm_cell_kernel

PROB_EPS = 1e-7
PARAMSET_MAGIC = b"TSPS"
PARAMSET_VERSION = 1


class ConfigurationError(ValueError):
    """Shapes or sizes that do not fit together."""


class UsageError(RuntimeError):
    """API used out of order, e.g. backward on a loss from another tape."""


def as_tensor(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


class ParamSet:
    """Named float64 parameter arrays, each with a gradient slot of equal shape."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self.values:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.values[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return list(self.values)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, value in self.values.items():
            out.add(name, value)
            out.grads[name][...] = self.grads[name]
        return out

    def num_values(self) -> int:
        return sum(v.size for v in self.values.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.values.values())

    def to_bytes(self) -> bytes:
        return serialize_params(self)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ParamSet":
        return deserialize_params(blob)


def serialize_params(params: ParamSet) -> bytes:
    """Flat little-endian container: header, then (name, shape, raw float64) entries."""
    chunks = [PARAMSET_MAGIC, struct.pack("<IQ", PARAMSET_VERSION, len(params.values))]
    for name, value in params.values.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<Q", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<Q", value.ndim))
        chunks.append(struct.pack(f"<{value.ndim}Q", *value.shape))
        chunks.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return b"".join(chunks)


def deserialize_params(blob: bytes) -> ParamSet:
    try:
        return _read_params(memoryview(blob))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"truncated or corrupt parameter container: {exc}") from None


def _read_params(view) -> ParamSet:
    if bytes(view[:4]) != PARAMSET_MAGIC:
        raise ConfigurationError("not a parameter container (bad magic)")
    version, count = struct.unpack_from("<IQ", view, 4)
    if version != PARAMSET_VERSION:
        raise ConfigurationError(f"unsupported parameter container version {version}")
    pos = 4 + 12
    params = ParamSet()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        name = bytes(view[pos:pos + name_len]).decode("utf-8")
        pos += name_len
        (rank,) = struct.unpack_from("<Q", view, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(view, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        params.add(name, arr.astype(np.float64))
    if pos != len(view):
        raise ConfigurationError("trailing bytes after parameter container")
    return params


class Var:
    """A value recorded on a tape, optionally carrying a gradient."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "tape", "__weakref__")

    def __init__(self, value, tape: "Tape", requires_grad=False, parents=(), backward_fn=None):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.tape = tape

    @property
    def shape(self):
        return np.shape(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Records forward operations in execution order for reverse-mode gradients."""

    # Nodes are held weakly: a Var keeps its tape alive, never the reverse, so
    # finished graphs are freed by reference counting instead of waiting for
    # the cycle collector while they pin large activation buffers.

    def __init__(self):
        self.nodes: list[weakref.ref] = []
        self._param_links: list[tuple[weakref.ref, ParamSet, str]] = []

    def constant(self, value) -> Var:
        return Var(as_tensor(value), self)

    def watch(self, value) -> Var:
        """Designate an input tensor as a differentiation target."""
        var = Var(as_tensor(value), self, requires_grad=True)
        self.nodes.append(weakref.ref(var))
        return var

    def param(self, params: ParamSet, name: str, trainable: bool = True) -> Var:
        if not trainable:
            return Var(params.values[name], self)
        var = Var(params.values[name], self, requires_grad=True)
        self.nodes.append(weakref.ref(var))
        self._param_links.append((weakref.ref(var), params, name))
        return var

    def record(self, value, parents: Sequence[Var], backward_fn: Callable) -> Var:
        requires = any(p.requires_grad for p in parents)
        var = Var(value, self, requires_grad=requires, parents=tuple(parents),
                  backward_fn=backward_fn if requires else None)
        if requires:
            self.nodes.append(weakref.ref(var))
        return var


def backward(tape: Tape, loss: Var) -> None:
    """Accumulate d(loss)/d(target) into every watched input and trainable parameter.

    Gradients of parameters are *added* into the ParamSet slots so several
    losses can be accumulated before an update; watched inputs get a fresh
    ``.grad`` per call.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise UsageError("loss was not produced on this tape")
    if np.size(loss.value) != 1:
        raise UsageError("backward needs a scalar loss")
    for ref in tape.nodes:
        node = ref()
        if node is not None:
            node.grad = None
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.value)
    try:
        start = _index_of(tape.nodes, loss)
    except ValueError:
        raise UsageError("loss is not recorded on this tape") from None
    for ref in reversed(tape.nodes[:start + 1]):
        node = ref()
        if node is None or node.grad is None or node.backward_fn is None:
            continue
        parent_grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=np.float64)
            else:
                parent.grad = parent.grad + g
    for ref, params, name in tape._param_links:
        var = ref()
        if var is not None and var.grad is not None:
            params.grads[name] += var.grad


def _index_of(nodes: list, target) -> int:
    for i in range(len(nodes) - 1, -1, -1):
        if nodes[i]() is target:
            return i
    raise ValueError


def _lift(tape: Tape, x) -> Var:
    return x if isinstance(x, Var) else tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Var):
            return x.tape
    raise UsageError("at least one operand must be a Var")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# --- elementwise and reductions -------------------------------------------

def add(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = np.shape(a.value), np.shape(b.value)
    return tape.record(a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = np.shape(a.value), np.shape(b.value)
    return tape.record(a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Var:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    return tape.record(av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, np.shape(av)),
                                  _unbroadcast(g * av, np.shape(bv))))


def tanh(x: Var) -> Var:
    y = np.tanh(x.value)
    return x.tape.record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Var) -> Var:
    y = expit(np.asarray(x.value, dtype=np.float64))
    return x.tape.record(y, (x,), lambda g: (g * y * (1.0 - y),))


def absolute(x: Var) -> Var:
    sign = np.sign(x.value)
    return x.tape.record(np.abs(x.value), (x,), lambda g: (g * sign,))


def square(x: Var) -> Var:
    v = x.value
    return x.tape.record(v * v, (x,), lambda g: (2.0 * g * v,))


def sum_(x: Var, axis=None) -> Var:
    shape = np.shape(x.value)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return x.tape.record(np.sum(x.value, axis=axis), (x,), grad_fn)


def mean(x: Var, axis=None) -> Var:
    shape = np.shape(x.value)
    n = np.size(x.value) if axis is None else shape[axis]

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return x.tape.record(np.mean(x.value, axis=axis), (x,), grad_fn)


def reshape(x: Var, shape) -> Var:
    old = np.shape(x.value)
    return x.tape.record(np.reshape(x.value, shape), (x,), lambda g: (np.reshape(g, old),))


def take_last(x: Var, axis: int = 1) -> Var:
    """Select the final entry along ``axis`` (e.g. last timestep)."""
    shape = np.shape(x.value)
    index = [slice(None)] * len(shape)
    index[axis] = -1
    index = tuple(index)

    def grad_fn(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return x.tape.record(x.value[index], (x,), grad_fn)


def concat(xs: Sequence[Var], axis: int = 0) -> Var:
    tape = _tape_of(*xs)
    xs = [_lift(tape, x) for x in xs]
    sizes = [np.shape(x.value)[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return tape.record(np.concatenate([x.value for x in xs], axis=axis), xs,
                       lambda g: tuple(np.split(g, splits, axis=axis)))


# --- losses ----------------------------------------------------------------

def bce_loss(prob: Var, target) -> Var:
    """Mean binary cross-entropy; probabilities are clamped to [1e-7, 1-1e-7]."""
    t = as_tensor(target)
    p_raw = np.asarray(prob.value, dtype=np.float64)
    if p_raw.size == 0:
        raise ValueError("bce_loss on an empty batch")
    if t.shape != p_raw.shape:
        t = np.broadcast_to(t, p_raw.shape)
    p = np.clip(p_raw, PROB_EPS, 1.0 - PROB_EPS)
    n = p.size
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    inside = (p_raw >= PROB_EPS) & (p_raw <= 1.0 - PROB_EPS)

    def grad_fn(g):
        return (g * inside * (-(t / p) + (1.0 - t) / (1.0 - p)) / n,)

    return prob.tape.record(np.float64(loss), (prob,), grad_fn)


def bce_value(prob, target) -> float:
    """Plain-array BCE with the same clamping as :func:`bce_loss`."""
    p = np.clip(as_tensor(prob), PROB_EPS, 1.0 - PROB_EPS)
    t = np.broadcast_to(as_tensor(target), p.shape)
    if p.size == 0:
        raise ValueError("bce_value on an empty batch")
    return float(-np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p)))


def mse_loss(pred: Var, target) -> Var:
    diff = sub(pred, target)
    return mean(square(diff))


# --- layers ----------------------------------------------------------------

@dataclass(frozen=True)
class LstmLayerSpec:
    input_size: int
    hidden_size: int

    def __post_init__(self):
        if self.input_size < 1 or self.hidden_size < 1:
            raise ConfigurationError(f"LSTM sizes must be >= 1, got {self}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        h = self.hidden_size
        return {"w_ih": (4 * h, self.input_size), "w_hh": (4 * h, h), "b": (4 * h,)}


def init_lstm(params: ParamSet, prefix: str, spec: LstmLayerSpec, rng: np.random.Generator) -> None:
    """Uniform(-1/sqrt(hidden), 1/sqrt(hidden)) for every gate weight and bias."""
    bound = 1.0 / np.sqrt(spec.hidden_size)
    for name, shape in spec.param_shapes().items():
        params.add(f"{prefix}.{name}", rng.uniform(-bound, bound, size=shape))


def init_dense(params: ParamSet, prefix: str, in_features: int, out_features: int,
               rng: np.random.Generator) -> None:
    bound = 1.0 / np.sqrt(in_features)
    params.add(f"{prefix}.w", rng.uniform(-bound, bound, size=(out_features, in_features)))
    params.add(f"{prefix}.b", rng.uniform(-bound, bound, size=(out_features,)))


def _check_lstm(spec: LstmLayerSpec, w_ih, w_hh, b, x) -> None:
    shapes = spec.param_shapes()
    for name, arr in (("w_ih", w_ih), ("w_hh", w_hh), ("b", b)):
        if np.shape(arr) != shapes[name]:
            raise ConfigurationError(
                f"LSTM parameter {name} has shape {np.shape(arr)}, expected {shapes[name]}")
    if x.shape[-1] != spec.input_size:
        raise ConfigurationError(
            f"LSTM input width {x.shape[-1]} does not match input_size {spec.input_size}")
    if x.shape[-2] < 1:
        raise ConfigurationError("LSTM input needs at least one timestep")


def lstm_layer(spec: LstmLayerSpec, w_ih: Var, w_hh: Var, b: Var, x: Var,
               init_state: Optional[tuple] = None) -> Var:
    """Run a standard LSTM (no peepholes) over ``x``.

    ``x`` is ``(T, input)`` or ``(B, T, input)``; the result holds every
    hidden state with matching leading axes.  Without ``init_state`` the
    hidden and cell states start at zero.  Rows of the stacked weights are
    ordered input gate, forget gate, output gate, candidate.
    """
    tape = _tape_of(x, w_ih, w_hh, b)
    x = _lift(tape, x)
    xv = np.asarray(x.value, dtype=np.float64)
    _check_lstm(spec, w_ih.value, w_hh.value, b.value, xv)
    unbatched = xv.ndim == 2
    if unbatched:
        xv = xv[None]
    B, T, _ = xv.shape
    H = spec.hidden_size
    Wih, Whh = w_ih.value, w_hh.value
    if init_state is None:
        h0 = np.zeros((B, H))
        c0 = np.zeros((B, H))
    else:
        h0 = np.broadcast_to(as_tensor(init_state[0]), (B, H)).copy()
        c0 = np.broadcast_to(as_tensor(init_state[1]), (B, H)).copy()

    x_tm = np.ascontiguousarray(xv.transpose(1, 0, 2))  # time-major (T, B, I)
    # sigmoid(a) = (1 + tanh(a/2)) / 2, so halving the gate rows lets a
    # single vectorised tanh activate all four blocks at once
    scale = np.full(4 * H, 0.5)
    scale[3 * H:] = 1.0
    pre = x_tm @ (Wih * scale[:, None]).T
    pre += b.value * scale
    whh_t = np.ascontiguousarray((Whh * scale[:, None]).T)
    gates = np.empty((T, B, 4 * H))
    cells = np.empty((T, B, H))
    tanh_c = np.empty((T, B, H))
    hs = np.empty((T, B, H))
    h, c = h0, c0
    for t in range(T):
        gt = gates[t]
        np.matmul(h, whh_t, out=gt)
        gt += pre[t]
        np.tanh(gt, out=gt)
        lstm_cell_kernel(gt, c, cells[t])
        np.tanh(cells[t], out=tanh_c[t])
        np.multiply(gt[:, 2 * H:3 * H], tanh_c[t], out=hs[t])
        h, c = hs[t], cells[t]

    def grad_fn(dhs):
        dhs = np.asarray(dhs, dtype=np.float64)
        if unbatched:
            dhs = dhs[None]
        dhs_tm = np.ascontiguousarray(dhs.transpose(1, 0, 2))
        d_pre = lstm_backward_kernel(dhs_tm, gates, cells, tanh_c, c0,
                                     np.ascontiguousarray(Whh))
        flat = d_pre.reshape(T * B, 4 * H)
        d_wih = d_whh = d_b = None
        if w_ih.requires_grad:
            d_wih = flat.T @ x_tm.reshape(T * B, -1)
        if w_hh.requires_grad:
            h_prev = np.concatenate((h0[None], hs[:-1]), axis=0)
            d_whh = flat.T @ h_prev.reshape(T * B, H)
        if b.requires_grad:
            d_b = flat.sum(axis=0)
        dx = None
        if x.requires_grad:
            dx = (d_pre @ Wih).transpose(1, 0, 2)
            if unbatched:
                dx = dx[0]
        return (dx, d_wih, d_whh, d_b)

    out = hs.transpose(1, 0, 2)
    out = out[0].copy() if unbatched else np.ascontiguousarray(out)
    return tape.record(out, (x, w_ih, w_hh, b), grad_fn)


def dense_layer(w: Var, b: Var, x: Var) -> Var:
    """Affine map ``W @ x + b`` applied along the last axis of ``x``."""
    tape = _tape_of(x, w, b)
    x = _lift(tape, x)
    xv, wv = np.asarray(x.value, dtype=np.float64), w.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[1] or np.shape(b.value) != (wv.shape[0],):
        raise ConfigurationError(
            f"dense weight {wv.shape} / bias {np.shape(b.value)} incompatible with input {xv.shape}")
    out = xv @ wv.T + b.value

    def grad_fn(g):
        g2 = g.reshape(-1, wv.shape[0])
        return (g @ wv, g2.T @ xv.reshape(-1, wv.shape[1]), g2.sum(axis=0))

    return tape.record(out, (x, w, b), grad_fn)


def lstm_forward(spec: LstmLayerSpec, params: ParamSet, x, prefix: str = "lstm",
                 init_state=None) -> np.ndarray:
    """Array-in, array-out LSTM forward pass (no gradients kept)."""
    tape = Tape()
    out = lstm_layer(spec, *(tape.param(params, f"{prefix}.{n}", trainable=False)
                             for n in ("w_ih", "w_hh", "b")),
                     tape.constant(x), init_state=init_state)
    return out.value


def dense_forward(params: ParamSet, x, prefix: str = "dense") -> np.ndarray:
    tape = Tape()
    out = dense_layer(tape.param(params, f"{prefix}.w", trainable=False),
                      tape.param(params, f"{prefix}.b", trainable=False),
                      tape.constant(x))
    return out.value


def dropout(x: Var, rate: float, rng: Optional[np.random.Generator]) -> Var:
    """Inverted dropout; identity when ``rng`` is None or ``rate`` is 0."""
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(np.shape(x.value)) >= rate) / (1.0 - rate)
    return mul(x, mask)


# --- optimiser -------------------------------------------------------------

def sgd_step(params: ParamSet, learning_rate: float) -> ParamSet:
    """In-place ``p <- p - lr * grad`` for every entry, then zero the gradients."""
    if not learning_rate > 0:
        raise ValueError(f"learning rate must be positive, got {learning_rate}")
    for name, value in params.values.items():
        value -= learning_rate * params.grads[name]
    params.zero_grad()
    return params


class Sgd:
    """Stateful SGD; ``momentum=0`` is exactly :func:`sgd_step`."""

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        if not learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet) -> ParamSet:
        if self.momentum == 0.0:
            return sgd_step(params, self.learning_rate)
        for name, value in params.values.items():
            v = self._velocity.get(name)
            v = params.grads[name].copy() if v is None else self.momentum * v + params.grads[name]
            self._velocity[name] = v
            value -= self.learning_rate * v
        params.zero_grad()
        return params


class Adam:
    def __init__(self, learning_rate: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        if not learning_rate > 0:
            raise ValueError(f"learning rate must be positive, got {learning_rate}")
        self.learning_rate, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: ParamSet) -> ParamSet:
        self._t += 1
        b1, b2 = self.beta1, self.beta2
        for name, value in params.values.items():
            g = params.grads[name]
            m = self._m.get(name, np.zeros_like(g)) * b1 + (1 - b1) * g
            v = self._v.get(name, np.zeros_like(g)) * b2 + (1 - b2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1 - b1 ** self._t)
            v_hat = v / (1 - b2 ** self._t)
            value -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
        params.zero_grad()
        return params


def make_optimizer(kind: str, learning_rate: float, momentum: float = 0.0):
    kind = kind.lower()
    if kind == "sgd":
        return Sgd(learning_rate, momentum)
    if kind == "adam":
        return Adam(learning_rate)
    raise ValueError(f"unknown optimizer {kind!r} (sgd or adam)")


def params_equal(a: ParamSet, b: ParamSet) -> bool:
    return serialize_params(a) == serialize_params(b)
