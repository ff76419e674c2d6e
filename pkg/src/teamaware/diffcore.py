"""Deterministic differentiable-computation primitives in float64 numpy.

A minimal reverse-mode tape: every op accepts either `Var` (tracked) or plain
ndarray/scalar (constant) inputs and returns a `Var` only when at least one
input is tracked.  The same network code therefore serves both the training
path (gradients) and the inference path (raw arrays, no tape overhead).

Gradient correctness is not argued, it is checked: `finite_diff_check`
compares every analytic gradient against central finite differences, and the
test suite runs it over random shapes for each op.
"""

from __future__ import annotations

import json
import math
import zipfile
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .errors import ConfigurationError, ContractViolation, NumericError

Array = np.ndarray


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Var:
    """A node on the tape: a float64 array plus how to push gradients back."""

    __slots__ = ("value", "grad", "_parents", "_vjps")

    def __init__(self, value, parents=(), vjps=()):
        if not isinstance(value, np.ndarray):
            value = np.asarray(value, dtype=np.float64)
        elif value.dtype != np.float64:
            value = value.astype(np.float64)
        self.value = value
        self.grad = None
        self._parents = parents
        self._vjps = vjps

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def is_var(x) -> bool:
    return isinstance(x, Var)


def val(x) -> Array:
    """Raw ndarray behind `x`, whether tracked or not."""
    return x.value if isinstance(x, Var) else x


def _node(value, parent_vjps):
    """Build a Var from (parent, vjp) pairs, keeping only tracked parents."""
    parents = tuple(p for p, _ in parent_vjps if isinstance(p, Var))
    vjps = tuple(f for p, f in parent_vjps if isinstance(p, Var))
    return Var(value, parents, vjps)


def backward(root: Var, seed: Array | None = None) -> None:
    """Reverse pass from `root`, accumulating `.grad` on every reachable Var.

    `root` is usually a scalar loss; `seed` overrides the initial gradient.
    Iterative topological order, so deep recurrent unrolls are fine.
    """
    if not isinstance(root, Var):
        raise ContractViolation("backward() needs a tracked Var root")
    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    if seed is None:
        seed = np.ones_like(root.value)
    root.grad = np.asarray(seed, dtype=np.float64)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib


def _unbroadcast(g: Array, shape: tuple) -> Array:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitive ops (Var or ndarray in, Var out iff any input tracked)
# ---------------------------------------------------------------------------

def add(a, b):
    out = np.add(val(a), val(b))
    if not (is_var(a) or is_var(b)):
        return out
    sa, sb = np.shape(val(a)), np.shape(val(b))
    return _node(out, [(a, lambda g: _unbroadcast(g, sa)),
                       (b, lambda g: _unbroadcast(g, sb))])


def sub(a, b):
    out = np.subtract(val(a), val(b))
    if not (is_var(a) or is_var(b)):
        return out
    sa, sb = np.shape(val(a)), np.shape(val(b))
    return _node(out, [(a, lambda g: _unbroadcast(g, sa)),
                       (b, lambda g: _unbroadcast(-g, sb))])


def mul(a, b):
    av, bv = val(a), val(b)
    out = np.multiply(av, bv)
    if not (is_var(a) or is_var(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _node(out, [(a, lambda g: _unbroadcast(g * bv, sa)),
                       (b, lambda g: _unbroadcast(g * av, sb))])


def div(a, b):
    av, bv = val(a), val(b)
    out = np.divide(av, bv)
    if not (is_var(a) or is_var(b)):
        return out
    sa, sb = np.shape(av), np.shape(bv)
    return _node(out, [(a, lambda g: _unbroadcast(g / bv, sa)),
                       (b, lambda g: _unbroadcast(-g * av / (bv * bv), sb))])


def neg(a):
    out = -val(a)
    if not is_var(a):
        return out
    return _node(out, [(a, lambda g: -g)])


def matmul(a, b):
    """2-D or batched (stacked last-two-axes) matrix product."""
    av, bv = val(a), val(b)
    out = np.matmul(av, bv)
    if not (is_var(a) or is_var(b)):
        return out

    def grad_a(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        return _unbroadcast(ga, av.shape)

    def grad_b(g):
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(gb, bv.shape)

    return _node(out, [(a, grad_a), (b, grad_b)])


def vsum(a, axis=None, keepdims=False):
    av = val(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    if not is_var(a):
        return out

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, av.shape).copy()

    return _node(out, [(a, grad)])


def vmean(a, axis=None, keepdims=False):
    av = val(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(vsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def square(a):
    return mul(a, a)


def vexp(a):
    out = np.exp(val(a))
    if not is_var(a):
        return out
    return _node(out, [(a, lambda g: g * out)])


def vlog(a):
    av = val(a)
    out = np.log(av)
    if not is_var(a):
        return out
    return _node(out, [(a, lambda g: g / av)])


def vabs(a):
    av = val(a)
    out = np.abs(av)
    if not is_var(a):
        return out
    sgn = np.sign(av)
    return _node(out, [(a, lambda g: g * sgn)])


def concat(parts: Iterable, axis: int = -1):
    parts = list(parts)
    vals = [val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    if not any(is_var(p) for p in parts):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.cumsum([0] + sizes)
    pairs = []
    for p, start, stop in zip(parts, offsets[:-1], offsets[1:]):
        def grad(g, start=int(start), stop=int(stop)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, stop)
            return g[tuple(index)]
        pairs.append((p, grad))
    return _node(out, pairs)


def slice_last(a, start: int, stop: int):
    """Contiguous slice along the last axis."""
    av = val(a)
    out = av[..., start:stop]
    if not is_var(a):
        return out

    def grad(g):
        full = np.zeros_like(av)
        full[..., start:stop] = g
        return full

    return _node(out, [(a, grad)])


def reshape(a, shape):
    av = val(a)
    out = av.reshape(shape)
    if not is_var(a):
        return out
    orig = av.shape
    return _node(out, [(a, lambda g: g.reshape(orig))])


def take_rows(a, idx: Array):
    """Row gather on axis 0; gradient scatter-adds back."""
    av = val(a)
    out = av[idx]
    if not is_var(a):
        return out

    def grad(g):
        full = np.zeros_like(av)
        np.add.at(full, idx, g)
        return full

    return _node(out, [(a, grad)])


def gather_last(a, idx: Array):
    """Pick one entry per row along the last axis: out[..., 0] = a[..., idx]."""
    av = val(a)
    idx = np.asarray(idx)
    out = np.take_along_axis(av, idx[..., None], axis=-1)
    if not is_var(a):
        return out

    def grad(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, idx[..., None], g, axis=-1)
        return full

    return _node(out, [(a, grad)])


def max_last(a):
    """Max along the last axis; gradient routes to the first argmax."""
    av = val(a)
    arg = np.argmax(av, axis=-1)
    out = np.take_along_axis(av, arg[..., None], axis=-1)[..., 0]
    if not is_var(a):
        return out

    def grad(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, arg[..., None], g[..., None], axis=-1)
        return full

    return _node(out, [(a, grad)])


def stop_gradient(a):
    return val(a)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

LEAKY_SLOPE = 0.01


def logistic(a):
    out = _stable_sigmoid(val(a))
    if not is_var(a):
        return out
    return _node(out, [(a, lambda g: g * out * (1.0 - out))])


def _stable_sigmoid(x: Array) -> Array:
    # exp may overflow to inf for very negative x; 1/(1+inf) = 0 is the
    # correct limit, so just silence the spurious warning
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def vtanh(a):
    out = np.tanh(val(a))
    if not is_var(a):
        return out
    return _node(out, [(a, lambda g: g * (1.0 - out * out))])


def relu(a):
    av = val(a)
    out = np.maximum(av, 0.0)
    if not is_var(a):
        return out
    pos = (av > 0).astype(np.float64)
    return _node(out, [(a, lambda g: g * pos)])


def leaky_relu(a, slope: float = LEAKY_SLOPE):
    av = val(a)
    out = np.where(av > 0, av, slope * av)
    if not is_var(a):
        return out
    d = np.where(av > 0, 1.0, slope)
    return _node(out, [(a, lambda g: g * d)])


def elu(a, alpha: float = 1.0):
    av = val(a)
    neg_part = alpha * np.expm1(np.minimum(av, 0.0))
    out = np.where(av > 0, av, neg_part)
    if not is_var(a):
        return out
    d = np.where(av > 0, 1.0, neg_part + alpha)
    return _node(out, [(a, lambda g: g * d)])


def softplus(a):
    av = val(a)
    # log(1 + e^x) computed without overflow for large |x|
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    if not is_var(a):
        return out
    d = _stable_sigmoid(av)
    return _node(out, [(a, lambda g: g * d)])


_ACTIVATIONS: dict[str, Callable] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "elu": elu,
    "logistic": logistic,
    "tanh": vtanh,
    "softplus": softplus,
}


def activation(kind: str, x):
    """Element-wise nonlinearity by name; see `_ACTIVATIONS` for the set."""
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation kind: {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def dense_forward(x, w, b):
    """x @ w + b with x [N, in], w [in, out], b [out]."""
    xin = val(x).shape[-1]
    if xin != val(w).shape[0]:
        raise ConfigurationError(
            f"dense input width {xin} does not match weight rows {val(w).shape[0]}")
    return add(matmul(x, w), b)


def gru_step(x, h, cell: Mapping):
    """One gated-recurrent-unit step.

    Update gate interpolates toward the previous hidden state:
        z = logistic(x Wz + h Uz + bz)
        r = logistic(x Wr + h Ur + br)
        cand = tanh(x Wh + (r * h) Uh + bh)
        h' = (1 - z) * cand + z * h

    `cell` holds fused weights: W [in, 3H] and b [3H] in gate order (z, r, h),
    U_zr [H, 2H], U_h [H, H].
    """
    hidden = val(h).shape[-1]
    w = cell["W"]
    if val(x).shape[-1] != val(w).shape[0]:
        raise ConfigurationError(
            f"gru input width {val(x).shape[-1]} does not match W rows {val(w).shape[0]}")
    if val(w).shape[1] != 3 * hidden:
        raise ConfigurationError("gru W columns must be 3 * hidden size")
    pre = add(matmul(x, w), cell["b"])
    gates = logistic(add(slice_last(pre, 0, 2 * hidden), matmul(h, cell["U_zr"])))
    z = slice_last(gates, 0, hidden)
    r = slice_last(gates, hidden, 2 * hidden)
    cand = vtanh(add(slice_last(pre, 2 * hidden, 3 * hidden),
                     matmul(mul(r, h), cell["U_h"])))
    return add(mul(sub(1.0, z), cand), mul(z, h))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParameterSet:
    """Named float64 arrays with immutable shapes and a version counter."""

    def __init__(self):
        self._arrays: dict[str, Array] = {}
        self.version = 0

    def add(self, name: str, array: Array) -> None:
        if name in self._arrays:
            raise ConfigurationError(f"duplicate parameter name: {name}")
        arr = np.array(array, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"parameter {name} initialized with non-finite values")
        self._arrays[name] = arr

    def names(self) -> list[str]:
        return list(self._arrays.keys())

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __getitem__(self, name: str) -> Array:
        return self._arrays[name]

    def __len__(self) -> int:
        return len(self._arrays)

    def shape(self, name: str) -> tuple:
        return self._arrays[name].shape

    def set_(self, name: str, value: Array) -> None:
        """Overwrite one array in place; the shape is fixed at add() time."""
        cur = self._arrays[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != cur.shape:
            raise ConfigurationError(
                f"shape of {name} is immutable: {cur.shape} vs {value.shape}")
        cur[...] = value

    def as_vars(self) -> dict[str, Var]:
        """Fresh tape leaves wrapping the live arrays (one graph per call)."""
        return {name: Var(arr) for name, arr in self._arrays.items()}

    def raw(self) -> dict[str, Array]:
        return dict(self._arrays)

    def snapshot(self) -> "ParameterSet":
        """Deep copy; safe to share read-only across threads."""
        out = ParameterSet()
        for name, arr in self._arrays.items():
            out.add(name, arr.copy())
        out.version = self.version
        return out

    def copy_from(self, other: "ParameterSet") -> None:
        """Hard-copy all values from `other` (same names and shapes)."""
        if set(self._arrays) != set(other._arrays):
            raise ConfigurationError("parameter sets have different names")
        for name, arr in other._arrays.items():
            self.set_(name, arr)
        self.version = other.version

    def subset(self, prefixes: tuple[str, ...]) -> dict[str, Array]:
        """Raw views of every parameter whose name starts with one of `prefixes`."""
        return {n: a for n, a in self._arrays.items() if n.startswith(prefixes)}

    # -- checkpoint io ------------------------------------------------------

    def save(self, path) -> None:
        """Write an .npz checkpoint; float64 values round-trip bit-exactly."""
        payload = dict(self._arrays)
        payload["__meta__"] = np.frombuffer(
            json.dumps({"version": self.version, "names": self.names()}).encode(),
            dtype=np.uint8).copy()
        np.savez(path, **payload)

    @classmethod
    def load(cls, path) -> "ParameterSet":
        out = cls()
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            for name in meta["names"]:
                out.add(name, data[name])
            out.version = int(meta["version"])
        return out


@dataclass
class GradientTape:
    """Accumulated gradient per named parameter, aligned with a ParameterSet."""

    grads: dict[str, Array] = field(default_factory=dict)

    def accumulate(self, name: str, g: Array) -> None:
        if name in self.grads:
            self.grads[name] = self.grads[name] + g
        else:
            self.grads[name] = np.asarray(g, dtype=np.float64)

    def __getitem__(self, name: str) -> Array:
        return self.grads[name]

    def global_norm(self) -> float:
        total = 0.0
        for g in self.grads.values():
            total += float(np.sum(g * g))
        return math.sqrt(total)

    def clip_global_norm_(self, max_norm: float) -> float:
        """Scale all gradients by max_norm / norm when norm exceeds max_norm."""
        norm = self.global_norm()
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for name in self.grads:
                self.grads[name] = self.grads[name] * scale
        return norm

    def check_aligned(self, params: ParameterSet) -> None:
        for name, g in self.grads.items():
            if name not in params:
                raise ConfigurationError(f"gradient for unknown parameter {name}")
            if g.shape != params.shape(name):
                raise ConfigurationError(
                    f"gradient shape mismatch for {name}: {g.shape} vs {params.shape(name)}")


def collect_gradients(param_vars: Mapping[str, Var], params: ParameterSet) -> GradientTape:
    """Read `.grad` off the leaves after backward(); missing grads are zeros."""
    tape = GradientTape()
    for name, v in param_vars.items():
        g = v.grad if v.grad is not None else np.zeros_like(params[name])
        tape.accumulate(name, g)
    tape.check_aligned(params)
    return tape


# ---------------------------------------------------------------------------
# Optimizer (RMSProp-style adaptive rule)
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Per-parameter second-moment accumulators plus the update constants."""

    learning_rate: float = 5e-4
    decay: float = 0.99
    epsilon: float = 1e-5
    grad_norm_clip: float = 10.0
    second_moment: dict[str, Array] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParameterSet, learning_rate: float = 5e-4,
                   decay: float = 0.99, epsilon: float = 1e-5,
                   grad_norm_clip: float = 10.0) -> "OptimizerState":
        state = cls(learning_rate, decay, epsilon, grad_norm_clip)
        for name in params.names():
            state.second_moment[name] = np.zeros(params.shape(name))
        return state


def optimizer_step(params: ParameterSet, tape: GradientTape,
                   state: OptimizerState) -> float:
    """In-place adaptive update; returns the pre-clip global gradient norm.

    s <- decay * s + (1 - decay) * g^2
    p <- p - lr * g / (sqrt(s) + eps)

    Non-finite gradients abort the step before touching any parameter.
    """
    tape.check_aligned(params)
    for name, g in tape.grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    norm = tape.clip_global_norm_(state.grad_norm_clip)
    for name in params.names():
        g = tape.grads.get(name)
        if g is None:
            continue
        s = state.second_moment[name]
        s *= state.decay
        s += (1.0 - state.decay) * g * g
        update = state.learning_rate * g / (np.sqrt(s) + state.epsilon)
        params.set_(name, params[name] - update)
        if not np.all(np.isfinite(params[name])):
            raise NumericError(f"non-finite parameter {name} after update")
    params.version += 1
    return norm


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def init_dense(ps: ParameterSet, rng: np.random.Generator, prefix: str,
               fan_in: int, fan_out: int) -> None:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    bound = 1.0 / math.sqrt(fan_in)
    ps.add(prefix + ".W", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    ps.add(prefix + ".b", np.zeros(fan_out))


def init_gru(ps: ParameterSet, rng: np.random.Generator, prefix: str,
             fan_in: int, hidden: int) -> None:
    wb = 1.0 / math.sqrt(fan_in)
    ub = 1.0 / math.sqrt(hidden)
    ps.add(prefix + ".W", rng.uniform(-wb, wb, size=(fan_in, 3 * hidden)))
    ps.add(prefix + ".U_zr", rng.uniform(-ub, ub, size=(hidden, 2 * hidden)))
    ps.add(prefix + ".U_h", rng.uniform(-ub, ub, size=(hidden, hidden)))
    ps.add(prefix + ".b", np.zeros(3 * hidden))


def gru_cell_params(p: Mapping, prefix: str) -> dict:
    return {"W": p[prefix + ".W"], "U_zr": p[prefix + ".U_zr"],
            "U_h": p[prefix + ".U_h"], "b": p[prefix + ".b"]}


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Per-array worst relative error between analytic and numeric gradients."""

    per_array: dict[str, float]
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max(self.per_array.values()) if self.per_array else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def failures(self) -> list[str]:
        return [n for n, e in self.per_array.items() if not e < self.tolerance]


def finite_diff_check(f: Callable[[Mapping], object], params: ParameterSet,
                      tolerance: float = 1e-4, step: float = 1e-5,
                      max_coords_per_array: int | None = None,
                      rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare analytic gradients of scalar `f` against central differences.

    `f` must accept a mapping name -> Var (tape mode) or name -> ndarray
    (evaluation mode) and be deterministic given the parameters: any noise
    must be pinned outside.  Large arrays are spot-checked on
    `max_coords_per_array` random coordinates; small ones exhaustively.
    """
    param_vars = params.as_vars()
    loss = f(param_vars)
    if not isinstance(loss, Var) or val(loss).size != 1:
        raise ContractViolation("finite_diff_check needs f to return a scalar Var")
    backward(loss)
    analytic = {name: (v.grad if v.grad is not None else np.zeros_like(v.value))
                for name, v in param_vars.items()}

    raw = {name: params[name].copy() for name in params.names()}
    rng = rng or np.random.default_rng(0)
    per_array: dict[str, float] = {}
    for name in params.names():
        arr = raw[name]
        flat_n = arr.size
        if max_coords_per_array is not None and flat_n > max_coords_per_array:
            coords = rng.choice(flat_n, size=max_coords_per_array, replace=False)
        else:
            coords = np.arange(flat_n)
        worst = 0.0
        flat = arr.reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            f_plus = float(val(f(raw)))
            flat[c] = orig - step
            f_minus = float(val(f(raw)))
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[c])
            scale = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / scale)
        per_array[name] = worst
    return GradCheckReport(per_array, tolerance)
