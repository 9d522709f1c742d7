"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

A ``Tape`` records primitive ops in execution order; ``Tape.backward`` walks
the record once in reverse and accumulates gradients for every node.  Ops are
exposed as module-level functions (``exp``, ``matmul``, ``logsumexp``, ...)
that accept either a ``Tensor`` (tape-recorded) or a plain ``numpy`` array, so
the same formula can run under autodiff during training and as raw numpy
during evaluation.  Supported networks are fully-connected and gated
fully-connected stacks; convolutions are out of scope.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent for the requested op."""


class DomainError(ValueError):
    """Input outside an op's domain (e.g. log of a non-positive value)."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN or Inf."""


def _as_f64(value):
    arr = np.asarray(value, dtype=np.float64)
    return arr


def _check_finite(data, op_name):
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values produced by op '{op_name}'")


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Ordered record of primitive ops; inputs of every op precede it."""

    def __init__(self):
        self._parents = []
        self._backward = []
        self._opnames = []
        self._data = []

    def __len__(self):
        return len(self._data)

    def tensor(self, value):
        """Register a leaf (parameter or constant) and return its handle."""
        data = _as_f64(value)
        _check_finite(data, "leaf")
        return self._record(data, (), None, "leaf")

    def _record(self, data, parents, backward, opname):
        _check_finite(data, opname)
        idx = len(self._data)
        self._data.append(data)
        self._parents.append(parents)
        self._backward.append(backward)
        self._opnames.append(opname)
        return Tensor(data, self, idx)

    def backward(self, loss):
        """Gradient of a scalar `loss` node w.r.t. every node on the tape.

        Deterministic for a fixed tape: nodes are visited exactly once in
        reverse recording order.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss is not a node of this tape")
        if loss.data.shape != ():
            raise ShapeError(f"loss must be scalar, got shape {loss.data.shape}")
        grads = [None] * len(self._data)
        grads[loss.idx] = np.ones((), dtype=np.float64)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            if g is None or self._backward[idx] is None:
                continue
            for parent, contrib in zip(self._parents[idx], self._backward[idx](g)):
                if contrib is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = contrib.astype(np.float64, copy=True)
                else:
                    grads[parent] = grads[parent] + contrib
        return Gradients(self, grads)


class Gradients:
    """Result of a backward pass; addressed by the tensors it was run over."""

    def __init__(self, tape, grads):
        self._tape = tape
        self._grads = grads

    def wrt(self, tensor):
        if tensor is None:
            return None
        if tensor.tape is not self._tape:
            raise ValueError("tensor belongs to a different tape")
        g = self._grads[tensor.idx]
        if g is None:
            return np.zeros_like(tensor.data)
        return g


class Tensor:
    """Dense float64 value participating in a tape's computation graph."""

    __slots__ = ("data", "tape", "idx")

    # keep numpy from intercepting ndarray <op> Tensor expressions
    __array_ufunc__ = None

    def __init__(self, data, tape, idx):
        self.data = data
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.idx})"

    def _lift(self, other):
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ValueError("operands live on different tapes")
            return other
        return self.tape.tensor(other)

    def __add__(self, other):
        return add(self, self._lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, *shape)


def _is_tensor(*values):
    return any(isinstance(v, Tensor) for v in values)


def _tape_of(*values):
    for v in values:
        if isinstance(v, Tensor):
            return v.tape
    raise TypeError("no Tensor operand")


def _pair(a, b):
    tape = _tape_of(a, b)
    a = a if isinstance(a, Tensor) else tape.tensor(a)
    b = b if isinstance(b, Tensor) else tape.tensor(b)
    if a.tape is not b.tape:
        raise ValueError("operands live on different tapes")
    return tape, a, b


# --- binary elementwise ops (bias-style broadcasting supported) ---

def add(a, b):
    if not _is_tensor(a, b):
        return np.add(a, b)
    tape, a, b = _pair(a, b)
    out = a.data + b.data
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(g, bsh)

    return tape._record(out, (a.idx, b.idx), backward, "add")


def sub(a, b):
    if not _is_tensor(a, b):
        return np.subtract(a, b)
    tape, a, b = _pair(a, b)
    out = a.data - b.data
    ash, bsh = a.data.shape, b.data.shape

    def backward(g):
        return _unbroadcast(g, ash), _unbroadcast(-g, bsh)

    return tape._record(out, (a.idx, b.idx), backward, "sub")


def mul(a, b):
    if not _is_tensor(a, b):
        return np.multiply(a, b)
    tape, a, b = _pair(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return tape._record(out, (a.idx, b.idx), backward, "mul")


def div(a, b):
    if not _is_tensor(a, b):
        return np.divide(a, b)
    tape, a, b = _pair(a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape),
                _unbroadcast(-g * ad / (bd * bd), bd.shape))

    return tape._record(out, (a.idx, b.idx), backward, "div")


def matmul(a, b):
    if not _is_tensor(a, b):
        a, b = np.asarray(a), np.asarray(b)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
        return np.matmul(a, b)
    tape, a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    out = np.matmul(a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return np.matmul(g, bd.T), np.matmul(ad.T, g)

    return tape._record(out, (a.idx, b.idx), backward, "matmul")


# --- unary elementwise ops ---

def _unary(a, fwd, local_grad, opname):
    # overflow is reported as NonFiniteError by the tape, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        if not isinstance(a, Tensor):
            return fwd(np.asarray(a))
        out = fwd(a.data)
    ad = a.data

    def backward(g):
        return (g * local_grad(ad, out),)

    return a.tape._record(out, (a.idx,), backward, opname)


def neg(a):
    if not isinstance(a, Tensor):
        return np.negative(a)
    return _unary(a, np.negative, lambda x, y: -1.0, "neg")


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    if np.any(data <= 0.0):
        raise DomainError("log requires strictly positive input")
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def _sigmoid_fwd(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid(a):
    return _unary(a, _sigmoid_fwd, lambda x, y: y * (1.0 - y), "sigmoid")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0),
                  lambda x, y: (x > 0.0).astype(np.float64), "relu")


def softplus(a):
    """log(1 + exp(a)), overflow-safe."""
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid_fwd(x),
                  "softplus")


def power(a, p):
    p = float(p)
    return _unary(a, lambda x: np.power(x, p),
                  lambda x, y: p * np.power(x, p - 1.0), "power")


def clip(a, lo, hi):
    """Clamp to [lo, hi]; gradient passes through only inside the interval."""
    lo, hi = float(lo), float(hi)
    return _unary(a, lambda x: np.clip(x, lo, hi),
                  lambda x, y: ((x > lo) & (x < hi)).astype(np.float64), "clip")


def transpose(a):
    if not isinstance(a, Tensor):
        return np.asarray(a).T
    if a.ndim != 2:
        raise ShapeError("transpose supports 2-d tensors only")
    out = a.data.T

    def backward(g):
        return (g.T,)

    return a.tape._record(out, (a.idx,), backward, "transpose")


def reshape(a, *shape):
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    if not isinstance(a, Tensor):
        return np.reshape(a, shape)
    old = a.data.shape
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(old),)

    return a.tape._record(out, (a.idx,), backward, "reshape")


def repeat_rows(a, k):
    """Repeat each row of a 2-d tensor k times (row i -> rows i*k..i*k+k-1)."""
    if not isinstance(a, Tensor):
        return np.repeat(np.asarray(a), k, axis=0)
    if a.ndim != 2:
        raise ShapeError("repeat_rows supports 2-d tensors only")
    n, d = a.data.shape
    out = np.repeat(a.data, k, axis=0)

    def backward(g):
        return (g.reshape(n, k, d).sum(axis=1),)

    return a.tape._record(out, (a.idx,), backward, "repeat_rows")


def detach(a):
    """Re-enter a tensor's value as a constant, cutting gradient flow."""
    if not isinstance(a, Tensor):
        return np.asarray(a)
    return a.tape.tensor(a.data)


# --- reductions ---

def tensor_sum(a, axis=None):
    if not isinstance(a, Tensor):
        return np.sum(a, axis=axis)
    out = np.sum(a.data, axis=axis)
    shape = a.data.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return a.tape._record(out, (a.idx,), backward, "sum")


def tensor_mean(a, axis=None):
    if not isinstance(a, Tensor):
        return np.mean(a, axis=axis)
    shape = a.data.shape
    count = np.prod(shape) if axis is None else shape[axis]
    out = np.sum(a.data, axis=axis) / count

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape).copy(),)

    return a.tape._record(out, (a.idx,), backward, "mean")


def logsumexp(a, axis=None):
    """Max-shifted log-sum-exp along `axis` (stable for large magnitudes)."""
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    if data.size == 0 or (axis is not None and data.shape[axis] == 0):
        raise DomainError("logsumexp over an empty axis")
    m = np.max(data, axis=axis, keepdims=True)
    shifted = np.exp(data - m)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.squeeze(m + np.log(total), axis=axis) if axis is not None \
        else (m + np.log(total)).reshape(())
    if not isinstance(a, Tensor):
        return out
    softmax = shifted / total

    def backward(g):
        if axis is None:
            return (g * softmax,)
        return (np.expand_dims(g, axis) * softmax,)

    return a.tape._record(out, (a.idx,), backward, "logsumexp")


# --- fully-connected layers ---

ACTIVATIONS = {
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "identity": lambda x: x,
}


class DenseLayer:
    """Affine layer y = act(x @ W.T + b) with weight (out, in) and bias (out,)."""

    def __init__(self, weight, bias, activation="identity"):
        weight = _as_f64(weight)
        bias = _as_f64(bias)
        if weight.ndim != 2 or bias.ndim != 1 or weight.shape[0] != bias.shape[0]:
            raise ShapeError(
                f"inconsistent layer shapes: weight {weight.shape}, bias {bias.shape}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'")
        _check_finite(weight, "layer weight")
        _check_finite(bias, "layer bias")
        self.weight = weight
        self.bias = bias
        self.activation = activation

    @classmethod
    def create(cls, rng, n_in, n_out, activation="identity"):
        """Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero bias."""
        bound = math.sqrt(6.0 / (n_in + n_out))
        weight = rng.uniform(-bound, bound, size=(n_out, n_in))
        return cls(weight, np.zeros(n_out), activation)

    @property
    def n_in(self):
        return self.weight.shape[1]

    @property
    def n_out(self):
        return self.weight.shape[0]

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def set_parameters(self, arrays):
        self.weight, self.bias = arrays

    def apply(self, x, binding=None):
        xd = x.data if isinstance(x, Tensor) else np.asarray(x)
        if xd.shape[-1] != self.n_in:
            raise ShapeError(
                f"layer expects {self.n_in} inputs, got shape {xd.shape}")
        if binding is not None:
            w = binding.bind(self.weight)
            b = binding.bind(self.bias)
        elif isinstance(x, Tensor):
            w = x.tape.tensor(self.weight)
            b = x.tape.tensor(self.bias)
        else:
            w, b = self.weight, self.bias
        h = add(matmul(x, transpose(w)), b)
        return ACTIVATIONS[self.activation](h)


class GatedDenseLayer:
    """Pair of same-width dense layers multiplied elementwise.

    The gate half always applies a sigmoid, so the output is
    value(x) * sigmoid(gate_preactivation(x)).
    """

    def __init__(self, value, gate):
        if gate.activation != "sigmoid":
            raise ValueError("gate layer must use sigmoid activation")
        if value.n_out != gate.n_out or value.n_in != gate.n_in:
            raise ShapeError("value and gate layers must share shapes")
        self.value = value
        self.gate = gate

    @classmethod
    def create(cls, rng, n_in, n_out, activation="identity"):
        value = DenseLayer.create(rng, n_in, n_out, activation)
        gate = DenseLayer.create(rng, n_in, n_out, "sigmoid")
        return cls(value, gate)

    @property
    def n_in(self):
        return self.value.n_in

    @property
    def n_out(self):
        return self.value.n_out

    def parameters(self):
        return [("value.weight", self.value.weight), ("value.bias", self.value.bias),
                ("gate.weight", self.gate.weight), ("gate.bias", self.gate.bias)]

    def set_parameters(self, arrays):
        self.value.weight, self.value.bias, self.gate.weight, self.gate.bias = arrays

    def apply(self, x, binding=None):
        return mul(self.value.apply(x, binding), self.gate.apply(x, binding))


def mlp_apply(layers, x, binding=None):
    """Apply a stack of dense / gated dense layers in sequence."""
    h = x
    for layer in layers:
        h = layer.apply(h, binding)
    return h


class ParamBinding:
    """Maps parameter arrays to leaves of one tape, reusing each leaf.

    Backward gradients are then addressable per parameter array; parameters
    applied without a binding enter the tape as anonymous constants and
    receive no addressable gradient.
    """

    def __init__(self, tape):
        self.tape = tape
        self._leaves = {}

    def bind(self, array):
        key = id(array)
        leaf = self._leaves.get(key)
        if leaf is None:
            leaf = self.tape.tensor(array)
            self._leaves[key] = leaf
        return leaf

    def leaf_for(self, array):
        """The leaf a parameter array was bound to, or None if unbound."""
        return self._leaves.get(id(array))
