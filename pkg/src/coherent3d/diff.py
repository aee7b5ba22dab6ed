"""Reverse-mode automatic differentiation over scalars and dense numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Var` leaves in
creation order, which is already a topological order, so :func:`backward`
just walks the record in reverse.  All operations also accept plain numpy
arrays, in which case nothing is recorded and a numpy value is returned.

    tape = Tape()
    x = tape.var(3.0)
    y = x * x
    backward(y)[x]   # -> 6.0
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError


class Tape:
    def __init__(self):
        self.nodes: list[Var] = []
        self.leaves: list[Var] = []

    def var(self, value, name: str | None = None) -> "Var":
        v = Var(np.asarray(value) if np.ndim(value) else np.float64(value), self, (), name=name)
        self.leaves.append(v)
        return v

    def __len__(self):
        return len(self.nodes)


class Var:
    __slots__ = ("value", "tape", "parents", "id", "name")
    __array_priority__ = 1000

    def __init__(self, value, tape: Tape, parents, name=None):
        self.value = value
        self.tape = tape
        self.parents = parents  # tuple of (Var, vjp) pairs
        self.id = len(tape.nodes)
        self.name = name
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return add(self, neg(o))

    def __rsub__(self, o):
        return add(o, neg(self))

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return mul(self, reciprocal(o))

    def __rtruediv__(self, o):
        return mul(o, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise InvalidInputError("operands recorded on different tapes")
    return tape


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(value, args, vjps):
    """Record ``value`` computed from ``args``; ``vjps[i]`` maps out-grad to arg-i grad."""
    tape = _tape_of(*args)
    if tape is None:
        return value
    parents = tuple((a, f) for a, f in zip(args, vjps) if isinstance(a, Var))
    return Var(value, tape, parents)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _make(av + bv, (a, b), (lambda g: _unbroadcast(g, sa), lambda g: _unbroadcast(g, sb)))


def neg(a):
    return _make(-value_of(a), (a,), (lambda g: -g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    sa, sb = np.shape(av), np.shape(bv)
    return _make(av * bv, (a, b), (lambda g: _unbroadcast(g * bv, sa), lambda g: _unbroadcast(g * av, sb)))


def reciprocal(a):
    av = value_of(a)
    out = 1.0 / av
    return _make(out, (a,), (lambda g: -g * out * out,))


def power(a, p: float):
    av = value_of(a)
    return _make(av ** p, (a,), (lambda g: g * p * av ** (p - 1),))


def square(a):
    av = value_of(a)
    return _make(av * av, (a,), (lambda g: 2.0 * g * av,))


def exp(a):
    out = np.exp(value_of(a))
    return _make(out, (a,), (lambda g: g * out,))


def log(a):
    av = value_of(a)
    return _make(np.log(av), (a,), (lambda g: g / av,))


def sqrt(a):
    out = np.sqrt(value_of(a))
    return _make(out, (a,), (lambda g: g * 0.5 / out,))


def tanh(a):
    out = np.tanh(value_of(a))
    return _make(out, (a,), (lambda g: g * (1.0 - out * out),))


def sigmoid(a):
    av = value_of(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * av))
    return _make(out, (a,), (lambda g: g * out * (1.0 - out),))


def softplus(a):
    """``log(1 + exp(a))``, overflow-safe."""
    av = value_of(a)
    out = np.logaddexp(0.0, av)
    return _make(out, (a,), (lambda g: g * 0.5 * (1.0 + np.tanh(0.5 * av)),))


def relu(a):
    av = value_of(a)
    return _make(np.maximum(av, 0.0), (a,), (lambda g: g * (av > 0),))


def absolute(a):
    av = value_of(a)
    return _make(np.abs(av), (a,), (lambda g: g * np.sign(av),))


def clip(a, lo, hi):
    """Hard clamp; the gradient is zero where the clamp is active."""
    av = value_of(a)
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), (lambda g: g * inside,))


def sin(a):
    av = value_of(a)
    return _make(np.sin(av), (a,), (lambda g: g * np.cos(av),))


def cos(a):
    av = value_of(a)
    return _make(np.cos(av), (a,), (lambda g: -g * np.sin(av),))


# ---------------------------------------------------------------- reductions / shape

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    shape = np.shape(av)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(np.sum(av, axis=axis, keepdims=keepdims), (a,), (vjp,))


def mean(a, axis=None, keepdims=False):
    n = np.size(value_of(a)) if axis is None else np.prod([np.shape(value_of(a))[ax] for ax in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def norm(a, axis=-1):
    """Euclidean norm along ``axis``."""
    av = value_of(a)
    out = np.sqrt(np.sum(av * av, axis=axis))

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return np.expand_dims(g / safe, axis) * av

    return _make(out, (a,), (vjp,))


def astype(a, dtype):
    """Cast values (e.g. to float32 for speed); gradients are cast back."""
    av = value_of(a)
    src = np.asarray(av).dtype
    return _make(np.asarray(av).astype(dtype), (a,), (lambda g: np.asarray(g).astype(src),))


def reshape(a, shape):
    av = value_of(a)
    old = np.shape(av)
    return _make(np.reshape(av, shape), (a,), (lambda g: np.reshape(g, old),))


def transpose(a):
    return _make(np.transpose(value_of(a)), (a,), (lambda g: np.transpose(g),))


def getitem(a, key):
    av = value_of(a)
    shape, dtype = np.shape(av), np.result_type(av)

    def vjp(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out, key, g)
        return out

    return _make(av[key], (a,), (vjp,))


def concat(xs, axis=-1):
    vals = [value_of(x) for x in xs]
    sizes = np.cumsum([np.shape(v)[axis] for v in vals])[:-1]

    def piece(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _make(np.concatenate(vals, axis=axis), tuple(xs), tuple(piece(i) for i in range(len(xs))))


def stack(xs, axis=0):
    vals = [value_of(x) for x in xs]

    def piece(i):
        return lambda g: np.take(g, i, axis=axis)

    return _make(np.stack(vals, axis=axis), tuple(xs), tuple(piece(i) for i in range(len(xs))))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)

    def ga(g):
        if np.ndim(bv) == 1:
            return np.multiply.outer(g, bv) if np.ndim(av) == 2 else g * bv
        return g @ np.swapaxes(bv, -1, -2)

    def gb(g):
        if np.ndim(av) == 1:
            return np.multiply.outer(av, g) if np.ndim(bv) == 2 else g * av
        if np.ndim(bv) == 1:
            return np.swapaxes(av, -1, -2) @ g
        return np.swapaxes(av, -1, -2) @ g

    return _make(av @ bv, (a, b), (ga, gb))


# ---------------------------------------------------------------- sampling / sparse

def gather_weighted(values, idx, w):
    """``out[n] = sum_k values.flat[idx[n, k]] * w[n, k]`` (trilinear / bilinear sampling)."""
    vv = value_of(values)
    shape = np.shape(vv)
    size = int(np.prod(shape))
    flat = np.ravel(vv)
    out = np.sum(flat[idx] * w, axis=-1)

    def vjp(g):
        contrib = (np.asarray(g)[..., None] * w).ravel()
        return np.bincount(idx.ravel(), weights=contrib, minlength=size).reshape(shape)

    return _make(out, (values,), (vjp,))


def trilinear_sample(values, lattice, points, mode="clamp"):
    from .core import trilinear_weights

    idx, w = trilinear_weights(lattice, points, mode)
    return gather_weighted(values, idx, w)


def bilinear_sample(image, u, v, mode="clamp"):
    from .core import bilinear_weights

    h, wd = np.shape(value_of(image))[:2]
    idx, w = bilinear_weights(h, wd, u, v, mode)
    return gather_weighted(image, idx, w)


def sparse_matmul(W, x):
    """``W @ x`` for a constant scipy sparse matrix ``W`` and a vector ``x``."""
    xv = value_of(x)
    shape = np.shape(xv)
    return _make(W @ np.ravel(xv), (x,), (lambda g: (W.T @ g).reshape(shape),))


def segment_logmeanexp(x, offsets, tau: float):
    """Smooth maximum ``tau * log(mean(exp(x / tau)))`` over contiguous segments.

    ``offsets`` has length ``n_segments + 1``; segment ``s`` is
    ``x[offsets[s]:offsets[s + 1]]``.  Empty segments evaluate to 0.
    """
    xv = np.asarray(value_of(x), dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offsets)
    n = len(counts)
    out = np.zeros(n)
    nonempty = counts > 0
    if xv.size == 0:
        return _make(out, (x,), (lambda g: np.zeros_like(xv),))
    starts = offsets[:-1][nonempty]
    seg_of = np.repeat(np.arange(n), counts)
    m = np.zeros(n)
    m[nonempty] = np.maximum.reduceat(xv, starts)
    e = np.exp((xv - m[seg_of]) / tau)
    s = np.zeros(n)
    s[nonempty] = np.add.reduceat(e, starts)
    out[nonempty] = m[nonempty] + tau * np.log(s[nonempty] / counts[nonempty])
    soft = e / np.where(s > 0, s, 1.0)[seg_of]

    return _make(out, (x,), (lambda g: np.asarray(g)[seg_of] * soft,))


def smooth_max(x, tau: float, axis=-1):
    """Log-mean-exp smooth maximum along ``axis``; bounded by ``[max - tau log n, max]``."""
    xv = value_of(x)
    n = np.shape(xv)[axis]
    m = np.max(xv, axis=axis, keepdims=True)
    e = np.exp((xv - m) / tau)
    s = np.sum(e, axis=axis, keepdims=True)
    out = np.squeeze(m + tau * np.log(s / n), axis=axis)
    soft = e / s
    return _make(out, (x,), (lambda g: np.expand_dims(g, axis) * soft,))


# ---------------------------------------------------------------- rotations

def rodrigues(w):
    """Axis-angle 3-vector to rotation matrix, differentiable everywhere."""
    from .core import axis_angle_to_matrix, skew

    wv = np.asarray(value_of(w), dtype=np.float64)
    R = axis_angle_to_matrix(wv)
    theta2 = float(wv @ wv)

    def vjp(g):
        out = np.empty(3)
        I = np.eye(3)
        for i in range(3):
            if theta2 < 1e-16:
                dR = skew(I[i])
            else:
                dR = (wv[i] * skew(wv) + skew(np.cross(wv, (I - R) @ I[i]))) @ R / theta2
            out[i] = np.sum(g * dR)
        return out

    return _make(R, (w,), (vjp,))


# ---------------------------------------------------------------- backward

class Gradients:
    """Mapping from leaf :class:`Var` to gradient; unused leaves map to zeros."""

    def __init__(self, grads: dict, tape: Tape):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, v: Var):
        if v.tape is not self._tape:
            raise InvalidInputError("variable belongs to another tape")
        g = self._grads.get(v.id)
        if g is None:
            return np.zeros_like(np.asarray(v.value, dtype=np.float64))
        return g

    def __contains__(self, v):
        return isinstance(v, Var) and v.tape is self._tape


def backward(root: Var) -> Gradients:
    if not isinstance(root, Var):
        raise InvalidInputError("root must be a recorded Var")
    if np.size(root.value) != 1:
        raise InvalidInputError(f"backward needs a scalar root, got shape {root.shape}")
    tape = root.tape
    grads = {root.id: np.ones_like(np.asarray(root.value, dtype=np.float64))}
    for node in reversed(tape.nodes[: root.id + 1]):
        g = grads.get(node.id)
        if g is None or not node.parents:
            continue
        for parent, vjp in node.parents:
            pg = vjp(g)
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = np.asarray(pg, dtype=np.float64)
        if node.parents:
            del grads[node.id]
    leaf_ids = {v.id for v in tape.leaves}
    return Gradients({k: v for k, v in grads.items() if k in leaf_ids}, tape)


def value_and_grad(f, theta):
    """Evaluate scalar ``f(Var)`` at ``theta`` and return ``(value, gradient)``."""
    tape = Tape()
    x = tape.var(np.array(theta, dtype=np.float64))
    y = f(x)
    if not isinstance(y, Var):
        return float(y), np.zeros_like(x.value)
    return float(y.value), backward(y)[x]


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray
    rel_errors: np.ndarray
    nondifferentiable: list = field(default_factory=list)
    nonfinite: list = field(default_factory=list)

    def summary(self) -> str:
        s = f"max rel err {self.max_rel_error:.3e} (tol {self.tol:.0e}) -> {'PASS' if self.passed else 'FAIL'}"
        if self.nondifferentiable:
            s += f"; excluded non-differentiable coords {self.nondifferentiable}"
        if self.nonfinite:
            s += f"; non-finite at coords {self.nonfinite}"
        return s


def grad_check(f, theta, h: float = 1e-5, tol: float = 1e-4, atol: float = 1e-6,
               kink_rtol: float = 1e-2) -> GradCheckReport:
    """Compare reverse-mode gradient of scalar ``f`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, atol)``.  A
    coordinate whose one-sided differences disagree by more than
    ``kink_rtol`` (relative) sits on a kink; it is reported and excluded.
    """
    theta = np.array(theta, dtype=np.float64)
    f0, ga = value_and_grad(f, theta)
    ga = np.ravel(ga)

    def fval(t):
        tape = Tape()
        return float(value_of(f(tape.var(t))))

    flat = theta.ravel()
    num = np.zeros_like(flat)
    rel = np.zeros_like(flat)
    kinks, bad = [], []
    for i in range(flat.size):
        tp, tm = flat.copy(), flat.copy()
        tp[i] += h
        tm[i] -= h
        fp, fm = fval(tp.reshape(theta.shape)), fval(tm.reshape(theta.shape))
        if not (np.isfinite(fp) and np.isfinite(fm) and np.isfinite(f0)):
            bad.append(i)
            continue
        num[i] = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > kink_rtol * max(abs(fwd), abs(bwd), atol):
            kinks.append(i)
            continue
        rel[i] = abs(ga[i] - num[i]) / max(abs(ga[i]), abs(num[i]), atol)
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, max_rel < tol and not bad, tol, ga, num, rel, kinks, bad)


# ---------------------------------------------------------------- optimizers / MLPs

class Adam:
    """Adam with optional exponential step decay; state lives on the instance."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, decay=1.0):
        self.lr, self.beta1, self.beta2, self.eps, self.decay = lr, beta1, beta2, eps, decay
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        lr = self.lr * self.decay ** (self.t - 1)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)


def mlp_param_shapes(sizes):
    return [((a, b), (b,)) for a, b in zip(sizes[:-1], sizes[1:])]


def mlp_num_params(sizes) -> int:
    return int(np.sum([a * b + b for a, b in zip(sizes[:-1], sizes[1:])]))


def mlp_init(sizes, rng: np.random.Generator) -> np.ndarray:
    """Glorot-uniform weights, zero biases, packed into one flat vector."""
    chunks = []
    for (a, b), _ in mlp_param_shapes(sizes):
        lim = np.sqrt(6.0 / (a + b))
        chunks.append(rng.uniform(-lim, lim, size=a * b))
        chunks.append(np.zeros(b))
    return np.concatenate(chunks)


def mlp_apply(params, x, sizes, activation=tanh):
    """Per-point MLP with logits output; ``params`` is the flat vector (Var or array)."""
    h = x
    off = 0
    n_layers = len(sizes) - 1
    for li, ((a, b), _) in enumerate(mlp_param_shapes(sizes)):
        W = reshape(params[off: off + a * b], (a, b))
        off += a * b
        bias = params[off: off + b]
        off += b
        h = matmul(h, W) + bias
        if li < n_layers - 1:
            h = activation(h)
    return h
