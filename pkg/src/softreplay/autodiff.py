"""Reverse-mode differentiation over dense float64 arrays.

Graphs are recorded define-by-run: every op returns a :class:`Tensor` that
remembers its parents, a reverse rule (vjp) and a forward rule (jvp).  The
forward rule powers :func:`jvp`, a directional derivative used to contract
second-order mixed partials without general double backprop, which is exact
for losses whose parameter gradient is linear in the targets (softmax cross
entropy).

Every op validates that its result is finite; NaN/Inf raises
:class:`NonFiniteError` instead of propagating silently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import kernels
from .errors import GradError, NonFiniteError, ShapeError, TargetError

Array = np.ndarray

TARGET_ROW_TOL = 1e-9


def _as_f64(data) -> Array:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    return arr


class Tensor:
    """A dense float64 value plus the records needed to differentiate it."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_vjp", "_jvp")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), vjp: Callable | None = None,
                 jvp_rule: Callable | None = None):
        arr = _as_f64(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        self.data = arr
        self.grad: Array | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self.op = op
        self._parents = parents
        self._vjp = vjp
        self._jvp = jvp_rule

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape})"

    # small operator sugar, mostly for tests
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def backward(self, seed=None) -> None:
        """Reverse pass from this node; accumulates into ``.grad`` of every
        reachable tensor with ``requires_grad``.  Grads of the reachable
        subgraph are reset first, so repeated calls do not double-count."""
        if seed is None:
            if self.data.size != 1:
                raise GradError("seed gradient required for non-scalar output")
            seed = np.ones_like(self.data)
        seed = _as_f64(seed)
        if seed.shape != self.data.shape:
            raise ShapeError(f"seed shape {seed.shape} != output shape {self.data.shape}")
        order = _topo(self)
        for node in order:
            node.grad = None
        self.grad = seed.copy()
        for node in reversed(order):
            if node.grad is None or node._vjp is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False, op="const")


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


def _topo(root: Tensor) -> list[Tensor]:
    """Topological order, parents before children; each node visited once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            stack.append((p, False))
    return order


def jvp(root: Tensor, tangents: Mapping[Tensor, Array]) -> Array:
    """Directional derivative of ``root`` along tangent seeds on its leaves.

    ``tangents`` maps leaf tensors to arrays of the same shape; leaves not
    listed carry a zero tangent.  Returns the tangent of ``root``.
    """
    tan: dict[int, Array] = {}
    for t, v in tangents.items():
        v = _as_f64(v)
        if v.shape != t.data.shape:
            raise ShapeError(f"tangent shape {v.shape} != leaf shape {t.data.shape}")
        tan[id(t)] = v
    for node in _topo(root):
        if id(node) in tan or not node._parents:
            continue
        parent_tans = [tan.get(id(p)) for p in node._parents]
        if all(pt is None for pt in parent_tans):
            continue
        if node._jvp is None:
            raise GradError(f"no forward-mode rule for op '{node.op}'")
        tan[id(node)] = node._jvp(parent_tans)
    out = tan.get(id(root))
    return np.zeros_like(root.data) if out is None else out


def depends_on(node: Tensor, target: Tensor) -> bool:
    """True when ``target`` appears anywhere in ``node``'s ancestry."""
    return any(n is target for n in _topo(node))


# ------------------------------------------------------------------------ ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def vjp_fn(g):
        return g @ bd.T, ad.T @ g

    def jvp_fn(tans):
        da, db = tans
        out = np.zeros((ad.shape[0], bd.shape[1]))
        if da is not None:
            out += da @ bd
        if db is not None:
            out += ad @ db
        return out

    return Tensor(ad @ bd, parents=(a, b), vjp=vjp_fn, jvp_rule=jvp_fn, op="matmul")


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with b broadcast over rows; the fused MLP layer kernel."""
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    if x.data.shape[1] != w.data.shape[0] or b.data.shape != (w.data.shape[1],):
        raise ShapeError(
            f"affine shapes x{x.data.shape} w{w.data.shape} b{b.data.shape}")
    xd, wd = x.data, w.data

    def vjp_fn(g):
        return kernels.affine_bwd(xd, wd, g)

    def jvp_fn(tans):
        dx, dw, db = tans
        out = np.zeros((xd.shape[0], wd.shape[1]))
        if dx is not None:
            out += dx @ wd
        if dw is not None:
            out += xd @ dw
        if db is not None:
            out += db
        return out

    data = kernels.affine_fwd(xd, wd, b.data)
    return Tensor(data, parents=(x, w, b), vjp=vjp_fn, jvp_rule=jvp_fn, op="affine")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    bias_like = a.data.ndim == 2 and b.data.shape == (a.data.shape[1],)
    if not bias_like and a.data.shape != b.data.shape:
        raise ShapeError(f"add shapes {a.data.shape} + {b.data.shape}")

    def vjp_fn(g):
        return g, (g.sum(axis=0) if bias_like else g)

    def jvp_fn(tans):
        da, db = tans
        out = np.zeros_like(a.data)
        if da is not None:
            out = out + da
        if db is not None:
            out = out + db
        return out

    return Tensor(a.data + b.data, parents=(a, b), vjp=vjp_fn, jvp_rule=jvp_fn, op="add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"sub shapes {a.data.shape} - {b.data.shape}")

    def vjp_fn(g):
        return g, -g

    def jvp_fn(tans):
        da, db = tans
        out = np.zeros_like(a.data)
        if da is not None:
            out = out + da
        if db is not None:
            out = out - db
        return out

    return Tensor(a.data - b.data, parents=(a, b), vjp=vjp_fn, jvp_rule=jvp_fn, op="sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes {a.data.shape} * {b.data.shape}")
    ad, bd = a.data, b.data

    def vjp_fn(g):
        return g * bd, g * ad

    def jvp_fn(tans):
        da, db = tans
        out = np.zeros_like(ad)
        if da is not None:
            out = out + da * bd
        if db is not None:
            out = out + ad * db
        return out

    return Tensor(ad * bd, parents=(a, b), vjp=vjp_fn, jvp_rule=jvp_fn, op="mul")


def scale(a: Tensor, s: float) -> Tensor:
    a = _wrap(a)
    s = float(s)

    def vjp_fn(g):
        return (g * s,)

    def jvp_fn(tans):
        (da,) = tans
        return np.zeros_like(a.data) if da is None else da * s

    return Tensor(a.data * s, parents=(a,), vjp=vjp_fn, jvp_rule=jvp_fn, op="scale")


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    xd = x.data

    def vjp_fn(g):
        return (kernels.relu_bwd(xd, g),)

    def jvp_fn(tans):
        (dx,) = tans
        return np.zeros_like(xd) if dx is None else kernels.relu_bwd(xd, dx)

    return Tensor(kernels.relu_fwd(xd), parents=(x,), vjp=vjp_fn, jvp_rule=jvp_fn, op="relu")


def mean(x: Tensor) -> Tensor:
    x = _wrap(x)
    n = x.data.size

    def vjp_fn(g):
        return (np.full_like(x.data, float(g) / n),)

    def jvp_fn(tans):
        (dx,) = tans
        return np.zeros(()) if dx is None else np.asarray(dx.mean())

    return Tensor(x.data.mean(), parents=(x,), vjp=vjp_fn, jvp_rule=jvp_fn, op="mean")


def mask_fill(x: Tensor, mask: Array, value: float) -> Tensor:
    """Overwrite masked entries with a constant; their gradient becomes zero."""
    x = _wrap(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.data.shape)

    def vjp_fn(g):
        return (np.where(mask, 0.0, g),)

    def jvp_fn(tans):
        (dx,) = tans
        return np.zeros_like(x.data) if dx is None else np.where(mask, 0.0, dx)

    data = np.where(mask, float(value), x.data)
    return Tensor(data, parents=(x,), vjp=vjp_fn, jvp_rule=jvp_fn, op="mask_fill")


def softmax_rows(z: Tensor) -> Tensor:
    z = _wrap(z)
    if z.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects 2-d logits, got {z.data.shape}")
    p = kernels.softmax_rows(z.data)

    def vjp_fn(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    def jvp_fn(tans):
        (dz,) = tans
        if dz is None:
            return np.zeros_like(p)
        return p * (dz - (p * dz).sum(axis=1, keepdims=True))

    return Tensor(p, parents=(z,), vjp=vjp_fn, jvp_rule=jvp_fn, op="softmax_rows")


def check_target_rows(t: Array) -> None:
    """Every target row must be a distribution: nonnegative, sums to one."""
    if t.ndim != 2:
        raise TargetError(f"targets must be 2-d, got shape {t.shape}")
    if np.any(t < 0.0):
        bad = int(np.argwhere(t < 0.0)[0][0])
        raise TargetError(f"target row {bad} has a negative entry")
    sums = t.sum(axis=1)
    off = np.abs(sums - 1.0)
    if np.any(off > TARGET_ROW_TOL):
        bad = int(np.argmax(off))
        raise TargetError(f"target row {bad} sums to {sums[bad]!r}, not 1")


def softmax_cross_entropy(logits: Tensor, targets, validate: bool = True) -> Tensor:
    """Mean over rows of -sum(target * log softmax(logits)).

    The logits gradient is the closed form (softmax(logits) - target) / B.
    Targets are held constant: parameter gradients of this loss are linear in
    the target rows, which is what the mixed-partial contraction relies on.
    ``validate=False`` skips the distribution check on target rows; finite
    difference oracles need it to probe off-simplex targets.
    """
    logits = _wrap(logits)
    targets = _wrap(targets)
    if targets.requires_grad:
        raise GradError("softmax_cross_entropy treats targets as constants")
    if logits.data.shape != targets.data.shape:
        raise ShapeError(
            f"logits shape {logits.data.shape} != targets shape {targets.data.shape}")
    if validate:
        check_target_rows(targets.data)
    batch = logits.data.shape[0]
    loss, p = kernels.softmax_xent(logits.data, targets.data)
    td = targets.data

    def vjp_fn(g):
        return (float(g) * (p - td) / batch, None)

    def jvp_fn(tans):
        dz, dt = tans
        if dt is not None:
            raise GradError("softmax_cross_entropy has no target tangent rule")
        if dz is None:
            return np.zeros(())
        return np.asarray(((p - td) * dz).sum() / batch)

    return Tensor(loss, parents=(logits, targets), vjp=vjp_fn, jvp_rule=jvp_fn,
                  op="softmax_xent")


def mse(a: Tensor, target) -> Tensor:
    """Mean squared error against a constant target, over all entries."""
    a = _wrap(a)
    t = _as_f64(target)
    if a.data.shape != t.shape:
        raise ShapeError(f"mse shapes {a.data.shape} vs {t.shape}")
    diff = a.data - t
    n = diff.size

    def vjp_fn(g):
        return (float(g) * 2.0 * diff / n,)

    def jvp_fn(tans):
        (da,) = tans
        return np.zeros(()) if da is None else np.asarray((2.0 * diff * da).sum() / n)

    return Tensor((diff * diff).sum() / n, parents=(a,), vjp=vjp_fn, jvp_rule=jvp_fn,
                  op="mse")


def ema_anchor(live: Tensor, old: Array, beta: float, onehot: Array) -> Tensor:
    """((1-beta)*live + beta*old + onehot) / 2 with old and onehot constant.

    Gradient flows only through ``live`` with the constant factor (1-beta)/2,
    so beta=1 yields an exactly zero gradient path.
    """
    live = _wrap(live)
    old = _as_f64(old)
    onehot = _as_f64(onehot)
    if live.data.shape != old.shape or live.data.shape != onehot.shape:
        raise ShapeError("ema_anchor operand shapes differ")
    beta = float(beta)
    if not 0.0 <= beta <= 1.0:
        raise ShapeError(f"beta must lie in [0, 1], got {beta}")
    factor = (1.0 - beta) / 2.0

    def vjp_fn(g):
        return (g * factor,)

    def jvp_fn(tans):
        (dl,) = tans
        return np.zeros_like(live.data) if dl is None else dl * factor

    data = kernels.ema_anchor(live.data, old, beta, onehot)
    return Tensor(data, parents=(live,), vjp=vjp_fn, jvp_rule=jvp_fn, op="ema_anchor")


# ------------------------------------------------------------- parameter sets

class ParameterSet:
    """Named, disjoint segments over one flat float64 vector.

    The flat layout keeps gradient inner products and axpy updates trivial;
    ``leaves`` exposes the segments as differentiable tensors for one graph
    construction, and ``gather_grad`` reassembles their gradients (zeros for
    segments the graph never touched).
    """

    def __init__(self, names: Sequence[str], offsets: Sequence[int],
                 shapes: Sequence[tuple], values: Array):
        self.names = list(names)
        self.offsets = list(offsets)
        self.shapes = [tuple(s) for s in shapes]
        self.values = _as_f64(values)

    @classmethod
    def build(cls, named_arrays: Iterable[tuple[str, Array]]) -> "ParameterSet":
        names, offsets, shapes, chunks = [], [], [], []
        offset = 0
        for name, arr in named_arrays:
            arr = _as_f64(arr)
            names.append(name)
            offsets.append(offset)
            shapes.append(arr.shape)
            chunks.append(arr.ravel())
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(names, offsets, shapes, values)

    @property
    def total_len(self) -> int:
        return self.values.size

    def view(self, name: str) -> Array:
        i = self.names.index(name)
        off, shape = self.offsets[i], self.shapes[i]
        size = int(np.prod(shape)) if shape else 1
        return self.values[off:off + size].reshape(shape)

    def unflatten(self, vec: Array) -> dict[str, Array]:
        vec = _as_f64(vec)
        if vec.shape != (self.total_len,):
            raise ShapeError(f"expected flat vector of length {self.total_len}")
        out = {}
        for name, off, shape in zip(self.names, self.offsets, self.shapes):
            size = int(np.prod(shape)) if shape else 1
            out[name] = vec[off:off + size].reshape(shape)
        return out

    def leaves(self, values: Array | None = None) -> dict[str, Tensor]:
        """Fresh differentiable leaf tensors viewing ``values`` (default: own)."""
        vec = self.values if values is None else _as_f64(values)
        segs = self.unflatten(vec)
        return {name: Tensor(arr, requires_grad=True, op=f"param:{name}")
                for name, arr in segs.items()}

    def gather_grad(self, leaves: Mapping[str, Tensor]) -> Array:
        out = np.zeros(self.total_len)
        for name, off, shape in zip(self.names, self.offsets, self.shapes):
            leaf = leaves[name]
            if leaf.grad is not None:
                size = int(np.prod(shape)) if shape else 1
                out[off:off + size] = leaf.grad.ravel()
        return out

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.names, self.offsets, self.shapes, self.values.copy())


# ------------------------------------------------------- validation oracles

def finite_diff_grad(f: Callable[[Array], float], point: Array,
                     eps: float = 1e-5) -> Array:
    """Central-difference gradient estimate, entry by entry."""
    if eps <= 0:
        raise GradError("finite difference step must be positive")
    point = _as_f64(point)
    grad = np.zeros_like(point)
    flat = point.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(point))
        flat[i] = orig - eps
        lo = float(f(point))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteError(f"non-finite function value at entry {i}")
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def mixed_partial_vjp(logits: Tensor, targets: Tensor | Array,
                      theta: ParameterSet, theta_leaves: Mapping[str, Tensor],
                      theta_vector: Array, coeff: float = 1.0) -> Array:
    """d/d(targets) of <grad_theta loss, theta_vector> for a soft-target term
    ``coeff * softmax_cross_entropy(logits, targets)``.

    The theta gradient of softmax CE is linear in each target row with factor
    -(coeff/B) * dz/dtheta, so the mixed partial reduces to one forward-mode
    contraction of the logit map: entry (i, c) is
    -(coeff/B) * <dz_ic/dtheta, theta_vector>.  Raises when the logits graph
    itself depends on the targets, where that linearity fails.
    """
    if isinstance(targets, Tensor) and depends_on(logits, targets):
        raise GradError("logits depend on targets; loss is not linear in targets")
    batch = logits.data.shape[0]
    tangent_map = theta.unflatten(theta_vector)
    tangents = {theta_leaves[name]: tangent_map[name] for name in theta.names}
    u = jvp(logits, tangents)
    return -(float(coeff) / batch) * u
