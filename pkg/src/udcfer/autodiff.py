"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tensor`` wraps an ``np.ndarray`` together with an optional gradient
buffer and a record of the primitive that produced it.  Building an
expression out of the primitives below records a graph; ``backward``
walks it once in reverse topological order and returns gradients for
every named leaf.  The graph is consumed by the walk, so each forward
pass must be rebuilt before it can be differentiated again.

The primitive set is closed: everything differentiable in the package
is composed from the functions in ``_PRIMITIVES`` plus the two fused
loss ops at the bottom of this module.  Every primitive checks its
output for NaN/Inf and raises ``NumericError`` immediately, which keeps
failures attributable to the op that produced them instead of surfacing
three modules later.

Compute dtype is float64 throughout.  float32 exists only as a storage
dtype for checkpoints; arrays are upcast on load.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import NumericError, ShapeError

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """An n-d float64 array plus autodiff bookkeeping.

    ``requires_grad`` marks trainable leaves.  Interior nodes carry
    ``_parents`` (the input tensors) and ``_vjp`` (a closure mapping the
    upstream gradient to one gradient array per parent, ``None`` for
    parents that need no gradient).
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with no graph history."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._parents = ()
        t._vjp = None
        return t

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"


def _finite_or_raise(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by primitive '{op}'")


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap a primitive result, checking finiteness and recording the edge."""
    _finite_or_raise(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad or p._vjp is not None for p in parents)
    out.grad = None
    out.name = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def constant(data, name: Optional[str] = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=False, name=name)


def parameter(data, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# broadcasting helpers (restricted: same rank, per-axis size match or 1)
# ---------------------------------------------------------------------------


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.ndim != b.ndim:
        raise ShapeError(f"{op}: ranks differ, {a.shape} vs {b.shape}")
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` over the axes along which ``shape`` was broadcast."""
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True) if axes else grad


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product on the trailing two axes; leading axes must match exactly."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading dims differ, {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def vjp(g: np.ndarray):
        return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    return _node(out, "matmul", (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = a.data + b.data
    ash, bsh = a.shape, b.shape

    def vjp(g: np.ndarray):
        return (_unbroadcast(g, ash), _unbroadcast(g, bsh))

    return _node(out, "add", (a, b), vjp)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data
    ash, bsh = a.shape, b.shape

    def vjp(g: np.ndarray):
        return (_unbroadcast(g * bd, ash), _unbroadcast(g * ad, bsh))

    return _node(out, "mul", (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant (not differentiated w.r.t. ``c``)."""
    c = float(c)
    out = a.data * c

    def vjp(g: np.ndarray):
        return (g * c,)

    return _node(out, "scale", (a,), vjp)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from e
    ash = a.shape

    def vjp(g: np.ndarray):
        return (g.reshape(ash),)

    return _node(out, "reshape", (a,), vjp)


def transpose(a: Tensor, perm: Sequence[int]) -> Tensor:
    perm = tuple(int(p) for p in perm)
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeError(f"transpose: perm {perm} is not a permutation of rank {a.ndim}")
    out = a.data.transpose(perm)
    inv = tuple(np.argsort(perm))

    def vjp(g: np.ndarray):
        return (g.transpose(inv),)

    return _node(out, "transpose", (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return _node(out, "concat", tuple(tensors), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g: np.ndarray):
        dot = (g * p).sum(axis=axis, keepdims=True)
        return ((g - dot) * p,)

    return _node(p, "softmax", (a,), vjp)


def layer_norm(a: Tensor, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization along one axis, no affine part."""
    mu = a.data.mean(axis=axis, keepdims=True)
    var = ((a.data - mu) ** 2).mean(axis=axis, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = (a.data - mu) * istd

    def vjp(g: np.ndarray):
        gm = g.mean(axis=axis, keepdims=True)
        gx = (g * xhat).mean(axis=axis, keepdims=True)
        return (istd * (g - gm - xhat * gx),)

    return _node(xhat, "layer_norm", (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * phi_cdf
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI

    def vjp(g: np.ndarray):
        return (g * (phi_cdf + x * pdf),)

    return _node(out, "gelu", (a,), vjp)


def conv1x1(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Pointwise convolution.  ``x`` is [B, C, H, W], ``w`` is [O, C]."""
    if x.ndim != 4 or w.ndim != 2:
        raise ShapeError(f"conv1x1: expected x rank 4 and w rank 2, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv1x1: channel mismatch, x {x.shape} vs w {w.shape}")
    s = int(stride)
    xs = x.data[:, :, ::s, ::s] if s > 1 else x.data
    out = np.einsum("oc,bchw->bohw", w.data, xs, optimize=True)
    xshape = x.shape
    wd = w.data

    def vjp(g: np.ndarray):
        gw = np.einsum("bohw,bchw->oc", g, xs, optimize=True)
        gxs = np.einsum("oc,bohw->bchw", wd, g, optimize=True)
        if s > 1:
            gx = np.zeros(xshape, dtype=np.float64)
            gx[:, :, ::s, ::s] = gxs
        else:
            gx = gxs
        return (gx, gw)

    return _node(out, "conv1x1", (x, w), vjp)


def depthwise_conv3x3(x: Tensor, w: Tensor) -> Tensor:
    """Per-channel 3x3 convolution with zero padding 1.  ``w`` is [C, 3, 3]."""
    if x.ndim != 4 or w.shape != (x.shape[1], 3, 3):
        raise ShapeError(f"depthwise_conv3x3: got x {x.shape}, w {w.shape}")
    B, C, H, W = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((B, C, H, W), dtype=np.float64)
    for u in range(3):
        for v in range(3):
            out += w.data[:, u, v][None, :, None, None] * xp[:, :, u:u + H, v:v + W]
    wd = w.data

    def vjp(g: np.ndarray):
        gw = np.empty((C, 3, 3), dtype=np.float64)
        for u in range(3):
            for v in range(3):
                gw[:, u, v] = np.einsum("bchw,bchw->c", g, xp[:, :, u:u + H, v:v + W],
                                        optimize=True)
        gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
        gx = np.zeros((B, C, H, W), dtype=np.float64)
        for u in range(3):
            for v in range(3):
                gx += wd[:, 2 - u, 2 - v][None, :, None, None] * gp[:, :, u:u + H, v:v + W]
        return (gx, gw)

    return _node(out, "depthwise_conv3x3", (x, w), vjp)


def _reduce(a: Tensor, axis, keepdims: bool, mean_reduce: bool, op: str) -> Tensor:
    if mean_reduce:
        out = a.data.mean(axis=axis, keepdims=keepdims)
    else:
        out = a.data.sum(axis=axis, keepdims=keepdims)
    ash = a.shape
    count = a.data.size if axis is None else int(np.prod([ash[i] for i in np.atleast_1d(axis)]))

    def vjp(g: np.ndarray):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        gx = np.broadcast_to(g, ash).astype(np.float64)
        if mean_reduce:
            gx = gx / count
        return (gx.copy(),)

    return _node(out, op, (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(a, axis, keepdims, True, "mean")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _reduce(a, axis, keepdims, False, "sum")


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "conv1x1": conv1x1,
    "depthwise_conv3x3": depthwise_conv3x3,
    "mean": mean,
    "sum": tsum,
}


def apply_primitive(kind: str, inputs, **params) -> Tensor:
    """Dispatch by primitive name.  ``inputs`` is a Tensor, or a sequence for
    multi-input primitives (matmul/add/mul take exactly two, concat any number)."""
    if kind not in _PRIMITIVES:
        raise ShapeError(f"unknown primitive kind '{kind}'")
    fn = _PRIMITIVES[kind]
    if kind == "concat":
        return fn(list(inputs), **params)
    if isinstance(inputs, Tensor):
        return fn(inputs, **params)
    return fn(*inputs, **params)


# ---------------------------------------------------------------------------
# fused loss heads
#
# The primitive set has no elementwise log, so the two losses that need one
# are single fused nodes with hand-derived gradients (verified by grad_check).
# ---------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy between softmax(logits) and integer class labels.

    ``logits`` is [B, M]; ``labels`` is an int array of length B.
    Gradient w.r.t. logits is (softmax - onehot) / B.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be [B, M], got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    B, M = logits.shape
    if y.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {y.shape} != ({B},)")
    if y.min() < 0 or y.max() >= M:
        raise ShapeError(f"softmax_cross_entropy: label out of range for {M} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(B), y]
    out = np.asarray(nll.mean())
    p = np.exp(z - lse[:, None])

    def vjp(g: np.ndarray):
        gl = p.copy()
        gl[np.arange(B), y] -= 1.0
        return (gl * (float(g) / B),)

    return _node(out, "softmax_cross_entropy", (logits,), vjp)


def softmax_kl(a: Tensor, b: Tensor) -> Tensor:
    """Mean KL(softmax(a) || softmax(b)) over rows of two [B, C] tensors.

    Differentiable w.r.t. both arguments; returns a scalar.
    """
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeError(f"softmax_kl: need matching [B, C] inputs, got {a.shape}, {b.shape}")
    B = a.shape[0]
    za = a.data - a.data.max(axis=1, keepdims=True)
    zb = b.data - b.data.max(axis=1, keepdims=True)
    la = za - np.log(np.exp(za).sum(axis=1, keepdims=True))
    lb = zb - np.log(np.exp(zb).sum(axis=1, keepdims=True))
    p = np.exp(la)
    q = np.exp(lb)
    rows = (p * (la - lb)).sum(axis=1)
    out = np.asarray(rows.mean())

    def vjp(g: np.ndarray):
        c = float(g) / B
        ga = c * p * ((la - lb) - rows[:, None])
        gb = c * (q - p)
        return (ga, gb)

    return _node(out, "softmax_kl", (a, b), vjp)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order: list = []
    seen: set = set()
    stack: list = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, parameters: Optional[dict] = None, debug: bool = False) -> dict:
    """Accumulate gradients of a scalar ``loss`` into every named leaf.

    Returns ``{name: gradient Tensor}``.  If ``parameters`` (a name -> Tensor
    mapping) is given, every entry gets a gradient; parameters the loss does
    not depend on get zeros, and ``debug=True`` reports them.  The traversed
    graph is consumed: interior edges are cleared so a stale graph cannot be
    walked twice.
    """
    if loss.data.ndim != 0:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    _finite_or_raise(loss.data, "loss")

    order = _toposort(loss)
    grads: dict = {id(loss): np.ones((), dtype=np.float64)}
    leaf_grads: dict = {}

    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not (p.requires_grad or p._vjp is not None):
                    continue
                if pg.shape != p.shape:
                    raise ShapeError(
                        f"backward: gradient shape {pg.shape} != value shape {p.shape}")
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg
        elif node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                if node.name in leaf_grads:
                    leaf_grads[node.name] = Tensor(leaf_grads[node.name].data + g)
                else:
                    leaf_grads[node.name] = Tensor(g)

    # consume the tape
    for node in order:
        node._parents = ()
        node._vjp = None

    if parameters is not None:
        missing = []
        for name, p in parameters.items():
            if name not in leaf_grads:
                leaf_grads[name] = Tensor(np.zeros(p.shape, dtype=np.float64))
                if p.grad is None:
                    p.grad = leaf_grads[name].data
                missing.append(name)
        if debug and missing:
            import sys

            print(f"backward: zero gradient for disconnected parameters: "
                  f"{sorted(missing)}", file=sys.stderr)
    for name, g in leaf_grads.items():
        _finite_or_raise(g.data, f"gradient of '{name}'")
    return leaf_grads


def zero_grads(parameters: dict) -> None:
    for p in parameters.values():
        p.grad = None


# ---------------------------------------------------------------------------
# numeric gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[dict], Tensor], params: dict, eps: float = 1e-5,
               sample: Optional[int] = None, seed: int = 0) -> float:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` maps a ``{name: Tensor}`` dict to a scalar Tensor and must rebuild
    its graph on every call.  Returns the worst relative error
    ``max |analytic - numeric| / max(1, |analytic|)`` over all checked
    entries.  With ``sample`` set, at most that many coordinates per
    parameter are probed (chosen by a seeded RNG); otherwise every
    coordinate is.  Also verifies that two evaluations at the same point
    are bit-identical, since a nondeterministic ``f`` cannot be checked.
    """
    base = f(params)
    again = f(params)
    if base.data.tobytes() != again.data.tobytes():
        raise NumericError("grad_check: function is not deterministic at the base point")
    analytic = backward(f(params), parameters=params)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        n = flat.size
        if sample is not None and n > sample:
            idxs = rng.choice(n, size=sample, replace=False)
        else:
            idxs = np.arange(n)
        ga = analytic[name].data.reshape(-1)
        for i in idxs:
            keep = flat[i]
            flat[i] = keep + eps
            hi = float(f(params).data)
            flat[i] = keep - eps
            lo = float(f(params).data)
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(ga[i] - numeric) / max(1.0, abs(ga[i]))
            if err > worst:
                worst = err
    return worst
