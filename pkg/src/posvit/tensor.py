"""Dense float64 tensors with reverse-mode automatic differentiation.

Every array in the package flows through this module. Operations record a
graph of parent links and vector-Jacobian closures; ``backward`` replays it
in reverse topological order and accumulates gradients onto the leaves.
Reductions run in a fixed sequential order so repeated runs are bit-identical.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "NumericsError",
    "set_debug_checks",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "gelu",
    "concat",
    "slice_axis",
    "take",
    "reshape",
    "transpose_axes",
    "sum_all",
    "mean_all",
    "softmax",
    "cross_entropy",
    "layernorm",
    "backward",
    "grad_check",
    "zero_grad",
]


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Backward invoked on a missing, non-scalar or already-consumed graph."""


class NumericsError(FloatingPointError):
    """A non-finite value appeared where only finite scalars are allowed."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle the NaN/Inf check that runs after every operation."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class Tensor:
    """n-dimensional float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of the value with no graph history and no gradient."""
        return Tensor(self.data.copy())

    def _tracked(self) -> bool:
        return self.requires_grad or self._vjp is not None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def parameter(data, rng=None) -> Tensor:
    """Leaf tensor that collects gradients."""
    return Tensor(data, requires_grad=True)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p._tracked() for p in parents):
        out._parents = parents
        out._vjp = vjp
    if _DEBUG_CHECKS and not np.all(np.isfinite(out.data)):
        raise NumericsError("non-finite value produced by an operation")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product. Accepts 1-D operands with the usual vector semantics."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul expects 1-D or 2-D operands, got {a.shape} @ {b.shape}")
    inner_a = a.shape[-1]
    inner_b = b.shape[0]
    if inner_a != inner_b:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, ad * g  # 1-D @ 1-D -> scalar

    return _make(out, (a, b), vjp)


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), vjp)


def neg(x) -> Tensor:
    x = _as_tensor(x)
    return _make(-x.data, (x,), lambda g: (-g,))


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,))


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(x) -> Tensor:
    """GELU in its tanh form; the derivative differentiates the same form."""
    x = _as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + _GELU_K * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_K * xd**2)
        local = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t**2) * dinner
        return (g * local,)

    return _make(out, (x,), vjp)


# ---------------------------------------------------------------------------
# structural ops


def concat(a, b, axis: int) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != b.ndim:
        raise ShapeError(f"concat rank mismatch: {a.shape} vs {b.shape}")
    for i in range(a.ndim):
        if i != axis % a.ndim and a.shape[i] != b.shape[i]:
            raise ShapeError(f"concat extent mismatch on axis {i}: {a.shape} vs {b.shape}")
    ax = axis % a.ndim
    split = a.shape[ax]
    out = np.concatenate([a.data, b.data], axis=ax)

    def vjp(g):
        ga = np.take(g, range(split), axis=ax)
        gb = np.take(g, range(split, g.shape[ax]), axis=ax)
        return ga, gb

    return _make(out, (a, b), vjp)


def slice_axis(x, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    ax = axis % x.ndim
    if not (0 <= start <= stop <= x.shape[ax]):
        raise ShapeError(
            f"slice [{start}:{stop}] out of range for axis {ax} of shape {x.shape}"
        )
    idx = tuple(slice(start, stop) if i == ax else slice(None) for i in range(x.ndim))
    out = x.data[idx].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make(out, (x,), vjp)


def take(x, indices, axis: int = 0) -> Tensor:
    """Gather rows by integer index; duplicate indices accumulate in backward."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("take expects a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise IndexError(f"take index out of range for axis {axis} of shape {x.shape}")
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        full = np.zeros_like(x.data)
        if axis == 0:
            np.add.at(full, idx, g)
        else:
            moved = np.moveaxis(full, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (full,)

    return _make(out, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    orig = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


def transpose_axes(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


# ---------------------------------------------------------------------------
# reductions and losses


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    out = np.float64(x.data.sum())
    return _make(np.asarray(out), (x,), lambda g: (np.full_like(x.data, float(g)),))


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    out = np.asarray(x.data.sum() / n)
    return _make(out, (x,), lambda g: (np.full_like(x.data, float(g) / n),))


def softmax(x, axis: int = -1) -> Tensor:
    """Row-stochastic softmax with max subtraction for stability."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (x,), vjp)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log softmax probability of the labelled class.

    ``logits`` is batch x classes, ``labels`` an integer vector. Labels
    outside [0, classes) raise IndexError.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects batch x classes logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits batch {logits.shape[0]}"
        )
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c})")
    ld = logits.data
    m = ld.max(axis=1, keepdims=True)
    logsum = m[:, 0] + np.log(np.exp(ld - m).sum(axis=1))
    picked = ld[np.arange(labels.shape[0]), labels]
    n = labels.shape[0]
    out = np.asarray((logsum - picked).sum() / n)

    def vjp(g):
        p = np.exp(ld - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return _make(out, (logits,), vjp)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def vjp(g):
        dgamma = (g * xhat).reshape(-1, d).sum(axis=0)
        dbeta = g.reshape(-1, d).sum(axis=0)
        dxhat = g * gamma.data
        dvar = (dxhat * xc).sum(axis=-1, keepdims=True) * (-0.5) * inv**3
        dmu = (-dxhat * inv).sum(axis=-1, keepdims=True) + dvar * (-2.0 / d) * xc.sum(
            axis=-1, keepdims=True
        )
        dx = dxhat * inv + dvar * 2.0 * xc / d + dmu / d
        return dx, dgamma, dbeta

    return _make(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# backward pass and the finite-difference oracle


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from a scalar loss.

    The graph is consumed: a second backward on the same loss raises
    GraphError until the forward pass is rerun.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor loss")
    if loss._consumed:
        raise GraphError("graph already consumed; rerun the forward pass before backward")
    if loss.data.shape != ():
        raise GraphError(f"loss must be a scalar, got shape {loss.shape}")
    if loss._vjp is None and not loss.requires_grad:
        raise GraphError("loss is not connected to any differentiable input")

    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is not None:
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent._tracked():
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        elif node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
    for node in order:
        if node is not loss:
            node._parents = ()
            node._vjp = None
    loss._parents = ()
    loss._vjp = None
    loss._consumed = True


def zero_grad(params) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


def grad_check(f, params: dict, h: float = 1e-5, sample_count: int = 100, rng=None) -> float:
    """Compare analytic gradients of ``f(params)`` against central differences.

    Samples ``sample_count`` coordinates across all parameters, evaluates
    (f(p+h e) - f(p-h e)) / 2h at each, and returns the maximum relative
    error with denominator max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if sample_count < 1:
        raise ValueError("sample_count must be at least 1")
    rng = rng if rng is not None else np.random.default_rng(0)

    zero_grad(params)
    loss = f(params)
    if not np.isfinite(loss.data):
        raise NumericsError("loss is not finite at the evaluation point")
    backward(loss)
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }

    names = list(params.keys())
    sizes = [params[n].size for n in names]
    starts = np.concatenate([[0], np.cumsum(sizes)])
    total = int(starts[-1])
    count = min(sample_count, total)
    coords = rng.choice(total, size=count, replace=False)

    def eval_loss() -> float:
        out = f(params)
        val = float(out.data)
        if not math.isfinite(val):
            raise NumericsError("non-finite loss during finite differencing")
        return val

    max_rel = 0.0
    for flat_coord in coords:
        slot = int(np.searchsorted(starts, flat_coord, side="right") - 1)
        name = names[slot]
        local = int(flat_coord - starts[slot])
        buf = params[name].data.reshape(-1)
        orig = buf[local]
        buf[local] = orig + h
        f_plus = eval_loss()
        buf[local] = orig - h
        f_minus = eval_loss()
        buf[local] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        ana = float(analytic[name].reshape(-1)[local])
        rel = abs(ana - numeric) / max(abs(ana), abs(numeric), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
