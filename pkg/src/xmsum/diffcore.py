"""Minimal reverse-mode autodiff over dense float64 matrices.

Primitives take and return :class:`Tensor2` values. While a :class:`Tape`
is active, every primitive whose inputs are gradient-tracked records a
vector-Jacobian closure; :func:`backward` replays the records once each,
in reverse order. Without an active tape the same functions are pure and
reentrant, so evaluation never pays taping overhead. Composite operations
living in other modules (e.g. the unrolled Sinkhorn loop) register their
own closures through :func:`record`.

Everything is float64 and strictly two-dimensional: a length-d vector is a
1 x d row or an n x 1 column, never a 1-D array.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import DimensionError, EvaluationError, StateError

# Raise EvaluationError whenever a primitive produces NaN/Inf.
STRICT_FINITE = True

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715
_LN_EPS = 1e-5


class Tensor2:
    """A rows x cols float64 matrix, optionally tracked for gradients.

    ``needs_grad`` marks leaves (parameters); it propagates to derived
    tensors only while a tape is active. Gradients accumulate into
    ``.grad`` during :func:`backward` and are never cleared implicitly.
    """

    __slots__ = ("data", "grad", "needs_grad", "name")

    def __init__(self, data, needs_grad: bool = False, name: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise DimensionError(f"Tensor2 requires a 2-D array, got ndim={arr.ndim}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.needs_grad = bool(needs_grad)
        self.name = name

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def copy(self) -> "Tensor2":
        return Tensor2(self.data.copy(), needs_grad=self.needs_grad, name=self.name)

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"<Tensor2{tag} {self.rows}x{self.cols}>"


class Tape:
    """Ordered record of primitive applications for reverse-mode replay."""

    def __init__(self):
        self.nodes: list[tuple[Tensor2, tuple[Tensor2, ...], Callable]] = []
        self.visited = 0

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self.nodes)


_LOCAL = threading.local()


def _stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = _LOCAL.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def record(out: Tensor2, inputs: tuple[Tensor2, ...], vjp: Callable) -> Tensor2:
    """Attach ``out`` to the active tape with a vector-Jacobian closure.

    ``vjp(grad_out)`` must return one gradient array (or None) per input,
    in order. Public so composite operations outside this module can
    participate in backward passes.
    """
    tape = active_tape()
    if tape is not None and any(t.needs_grad for t in inputs):
        out.needs_grad = True
        tape.nodes.append((out, inputs, vjp))
    return out


def backward(tape: Tape, loss: Tensor2) -> int:
    """Replay ``tape`` in reverse, accumulating gradients into ``.grad``.

    Returns the number of nodes visited; each recorded node is visited
    exactly once. Parameter gradients accumulate across calls, so callers
    zero them between optimization steps.
    """
    if not tape.nodes:
        raise StateError("backward before forward: tape holds no recorded ops")
    if loss.data.shape != (1, 1):
        raise DimensionError(f"backward needs a 1x1 loss, got {loss.data.shape}")
    loss.grad = np.ones((1, 1))
    visited = 0
    for out, inputs, vjp in reversed(tape.nodes):
        visited += 1
        g = out.grad
        if g is None:
            continue
        grads = vjp(g)
        for t, gt in zip(inputs, grads):
            if gt is None or not t.needs_grad:
                continue
            if t.grad is None:
                t.grad = np.array(gt, dtype=np.float64)
            else:
                t.grad += gt
    tape.visited = visited
    return visited


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


class ParamSet:
    """Named, insertion-ordered collection of trainable tensors."""

    def __init__(self):
        self._params: dict[str, Tensor2] = {}

    def add(self, name: str, data) -> Tensor2:
        if name in self._params:
            raise StateError(f"duplicate parameter name {name!r}")
        t = Tensor2(data, needs_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor2:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor2]:
        return list(self._params.values())

    def as_dict(self) -> dict[str, Tensor2]:
        return dict(self._params)

    def zero_grads(self) -> None:
        zero_grads(self._params.values())

    def grad_norm(self) -> float:
        total = 0.0
        for t in self._params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))


def _out(op: str, data: np.ndarray) -> Tensor2:
    t = Tensor2(data)
    if STRICT_FINITE and not np.all(np.isfinite(t.data)):
        raise EvaluationError(f"{op}: non-finite values in output")
    return t


def _need(op: str, cond: bool, detail: str) -> None:
    if not cond:
        raise DimensionError(f"{op}: {detail}")


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor2, b: Tensor2) -> Tensor2:
    _need("matmul", a.cols == b.rows, f"inner dims differ: {a.shape} @ {b.shape}")
    out = _out("matmul", a.data @ b.data)

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return record(out, (a, b), vjp)


def add(a: Tensor2, b: Tensor2) -> Tensor2:
    _need("add", a.shape == b.shape, f"shapes differ: {a.shape} vs {b.shape}")
    out = _out("add", a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor2, b: Tensor2) -> Tensor2:
    _need("sub", a.shape == b.shape, f"shapes differ: {a.shape} vs {b.shape}")
    out = _out("sub", a.data - b.data)
    return record(out, (a, b), lambda g: (g, -g))


def scale(x: Tensor2, c: float) -> Tensor2:
    c = float(c)
    out = _out("scale", x.data * c)
    return record(out, (x,), lambda g: (g * c,))


def add_bias(x: Tensor2, b: Tensor2) -> Tensor2:
    _need("add_bias", b.rows == 1 and b.cols == x.cols,
          f"bias must be 1x{x.cols}, got {b.shape}")
    out = _out("add_bias", x.data + b.data)
    return record(out, (x, b), lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul(a: Tensor2, b: Tensor2) -> Tensor2:
    _need("mul", a.shape == b.shape, f"shapes differ: {a.shape} vs {b.shape}")
    out = _out("mul", a.data * b.data)
    return record(out, (a, b), lambda g: (g * b.data, g * a.data))


def mul_rows(x: Tensor2, w: Tensor2) -> Tensor2:
    """Scale row i of ``x`` by the scalar ``w[i, 0]``."""
    _need("mul_rows", w.cols == 1 and w.rows == x.rows,
          f"weights must be {x.rows}x1, got {w.shape}")
    out = _out("mul_rows", x.data * w.data)

    def vjp(g):
        return g * w.data, (g * x.data).sum(axis=1, keepdims=True)

    return record(out, (x, w), vjp)


def sigmoid(x: Tensor2) -> Tensor2:
    z = x.data
    y = np.empty_like(z)
    pos = z >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)
    out = _out("sigmoid", y)
    return record(out, (x,), lambda g: (g * y * (1.0 - y),))


def gelu(x: Tensor2) -> Tensor2:
    z = x.data
    inner = _GELU_C * (z + _GELU_A * z**3)
    th = np.tanh(inner)
    out = _out("gelu", 0.5 * z * (1.0 + th))

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * z * z)
        dz = 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th * th) * dinner
        return (g * dz,)

    return record(out, (x,), vjp)


def softmax(x: Tensor2, axis: int) -> Tensor2:
    """Numerically stable softmax along ``axis`` (0 = down columns, 1 = rows)."""
    _need("softmax", axis in (0, 1), f"axis must be 0 or 1, got {axis}")
    z = x.data
    m = z.max(axis=axis, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _out("softmax", y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return record(out, (x,), vjp)


def concat_rows(a: Tensor2, b: Tensor2) -> Tensor2:
    _need("concat_rows", a.cols == b.cols, f"column counts differ: {a.shape} vs {b.shape}")
    out = _out("concat_rows", np.vstack([a.data, b.data]))
    na = a.rows
    return record(out, (a, b), lambda g: (g[:na], g[na:]))


def concat_broadcast(vec: Tensor2, mat: Tensor2) -> Tensor2:
    """Prepend the row vector ``vec`` to every row of ``mat``: n x (dv+dm)."""
    _need("concat_broadcast", vec.rows == 1, f"vec must be a single row, got {vec.shape}")
    n = mat.rows
    out_data = np.empty((n, vec.cols + mat.cols))
    out_data[:, : vec.cols] = vec.data
    out_data[:, vec.cols:] = mat.data
    out = _out("concat_broadcast", out_data)
    dv = vec.cols

    def vjp(g):
        return g[:, :dv].sum(axis=0, keepdims=True), g[:, dv:]

    return record(out, (vec, mat), vjp)


def mean_pool_rows(x: Tensor2) -> Tensor2:
    """Arithmetic mean over rows; returns a 1 x cols row vector."""
    _need("mean_pool_rows", x.rows >= 1, "input has no rows")
    n = x.rows
    out = _out("mean_pool_rows", x.data.mean(axis=0, keepdims=True))
    return record(out, (x,), lambda g: (np.repeat(g / n, n, axis=0),))


def sum_all(x: Tensor2) -> Tensor2:
    out = _out("sum_all", np.array([[x.data.sum()]]))
    return record(out, (x,), lambda g: (np.full(x.shape, g[0, 0]),))


def transpose(x: Tensor2) -> Tensor2:
    out = _out("transpose", x.data.T.copy())
    return record(out, (x,), lambda g: (g.T,))


def gather_rows(x: Tensor2, idx) -> Tensor2:
    """Select rows of ``x`` by index; backward scatter-adds (duplicates ok)."""
    indices = np.asarray(idx, dtype=np.intp)
    _need("gather_rows", indices.ndim == 1, "indices must be a flat sequence")
    if indices.size and (indices.min() < 0 or indices.max() >= x.rows):
        raise DimensionError(f"gather_rows: index out of range for {x.rows} rows")
    out = _out("gather_rows", x.data[indices])

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, indices, g)
        return (gx,)

    return record(out, (x,), vjp)


def straight_through(soft: Tensor2, hard: np.ndarray) -> Tensor2:
    """Forward the hard values; route the incoming gradient to ``soft``.

    ``hard`` is plain data with the same shape as ``soft``; it never
    receives gradient.
    """
    hard = np.asarray(hard, dtype=np.float64)
    _need("straight_through", hard.shape == soft.shape,
          f"hard values must match {soft.shape}, got {hard.shape}")
    out = _out("straight_through", hard.copy())
    return record(out, (soft,), lambda g: (g,))


def attention(q: Tensor2, k: Tensor2, v: Tensor2, n_heads: int = 1) -> Tensor2:
    """Scaled dot-product attention with per-head column splitting.

    q is Tq x d; k and v are Tk x d. Each head attends over its own d/h
    column block with 1/sqrt(d/h) scaling; outputs re-concatenate to Tq x d.
    """
    d = q.cols
    _need("attention", k.cols == d and v.cols == d,
          f"feature dims differ: q{q.shape} k{k.shape} v{v.shape}")
    _need("attention", k.rows == v.rows, f"key/value row counts differ: {k.shape} vs {v.shape}")
    _need("attention", n_heads >= 1 and d % n_heads == 0,
          f"d={d} not divisible by n_heads={n_heads}")
    dh = d // n_heads
    inv = 1.0 / np.sqrt(dh)
    out_data = np.empty((q.rows, d))
    weights = []
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = (q.data[:, sl] @ k.data[:, sl].T) * inv
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        a = e / e.sum(axis=1, keepdims=True)
        weights.append(a)
        out_data[:, sl] = a @ v.data[:, sl]
    out = _out("attention", out_data)

    def vjp(g):
        gq = np.empty_like(q.data)
        gk = np.empty_like(k.data)
        gv = np.empty_like(v.data)
        for h in range(n_heads):
            sl = slice(h * dh, (h + 1) * dh)
            a = weights[h]
            go = g[:, sl]
            ga = go @ v.data[:, sl].T
            gs = a * (ga - (ga * a).sum(axis=1, keepdims=True))
            gq[:, sl] = (gs @ k.data[:, sl]) * inv
            gk[:, sl] = (gs.T @ q.data[:, sl]) * inv
            gv[:, sl] = a.T @ go
        return gq, gk, gv

    return record(out, (q, k, v), vjp)


def layer_norm(x: Tensor2, gain: Tensor2, bias: Tensor2) -> Tensor2:
    """Row-wise layer normalization with learnable gain and bias (both 1 x d)."""
    d = x.cols
    _need("layer_norm", gain.shape == (1, d) and bias.shape == (1, d),
          f"gain/bias must be 1x{d}, got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    out = _out("layer_norm", xhat * gain.data + bias.data)

    def vjp(g):
        gxhat = g * gain.data
        m1 = gxhat.mean(axis=1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
        gx = inv * (gxhat - m1 - xhat * m2)
        return gx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return record(out, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    """Per-parameter comparison of analytic and central-difference gradients."""

    per_param: dict[str, float]
    max_rel_err: float
    worst_param: str
    tolerance: float
    passed: bool
    checked_entries: int

    def summary(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return (f"grad_check {state}: max rel err {self.max_rel_err:.3e} "
                f"({self.worst_param}) over {self.checked_entries} entries, "
                f"tolerance {self.tolerance:.1e}")


def grad_check(
    fn: Callable[[], Tensor2],
    params: Mapping[str, Tensor2],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare taped gradients of ``fn`` against central differences.

    ``fn`` takes no arguments, reads the parameter tensors, and returns a
    1x1 loss; it must be deterministic (fix any noise inputs before
    calling). With ``samples_per_param`` set, only that many entries per
    tensor are probed (chosen by ``rng``), keeping large checks tractable.
    """
    if step <= 0:
        raise ValueError("step must be positive")

    def evaluate() -> float:
        val = fn()
        v = val.item()
        if not np.isfinite(v):
            raise EvaluationError("grad_check: fn produced a non-finite value")
        return v

    zero_grads(params.values())
    with Tape() as tape:
        loss = fn()
    if not np.isfinite(loss.item()):
        raise EvaluationError("grad_check: fn produced a non-finite value")
    backward(tape, loss)
    analytic = {
        name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
        for name, t in params.items()
    }
    zero_grads(params.values())

    per_param: dict[str, float] = {}
    worst_param = ""
    max_rel = 0.0
    checked = 0
    for name, t in params.items():
        size = t.data.size
        if samples_per_param is None or samples_per_param >= size:
            flat_indices = np.arange(size)
        else:
            gen = rng if rng is not None else np.random.default_rng(0)
            flat_indices = gen.choice(size, size=samples_per_param, replace=False)
        worst = 0.0
        flat = t.data.reshape(-1)
        for fi in flat_indices:
            orig = flat[fi]
            flat[fi] = orig + step
            f_plus = evaluate()
            flat[fi] = orig - step
            f_minus = evaluate()
            flat[fi] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = analytic[name].reshape(-1)[fi]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, rel)
            checked += 1
        per_param[name] = worst
        if worst >= max_rel:
            max_rel = worst
            worst_param = name
    return GradCheckReport(
        per_param=per_param,
        max_rel_err=max_rel,
        worst_param=worst_param,
        tolerance=tolerance,
        passed=max_rel <= tolerance,
        checked_entries=checked,
    )
