"""Dense float64 numeric core with reverse-mode differentiation.

All values are 2-D numpy float64 arrays (scalars are shape ``()``).  A
:class:`Tape` records every primitive applied to its :class:`Var` nodes;
``Tape.backward`` then accumulates gradients for a scalar loss by reverse
iteration over the recorded nodes.  The op inventory is deliberately small:
just what the embedding and attention losses in this package need.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NonFiniteError(RuntimeError):
    """A parameter or gradient stopped being finite."""


def as_f64(value) -> np.ndarray:
    out = np.asarray(value, dtype=np.float64)
    return out


class Var:
    """One tape node: a float64 array plus what backward() needs."""

    __slots__ = ("value", "grad", "parents")

    def __init__(self, value: np.ndarray, parents=()):
        self.value = value
        self.grad = None  # filled during backward; None means untouched
        self.parents = parents  # tuple of (Var, vjp) pairs

    @property
    def shape(self):
        return self.value.shape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    # leading axes numpy prepended
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tape:
    """Records primitives so gradients of a scalar loss can be accumulated.

    Forward/backward over one tape is single-threaded.  Separate tapes over
    shared read-only parameter arrays may run concurrently; merging their
    gradients is the caller's job.
    """

    def __init__(self):
        self._nodes: list[Var] = []

    # -- node construction -------------------------------------------------

    def _record(self, value: np.ndarray, parents=()) -> Var:
        node = Var(value, parents)
        self._nodes.append(node)
        return node

    def input(self, value) -> Var:
        """Register a leaf (parameter or constant input)."""
        return self._record(as_f64(value))

    # -- primitives ---------------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
            raise ShapeError(f"matmul {a.value.shape} @ {b.value.shape}")
        out = a.value @ b.value
        return self._record(
            out,
            (
                (a, lambda g, b=b: g @ b.value.T),
                (b, lambda g, a=a: a.value.T @ g),
            ),
        )

    def transpose(self, a: Var) -> Var:
        return self._record(a.value.T, ((a, lambda g: g.T),))

    def concat_cols(self, a: Var, b: Var) -> Var:
        if a.value.shape[0] != b.value.shape[0]:
            raise ShapeError(f"concat_cols rows {a.value.shape} vs {b.value.shape}")
        split = a.value.shape[1]
        out = np.concatenate([a.value, b.value], axis=1)
        return self._record(
            out,
            (
                (a, lambda g: g[:, :split]),
                (b, lambda g: g[:, split:]),
            ),
        )

    def row_gather(self, a: Var, idx) -> Var:
        idx = np.asarray(idx, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeError("row_gather index must be 1-D")
        if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
            raise ShapeError("row_gather index out of range")

        def vjp(g, shape=a.value.shape, idx=idx):
            acc = np.zeros(shape)
            np.add.at(acc, idx, g)
            return acc

        return self._record(a.value[idx], ((a, vjp),))

    def row_scatter(self, a: Var, idx, row_count: int) -> Var:
        """Place row i of `a` at row idx[i] of a zero (row_count, d) matrix."""
        idx = np.asarray(idx, dtype=np.int64)
        if idx.shape != (a.value.shape[0],):
            raise ShapeError("row_scatter needs one destination per row")
        if np.unique(idx).size != idx.size:
            raise ShapeError("row_scatter destinations must be distinct")
        out = np.zeros((row_count, a.value.shape[1]))
        out[idx] = a.value
        return self._record(out, ((a, lambda g, idx=idx: g[idx]),))

    def segment_softmax(self, scores: Var, segment_ids) -> Var:
        """Softmax of (E, 1) scores within runs of equal, sorted segment ids.

        Per-segment max is subtracted before exponentiation; every segment
        present in `segment_ids` is nonempty by construction, and an empty
        scores array is an error (an isolated node must never reach here).
        """
        seg = np.asarray(segment_ids, dtype=np.int64)
        if scores.value.ndim != 2 or scores.value.shape[1] != 1:
            raise ShapeError("segment_softmax expects (E, 1) scores")
        if scores.value.shape[0] == 0:
            raise ShapeError("segment_softmax over an empty segment set")
        if seg.shape != (scores.value.shape[0],):
            raise ShapeError("segment id count must match score count")
        if np.any(np.diff(seg) < 0):
            raise ShapeError("segment ids must be sorted ascending")

        starts = np.flatnonzero(np.r_[True, np.diff(seg) > 0])
        flat = scores.value[:, 0]
        seg_max = np.maximum.reduceat(flat, starts)
        compact = np.cumsum(np.r_[0, (np.diff(seg) > 0).astype(np.int64)])
        shifted = flat - seg_max[compact]
        ex = np.exp(shifted)
        denom = np.add.reduceat(ex, starts)
        w = ex / denom[compact]

        def vjp(g, w=w, starts=starts, compact=compact):
            gw = g[:, 0] * w
            seg_dot = np.add.reduceat(gw, starts)
            return (gw - w * seg_dot[compact])[:, None]

        return self._record(w[:, None], ((scores, vjp),))

    def segment_weighted_sum(self, values: Var, weights: Var, segment_ids, segment_count: int) -> Var:
        """out[s] = sum over segment s of weights[e] * values[e]."""
        seg = np.asarray(segment_ids, dtype=np.int64)
        e, d = values.value.shape
        if weights.value.shape != (e, 1):
            raise ShapeError(f"weights must be ({e}, 1), got {weights.value.shape}")
        if seg.shape != (e,) or np.any(np.diff(seg) < 0):
            raise ShapeError("segment ids must be sorted and match value count")
        if e and seg[-1] >= segment_count:
            raise ShapeError("segment id exceeds segment count")
        weighted = weights.value * values.value
        out = np.zeros((segment_count, d))
        if e:
            starts = np.flatnonzero(np.r_[True, np.diff(seg) > 0])
            present = seg[starts]
            out[present] = np.add.reduceat(weighted, starts, axis=0)

        def vjp_values(g, seg=seg, w=weights.value):
            return w * g[seg]

        def vjp_weights(g, seg=seg, v=values.value):
            return np.sum(v * g[seg], axis=1, keepdims=True)

        return self._record(out, ((values, vjp_values), (weights, vjp_weights)))

    def add(self, a: Var, b: Var) -> Var:
        out = a.value + b.value
        return self._record(
            out,
            (
                (a, lambda g, s=a.value.shape: _unbroadcast(g, s)),
                (b, lambda g, s=b.value.shape: _unbroadcast(g, s)),
            ),
        )

    def sub(self, a: Var, b: Var) -> Var:
        out = a.value - b.value
        return self._record(
            out,
            (
                (a, lambda g, s=a.value.shape: _unbroadcast(g, s)),
                (b, lambda g, s=b.value.shape: _unbroadcast(-g, s)),
            ),
        )

    def mul(self, a: Var, b: Var) -> Var:
        out = a.value * b.value
        return self._record(
            out,
            (
                (a, lambda g, b=b: _unbroadcast(g * b.value, a.value.shape)),
                (b, lambda g, a=a: _unbroadcast(g * a.value, b.value.shape)),
            ),
        )

    def scale(self, a: Var, c: float) -> Var:
        c = float(c)
        return self._record(a.value * c, ((a, lambda g: g * c),))

    def sigmoid(self, a: Var) -> Var:
        x = a.value
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return self._record(out, ((a, lambda g, s=out: g * s * (1.0 - s)),))

    def relu(self, a: Var) -> Var:
        mask = a.value > 0
        return self._record(a.value * mask, ((a, lambda g, m=mask: g * m),))

    def leaky_relu(self, a: Var, slope: float = 0.01) -> Var:
        factor = np.where(a.value > 0, 1.0, slope)
        return self._record(a.value * factor, ((a, lambda g, f=factor: g * f),))

    def log_clamped(self, a: Var, floor: float = 1e-12) -> Var:
        """log(max(x, floor)); gradient is zero on the clamped region."""
        clamped = np.maximum(a.value, floor)
        active = a.value > floor
        return self._record(
            np.log(clamped),
            ((a, lambda g, c=clamped, m=active: g * m / c),),
        )

    def l2_norm_rows(self, a: Var) -> Var:
        """Euclidean norm of each row, as an (n, 1) column."""
        norms = np.sqrt(np.sum(a.value * a.value, axis=1, keepdims=True))

        def vjp(g, x=a.value, n=norms):
            return g * x / np.maximum(n, 1e-12)

        return self._record(norms, ((a, vjp),))

    def sum_rows(self, a: Var) -> Var:
        out = np.sum(a.value, axis=1, keepdims=True)
        return self._record(
            out, ((a, lambda g, d=a.value.shape[1]: np.repeat(g, d, axis=1)),)
        )

    def reduce_sum(self, a: Var) -> Var:
        out = np.asarray(np.sum(a.value))
        return self._record(out, ((a, lambda g, s=a.value.shape: np.broadcast_to(g, s).copy()),))

    def hinge(self, a: Var, margin: float) -> Var:
        """max(x + margin, 0) elementwise."""
        shifted = a.value + float(margin)
        mask = shifted > 0
        return self._record(shifted * mask, ((a, lambda g, m=mask: g * m),))

    # -- backward ------------------------------------------------------------

    def backward(self, loss: Var) -> None:
        """Accumulate d(loss)/d(node) into every node's .grad.

        Nodes with no path to the loss keep grad None; read them through
        :func:`grad_of`, which reports those as exact zeros.
        """
        if loss.value.size != 1:
            raise ShapeError("backward target must be scalar")
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self._nodes):
            if node.grad is None:
                continue
            for parent, vjp in node.parents:
                g = vjp(node.grad)
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def grad_of(node: Var) -> np.ndarray:
    """Gradient accumulated in backward; exact zeros if the loss never saw it."""
    if node.grad is None:
        return np.zeros_like(node.value)
    return node.grad


# -- optimizers ---------------------------------------------------------------


def _check_grads_finite(grads: dict) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for '{name}'; step aborted")


def _check_params_finite(params: dict) -> None:
    for name, p in params.items():
        if not np.all(np.isfinite(p)):
            raise NonFiniteError(f"parameter '{name}' became non-finite")


def sgd_step(params: dict, grads: dict, lr: float) -> None:
    """In-place SGD update. Aborts (no mutation) on any non-finite gradient."""
    _check_grads_finite(grads)
    for name, p in params.items():
        if name in grads:
            p -= lr * grads[name]
    _check_params_finite(params)


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict,
    state: AdamState,
    grads: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction."""
    _check_grads_finite(grads)
    state.t += 1
    t = state.t
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    _check_params_finite(params)
