"""Reverse-mode differentiation over dense float64 matrices.

The engine is deliberately small: a define-by-run tape of primitive
operations on 2-D arrays, rebuilt for every rollout, with exact reverse
traversal. Rows carry the batch dimension, columns carry features.

Affine layers are represented by a single bias-augmented weight matrix
(the input gets a trailing column of ones), and each affine node can
carry a :class:`HookChannel` that records the layer input at forward
time and the pre-activation gradient at backward time. Summing the
per-timestep outer products recovers the weight gradient exactly, which
is the identity the Kronecker-factored curvature estimates rest on.

Every operation validates that its output is finite; NaN or Inf anywhere
is treated as a hard error, not a value.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

# The universal numeric carrier: a 2-D C-order float64 array.
Matrix64 = np.ndarray

RMS_EPS = 1e-8  # inside the root: sqrt(mean(x^2) + RMS_EPS)


class DiffError(RuntimeError):
    """Shape mismatch, non-finite value, or misuse of the tape."""


def as_matrix64(value, name: str = "value") -> Matrix64:
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DiffError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _ensure_finite(value: np.ndarray, op: str, idx: int) -> None:
    # A single reduction: the sum is finite iff every entry is finite
    # (any NaN poisons it, a lone Inf survives, +Inf-Inf gives NaN).
    if not math.isfinite(float(value.sum())):
        raise DiffError(f"non-finite output of '{op}' at tape node {idx}")


class HookChannel:
    """Per-layer capture of timestep inputs and pre-activation gradients.

    ``activations[k]`` is the bias-augmented input of the k-th firing of
    the layer; ``grads[k]`` is the gradient of the loss with respect to
    the matching pre-activation. Gradients are recorded only while the
    channel is armed by :func:`backward`.
    """

    def __init__(self, layer: str):
        self.layer = layer
        self._firings: list[int] = []          # node ids in firing order
        self._a: dict[int, np.ndarray] = {}
        self._g: dict[int, np.ndarray] = {}
        self._armed = False

    def _record_input(self, node_id: int, a: np.ndarray) -> None:
        self._firings.append(node_id)
        self._a[node_id] = a

    def _record_grad(self, node_id: int, g: np.ndarray) -> None:
        if self._armed:
            self._g[node_id] = g

    @property
    def n_firings(self) -> int:
        return len(self._firings)

    @property
    def activations(self) -> list[np.ndarray]:
        return [self._a[i] for i in self._firings]

    @property
    def grads(self) -> list[np.ndarray]:
        if len(self._g) != len(self._firings):
            raise DiffError(
                f"channel '{self.layer}' holds {len(self._g)} gradients for "
                f"{len(self._firings)} firings; run backward with this channel hooked"
            )
        return [self._g[i] for i in self._firings]

    def weight_gradient(self) -> Matrix64:
        """Sum of per-timestep outer products, equal to the tape gradient."""
        acc = None
        for a, g in zip(self.activations, self.grads):
            contrib = g.T @ a
            acc = contrib if acc is None else acc + contrib
        if acc is None:
            raise DiffError(f"channel '{self.layer}' recorded no firings")
        return acc


class Node:
    __slots__ = ("tape", "idx", "value", "parents", "backward_fn", "grad",
                 "param", "needs_grad", "grad_owned")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray,
                 parents: tuple, backward_fn, param: str | None):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad: np.ndarray | None = None
        self.param = param
        self.needs_grad = param is not None or any(p.needs_grad for p in parents)
        self.grad_owned = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    # Light sugar; everything maps onto the primitive set below.
    def __add__(self, other: "Node") -> "Node":
        return add(self, other)

    def __sub__(self, other: "Node") -> "Node":
        return sub(self, other)

    def __mul__(self, other) -> "Node":
        if isinstance(other, Node):
            return multiply(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> "Node":
        return scale(self, -1.0)


class Tape:
    """Ordered record of primitive operations.

    With ``record=False`` the tape computes values (including hook input
    capture) but retains nothing, so no backward pass is possible; use it
    for evaluation-only forward passes.

    With ``validate=False`` per-operation finite checks are skipped. A
    caller doing so must check the results it consumes (loss value,
    gradients) and, on trouble, rebuild with validation on: the rebuild
    is deterministic, so the failing node id is recovered exactly.
    """

    def __init__(self, record: bool = True, validate: bool = True):
        self.record = record
        self.validate = validate
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self._n = 0

    def _emit(self, value: np.ndarray, parents: tuple, backward_fn,
              op: str, param: str | None = None) -> Node:
        idx = self._n
        self._n += 1
        if self.validate:
            _ensure_finite(value, op, idx)
        if not self.record:
            return Node(self, idx, value, (), None, param)
        node = Node(self, idx, value, parents, backward_fn, param)
        self.nodes.append(node)
        return node

    def constant(self, value) -> Node:
        return self._emit(as_matrix64(value, "constant"), (), None, "constant")

    def parameter(self, name: str, value) -> Node:
        if name in self.params:
            raise DiffError(f"parameter '{name}' registered twice")
        node = self._emit(as_matrix64(value, name), (), None, "parameter", param=name)
        self.params[name] = node
        return node


def _tape_of(*nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise DiffError("operands belong to different tapes")
    return tape


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Node, b: Node, transpose_a: bool = False, transpose_b: bool = False) -> Node:
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    ka = av.shape[0] if transpose_a else av.shape[1]
    kb = bv.shape[1] if transpose_b else bv.shape[0]
    if ka != kb:
        raise DiffError(f"matmul inner dims {ka} != {kb} "
                        f"(shapes {av.shape}, {bv.shape}, ta={transpose_a}, tb={transpose_b})")
    left = av.T if transpose_a else av
    right = bv.T if transpose_b else bv
    value = left @ right
    na, nb = a.needs_grad, b.needs_grad

    def backward_fn(g: np.ndarray):
        if not transpose_a and not transpose_b:
            return (g @ bv.T if na else None, av.T @ g if nb else None)
        if transpose_a and not transpose_b:
            return (bv @ g.T if na else None, av @ g if nb else None)
        if not transpose_a and transpose_b:
            return (g @ bv if na else None, g.T @ av if nb else None)
        return (bv.T @ g.T if na else None, g.T @ av.T if nb else None)

    return tape._emit(value, (a, b), backward_fn, "matmul")


def _broadcast_check(x: np.ndarray, y: np.ndarray, op: str) -> None:
    # Same shape, or one operand is (1, c), (r, 1) or (1, 1).
    for axis in (0, 1):
        if x.shape[axis] != y.shape[axis] and 1 not in (x.shape[axis], y.shape[axis]):
            raise DiffError(f"{op}: incompatible shapes {x.shape} and {y.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and g.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def add(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    _broadcast_check(a.value, b.value, "add")
    value = a.value + b.value
    ash, bsh = a.value.shape, b.value.shape
    na, nb = a.needs_grad, b.needs_grad

    def backward_fn(g: np.ndarray):
        return (_reduce_to(g, ash) if na else None,
                _reduce_to(g, bsh) if nb else None)

    return tape._emit(value, (a, b), backward_fn, "add")


def sub(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    _broadcast_check(a.value, b.value, "sub")
    value = a.value - b.value
    ash, bsh = a.value.shape, b.value.shape
    na, nb = a.needs_grad, b.needs_grad

    def backward_fn(g: np.ndarray):
        return (_reduce_to(g, ash) if na else None,
                _reduce_to(-g, bsh) if nb else None)

    return tape._emit(value, (a, b), backward_fn, "sub")


def multiply(a: Node, b: Node) -> Node:
    tape = _tape_of(a, b)
    _broadcast_check(a.value, b.value, "multiply")
    av, bv = a.value, b.value
    value = av * bv
    na, nb = a.needs_grad, b.needs_grad

    def backward_fn(g: np.ndarray):
        return (_reduce_to(g * bv, av.shape) if na else None,
                _reduce_to(g * av, bv.shape) if nb else None)

    return tape._emit(value, (a, b), backward_fn, "multiply")


def scale(a: Node, s: float) -> Node:
    value = a.value * s

    def backward_fn(g: np.ndarray):
        return (g * s,)

    return a.tape._emit(value, (a,), backward_fn, "scale")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # 0.5 * (tanh(x/2) + 1): exact, stable, and faster than expit here
    y = np.tanh(0.5 * x)
    y += 1.0
    y *= 0.5
    return y


def sigmoid(a: Node) -> Node:
    y = _sigmoid(a.value)

    def backward_fn(g: np.ndarray):
        return (g * y * (1.0 - y),)

    return a.tape._emit(y, (a,), backward_fn, "sigmoid")


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)

    def backward_fn(g: np.ndarray):
        return (g * (1.0 - y * y),)

    return a.tape._emit(y, (a,), backward_fn, "tanh")


def square(a: Node) -> Node:
    av = a.value
    value = av * av

    def backward_fn(g: np.ndarray):
        return (g * (2.0 * av),)

    return a.tape._emit(value, (a,), backward_fn, "square")


def absval(a: Node) -> Node:
    av = a.value
    value = np.abs(av)
    # Subgradient 0 at 0: actions are exactly zero only through masking,
    # where the gradient is discarded anyway.
    sgn = np.sign(av)

    def backward_fn(g: np.ndarray):
        return (g * sgn,)

    return a.tape._emit(value, (a,), backward_fn, "abs")


def symexp(a: Node) -> Node:
    """sign(x) * (exp(|x|) - 1), with derivative exp(|x|)."""
    av = a.value
    with np.errstate(over="ignore"):
        e = np.exp(np.abs(av))
    value = np.sign(av) * (e - 1.0)

    def backward_fn(g: np.ndarray):
        return (g * e,)

    return a.tape._emit(value, (a,), backward_fn, "symexp")


def concat(nodes: Sequence[Node], axis: int = 1) -> Node:
    if axis != 1:
        raise DiffError("concat supports axis=1 only")
    tape = _tape_of(*nodes)
    rows = nodes[0].value.shape[0]
    for n in nodes[1:]:
        if n.value.shape[0] != rows:
            raise DiffError("concat: row counts differ")
    widths = [n.value.shape[1] for n in nodes]
    value = np.concatenate([n.value for n in nodes], axis=1)
    offsets = np.cumsum([0] + widths)

    def backward_fn(g: np.ndarray):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(widths)))

    return tape._emit(value, tuple(nodes), backward_fn, "concat")


def slice_cols(a: Node, start: int, stop: int) -> Node:
    av = a.value
    if not (0 <= start < stop <= av.shape[1]):
        raise DiffError(f"slice_cols [{start}:{stop}] out of range for shape {av.shape}")
    value = av[:, start:stop]  # view; node values are never mutated
    shape = av.shape

    def backward_fn(g: np.ndarray):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return a.tape._emit(value, (a,), backward_fn, "slice")


def slice_rows(a: Node, start: int, stop: int) -> Node:
    av = a.value
    if not (0 <= start < stop <= av.shape[0]):
        raise DiffError(f"slice_rows [{start}:{stop}] out of range for shape {av.shape}")
    value = av[start:stop, :].copy()
    shape = av.shape

    def backward_fn(g: np.ndarray):
        out = np.zeros(shape)
        out[start:stop, :] = g
        return (out,)

    return a.tape._emit(value, (a,), backward_fn, "slice")


def _reduction(a: Node, axis: int | None, op: str) -> tuple[np.ndarray, tuple]:
    av = a.value
    if axis is None:
        value = np.array([[av.sum()]])
    elif axis in (0, 1):
        value = av.sum(axis=axis, keepdims=True)
    else:
        raise DiffError(f"{op}: axis must be None, 0 or 1")
    return value, av.shape


def total(a: Node, axis: int | None = None) -> Node:
    """Sum over all entries (axis=None), rows (axis=0) or columns (axis=1)."""
    value, shape = _reduction(a, axis, "sum")

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g, shape).copy() if g.shape != shape else g,)

    return a.tape._emit(value, (a,), backward_fn, "sum")


def mean(a: Node, axis: int | None = None) -> Node:
    value, shape = _reduction(a, axis, "mean")
    count = shape[0] * shape[1] if axis is None else shape[axis]
    value = value / count

    def backward_fn(g: np.ndarray):
        return (np.broadcast_to(g / count, shape).copy(),)

    return a.tape._emit(value, (a,), backward_fn, "mean")


def variance(a: Node) -> Node:
    """Unbiased sample variance over rows; output shape (1, cols)."""
    av = a.value
    n = av.shape[0]
    if n < 2:
        raise DiffError("variance needs at least 2 rows")
    centered = av - av.mean(axis=0, keepdims=True)
    value = (centered * centered).sum(axis=0, keepdims=True) / (n - 1)

    def backward_fn(g: np.ndarray):
        # d var / d x_i = 2 (x_i - mean) / (n - 1); the mean term cancels.
        return (g * (2.0 / (n - 1)) * centered,)

    return a.tape._emit(value, (a,), backward_fn, "variance")


def rms_normalize(a: Node, gain: Node) -> Node:
    """x * gain / sqrt(mean(x^2, axis=1) + eps), gain broadcast over rows."""
    av, gv = a.value, gain.value
    if gv.shape != (1, av.shape[1]):
        raise DiffError(f"rms_normalize gain shape {gv.shape} != (1, {av.shape[1]})")
    n = av.shape[1]
    ms = np.einsum("ij,ij->i", av, av)[:, None] / n
    r = 1.0 / np.sqrt(ms + RMS_EPS)
    xhat = av * r
    value = xhat * gv
    tape = _tape_of(a, gain)
    na, ng = a.needs_grad, gain.needs_grad

    def backward_fn(g: np.ndarray):
        da = dgain = None
        if na:
            dxhat = g * gv
            # r depends on x through mean(x^2): dr/dx = -r^3 x / n
            row = np.einsum("ij,ij->i", dxhat, av)[:, None]
            da = dxhat * r - (r ** 3 / n) * av * row
        if ng:
            dgain = np.einsum("ij,ij->j", g, xhat)[None, :]
        return da, dgain

    return tape._emit(value, (a, gain), backward_fn, "rms_normalize")


def affine(x: Node, w: Node, channel: HookChannel | None = None) -> Node:
    """Bias-augmented linear layer: output = [x, 1] @ w.T.

    ``w`` has shape (n_out, n_in + 1); the trailing column is the bias.
    When a hook channel is given, the augmented input is recorded at
    forward time and the pre-activation gradient at backward time.
    """
    tape = _tape_of(x, w)
    xv, wv = x.value, w.value
    if wv.shape[1] != xv.shape[1] + 1:
        raise DiffError(f"affine: weight shape {wv.shape} incompatible with input {xv.shape}")
    aug = np.empty((xv.shape[0], xv.shape[1] + 1))
    aug[:, :-1] = xv
    aug[:, -1] = 1.0
    value = aug @ wv.T
    nx, nw = x.needs_grad, w.needs_grad

    node_ref: list[Node] = []

    def backward_fn(g: np.ndarray):
        if channel is not None:
            channel._record_grad(node_ref[0].idx, g)
        dx = (g @ wv)[:, :-1] if nx else None
        dw = g.T @ aug if nw else None
        return dx, dw

    node = tape._emit(value, (x, w), backward_fn, "affine")
    node_ref.append(node)
    if channel is not None:
        channel._record_input(node.idx, aug)
    return node


def lstm_cell(x: Node, hc_prev: Node, w: Node, channel: HookChannel | None = None) -> Node:
    """Fused standard LSTM cell; the output stacks [h_new | c_new].

    ``x`` is the (batch, H) block input, ``hc_prev`` the (batch, 2H) stacked
    previous state, ``w`` the (4H, 2H + 1) bias-augmented gate matrix with
    gate order (input, forget, cell, output). The stacked gate
    pre-activation is the layer's hook point, so the whole cell forms one
    Kronecker curvature block. Mathematically this is the composition of
    the affine / sigmoid / tanh / multiply / add primitives; it is fused
    because the cell dominates the unroll's node count.
    """
    tape = _tape_of(x, hc_prev, w)
    xv, hcv, wv = x.value, hc_prev.value, w.value
    batch, h_dim = xv.shape
    if hcv.shape != (batch, 2 * h_dim) or wv.shape != (4 * h_dim, 2 * h_dim + 1):
        raise DiffError(f"lstm_cell: shapes x{xv.shape}, hc{hcv.shape}, w{wv.shape} inconsistent")
    h3 = 3 * h_dim
    c_prev = hcv[:, h_dim:]
    aug = np.empty((batch, 2 * h_dim + 1))
    aug[:, :h_dim] = xv
    aug[:, h_dim:-1] = hcv[:, :h_dim]
    aug[:, -1] = 1.0
    # gate row order: input, forget, output (sigmoid block), then cell (tanh)
    pre = aug @ wv.T
    sig = _sigmoid(pre[:, :h3])
    i_g = sig[:, :h_dim]
    f_g = sig[:, h_dim:2 * h_dim]
    o_g = sig[:, 2 * h_dim:]
    g_g = np.tanh(pre[:, h3:])
    c_new = f_g * c_prev
    c_new += i_g * g_g
    tanh_c = np.tanh(c_new)
    value = np.empty((batch, 2 * h_dim))
    np.multiply(o_g, tanh_c, out=value[:, :h_dim])
    value[:, h_dim:] = c_new
    nx, nhc, nw = x.needs_grad, hc_prev.needs_grad, w.needs_grad

    node_ref: list[Node] = []

    def backward_fn(g: np.ndarray):
        dh = g[:, :h_dim]
        # dc = dc_ext + dh * o * (1 - tanh(c)^2)
        dc = tanh_c * tanh_c
        np.subtract(1.0, dc, out=dc)
        dc *= dh
        dc *= o_g
        dc += g[:, h_dim:]
        d_pre = np.empty_like(pre)
        dsig = d_pre[:, :h3]
        np.subtract(1.0, sig, out=dsig)
        dsig *= sig  # s (1 - s)
        dsig[:, :h_dim] *= dc
        dsig[:, :h_dim] *= g_g
        dsig[:, h_dim:2 * h_dim] *= dc
        dsig[:, h_dim:2 * h_dim] *= c_prev
        dsig[:, 2 * h_dim:] *= dh
        dsig[:, 2 * h_dim:] *= tanh_c
        dtanh = d_pre[:, h3:]
        np.multiply(g_g, g_g, out=dtanh)
        np.subtract(1.0, dtanh, out=dtanh)
        dtanh *= dc
        dtanh *= i_g
        if channel is not None:
            channel._record_grad(node_ref[0].idx, d_pre)
        dx = d_hc = dw = None
        if nx or nhc:
            d_aug = d_pre @ wv
            if nhc:
                d_hc = np.empty((batch, 2 * h_dim))
                d_hc[:, :h_dim] = d_aug[:, h_dim:-1]
                np.multiply(dc, f_g, out=d_hc[:, h_dim:])
            if nx:
                dx = d_aug[:, :h_dim]
        if nw:
            dw = d_pre.T @ aug
        return dx, d_hc, dw

    node = tape._emit(value, (x, hc_prev, w), backward_fn, "lstm_cell")
    node_ref.append(node)
    if channel is not None:
        channel._record_input(node.idx, aug)
    return node


def hedge_accumulate(action_nodes: Sequence[Node], returns: np.ndarray,
                     cost_row: np.ndarray) -> Node:
    """Fused per-path hedging aggregates over a full unroll.

    Column 0 collects terminal gains sum_t <u_t, r_t>, column 1 the L1
    trading costs sum_t <|u_t|, c>. ``returns`` is the (batch, T, d)
    constant tensor, ``cost_row`` the (d,) cost vector. One tape node
    replaces six per step.
    """
    tape = _tape_of(*action_nodes)
    n_steps = len(action_nodes)
    batch, d = action_nodes[0].value.shape
    if returns.shape != (batch, n_steps, d):
        raise DiffError(f"hedge_accumulate: returns shape {returns.shape} unexpected")
    value = np.zeros((batch, 2))
    signs = []
    for t, u_t in enumerate(action_nodes):
        uv = u_t.value
        value[:, 0] += np.einsum("bd,bd->b", uv, returns[:, t, :])
        value[:, 1] += np.abs(uv) @ cost_row
        signs.append(np.sign(uv))

    def backward_fn(g: np.ndarray):
        g_gain = g[:, 0:1]
        g_cost = g[:, 1:2]
        return tuple(g_gain * returns[:, t, :] + g_cost * (signs[t] * cost_row)
                     for t in range(n_steps))

    return tape._emit(value, tuple(action_nodes), backward_fn, "hedge_accumulate")


def dot(a: Node, b: Node) -> Node:
    """Scalar inner product of two equal-shape matrices."""
    return total(multiply(a, b))


# ---------------------------------------------------------------------------
# backward pass


def backward(seed: Node, hooks: Iterable[HookChannel] = ()) -> dict[str, Matrix64]:
    """Reverse traversal from a scalar seed; returns parameter gradients.

    Channels in ``hooks`` record pre-activation gradients for their
    affine firings. Nodes are released as they are consumed, so a tape
    cannot be differentiated twice.
    """
    tape = seed.tape
    if not tape.record:
        raise DiffError("backward on a non-recording tape")
    if seed.value.shape != (1, 1):
        raise DiffError(f"backward seed must be scalar (1, 1), got {seed.value.shape}")

    hooks = tuple(hooks)
    for ch in hooks:
        ch._armed = True
        ch._g.clear()
    try:
        seed.grad = np.ones((1, 1))
        for node in reversed(tape.nodes[: seed.idx + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.needs_grad:
                    continue
                if parent.grad is None:
                    # May alias a sibling's deposit; don't mutate in place
                    # until this node owns a freshly allocated buffer.
                    parent.grad = g
                    parent.grad_owned = False
                elif parent.grad_owned:
                    parent.grad += g
                else:
                    parent.grad = parent.grad + g
                    parent.grad_owned = True
            # Free what the rest of the traversal no longer needs.
            node.grad = None
            node.backward_fn = None
            node.parents = ()
    finally:
        for ch in hooks:
            ch._armed = False

    out: dict[str, Matrix64] = {}
    for name, node in tape.params.items():
        out[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
        node.grad = None
    return out
