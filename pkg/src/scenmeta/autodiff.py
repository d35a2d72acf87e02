"""Minimal reverse-mode autodiff over dense float64 arrays.

The tape is rebuilt per forward pass (define-by-run), which keeps
variable-length learning episodes simple: whatever ops actually ran are
exactly what gets differentiated.  Tensors are thin wrappers around numpy
arrays; an op records a tape node only when at least one input requires
gradients.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GraphError",
    "tensor",
    "forward_op",
    "backward",
    "detach",
    "matmul",
    "add",
    "sub",
    "elementwise_mul",
    "concat",
    "relu",
    "max_with_zero",
    "sigmoid",
    "tanh",
    "mean",
    "l2_norm",
    "scale",
    "reshape",
    "affine",
    "dense_sigmoid",
    "block_affine",
    "block_dense_sigmoid",
    "stack_rows",
    "slice_rows",
    "gate_update",
    "slice_cols",
    "lstm_cell",
    "pack_groups",
    "group_slice",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class GraphError(ValueError):
    """Raised when backward() is called on an unsuitable tensor."""


class Node:
    __slots__ = ("kind", "input_ids", "backward_fn")

    def __init__(self, kind, input_ids, backward_fn):
        self.kind = kind
        self.input_ids = input_ids
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; inputs of every node precede it."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, kind, input_ids, backward_fn):
        self.nodes.append(Node(kind, input_ids, backward_fn))
        return len(self.nodes) - 1

    def leaf(self, values):
        """Register a gradient-carrying leaf on this tape."""
        v = np.ascontiguousarray(values, dtype=np.float64)
        node_id = self._append("leaf", (), None)
        return Tensor(v, requires_grad=True, tape=self, node_id=node_id)


class Tensor:
    __slots__ = ("values", "requires_grad", "tape", "node_id")

    def __init__(self, values, requires_grad=False, tape=None, node_id=None):
        if isinstance(values, Tensor):
            raise TypeError("values must be array-like, not Tensor")
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.values.shape

    def item(self):
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def tensor(values):
    """Constant (non-differentiable) tensor."""
    return Tensor(np.asarray(values, dtype=np.float64))


def detach(t):
    """Copy of ``t`` with no gradient requirement and no tape lineage."""
    return Tensor(t.values.copy())


def _as_tensor(x):
    return x if isinstance(x, Tensor) else tensor(x)


def _record(kind, inputs, out_values, backward_fn):
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise GraphError(f"{kind}: inputs belong to different tapes")
    requires = any(t.requires_grad for t in inputs)
    if tape is None or not requires:
        return Tensor(out_values, requires_grad=requires)
    input_ids = tuple(t.node_id if t.tape is tape else None for t in inputs)
    node_id = tape._append(kind, input_ids, backward_fn)
    return Tensor(out_values, requires_grad=True, tape=tape, node_id=node_id)


def _shape_err(kind, *shapes):
    return ShapeError(f"{kind}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim == 2 and bv.ndim == 2:
        if av.shape[1] != bv.shape[0]:
            raise _shape_err("matmul", av.shape, bv.shape)
    elif av.ndim == 3 and bv.ndim == 3:
        if av.shape[0] != bv.shape[0] or av.shape[2] != bv.shape[1]:
            raise _shape_err("matmul", av.shape, bv.shape)
    else:
        raise _shape_err("matmul", av.shape, bv.shape)
    out = av @ bv

    def bwd(g):
        return g @ bv.swapaxes(-1, -2), av.swapaxes(-1, -2) @ g

    return _record("matmul", (a, b), out, bwd)


def _unbroadcast(g, shape):
    # Sum gradient over axes that were broadcast in the forward pass.
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    """Elementwise sum; the second operand may be a bias broadcast to rows."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    try:
        out = av + bv
    except ValueError:
        raise _shape_err("add", av.shape, bv.shape) from None
    if out.shape != av.shape:
        raise _shape_err("add", av.shape, bv.shape)

    def bwd(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return _record("add", (a, b), out, bwd)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise _shape_err("sub", av.shape, bv.shape)
    out = av - bv

    def bwd(g):
        return g, -g

    return _record("sub", (a, b), out, bwd)


def elementwise_mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        raise _shape_err("elementwise_mul", av.shape, bv.shape)
    out = av * bv

    def bwd(g):
        return g * bv, g * av

    return _record("elementwise_mul", (a, b), out, bwd)


def concat(a, b, axis=-1):
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.values, b.values
    if av.ndim != bv.ndim:
        raise _shape_err("concat", av.shape, bv.shape)
    try:
        out = np.concatenate([av, bv], axis=axis)
    except ValueError:
        raise _shape_err("concat", av.shape, bv.shape) from None
    split = av.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split], axis=axis)
        return ga, gb

    return _record("concat", (a, b), out, bwd)


def max_with_zero(a):
    a = _as_tensor(a)
    av = a.values
    out = np.maximum(av, 0.0)

    def bwd(g):
        # subgradient at exactly 0 is defined as 0
        return (g * (av > 0.0),)

    return _record("max_with_zero", (a,), out, bwd)


def relu(a):
    return max_with_zero(a)


def sigmoid(a):
    a = _as_tensor(a)
    av = a.values
    out = _sigmoid_values(av)

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, bwd)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.values)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (a,), out, bwd)


def mean(a):
    a = _as_tensor(a)
    av = a.values
    if av.size == 0:
        raise _shape_err("mean", av.shape)
    out = np.float64(av.mean())
    scale_factor = 1.0 / av.size

    def bwd(g):
        return (np.full_like(av, float(g) * scale_factor),)

    return _record("mean", (a,), out, bwd)


def l2_norm(a):
    a = _as_tensor(a)
    av = a.values
    out = np.float64(np.sqrt(np.sum(av * av)))

    def bwd(g):
        if out == 0.0:
            return (np.zeros_like(av),)
        return (float(g) / out * av,)

    return _record("l2_norm", (a,), out, bwd)


def scale(a, s):
    a = _as_tensor(a)
    s = float(s)
    out = a.values * s

    def bwd(g):
        return (g * s,)

    return _record("scale", (a,), out, bwd)


def reshape(a, shape):
    a = _as_tensor(a)
    in_shape = a.values.shape
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise _shape_err("reshape", in_shape, tuple(shape)) from None

    def bwd(g):
        return (g.reshape(in_shape),)

    return _record("reshape", (a,), out, bwd)


def _sigmoid_values(x):
    # expit is overflow-safe (evaluates via exp(-|x|) internally)
    return expit(x)


def lstm_cell(z, hc, hidden=None):
    """Fused LSTM cell nonlinearity on a packed ``[h | c]`` state.

    ``z`` holds the four gate pre-activations side by side (input, forget,
    candidate, output), each ``hidden`` wide; ``hc`` is the previous hidden
    and cell state concatenated (only the cell half is read here — the
    hidden half feeds ``z`` upstream).  Returns the new packed state
    ``[h2 | c2]``.  One op instead of a dozen keeps step-heavy episode
    tapes short.
    """
    z, hc = _as_tensor(z), _as_tensor(hc)
    zv, hcv = z.values, hc.values
    if hidden is None:
        hidden = hcv.shape[-1] // 2
    if (
        zv.shape[-1] != 4 * hidden
        or hcv.shape[-1] != 2 * hidden
        or zv.shape[:-1] != hcv.shape[:-1]
    ):
        raise _shape_err("lstm_cell", zv.shape, hcv.shape)
    cv = hcv[..., hidden:]
    # one sigmoid over all four blocks: tanh(x) = 2*sigmoid(2x) - 1, so the
    # candidate block is doubled first and remapped after
    zs = zv.copy()
    zs[..., 2 * hidden : 3 * hidden] *= 2.0
    gates = _sigmoid_values(zs)
    gate_i = gates[..., :hidden]
    gate_f = gates[..., hidden : 2 * hidden]
    gate_g = 2.0 * gates[..., 2 * hidden : 3 * hidden] - 1.0
    gate_o = gates[..., 3 * hidden :]
    c2 = gate_f * cv + gate_i * gate_g
    tc2 = np.tanh(c2)
    h2 = gate_o * tc2
    out = np.concatenate([h2, c2], axis=-1)

    if not (z.requires_grad or hc.requires_grad):
        return _record("lstm_cell", (z, hc), out, None)

    # dz = (upstream per block) * factor, with factor = (other operand of
    # each gate's product) * (gate nonlinearity derivative); the sigmoid
    # derivative is s(1-s) and the candidate tanh derivative 1 - tanh^2
    # equals 4 s(1-s) of its (doubled-input) sigmoid.  The factor only
    # depends on forward values, so assemble it once here and leave the
    # backward pass two elementwise passes plus the block copies.
    factor = gates * (1.0 - gates)
    factor[..., 2 * hidden : 3 * hidden] *= 4.0
    other = np.empty_like(zv)
    other[..., :hidden] = gate_g
    other[..., hidden : 2 * hidden] = cv
    other[..., 2 * hidden : 3 * hidden] = gate_i
    other[..., 3 * hidden :] = tc2
    factor *= other
    dout_dc = gate_o * (1.0 - tc2 * tc2)

    def bwd(g):
        gh = g[..., :hidden]
        gc2 = g[..., hidden:] + gh * dout_dc
        gz = np.empty_like(zv)
        gz[..., :hidden] = gc2
        gz[..., hidden : 2 * hidden] = gc2
        gz[..., 2 * hidden : 3 * hidden] = gc2
        gz[..., 3 * hidden :] = gh
        gz *= factor
        ghc = np.zeros_like(hcv)
        ghc[..., hidden:] = gc2 * gate_f
        return gz, ghc

    return _record("lstm_cell", (z, hc), out, bwd)


def affine(x, w_x, h, w_h, b):
    """Fused ``x @ w_x + h @ w_h + b`` (one node per recurrent pre-activation)."""
    x, w_x, h, w_h, b = (_as_tensor(t) for t in (x, w_x, h, w_h, b))
    xv, wxv, hv, whv, bv = x.values, w_x.values, h.values, w_h.values, b.values
    try:
        out = xv @ wxv + hv @ whv + bv
    except ValueError:
        raise _shape_err("affine", xv.shape, wxv.shape, hv.shape, whv.shape, bv.shape) from None
    need = tuple(t.requires_grad for t in (x, w_x, h, w_h, b))

    def bwd(g):
        return (
            g @ wxv.swapaxes(-1, -2) if need[0] else None,
            xv.swapaxes(-1, -2) @ g if need[1] else None,
            g @ whv.swapaxes(-1, -2) if need[2] else None,
            hv.swapaxes(-1, -2) @ g if need[3] else None,
            _unbroadcast(g, bv.shape) if need[4] else None,
        )

    return _record("affine", (x, w_x, h, w_h, b), out, bwd)


def block_affine(x, w_x, hc, w_h, b, offsets):
    """Row-blocked ``x @ w_x + hc @ w_h + b`` with per-block weights.

    ``x`` (N, d_in) and ``hc`` (N, d_state) hold the rows of all blocks
    stacked; block ``g`` covers rows ``offsets[g]:offsets[g + 1]`` and is
    transformed by slice ``g`` of the stacked weights ``w_x`` (G, d_in, k),
    ``w_h`` (G, d_state, k) and ``b`` (G, 1, k).  One node per step for a
    whole family of per-group controllers, with no padding rows.
    """
    x, w_x, hc, w_h, b = (_as_tensor(t) for t in (x, w_x, hc, w_h, b))
    xv, wxv, hcv, whv, bv = x.values, w_x.values, hc.values, w_h.values, b.values
    n_blocks = len(offsets) - 1
    if (
        wxv.ndim != 3
        or whv.ndim != 3
        or bv.ndim != 3
        or wxv.shape[0] != n_blocks
        or whv.shape[0] != n_blocks
        or bv.shape[0] != n_blocks
        or xv.shape != (offsets[-1], wxv.shape[1])
        or hcv.shape != (offsets[-1], whv.shape[1])
    ):
        raise _shape_err("block_affine", xv.shape, wxv.shape, hcv.shape, whv.shape, bv.shape)
    out = np.empty((offsets[-1], wxv.shape[2]))
    for g in range(n_blocks):
        s, e = offsets[g], offsets[g + 1]
        out[s:e] = xv[s:e] @ wxv[g] + hcv[s:e] @ whv[g] + bv[g]
    need = tuple(t.requires_grad for t in (x, w_x, hc, w_h, b))

    def bwd(g):
        gx = np.empty_like(xv) if need[0] else None
        gwx = np.empty_like(wxv) if need[1] else None
        ghc = np.empty_like(hcv) if need[2] else None
        gwh = np.empty_like(whv) if need[3] else None
        gb = np.empty_like(bv) if need[4] else None
        for k in range(n_blocks):
            s, e = offsets[k], offsets[k + 1]
            gk = g[s:e]
            if need[0]:
                gx[s:e] = gk @ wxv[k].T
            if need[1]:
                gwx[k] = xv[s:e].T @ gk
            if need[2]:
                ghc[s:e] = gk @ whv[k].T
            if need[3]:
                gwh[k] = hcv[s:e].T @ gk
            if need[4]:
                gb[k, 0] = gk.sum(axis=0)
        return gx, gwx, ghc, gwh, gb

    return _record("block_affine", (x, w_x, hc, w_h, b), out, bwd)


def block_dense_sigmoid(x, w, b, offsets):
    """Row-blocked ``sigmoid(x @ w + b)`` with per-block weights (cf. block_affine)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xv, wv, bv = x.values, w.values, b.values
    n_blocks = len(offsets) - 1
    if (
        wv.ndim != 3
        or bv.ndim != 3
        or wv.shape[0] != n_blocks
        or bv.shape[0] != n_blocks
        or xv.shape != (offsets[-1], wv.shape[1])
    ):
        raise _shape_err("block_dense_sigmoid", xv.shape, wv.shape, bv.shape)
    out = np.empty((offsets[-1], wv.shape[2]))
    for g in range(n_blocks):
        s, e = offsets[g], offsets[g + 1]
        out[s:e] = xv[s:e] @ wv[g] + bv[g]
    out = _sigmoid_values(out)
    need = tuple(t.requires_grad for t in (x, w, b))

    def bwd(g):
        d = g * out * (1.0 - out)
        gx = np.empty_like(xv) if need[0] else None
        gw = np.empty_like(wv) if need[1] else None
        gb = np.empty_like(bv) if need[2] else None
        for k in range(n_blocks):
            s, e = offsets[k], offsets[k + 1]
            dk = d[s:e]
            if need[0]:
                gx[s:e] = dk @ wv[k].T
            if need[1]:
                gw[k] = xv[s:e].T @ dk
            if need[2]:
                gb[k, 0] = dk.sum(axis=0)
        return gx, gw, gb

    return _record("block_dense_sigmoid", (x, w, b), out, bwd)


def stack_rows(tensors):
    """Flatten each tensor to a column and stack them as consecutive rows."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("stack_rows needs at least one tensor")
    sizes = [t.values.size for t in tensors]
    out = np.empty((sum(sizes), 1))
    pos = 0
    for t, n in zip(tensors, sizes):
        out[pos : pos + n, 0] = t.values.ravel()
        pos += n

    def bwd(g):
        parts = []
        pos = 0
        for t, n in zip(tensors, sizes):
            parts.append(g[pos : pos + n, 0].reshape(t.values.shape))
            pos += n
        return tuple(parts)

    return _record("stack_rows", tuple(tensors), out, bwd)


def slice_rows(a, start, stop):
    """Rows [start, stop) along the first axis."""
    a = _as_tensor(a)
    av = a.values
    if not 0 <= start < stop <= av.shape[0]:
        raise _shape_err("slice_rows", av.shape, (start, stop))
    out = av[start:stop]

    def bwd(g):
        full = np.zeros_like(av)
        full[start:stop] = g
        return (full,)

    return _record("slice_rows", (a,), out, bwd)


def dense_sigmoid(x, w, b):
    """Fused ``sigmoid(x @ w + b)`` (gate/stop heads in a single node)."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    xv, wv, bv = x.values, w.values, b.values
    try:
        out = _sigmoid_values(xv @ wv + bv)
    except ValueError:
        raise _shape_err("dense_sigmoid", xv.shape, wv.shape, bv.shape) from None

    def bwd(g):
        d = g * out * (1.0 - out)
        return d @ wv.swapaxes(-1, -2), xv.swapaxes(-1, -2) @ d, _unbroadcast(d, bv.shape)

    return _record("dense_sigmoid", (x, w, b), out, bwd)


def gate_update(theta, heads, grad):
    """Fused learned update ``beta * theta - alpha * grad``.

    ``heads`` holds the (alpha, beta) gate columns side by side; ``grad``
    is a constant array (the detached inner gradient).
    """
    theta, heads = _as_tensor(theta), _as_tensor(heads)
    tv, hv = theta.values, heads.values
    gv = np.asarray(grad, dtype=np.float64)
    if hv.shape != tv.shape[:-1] + (2,) or gv.shape != tv.shape or tv.shape[-1] != 1:
        raise _shape_err("gate_update", tv.shape, hv.shape, gv.shape)
    alpha = hv[..., 0:1]
    beta = hv[..., 1:2]
    out = beta * tv - alpha * gv

    def bwd(g):
        gh = np.empty_like(hv)
        gh[..., 0:1] = -g * gv
        gh[..., 1:2] = g * tv
        return g * beta, gh

    return _record("gate_update", (theta, heads), out, bwd)


def slice_cols(a, start, stop):
    """Columns [start, stop) along the last axis."""
    a = _as_tensor(a)
    av = a.values
    if not 0 <= start < stop <= av.shape[-1]:
        raise _shape_err("slice_cols", av.shape, (start, stop))
    out = av[..., start:stop]

    def bwd(g):
        full = np.zeros_like(av)
        full[..., start:stop] = g
        return (full,)

    return _record("slice_cols", (a,), out, bwd)


def pack_groups(tensors, n_rows):
    """Stack flattened tensors as rows of a (G, n_rows, 1) block, zero-padded.

    Used to evaluate per-group controllers in one batched op chain.
    """
    sizes = [t.values.size for t in tensors]
    if max(sizes) > n_rows:
        raise _shape_err("pack_groups", (max(sizes),), (n_rows,))
    out = np.zeros((len(tensors), n_rows, 1), dtype=np.float64)
    for g, t in enumerate(tensors):
        out[g, : sizes[g], 0] = t.values.ravel()

    def bwd(grad):
        return tuple(
            grad[g, : sizes[g], 0].reshape(t.values.shape) for g, t in enumerate(tensors)
        )

    return _record("pack_groups", tuple(tensors), out, bwd)


def group_slice(a, group, n_rows):
    """Rows [0, n_rows) of block ``group`` from a (G, N, k) stacked tensor."""
    a = _as_tensor(a)
    av = a.values
    if av.ndim != 3 or not (0 <= group < av.shape[0]) or n_rows > av.shape[1]:
        raise _shape_err("group_slice", av.shape, (group, n_rows))
    out = av[group, :n_rows, :]

    def bwd(g):
        full = np.zeros_like(av)
        full[group, :n_rows, :] = g
        return (full,)

    return _record("group_slice", (a,), out, bwd)


_OPS = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": elementwise_mul,
    "concat": concat,
    "relu": relu,
    "max_with_zero": max_with_zero,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "mean": mean,
    "l2_norm": l2_norm,
    "scale": scale,
    "reshape": reshape,
    "affine": affine,
    "dense_sigmoid": dense_sigmoid,
    "block_affine": block_affine,
    "block_dense_sigmoid": block_dense_sigmoid,
    "stack_rows": stack_rows,
    "slice_rows": slice_rows,
    "gate_update": gate_update,
    "slice_cols": slice_cols,
    "lstm_cell": lstm_cell,
}


def forward_op(kind, *inputs, **kwargs):
    """Dispatch an op by name."""
    if kind not in _OPS:
        raise ValueError(f"unknown op kind: {kind!r}")
    return _OPS[kind](*inputs, **kwargs)


def backward(loss):
    """Gradients of a scalar ``loss`` w.r.t. every node that feeds it.

    Returns a map ``node_id -> Tensor``; nodes outside the ancestry of the
    loss simply have no entry (their gradient is zero).
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.values.size != 1:
        raise GraphError(f"backward expects a scalar loss, got shape {loss.values.shape}")
    if loss.tape is None or loss.node_id is None:
        raise GraphError("loss tensor is not recorded on a tape")
    nodes = loss.tape.nodes
    top = loss.node_id
    grads = [None] * (top + 1)
    grads[top] = np.ones_like(loss.values)
    for i in range(top, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.backward_fn is None:
            continue
        for j, gj in zip(node.input_ids, node.backward_fn(g)):
            if j is None or gj is None:
                continue
            if grads[j] is None:
                grads[j] = np.asarray(gj, dtype=np.float64)
            else:
                grads[j] = grads[j] + gj
    return {i: Tensor(g) for i, g in enumerate(grads) if g is not None}
