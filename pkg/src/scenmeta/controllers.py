"""Learned update and stop controllers.

Each parameter group of the recommender owns one update controller: an LSTM
cell applied coordinate-wise (weights shared within the group, hidden/cell
state kept per coordinate) whose two sigmoid heads emit the input gate
(alpha, a learned learning rate) and the forget gate (beta, a learned
parameter-retention factor).  A single stop controller LSTM watches the
training loss and gradient norm and emits the per-step stop probability.

All scalar controller inputs pass through the log-magnitude/sign
preprocessing, so both tiny gradients and large losses stay in a range an
LSTM can digest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

UPDATE_INPUT_WIDTH = 6  # (grad, loss, param) x 2 preprocessed components
UPDATE_HIDDEN = 16
STOP_INPUT_WIDTH = 4  # (loss, grad_norm) x 2 preprocessed components
STOP_HIDDEN = 18

PREPROCESS_P = 10.0

_LSTM_KEYS = (
    "w_xi",
    "w_hi",
    "b_i",
    "w_xf",
    "w_hf",
    "b_f",
    "w_xg",
    "w_hg",
    "b_g",
    "w_xo",
    "w_ho",
    "b_o",
)
UPDATE_KEYS = _LSTM_KEYS + ("w_alpha", "b_alpha", "w_beta", "b_beta")
STOP_KEYS = _LSTM_KEYS + ("w_stop", "b_stop")

ALPHA_HEAD_BIAS_INIT = -5.0
BETA_HEAD_BIAS_INIT = 5.0
STOP_HEAD_BIAS_INIT = -4.0
WEIGHT_INIT_BOUND = 0.01


@dataclass
class UpdateControllerParams:
    arrays: dict

    def copy(self):
        return UpdateControllerParams({k: v.copy() for k, v in self.arrays.items()})


@dataclass
class StopControllerParams:
    arrays: dict

    def copy(self):
        return StopControllerParams({k: v.copy() for k, v in self.arrays.items()})


def _init_lstm_arrays(rng, input_width, hidden):
    arrays = {}
    for gate in ("i", "f", "g", "o"):
        arrays[f"w_x{gate}"] = rng.uniform(
            -WEIGHT_INIT_BOUND, WEIGHT_INIT_BOUND, size=(input_width, hidden)
        )
        arrays[f"w_h{gate}"] = rng.uniform(
            -WEIGHT_INIT_BOUND, WEIGHT_INIT_BOUND, size=(hidden, hidden)
        )
        arrays[f"b_{gate}"] = np.zeros(hidden)
    return arrays


def init_update_controller(rng):
    """Near-identity start: beta ~ sigmoid(+5), alpha ~ sigmoid(-5)."""
    arrays = _init_lstm_arrays(rng, UPDATE_INPUT_WIDTH, UPDATE_HIDDEN)
    arrays["w_alpha"] = rng.uniform(-WEIGHT_INIT_BOUND, WEIGHT_INIT_BOUND, size=(UPDATE_HIDDEN, 1))
    arrays["b_alpha"] = np.full(1, ALPHA_HEAD_BIAS_INIT)
    arrays["w_beta"] = rng.uniform(-WEIGHT_INIT_BOUND, WEIGHT_INIT_BOUND, size=(UPDATE_HIDDEN, 1))
    arrays["b_beta"] = np.full(1, BETA_HEAD_BIAS_INIT)
    return UpdateControllerParams(arrays)


def init_stop_controller(rng):
    """Low initial stop probability (~ sigmoid(-4)) so episodes can learn."""
    arrays = _init_lstm_arrays(rng, STOP_INPUT_WIDTH, STOP_HIDDEN)
    arrays["w_stop"] = rng.uniform(-WEIGHT_INIT_BOUND, WEIGHT_INIT_BOUND, size=(STOP_HIDDEN, 1))
    arrays["b_stop"] = np.full(1, STOP_HEAD_BIAS_INIT)
    return StopControllerParams(arrays)


# ---------------------------------------------------------------------------
# input preprocessing


def preprocess(x, p=PREPROCESS_P):
    """Two-branch magnitude/sign encoding of a controller input.

    |x| >= e^-p  ->  (log|x| / p, sign(x));  otherwise  ->  (-1, e^p * x).
    """
    arr = np.asarray(x, dtype=np.float64)
    absx = np.abs(arr)
    big = absx >= np.exp(-p)
    safe = np.where(big, absx, 1.0)
    mag = np.where(big, np.log(safe) / p, -1.0)
    sgn = np.where(big, np.sign(arr), np.exp(p) * arr)
    if np.isscalar(x) or arr.ndim == 0:
        return float(mag), float(sgn)
    return mag, sgn


def update_features(grad, loss, param, p=PREPROCESS_P):
    """Per-coordinate controller input: preprocessed (grad, loss, param)."""
    grad = np.asarray(grad, dtype=np.float64)
    param = np.asarray(param, dtype=np.float64)
    feats = np.empty(grad.shape + (UPDATE_INPUT_WIDTH,), dtype=np.float64)
    feats[..., 0], feats[..., 1] = preprocess(grad, p)
    loss_a, loss_b = preprocess(float(loss), p)
    feats[..., 2] = loss_a
    feats[..., 3] = loss_b
    feats[..., 4], feats[..., 5] = preprocess(param, p)
    return feats


def stop_features(loss, grad_norm, p=PREPROCESS_P):
    feats = np.empty((1, STOP_INPUT_WIDTH), dtype=np.float64)
    feats[0, 0], feats[0, 1] = preprocess(float(loss), p)
    feats[0, 2], feats[0, 3] = preprocess(float(grad_norm), p)
    return feats


# ---------------------------------------------------------------------------
# LSTM plumbing (works for per-group 2-D and stacked 3-D operands alike)
#
# At run time the four gate weight blocks are fused into single matrices
# (column order: input, forget, candidate, output) and the two gate heads
# into one two-column head, so each LSTM step costs two matmuls instead of
# eight.  The hidden and cell state travel packed as one [h | c] tensor;
# every matrix that consumes h alone is row-padded with structural zeros
# for the cell half, and the padded rows are trimmed again when gradients
# are mapped back.  The fused layout is runtime-only; parameters are
# stored, updated, and checkpointed under their per-gate keys.

FUSED_LSTM_KEYS = ("w_x", "w_h", "b")
_GATE_ORDER = ("i", "f", "g", "o")


def _pad_state_rows(w):
    # rows for the cell half of the packed [h | c] state never contribute
    return np.concatenate([w, np.zeros_like(w)], axis=0)


def fuse_lstm_arrays(arrays):
    return {
        "w_x": np.concatenate([arrays[f"w_x{g}"] for g in _GATE_ORDER], axis=1),
        "w_h": _pad_state_rows(
            np.concatenate([arrays[f"w_h{g}"] for g in _GATE_ORDER], axis=1)
        ),
        "b": np.concatenate([arrays[f"b_{g}"] for g in _GATE_ORDER]),
    }


def fuse_update_arrays(arrays):
    fused = fuse_lstm_arrays(arrays)
    fused["w_head"] = _pad_state_rows(
        np.concatenate([arrays["w_alpha"], arrays["w_beta"]], axis=1)
    )
    fused["b_head"] = np.concatenate([arrays["b_alpha"], arrays["b_beta"]])
    return fused


def fuse_stop_arrays(arrays):
    fused = fuse_lstm_arrays(arrays)
    fused["w_stop"] = _pad_state_rows(arrays["w_stop"])
    fused["b_stop"] = arrays["b_stop"]
    return fused


def _unfuse_lstm_grads(fused, hidden):
    out = {}
    w_h = fused["w_h"][..., :hidden, :]
    for k, g in enumerate(_GATE_ORDER):
        cols = slice(k * hidden, (k + 1) * hidden)
        out[f"w_x{g}"] = fused["w_x"][..., cols]
        out[f"w_h{g}"] = w_h[..., cols]
        out[f"b_{g}"] = fused["b"][..., cols]
    return out


def unfuse_update_grads(fused, hidden=UPDATE_HIDDEN):
    """Map fused-layout gradient arrays back to per-gate parameter keys."""
    out = _unfuse_lstm_grads(fused, hidden)
    w_head = fused["w_head"][..., :hidden, :]
    out["w_alpha"] = w_head[..., 0:1]
    out["w_beta"] = w_head[..., 1:2]
    out["b_alpha"] = fused["b_head"][..., 0:1]
    out["b_beta"] = fused["b_head"][..., 1:2]
    return out


def unfuse_stop_grads(fused, hidden=STOP_HIDDEN):
    out = _unfuse_lstm_grads(fused, hidden)
    out["w_stop"] = fused["w_stop"][..., :hidden, :]
    out["b_stop"] = fused["b_stop"]
    return out


def as_tensor_dict(arrays, tape=None):
    """Wrap (fused) controller arrays as tape leaves or constants."""
    out = {}
    for key, arr in arrays.items():
        out[key] = tape.leaf(arr) if tape is not None else ad.tensor(arr)
    return out


def lstm_step(ts, x, hc):
    """One recurrence on the packed [h | c] state; returns the new state."""
    z = ad.affine(x, ts["w_x"], hc, ts["w_h"], ts["b"])
    return ad.lstm_cell(z, hc)


def zero_update_state(n_coords):
    return ad.tensor(np.zeros((n_coords, 2 * UPDATE_HIDDEN)))


def zero_stop_state():
    return ad.tensor(np.zeros((1, 2 * STOP_HIDDEN)))


def _gate_heads(ts, hc2):
    heads = ad.dense_sigmoid(hc2, ts["w_head"], ts["b_head"])
    return ad.slice_cols(heads, 0, 1), ad.slice_cols(heads, 1, 2)


def update_gates(ctrl, state, grad, loss, param):
    """Input/forget gates for one parameter group.

    ``grad`` and ``param`` are flat per-coordinate arrays; ``state`` is the
    per-coordinate packed [h | c] tensor.  ``ctrl`` may be an
    UpdateControllerParams or a dict of fused-layout tensors.  Returns
    (alpha, beta, new_state) where the gates are (n, 1) tensors strictly
    inside (0, 1) for finite logits.
    """
    if isinstance(ctrl, UpdateControllerParams):
        ctrl = as_tensor_dict(fuse_update_arrays(ctrl.arrays))
    grad = np.asarray(grad, dtype=np.float64).ravel()
    param = np.asarray(param, dtype=np.float64).ravel()
    if grad.shape != param.shape:
        raise ad.ShapeError(f"update_gates: grad {grad.shape} vs param {param.shape}")
    if state.values.shape[0] != grad.shape[0]:
        raise ad.ShapeError(
            f"update_gates: state rows {state.values.shape[0]} vs group size {grad.shape[0]}"
        )
    x = ad.tensor(update_features(grad, loss, param))
    hc2 = lstm_step(ctrl, x, state)
    alpha, beta = _gate_heads(ctrl, hc2)
    return alpha, beta, hc2


def stop_probability(ctrl, state, loss, grad_norm):
    """Stop probability from one stop-controller step: (p, new_state)."""
    if grad_norm < 0:
        raise ValueError(f"grad_norm must be >= 0, got {grad_norm}")
    if isinstance(ctrl, StopControllerParams):
        ctrl = as_tensor_dict(fuse_stop_arrays(ctrl.arrays))
    x = ad.tensor(stop_features(loss, grad_norm))
    hc2 = lstm_step(ctrl, x, state)
    p = ad.dense_sigmoid(hc2, ctrl["w_stop"], ctrl["b_stop"])
    return p, hc2


def apply_update(theta_prev, grad, alpha, beta):
    """One learned update: beta * theta - alpha * grad (elementwise)."""
    return ad.sub(ad.elementwise_mul(beta, theta_prev), ad.elementwise_mul(alpha, grad))


# ---------------------------------------------------------------------------
# stacked evaluation: all groups of one size bucket in a single op chain


def stack_controllers(ctrls, tape=None):
    """Stack per-group fused controller arrays along a leading group axis.

    Biases become (G, 1, k) so they broadcast over the padded coordinate
    rows exactly like the per-group (k,) biases broadcast over (n, k).
    """
    fused = [fuse_update_arrays(c.arrays) for c in ctrls]
    stacked = {}
    for key in fused[0]:
        block = np.stack([f[key] for f in fused])
        if block.ndim == 2:  # biases: (G, k) -> (G, 1, k)
            block = block[:, None, :]
        stacked[key] = tape.leaf(block) if tape is not None else ad.tensor(block)
    return stacked


def flat_gates(ts, state, features, offsets):
    """Gate heads for every group at once on the flat coordinate layout.

    ``features`` holds the (total_coords, 6) inputs of all groups stacked;
    rows ``offsets[g]:offsets[g + 1]`` belong to group ``g`` and go through
    slice ``g`` of the stacked controller tensors.  Mirrors update_gates
    but keeps alpha and beta packed as one (total_coords, 2) tensor so a
    whole parameter update is a single fused node downstream.
    """
    x = ad.tensor(features)
    z = ad.block_affine(x, ts["w_x"], state, ts["w_h"], ts["b"], offsets)
    hc2 = ad.lstm_cell(z, state)
    heads = ad.block_dense_sigmoid(hc2, ts["w_head"], ts["b_head"], offsets)
    return heads, hc2


def zero_flat_state(n_coords):
    return ad.tensor(np.zeros((n_coords, 2 * UPDATE_HIDDEN)))
