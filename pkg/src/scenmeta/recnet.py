"""Ranking network, pairwise hinge loss, and the embedding pretrainer.

Two architectures are supported:

* ``interaction`` -- user and item embeddings are concatenated and fed
  through a ReLU MLP, followed by a linear output weight.
* ``mapping`` -- two separate towers map the user and the item embedding;
  the score is the dot product of the tower outputs (last tower layer is
  linear so scores can be negative).

User/item embedding tables are frozen: scenario-specific learning only
touches the network parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._validation import check_positive_int

INTERACTION = "interaction"
MAPPING = "mapping"
ARCHITECTURES = (INTERACTION, MAPPING)

DEFAULT_MARGIN = 1.0


@dataclass
class EmbeddingTable:
    user_matrix: np.ndarray
    item_matrix: np.ndarray

    def __post_init__(self):
        self.user_matrix = np.ascontiguousarray(self.user_matrix, dtype=np.float64)
        self.item_matrix = np.ascontiguousarray(self.item_matrix, dtype=np.float64)
        if self.user_matrix.ndim != 2 or self.item_matrix.ndim != 2:
            raise ValueError("embedding matrices must be 2-D")
        if self.user_matrix.shape[1] != self.item_matrix.shape[1]:
            raise ValueError(
                "user and item embedding widths differ: "
                f"{self.user_matrix.shape[1]} vs {self.item_matrix.shape[1]}"
            )

    @property
    def n_users(self):
        return self.user_matrix.shape[0]

    @property
    def n_items(self):
        return self.item_matrix.shape[0]

    @property
    def dimension(self):
        return self.user_matrix.shape[1]


@dataclass(frozen=True)
class TrainTriple:
    user: int
    pos_item: int
    neg_item: int


@dataclass
class RecommenderParams:
    """Trainable parameters, kept as an ordered name -> array mapping."""

    architecture: str
    groups: dict

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture: {self.architecture!r}")

    def copy(self):
        return RecommenderParams(self.architecture, {k: v.copy() for k, v in self.groups.items()})

    @property
    def hidden_layers(self):
        """(W, b) pairs for the interaction stack."""
        if self.architecture != INTERACTION:
            raise ValueError("hidden_layers view only applies to the interaction architecture")
        n = (len(self.groups) - 1) // 2
        return [(self.groups[f"W{l}"], self.groups[f"b{l}"]) for l in range(1, n + 1)]

    @property
    def output_weight(self):
        if self.architecture != INTERACTION:
            raise ValueError("output_weight only applies to the interaction architecture")
        return self.groups["w"]


def layer_plan(architecture, dimension, n_hidden=3):
    """Ordered (name, shape) parameter plan.

    Each hidden layer has half the units of the previous one (minimum 1).
    """
    check_positive_int(dimension, "dimension")
    plan = []
    if architecture == INTERACTION:
        width = 2 * dimension
        for l in range(1, n_hidden + 1):
            out = max(1, width // 2)
            plan.append((f"W{l}", (width, out)))
            plan.append((f"b{l}", (out,)))
            width = out
        plan.append(("w", (width, 1)))
    elif architecture == MAPPING:
        for tower in ("u", "i"):
            width = dimension
            for l in range(1, n_hidden + 1):
                out = max(1, width // 2)
                plan.append((f"{tower}_W{l}", (width, out)))
                plan.append((f"{tower}_b{l}", (out,)))
                width = out
    else:
        raise ValueError(f"unknown architecture: {architecture!r}")
    return plan


def init_recommender_params(architecture, dimension, rng, n_hidden=3):
    """Fan-in-scaled uniform weights, zero biases."""
    groups = {}
    for name, shape in layer_plan(architecture, dimension, n_hidden):
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            groups[name] = rng.uniform(-bound, bound, size=shape)
        else:
            groups[name] = np.zeros(shape)
    return RecommenderParams(architecture, groups)


def _tower_names(groups, prefix):
    n = sum(1 for k in groups if k.startswith(f"{prefix}_W"))
    return [(f"{prefix}_W{l}", f"{prefix}_b{l}") for l in range(1, n + 1)]


# ---------------------------------------------------------------------------
# plain-numpy forward (fast path: scoring, ranking, per-step test losses)


def scores_np(params, user_emb, item_emb):
    """Scores for row-aligned user/item embedding matrices, shape (B,)."""
    if params.architecture == INTERACTION:
        x = np.concatenate([user_emb, item_emb], axis=1)
        for w_name, b_name in _interaction_layers(params.groups):
            x = np.maximum(x @ params.groups[w_name] + params.groups[b_name], 0.0)
        return (x @ params.groups["w"]).ravel()
    zu = _tower_np(params.groups, "u", user_emb)
    zi = _tower_np(params.groups, "i", item_emb)
    return np.sum(zu * zi, axis=1)


def _interaction_layers(groups):
    n = (len(groups) - 1) // 2
    return [(f"W{l}", f"b{l}") for l in range(1, n + 1)]


def _tower_np(groups, prefix, x):
    names = _tower_names(groups, prefix)
    for idx, (w_name, b_name) in enumerate(names):
        x = x @ groups[w_name] + groups[b_name]
        if idx < len(names) - 1:
            x = np.maximum(x, 0.0)
    return x


def score(params, table, user, item):
    """Ranking score of one (user, item) pair."""
    if not 0 <= user < table.n_users:
        raise IndexError(f"user id {user} out of range [0, {table.n_users})")
    if not 0 <= item < table.n_items:
        raise IndexError(f"item id {item} out of range [0, {table.n_items})")
    return float(
        scores_np(params, table.user_matrix[[user]], table.item_matrix[[item]])[0]
    )


def hinge_loss(score_pos, score_neg, margin=DEFAULT_MARGIN):
    if margin <= 0:
        raise ValueError(f"margin must be positive, got {margin}")
    return max(0.0, margin - score_pos + score_neg)


def triples_loss_np(params, user_emb_pos, item_emb_pos, item_emb_neg, margin=DEFAULT_MARGIN):
    """Mean hinge loss over pre-gathered embedding rows (no autodiff)."""
    s_pos = scores_np(params, user_emb_pos, item_emb_pos)
    s_neg = scores_np(params, user_emb_pos, item_emb_neg)
    return float(np.mean(np.maximum((s_neg - s_pos) + margin, 0.0)))


def gather_triples(table, triples):
    users = np.fromiter((t.user for t in triples), dtype=np.int64, count=len(triples))
    pos = np.fromiter((t.pos_item for t in triples), dtype=np.int64, count=len(triples))
    neg = np.fromiter((t.neg_item for t in triples), dtype=np.int64, count=len(triples))
    if len(users) and (users.max() >= table.n_users or users.min() < 0):
        raise IndexError("triple user id out of range")
    if len(pos) and (
        max(pos.max(), neg.max()) >= table.n_items or min(pos.min(), neg.min()) < 0
    ):
        raise IndexError("triple item id out of range")
    return table.user_matrix[users], table.item_matrix[pos], table.item_matrix[neg]


# ---------------------------------------------------------------------------
# differentiable forward


def scores_tensor(param_tensors, architecture, user_emb, item_emb):
    """Differentiable scores, shape (B, 1); embeddings enter as constants."""
    eu = ad.tensor(user_emb)
    ei = ad.tensor(item_emb)
    if architecture == INTERACTION:
        x = ad.concat(eu, ei, axis=1)
        n = (len(param_tensors) - 1) // 2
        for l in range(1, n + 1):
            x = ad.relu(ad.add(ad.matmul(x, param_tensors[f"W{l}"]), param_tensors[f"b{l}"]))
        return ad.matmul(x, param_tensors["w"])
    zu = _tower_tensor(param_tensors, "u", eu)
    zi = _tower_tensor(param_tensors, "i", ei)
    prod = ad.elementwise_mul(zu, zi)
    ones = ad.tensor(np.ones((prod.shape[1], 1)))
    return ad.matmul(prod, ones)


def _tower_tensor(param_tensors, prefix, x):
    names = [k for k in param_tensors if k.startswith(f"{prefix}_W")]
    n = len(names)
    for l in range(1, n + 1):
        x = ad.add(ad.matmul(x, param_tensors[f"{prefix}_W{l}"]), param_tensors[f"{prefix}_b{l}"])
        if l < n:
            x = ad.relu(x)
    return x


def triples_loss_tensor(
    param_tensors, architecture, user_emb_pos, item_emb_pos, item_emb_neg, margin=DEFAULT_MARGIN
):
    """Differentiable mean hinge loss over gathered triples (scalar Tensor)."""
    s_pos = scores_tensor(param_tensors, architecture, user_emb_pos, item_emb_pos)
    s_neg = scores_tensor(param_tensors, architecture, user_emb_pos, item_emb_neg)
    margins = ad.tensor(np.full((user_emb_pos.shape[0], 1), float(margin)))
    return ad.mean(ad.max_with_zero(ad.add(ad.sub(s_neg, s_pos), margins)))


def batch_loss(params, table, batch, margin=DEFAULT_MARGIN):
    """Mean hinge loss over a triple batch as a scalar Tensor.

    Returns ``(loss, leaves)``: the loss lives on a fresh tape whose leaves
    are the parameter groups, and ``leaves`` maps group name -> leaf Tensor
    for gradient lookups after ``autodiff.backward``.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    tape = ad.Tape()
    leaves = {name: tape.leaf(arr) for name, arr in params.groups.items()}
    eu, ep, en = gather_triples(table, batch)
    loss = triples_loss_tensor(leaves, params.architecture, eu, ep, en, margin)
    return loss, leaves


def loss_and_grads_ref(params, table_rows, margin=DEFAULT_MARGIN):
    """Loss value and per-group gradients on a throwaway tape."""
    eu, ep, en = table_rows
    tape = ad.Tape()
    leaves = {name: tape.leaf(arr) for name, arr in params.groups.items()}
    loss = triples_loss_tensor(leaves, params.architecture, eu, ep, en, margin)
    grad_map = ad.backward(loss)
    grads = {}
    for name, leaf in leaves.items():
        g = grad_map.get(leaf.node_id)
        grads[name] = g.values if g is not None else np.zeros_like(leaf.values)
    return float(loss.values), grads


def _mlp_forward(groups, layer_names, x, relu_last):
    """Activations of a (W, b) stack; pre-activation kept implicitly via x>0."""
    acts = [x]
    for idx, (w_name, b_name) in enumerate(layer_names):
        x = x @ groups[w_name] + groups[b_name]
        if relu_last or idx < len(layer_names) - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return acts


def _mlp_backward(groups, layer_names, acts, dx, relu_last, grads):
    for idx in range(len(layer_names) - 1, -1, -1):
        w_name, b_name = layer_names[idx]
        if relu_last or idx < len(layer_names) - 1:
            dx = dx * (acts[idx + 1] > 0.0)
        g_w = acts[idx].T @ dx
        g_b = dx.sum(axis=0)
        grads[w_name] = grads[w_name] + g_w if w_name in grads else g_w
        grads[b_name] = grads[b_name] + g_b if b_name in grads else g_b
        dx = dx @ groups[w_name].T
    return dx


def loss_and_grads(params, table_rows, margin=DEFAULT_MARGIN):
    """Loss value and per-group gradients, hand-derived in plain numpy.

    Matches ``loss_and_grads_ref`` exactly (same operations in the same
    order); exists because this runs once per inner training step and the
    tape bookkeeping would dominate at that call rate.
    """
    eu, ep, en = table_rows
    groups = params.groups
    grads = {}
    if params.architecture == INTERACTION:
        layers = _interaction_layers(groups)
        acts_p = _mlp_forward(groups, layers, np.concatenate([eu, ep], axis=1), True)
        acts_n = _mlp_forward(groups, layers, np.concatenate([eu, en], axis=1), True)
        s_pos = acts_p[-1] @ groups["w"]
        s_neg = acts_n[-1] @ groups["w"]
        hinge = np.maximum((s_neg - s_pos) + margin, 0.0)
        loss = float(hinge.mean())
        d = (hinge > 0.0) / hinge.size  # d loss / d (s_neg - s_pos)
        grads["w"] = acts_n[-1].T @ d - acts_p[-1].T @ d
        _mlp_backward(groups, layers, acts_n, d @ groups["w"].T, True, grads)
        _mlp_backward(groups, layers, acts_p, -(d @ groups["w"].T), True, grads)
    else:
        u_layers = _tower_names(groups, "u")
        i_layers = _tower_names(groups, "i")
        acts_u = _mlp_forward(groups, u_layers, eu, False)
        acts_p = _mlp_forward(groups, i_layers, ep, False)
        acts_n = _mlp_forward(groups, i_layers, en, False)
        zu, zp, zn = acts_u[-1], acts_p[-1], acts_n[-1]
        s_pos = (zu * zp).sum(axis=1, keepdims=True)
        s_neg = (zu * zn).sum(axis=1, keepdims=True)
        hinge = np.maximum((s_neg - s_pos) + margin, 0.0)
        loss = float(hinge.mean())
        d = (hinge > 0.0) / hinge.size
        # two user-tower passes (one per score branch) to mirror the tape's
        # accumulation order bitwise
        _mlp_backward(groups, i_layers, acts_n, d * zu, False, grads)
        _mlp_backward(groups, u_layers, acts_u, d * zn, False, grads)
        _mlp_backward(groups, i_layers, acts_p, -(d * zu), False, grads)
        _mlp_backward(groups, u_layers, acts_u, -(d * zp), False, grads)
    for name, arr in groups.items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
        else:
            grads[name] = grads[name].reshape(arr.shape)
    return loss, grads


# ---------------------------------------------------------------------------
# embedding pretrainer (matrix factorization on the same pairwise hinge loss)


def mf_pretrain(interactions, d, epochs, lr, reg, seed):
    """Train user/item embeddings by SGD on pairwise hinge ranking.

    ``interactions`` is a list of (user, item) pairs over the global id
    universes; negatives are resampled uniformly per epoch.  Deterministic
    for a fixed seed.
    """
    check_positive_int(d, "d")
    if not interactions:
        raise ValueError("interactions must be non-empty")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    n_users = max(u for u, _ in interactions) + 1
    n_items = max(i for _, i in interactions) + 1
    rng = np.random.default_rng(seed)
    user_mat = rng.uniform(-0.1, 0.1, size=(n_users, d))
    item_mat = rng.uniform(-0.1, 0.1, size=(n_items, d))
    observed = set(interactions)
    pairs = list(interactions)
    for _ in range(epochs):
        order = rng.permutation(len(pairs))
        for k in order:
            u, i = pairs[k]
            j = int(rng.integers(n_items))
            for _attempt in range(100):
                if (u, j) not in observed:
                    break
                j = int(rng.integers(n_items))
            else:
                continue
            diff = item_mat[i] - item_mat[j]
            if 1.0 - user_mat[u] @ diff > 0.0:
                uu = user_mat[u].copy()
                user_mat[u] -= lr * (-diff + reg * uu)
                item_mat[i] -= lr * (-uu + reg * item_mat[i])
                item_mat[j] -= lr * (uu + reg * item_mat[j])
    return EmbeddingTable(user_mat, item_mat)


# ---------------------------------------------------------------------------
# text embedding files


def write_embeddings(path, matrix):
    """Text format: header "<count> <d>", then "<id> <v1> ... <vd>" rows."""
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for idx, row in enumerate(matrix):
            fh.write(f"{idx} " + " ".join(format(v, ".17g") for v in row) + "\n")


def read_embeddings(path):
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: malformed embedding header")
        count, d = int(header[0]), int(header[1])
        matrix = np.zeros((count, d))
        seen = np.zeros(count, dtype=bool)
        for line_no, line in enumerate(fh, start=2):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d + 1:
                raise ValueError(f"{path}:{line_no}: expected {d + 1} fields, got {len(parts)}")
            idx = int(parts[0])
            if not 0 <= idx < count:
                raise ValueError(f"{path}:{line_no}: row id {idx} out of range")
            matrix[idx] = [float(v) for v in parts[1:]]
            seen[idx] = True
        if not seen.all():
            missing = int(np.flatnonzero(~seen)[0])
            raise ValueError(f"{path}: missing row for id {missing}")
    return matrix
