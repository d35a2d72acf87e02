"""Meta-training of the shared initialization, update and stop controllers.

Each meta-iteration runs one full learning episode on a sampled scenario,
measures the test loss of the resulting recommender on the scenario's query
set, and updates:

* the shared initialization and the update controllers by plain SGD on the
  first-order gradient of the test loss through the unrolled update chain;
* the stop controller by a score-function (likelihood-ratio) gradient whose
  per-step coefficient is the change in test loss accrued after the step,
  so that the expected contribution of every "continue" decision is weighed
  by what continuing actually bought.

Variants of the full procedure (random per-episode initialization, a fixed
inner learning rate, a fixed step count) freeze the corresponding pieces
and are used for ablation studies.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import controllers as ctrl
from . import recnet
from ._validation import check_positive_int
from .episode import EpisodeAbortError, EpisodeConfig, _run_episode, run_episode

META_LR = 1e-4
META_WEIGHT_DECAY = 1e-5
QUERY_CAP = 2048
# Per-step test losses only feed the stop-controller reward coefficients, so
# a smaller (fixed, episode-independent) subsample keeps them cheap.
STOP_QUERY_CAP = 256


@dataclass
class MetaParams:
    """Everything learned across scenarios."""

    architecture: str
    dimension: int
    init: dict  # group name -> array (shared initialization)
    update: dict  # group name -> UpdateControllerParams
    stop: ctrl.StopControllerParams

    @property
    def group_names(self):
        return list(self.init)

    def copy(self):
        return MetaParams(
            self.architecture,
            self.dimension,
            {k: v.copy() for k, v in self.init.items()},
            {k: v.copy() for k, v in self.update.items()},
            self.stop.copy(),
        )


def init_meta_params(architecture, dimension, seed):
    rng = np.random.default_rng(seed)
    init = recnet.init_recommender_params(architecture, dimension, rng).groups
    update = {name: ctrl.init_update_controller(rng) for name in init}
    stop = ctrl.init_stop_controller(rng)
    return MetaParams(architecture, dimension, init, update, stop)


def compute_returns(test_losses):
    """Per-step returns Q^(t) = sum of test losses from step t onward.

    ``test_losses`` holds L^test(theta^(j)) for j = 0..T; the return for
    step t (1-based) sums entries t..T.
    """
    if len(test_losses) < 1:
        raise ValueError("test_losses must hold at least the initial loss")
    tail = np.cumsum(np.asarray(test_losses, dtype=np.float64)[::-1])[::-1]
    return [float(tail[t]) for t in range(1, len(test_losses))]


def stop_objective(trace, test_losses):
    """Surrogate scalar whose gradient is the score-function estimate of
    d E[L^test(theta^(T))] / d (stop controller), for one sampled episode.

    The episode continued at steps 1..T (and, if it halted before the step
    cap, stopped at step T+1).  Each continue decision j contributes
    (L^test(theta^(T)) - L^test(theta^(j-1))) * d log(1 - p_j), i.e. the
    change in test loss accrued after the decision times the score of the
    action actually taken.  Continue probabilities whose coefficient is
    negative (continuing helped) are pushed up, and vice versa.  Returns a
    (1, 1) tensor on the episode tape, or None when every term vanishes.
    """
    T = trace.stop_step
    if len(test_losses) != T + 1:
        raise ValueError(
            f"expected {T + 1} test losses for a {T}-step episode, got {len(test_losses)}"
        )
    if T == 0 or not trace.stop_leaves:
        return None
    final = test_losses[T]
    total = None
    for j in range(1, T + 1):
        p = trace.p_tensors[j - 1]
        coeff = final - test_losses[j - 1]
        if coeff == 0.0:
            continue
        # d coeff*log(1 - p_j) = -coeff/(1 - p_j) dp_j, folded into a scale
        term = ad.scale(p, -coeff / (1.0 - p.values.item()))
        total = term if total is None else ad.add(total, term)
    return total


def stop_controller_gradient(trace, test_losses):
    """Gradient arrays (fused layout) of the stop-controller objective."""
    zero = {k: np.zeros_like(t.values) for k, t in trace.stop_leaves.items()}
    total = stop_objective(trace, test_losses)
    if total is None:
        return zero
    gmap = ad.backward(total)
    out = {}
    for key, leaf in trace.stop_leaves.items():
        g = gmap.get(leaf.node_id)
        out[key] = g.values if g is not None else zero[key]
    return out


def _subsample_query(task, cap, seed):
    triples = task.query
    if len(triples) <= cap:
        return triples
    rng = np.random.default_rng([seed, task.scenario])
    idx = np.sort(rng.choice(len(triples), size=cap, replace=False))
    return [triples[int(i)] for i in idx]


def _sgd_update(arr, grad, lr, weight_decay):
    arr -= lr * (grad + weight_decay * arr)


def meta_train_step(meta, task, table, cfg, rng, lr=META_LR, weight_decay=META_WEIGHT_DECAY):
    """One episode plus in-place meta-parameter update.  Returns a log row."""
    variant = cfg.variant
    train_init = variant in ("complete", "fixed_lr", "fixed_step")
    train_update = variant in ("complete", "rand_init", "fixed_step")
    train_stop = variant in ("complete", "rand_init", "fixed_lr")

    res = _run_episode(
        meta, task, table, cfg, rng, collect_snapshots=train_stop, meta_mode=True
    )
    trace = res.trace
    T = trace.stop_step

    query = _subsample_query(task, QUERY_CAP, cfg.seed)
    rows = recnet.gather_triples(table, query)
    loss_t = recnet.triples_loss_tensor(
        res.theta_tensors, meta.architecture, *rows, margin=cfg.margin
    )
    test_loss = float(loss_t.values)
    if not np.isfinite(test_loss):
        raise EpisodeAbortError(
            f"scenario {task.scenario}: non-finite test loss", trace
        )

    stop_obj = None
    if train_stop:
        stop_query = _subsample_query(task, STOP_QUERY_CAP, cfg.seed)
        stop_rows = recnet.gather_triples(table, stop_query)
        test_losses = [
            recnet.triples_loss_np(p, *stop_rows, margin=cfg.margin)
            for p in trace.params_at_step
        ]
        stop_obj = stop_objective(trace, test_losses)

    # one backward sweep serves both objectives: the stop surrogate only
    # touches the stop-controller leaves, the test loss only the rest
    gmap = {}
    root = None
    if T > 0 and (train_init or train_update):
        root = ad.reshape(loss_t, (1, 1))
    if stop_obj is not None:
        root = stop_obj if root is None else ad.add(root, stop_obj)
    if root is not None:
        gmap = ad.backward(root)

    if T > 0 and (train_init or train_update):
        if train_init:
            for name, leaf in res.init_leaves.items():
                g = gmap.get(leaf.node_id)
                grad = g.values if g is not None else 0.0
                _sgd_update(meta.init[name], grad, lr, weight_decay)
        if train_update:
            fused_g = {}
            for key, leaf in res.update_leaves.items():
                g = gmap.get(leaf.node_id)
                fused_g[key] = g.values if g is not None else np.zeros_like(leaf.values)
            for gi, name in enumerate(res.update_group_names):
                per = ctrl.unfuse_update_grads({k: v[gi] for k, v in fused_g.items()})
                for key, arr in meta.update[name].arrays.items():
                    _sgd_update(arr, per[key].reshape(arr.shape), lr, weight_decay)
    if train_stop:
        fused_sg = {}
        for key, leaf in (trace.stop_leaves or {}).items():
            g = gmap.get(leaf.node_id)
            fused_sg[key] = g.values if g is not None else np.zeros_like(leaf.values)
        if not fused_sg:
            fused_sg = {k: np.zeros_like(v) for k, v in ctrl.fuse_stop_arrays(meta.stop.arrays).items()}
        sgrads = ctrl.unfuse_stop_grads(fused_sg)
        for key, arr in meta.stop.arrays.items():
            _sgd_update(arr, sgrads[key].reshape(arr.shape), lr, weight_decay)

    return {
        "scenario": task.scenario,
        "steps": T,
        "test_loss": test_loss,
        "train_loss": trace.steps[-1].train_loss if trace.steps else float("nan"),
    }


def meta_train(
    tasks,
    table,
    cfg,
    n_episodes,
    seed,
    architecture="interaction",
    lr=META_LR,
    weight_decay=META_WEIGHT_DECAY,
    init_meta=None,
    log_every=0,
):
    """Run ``n_episodes`` meta-iterations over randomly drawn training tasks.

    Returns (meta_params, log) where the log has one row per episode.
    """
    check_positive_int(n_episodes, "n_episodes")
    if not tasks:
        raise ValueError("meta_train needs at least one training task")
    meta = init_meta.copy() if init_meta is not None else init_meta_params(
        architecture, table.dimension, seed
    )
    rng = np.random.default_rng(seed)
    log = []
    for k in range(n_episodes):
        task = tasks[int(rng.integers(len(tasks)))]
        try:
            row = meta_train_step(meta, task, table, cfg, rng, lr, weight_decay)
        except EpisodeAbortError:
            row = {"scenario": task.scenario, "steps": -1, "test_loss": float("nan"),
                   "train_loss": float("nan")}
        row["episode"] = k
        log.append(row)
        if log_every and (k + 1) % log_every == 0:
            recent = [r["test_loss"] for r in log[-log_every:] if np.isfinite(r["test_loss"])]
            mean = float(np.mean(recent)) if recent else float("nan")
            steps = float(np.mean([r["steps"] for r in log[-log_every:]]))
            print(f"episode {k + 1}/{n_episodes}  test_loss {mean:.4f}  steps {steps:.1f}")
    return meta, log


def adapt(meta, task, table, cfg, return_trace=False):
    """Deterministic adaptation to one scenario: threshold stop rule."""
    acfg = replace(cfg, stop_mode="threshold")
    rng = np.random.default_rng(cfg.seed)
    params, trace = run_episode(meta, task, table, acfg, rng)
    return (params, trace) if return_trace else params
