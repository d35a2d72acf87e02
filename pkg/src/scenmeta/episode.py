"""Scenario-specific learning episodes.

One episode: initialize the recommender, then repeatedly sample a support
batch, compute the hinge loss and its gradient, let the stop controller
decide whether to halt, and otherwise apply the gated update to every
parameter group.  Stopping at step t leaves theta^(t-1) as the result.

For speed, all parameter groups are flattened into one stacked coordinate
column and evaluated through their controllers with row-blocked ops, so a
step costs a handful of tape nodes regardless of the number of groups.
During meta-training the whole unrolled chain lives on one tape; inner-loop
gradients are computed on throwaway tapes from detached parameter values,
which realizes the first-order approximation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import controllers as ctrl
from . import recnet
from ._validation import check_choice, check_fraction, check_positive_int
from .tasks import sample_batch

STOP_MODES = ("stochastic", "threshold")
VARIANTS = ("complete", "rand_init", "fixed_lr", "fixed_step")


class EpisodeAbortError(RuntimeError):
    """Non-finite training loss; carries the diagnostic trace so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@dataclass
class EpisodeConfig:
    t_max: int = 50
    batch_size: int = 32
    stop_mode: str = "stochastic"
    threshold: float = 0.5
    variant: str = "complete"
    fixed_lr: float = 0.01
    fixed_steps: int = 20
    margin: float = 1.0
    seed: int = 0

    def validate(self):
        check_positive_int(self.t_max, "t_max")
        check_positive_int(self.batch_size, "batch_size")
        check_choice(self.stop_mode, STOP_MODES, "stop_mode")
        check_choice(self.variant, VARIANTS, "variant")
        check_fraction(self.threshold, "threshold")
        if self.variant == "fixed_step":
            check_positive_int(self.fixed_steps, "fixed_steps")
            if self.fixed_steps > self.t_max:
                raise ValueError(
                    f"fixed_steps {self.fixed_steps} exceeds t_max {self.t_max}"
                )
        if self.variant == "fixed_lr" and self.fixed_lr <= 0:
            raise ValueError(f"fixed_lr must be positive, got {self.fixed_lr}")
        return self


@dataclass
class StepRecord:
    step: int
    train_loss: float
    grad_norm: float
    stop_prob: float
    stopped: bool
    gate_means: dict = field(default_factory=dict)


@dataclass
class EpisodeTrace:
    steps: list = field(default_factory=list)
    stop_step: int = 0
    params_at_step: list = None
    aborted: bool = False
    # meta-training internals (tape-linked, never serialized)
    p_tensors: list = field(default_factory=list, repr=False)
    stop_leaves: dict = field(default_factory=dict, repr=False)


def trace_to_jsonl(trace):
    """One JSON object per executed step (the learning-process quantities)."""
    lines = []
    for rec in trace.steps:
        lines.append(
            json.dumps(
                {
                    "step": rec.step,
                    "train_loss": rec.train_loss,
                    "grad_norm": rec.grad_norm,
                    "stop_prob": rec.stop_prob,
                    "stopped": rec.stopped,
                    "gates": {
                        name: {"alpha": a, "beta": b}
                        for name, (a, b) in rec.gate_means.items()
                    },
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class _FlatLayout:
    """Row layout of all parameter groups stacked as one coordinate column."""

    names: list
    sizes: list
    shapes: list
    offsets: list  # len(names) + 1 row boundaries

    @classmethod
    def for_groups(cls, groups):
        names = list(groups)
        sizes = [groups[k].size for k in names]
        shapes = [groups[k].shape for k in names]
        offsets = [0]
        for n in sizes:
            offsets.append(offsets[-1] + n)
        return cls(names, sizes, shapes, offsets)

    def spans(self):
        return zip(self.names, self.shapes, self.offsets, self.offsets[1:])


@dataclass
class EpisodeResult:
    params: object
    trace: EpisodeTrace
    tape: object = None
    theta_tensors: dict = None
    init_leaves: dict = None
    update_group_names: list = None
    update_leaves: dict = None  # stacked fused controller leaves
    stop_leaves: dict = None


def _theta_snapshot(architecture, layout, theta_values):
    groups = {
        name: theta_values[s:e, 0].reshape(shape).copy()
        for name, shape, s, e in layout.spans()
    }
    return recnet.RecommenderParams(architecture, groups)


def run_episode(meta, task, table, cfg, rng, collect_snapshots=False):
    """Public episode entry point: returns (final params, trace)."""
    res = _run_episode(meta, task, table, cfg, rng, collect_snapshots, meta_mode=False)
    return res.params, res.trace


def _run_episode(meta, task, table, cfg, rng, collect_snapshots, meta_mode):
    cfg.validate()
    if not task.support:
        raise ValueError(f"scenario {task.scenario}: empty support set")
    arch = meta.architecture
    variant = cfg.variant
    train_init = meta_mode and variant in ("complete", "fixed_lr", "fixed_step")
    train_update = meta_mode and variant in ("complete", "rand_init", "fixed_step")
    train_stop = meta_mode and variant in ("complete", "rand_init", "fixed_lr")
    use_controllers = variant != "fixed_lr"

    tape = ad.Tape() if meta_mode else None

    # theta^(0)
    if variant == "rand_init":
        theta0 = recnet.init_recommender_params(arch, meta.dimension, rng)
        init_tensors = {k: ad.tensor(v) for k, v in theta0.groups.items()}
        init_leaves = None
    else:
        init_leaves = (
            {k: tape.leaf(v) for k, v in meta.init.items()} if train_init else None
        )
        init_tensors = init_leaves or {k: ad.tensor(v) for k, v in meta.init.items()}

    layout = _FlatLayout.for_groups(meta.init)
    offsets = layout.offsets
    theta = ad.stack_rows([init_tensors[k] for k in layout.names])
    ctrl_ts = state = None
    if use_controllers:
        ctape = tape if train_update else None
        ctrl_ts = ctrl.stack_controllers([meta.update[k] for k in layout.names], ctape)
        state = ctrl.zero_flat_state(offsets[-1])

    stop_fused = ctrl.fuse_stop_arrays(meta.stop.arrays)
    stop_leaves = ctrl.as_tensor_dict(stop_fused, tape) if train_stop else None
    stop_ts = stop_leaves or ctrl.as_tensor_dict(stop_fused)
    stop_state = ctrl.zero_stop_state()

    trace = EpisodeTrace(stop_leaves=stop_leaves or {})
    if collect_snapshots:
        trace.params_at_step = [_theta_snapshot(arch, layout, theta.values)]

    t_limit = cfg.fixed_steps if variant == "fixed_step" else cfg.t_max
    n_updates = 0
    for t in range(1, t_limit + 1):
        batch = sample_batch(task, cfg.batch_size, rng)
        rows = recnet.gather_triples(table, batch)
        params_np = _theta_snapshot(arch, layout, theta.values)
        loss_val, grads = recnet.loss_and_grads(params_np, rows, cfg.margin)
        if not np.isfinite(loss_val):
            trace.aborted = True
            trace.stop_step = n_updates
            raise EpisodeAbortError(
                f"scenario {task.scenario}: non-finite loss at step {t}", trace
            )
        grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))

        p_tensor, stop_state = ctrl.stop_probability(stop_ts, stop_state, loss_val, grad_norm)
        p_val = p_tensor.values.item()
        trace.p_tensors.append(p_tensor)

        if variant == "fixed_step":
            stopped = False
        elif cfg.stop_mode == "stochastic":
            stopped = bool(rng.random() < p_val)
        else:
            stopped = bool(p_val >= cfg.threshold)

        rec = StepRecord(t, loss_val, grad_norm, p_val, stopped)
        trace.steps.append(rec)
        if stopped:
            break

        g_flat = np.empty((offsets[-1], 1))
        for name, _shape, s, e in layout.spans():
            g_flat[s:e, 0] = grads[name].ravel()
        if use_controllers:
            feats = ctrl.update_features(g_flat[:, 0], loss_val, theta.values[:, 0])
            heads, state = ctrl.flat_gates(ctrl_ts, state, feats, offsets)
            theta = ad.gate_update(theta, heads, g_flat)
            hv = heads.values
            for name, _shape, s, e in layout.spans():
                rec.gate_means[name] = (
                    float(hv[s:e, 0].mean()),
                    float(hv[s:e, 1].mean()),
                )
        else:
            theta = ad.sub(theta, ad.scale(ad.tensor(g_flat), cfg.fixed_lr))
            for name in layout.names:
                rec.gate_means[name] = (cfg.fixed_lr, 1.0)
        n_updates += 1
        if collect_snapshots:
            trace.params_at_step.append(_theta_snapshot(arch, layout, theta.values))

    trace.stop_step = n_updates

    theta_tensors = {
        name: ad.reshape(ad.slice_rows(theta, s, e), shape)
        for name, shape, s, e in layout.spans()
    }
    params = recnet.RecommenderParams(
        arch, {k: t.values.copy() for k, t in theta_tensors.items()}
    )
    return EpisodeResult(
        params=params,
        trace=trace,
        tape=tape,
        theta_tensors=theta_tensors,
        init_leaves=init_leaves,
        update_group_names=layout.names if train_update else None,
        update_leaves=ctrl_ts if train_update else None,
        stop_leaves=stop_leaves,
    )
