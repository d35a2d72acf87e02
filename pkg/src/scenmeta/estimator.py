"""Estimator-style facade over meta-training and scenario adaptation.

Mirrors the fit/predict convention: construct with hyperparameters, ``fit``
on a collection of scenario tasks plus a frozen embedding table, ``adapt``
to a new scenario, then ``predict``/``score`` with the adapted recommender.
All hyperparameters are introspectable via ``get_params``/``set_params``.
"""

from __future__ import annotations

from . import evaluation, metatrain
from ._validation import check_choice, check_positive_int
from .episode import STOP_MODES, VARIANTS, EpisodeConfig
from .recnet import ARCHITECTURES


class ScenarioMetaRecommender:
    """Learns how to initialize, update, and stop few-shot recommender training."""

    def __init__(
        self,
        architecture="interaction",
        t_max=50,
        batch_size=32,
        stop_mode="stochastic",
        threshold=0.5,
        variant="complete",
        fixed_lr=0.01,
        fixed_steps=20,
        margin=1.0,
        n_episodes=2000,
        meta_lr=metatrain.META_LR,
        weight_decay=metatrain.META_WEIGHT_DECAY,
        seed=0,
    ):
        self.architecture = architecture
        self.t_max = t_max
        self.batch_size = batch_size
        self.stop_mode = stop_mode
        self.threshold = threshold
        self.variant = variant
        self.fixed_lr = fixed_lr
        self.fixed_steps = fixed_steps
        self.margin = margin
        self.n_episodes = n_episodes
        self.meta_lr = meta_lr
        self.weight_decay = weight_decay
        self.seed = seed

    _PARAM_NAMES = (
        "architecture", "t_max", "batch_size", "stop_mode", "threshold",
        "variant", "fixed_lr", "fixed_steps", "margin", "n_episodes",
        "meta_lr", "weight_decay", "seed",
    )

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._PARAM_NAMES}

    def set_params(self, **params):
        for name, value in params.items():
            if name not in self._PARAM_NAMES:
                raise ValueError(
                    f"unknown parameter {name!r}; valid: {sorted(self._PARAM_NAMES)}"
                )
            setattr(self, name, value)
        return self

    def _episode_config(self):
        check_choice(self.architecture, ARCHITECTURES, "architecture")
        return EpisodeConfig(
            t_max=self.t_max,
            batch_size=self.batch_size,
            stop_mode=self.stop_mode,
            threshold=self.threshold,
            variant=self.variant,
            fixed_lr=self.fixed_lr,
            fixed_steps=self.fixed_steps,
            margin=self.margin,
            seed=self.seed,
        ).validate()

    def fit(self, tasks, table):
        """Meta-train on the given scenario tasks; returns self."""
        check_positive_int(self.n_episodes, "n_episodes")
        cfg = self._episode_config()
        self.meta_params_, self.train_log_ = metatrain.meta_train(
            list(tasks), table, cfg, self.n_episodes, self.seed,
            architecture=self.architecture, lr=self.meta_lr,
            weight_decay=self.weight_decay,
        )
        self.table_ = table
        return self

    def _check_fitted(self):
        if not hasattr(self, "meta_params_"):
            raise RuntimeError("this estimator is not fitted; call fit first")

    def adapt(self, task, table=None):
        """Train a scenario-specific recommender from the learned meta-state."""
        self._check_fitted()
        return metatrain.adapt(
            self.meta_params_, task, table if table is not None else self.table_,
            self._episode_config(),
        )

    def predict(self, task, n=10, table=None):
        """Top-n item ids per evaluable user of the scenario."""
        table = table if table is not None else self.table_
        params = self.adapt(task, table)
        out = {}
        for user in sorted({t.user for t in task.query}):
            exclude = task.support_by_user.get(user, set())
            ranked = evaluation.rank_items(params, table, user, task.candidate_items, exclude)
            out[user] = ranked.items[:n].tolist()
        return out

    def score(self, task, n=10, table=None):
        """Mean user Recall@n on the scenario's query positives."""
        table = table if table is not None else self.table_
        params = self.adapt(task, table)
        return evaluation.evaluate_scenario(params, table, task, (n,))[n]
