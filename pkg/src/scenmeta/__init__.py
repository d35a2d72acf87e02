"""Scenario-specific sequential meta-learning for few-shot recommendation.

The package learns, across many small recommendation scenarios, how to
initialize a compact ranking network, how to update it step by step, and
when to stop training it — then transfers that learned training procedure
to unseen scenarios with only a handful of interactions.
"""

from .autodiff import GraphError, ShapeError, Tape, Tensor, backward, tensor
from .checkpoint import load_meta, load_recommender, save_meta, save_recommender
from .episode import EpisodeAbortError, EpisodeConfig, EpisodeTrace, run_episode
from .estimator import ScenarioMetaRecommender
from .evaluation import (
    RankedList,
    compare_architectures,
    evaluate_itempop,
    evaluate_scenario,
    item_pop,
    rank_items,
    recall_at_n,
    run_ablation,
)
from .metatrain import MetaParams, adapt, init_meta_params, meta_train
from .recnet import EmbeddingTable, RecommenderParams, TrainTriple, mf_pretrain
from .tasks import (
    InteractionLog,
    MetaSplit,
    ScenarioTask,
    build_tasks,
    gen_synthetic_family,
    load_interactions_csv,
    split_meta,
)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingTable",
    "EpisodeAbortError",
    "EpisodeConfig",
    "EpisodeTrace",
    "GraphError",
    "InteractionLog",
    "MetaParams",
    "MetaSplit",
    "RankedList",
    "RecommenderParams",
    "ScenarioMetaRecommender",
    "ScenarioTask",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainTriple",
    "adapt",
    "backward",
    "build_tasks",
    "compare_architectures",
    "evaluate_itempop",
    "evaluate_scenario",
    "gen_synthetic_family",
    "init_meta_params",
    "item_pop",
    "load_interactions_csv",
    "load_meta",
    "load_recommender",
    "meta_train",
    "mf_pretrain",
    "rank_items",
    "recall_at_n",
    "run_ablation",
    "run_episode",
    "save_meta",
    "save_recommender",
    "split_meta",
    "tensor",
]
