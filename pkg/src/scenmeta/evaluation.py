"""Ranking evaluation, the popularity baseline, and comparison harnesses.

Recall@N is computed per user by ranking the full scenario candidate set
(minus that user's support positives) and intersecting the top N with the
user's query positives.  Scenario scores are unweighted user means; tables
aggregate scenarios with equal weight per scenario, then report mean and
standard deviation across seeds.  Ties in every ranking break by ascending
item id, so rankings are pure functions of the scores.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from math import comb

import numpy as np

from . import recnet
from ._validation import check_positive_int
from .episode import EpisodeConfig
from .metatrain import META_LR, META_WEIGHT_DECAY, adapt, meta_train

RESULTS_SCHEMA_VERSION = 1
DEFAULT_N_LIST = (10,)


@dataclass
class RankedList:
    user: int  # -1 for user-independent (popularity) templates
    items: np.ndarray  # item ids, descending score, ties by ascending id
    scores: np.ndarray


def _sorted_by_score(items, scores):
    items = np.asarray(items, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((items, -scores))  # primary: score desc, tie: id asc
    return items[order], scores[order]


def rank_items(params, table, user, candidates, exclude=()):
    """Rank the non-excluded candidates for one user by network score."""
    exclude = set(int(i) for i in exclude)
    cand = np.asarray(sorted(set(int(i) for i in candidates) - exclude), dtype=np.int64)
    if cand.size == 0:
        raise ValueError(f"user {user}: no candidates left after exclusion")
    users = np.full(cand.size, int(user), dtype=np.int64)
    scores = recnet.scores_np(params, table.user_matrix[users], table.item_matrix[cand])
    items, scores = _sorted_by_score(cand, scores)
    return RankedList(int(user), items, scores)


def recall_at_n(ranked, relevant, n):
    check_positive_int(n, "n")
    relevant = set(int(i) for i in relevant)
    if not relevant:
        raise ValueError("recall_at_n: empty relevant set")
    top = set(int(i) for i in ranked.items[:n])
    return len(top & relevant) / len(relevant)


def item_pop(task):
    """Popularity template: support interaction counts, user-independent."""
    if not task.support:
        raise ValueError(f"scenario {task.scenario}: empty support set")
    counts = {}
    for _user, item in task.support:
        counts[item] = counts.get(item, 0) + 1
    items = np.asarray(task.candidate_items, dtype=np.int64)
    scores = np.asarray([float(counts.get(int(i), 0)) for i in items])
    items, scores = _sorted_by_score(items, scores)
    return RankedList(-1, items, scores)


def _query_positives(task):
    """user -> set of query positive items, in deterministic user order."""
    rel = {}
    for t in task.query:
        rel.setdefault(t.user, set()).add(t.pos_item)
    return {u: rel[u] for u in sorted(rel)}


def evaluate_scenario(params, table, task, n_list=DEFAULT_N_LIST):
    """Mean user recall per N over the scenario's full candidate set."""
    rel_by_user = _query_positives(task)
    if not rel_by_user:
        raise ValueError(f"scenario {task.scenario}: no evaluable users")
    sums = {n: 0.0 for n in n_list}
    for user, relevant in rel_by_user.items():
        exclude = task.support_by_user.get(user, set())
        ranked = rank_items(params, table, user, task.candidate_items, exclude)
        for n in n_list:
            sums[n] += recall_at_n(ranked, relevant, n)
    return {n: sums[n] / len(rel_by_user) for n in n_list}


def evaluate_itempop(task, n_list=DEFAULT_N_LIST):
    """Popularity-baseline recall with the same per-user exclusion rule."""
    template = item_pop(task)
    rel_by_user = _query_positives(task)
    if not rel_by_user:
        raise ValueError(f"scenario {task.scenario}: no evaluable users")
    sums = {n: 0.0 for n in n_list}
    for user, relevant in rel_by_user.items():
        exclude = task.support_by_user.get(user, set())
        keep = np.asarray([i not in exclude for i in template.items])
        ranked = RankedList(user, template.items[keep], template.scores[keep])
        for n in n_list:
            sums[n] += recall_at_n(ranked, relevant, n)
    return {n: sums[n] / len(rel_by_user) for n in n_list}


def mapping_cached_scores(params, table, user, items):
    """Mapping-architecture scores via a precomputed item-tower cache.

    Matches the direct scoring path up to BLAS summation order (the user
    tower runs on a single row here instead of repeated rows); exists to
    let large candidate sets reuse item-tower outputs across users.
    """
    if params.architecture != recnet.MAPPING:
        raise ValueError("cached scoring applies to the mapping architecture only")
    items = np.asarray(items, dtype=np.int64)
    item_out = recnet._tower_np(params.groups, "i", table.item_matrix[items])
    user_out = recnet._tower_np(params.groups, "u", table.user_matrix[[int(user)]])
    return (item_out * user_out).sum(axis=1)


def sign_test_p(wins, losses):
    """One-sided exact binomial sign test p-value, ties dropped."""
    n = wins + losses
    if n == 0:
        return 1.0
    return sum(comb(n, k) for k in range(wins, n + 1)) / 2.0**n


# ---------------------------------------------------------------------------
# comparison harnesses


VARIANT_ROLES = {
    "complete": EpisodeConfig(variant="complete"),
    "rand_init": EpisodeConfig(variant="rand_init"),
    "fixed_lr": EpisodeConfig(variant="fixed_lr", fixed_lr=0.01),
    "fixed_step": EpisodeConfig(variant="fixed_step", fixed_steps=20),
}


def _evaluate_meta(meta, test_tasks, table, cfg, n_list):
    rows = []
    for task in sorted(test_tasks, key=lambda t: t.scenario):
        params = adapt(meta, task, table, cfg)
        recalls = evaluate_scenario(params, table, task, n_list)
        rows.append((task.scenario, recalls))
    return rows


def run_ablation(
    variants,
    train_tasks,
    test_tasks,
    table,
    cfg,
    n_episodes,
    seeds,
    n_list=DEFAULT_N_LIST,
    lr=META_LR,
    weight_decay=META_WEIGHT_DECAY,
    log_every=0,
):
    """Meta-train and evaluate each variant for each seed.

    Returns result rows: dicts with variant, seed, scenario, N, recall.
    """
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    results = []
    for variant in variants:
        base = replace(
            VARIANT_ROLES[variant],
            t_max=cfg.t_max,
            batch_size=cfg.batch_size,
            margin=cfg.margin,
            threshold=cfg.threshold,
        )
        if variant == "fixed_step" and base.fixed_steps > base.t_max:
            base = replace(base, t_max=base.fixed_steps)
        for seed in seeds:
            vcfg = replace(base, seed=seed)
            meta, _ = meta_train(
                train_tasks, table, vcfg, n_episodes, seed,
                architecture=cfg_architecture(cfg), lr=lr,
                weight_decay=weight_decay, log_every=log_every,
            )
            for scenario, recalls in _evaluate_meta(meta, test_tasks, table, vcfg, n_list):
                for n, recall in recalls.items():
                    results.append(
                        {"variant": variant, "seed": seed, "scenario": scenario,
                         "N": n, "recall": recall}
                    )
    return results


def cfg_architecture(cfg):
    return getattr(cfg, "architecture", "interaction")


def compare_architectures(
    architectures,
    train_tasks,
    test_tasks,
    table,
    cfg,
    n_episodes,
    seeds,
    n_list=DEFAULT_N_LIST,
    lr=META_LR,
    weight_decay=META_WEIGHT_DECAY,
):
    """As run_ablation, sweeping the recommender architecture instead."""
    if not seeds:
        raise ValueError("compare_architectures needs at least one seed")
    results = []
    for arch in architectures:
        for seed in seeds:
            vcfg = replace(cfg, variant="complete", seed=seed)
            meta, _ = meta_train(
                train_tasks, table, vcfg, n_episodes, seed,
                architecture=arch, lr=lr, weight_decay=weight_decay,
            )
            for scenario, recalls in _evaluate_meta(meta, test_tasks, table, vcfg, n_list):
                for n, recall in recalls.items():
                    results.append(
                        {"variant": arch, "seed": seed, "scenario": scenario,
                         "N": n, "recall": recall}
                    )
    return results


# ---------------------------------------------------------------------------
# result serialization (schema version 1)


def results_to_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["variant", "seed", "scenario", "N", "recall"])
    for r in rows:
        writer.writerow([r["variant"], r["seed"], r["scenario"], r["N"],
                         repr(float(r["recall"]))])
    return buf.getvalue()


def summarize_results(rows):
    """Aggregated JSON-ready summary: per variant/N mean +/- std over seeds.

    Each seed contributes the equal-weight mean over its scenarios; the
    recall of a scenario is already the unweighted mean over its users.
    """
    per_seed = {}
    for r in rows:
        per_seed.setdefault((r["variant"], r["N"], r["seed"]), []).append(r["recall"])
    per_variant = {}
    for (variant, n, seed), vals in per_seed.items():
        per_variant.setdefault((variant, n), []).append(float(np.mean(vals)))
    summary = {
        "schema_version": RESULTS_SCHEMA_VERSION,
        "aggregation": "recall is user-averaged per scenario, scenario-averaged "
                       "with equal weight per seed, then averaged over seeds",
        "rows": [],
    }
    for (variant, n), seed_means in sorted(per_variant.items()):
        summary["rows"].append(
            {
                "variant": variant,
                "N": n,
                "mean_recall": float(np.mean(seed_means)),
                "std_recall": float(np.std(seed_means)),
                "n_seeds": len(seed_means),
                "per_seed": seed_means,
            }
        )
    return summary


def write_results(rows, csv_path, json_path):
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(results_to_csv(rows))
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summarize_results(rows), fh, indent=2, sort_keys=True)
        fh.write("\n")
