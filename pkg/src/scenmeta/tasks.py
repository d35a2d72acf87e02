"""Scenario data model: ingestion, task construction, sampling, synthesis.

A scenario is one few-shot learning task: a small support set of observed
(user, item) interactions plus a query set of (user, positive, negative)
triples built from the held-out interactions of the same scenario.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from ._validation import check_fraction, check_positive_int
from .recnet import EmbeddingTable, TrainTriple

logger = logging.getLogger(__name__)


@dataclass
class InteractionLog:
    records: list  # (scenario, user, item) triples, deduplicated
    n_users: int
    n_items: int

    @property
    def scenario_ids(self):
        return sorted({c for c, _, _ in self.records})

    def by_scenario(self):
        out = {}
        for c, u, i in self.records:
            out.setdefault(c, []).append((u, i))
        return out


@dataclass
class ScenarioTask:
    scenario: int
    support: list  # (user, item) pairs
    query: list  # TrainTriple
    candidate_items: np.ndarray
    n_catalog_items: int
    support_by_user: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.candidate_items = np.asarray(sorted(self.candidate_items), dtype=np.int64)
        if not self.support_by_user:
            for u, i in self.support:
                self.support_by_user.setdefault(u, set()).add(i)


@dataclass
class MetaSplit:
    meta_train: list
    meta_test: list


def load_interactions_csv(path):
    """Parse "scenario_id,user_id,item_id" rows with exact-triple dedup."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "scenario_id,user_id,item_id":
            raise ValueError(
                f"{path}:1: expected header 'scenario_id,user_id,item_id', got {header!r}"
            )
        records = []
        seen = set()
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 3 comma-separated fields")
            try:
                triple = (int(parts[0]), int(parts[1]), int(parts[2]))
            except ValueError:
                raise ValueError(
                    f"{path}:{line_no}: non-integer id in row {line!r}"
                ) from None
            if min(triple) < 0:
                raise ValueError(f"{path}:{line_no}: negative id in row {line!r}")
            if triple in seen:
                continue
            seen.add(triple)
            records.append(triple)
    if not records:
        raise ValueError(f"{path}: no interaction rows")
    n_users = max(u for _, u, _ in records) + 1
    n_items = max(i for _, _, i in records) + 1
    logger.info("loaded %d interactions (%d users, %d items)", len(records), n_users, n_items)
    return InteractionLog(records, n_users, n_items)


def build_tasks(log, shots, min_items=2, max_items=1_000_000, neg_per_pos=4, seed=0):
    """One ScenarioTask per eligible scenario.

    Scenarios are filtered by item count; ``shots`` support pairs are drawn
    uniformly, the remaining positives become query positives with
    ``neg_per_pos`` negatives each, drawn from the scenario catalogue minus
    the user's own positives.  Per-scenario rng derivation keeps the result
    independent of scenario iteration order.
    """
    check_positive_int(shots, "shots")
    check_positive_int(neg_per_pos, "neg_per_pos")
    if min_items > max_items:
        raise ValueError(f"min_items {min_items} exceeds max_items {max_items}")
    tasks = []
    per_scenario = log.by_scenario()
    for scenario in sorted(per_scenario):
        positives = sorted(per_scenario[scenario])
        items = sorted({i for _, i in positives})
        if not min_items <= len(items) <= max_items:
            continue
        if len(positives) < shots:
            logger.warning(
                "scenario %d has %d positives < %d shots; excluded",
                scenario,
                len(positives),
                shots,
            )
            continue
        rng = np.random.default_rng([seed, scenario])
        order = rng.permutation(len(positives))
        support = [positives[k] for k in order[:shots]]
        query_pos = [positives[k] for k in sorted(order[shots:])]
        user_pos = {}
        for u, i in positives:
            user_pos.setdefault(u, set()).add(i)
        item_arr = np.asarray(items, dtype=np.int64)
        query = []
        for u, i in query_pos:
            pool = np.array([it for it in item_arr if it not in user_pos[u]], dtype=np.int64)
            if pool.size == 0:
                continue
            for neg in rng.choice(pool, size=neg_per_pos, replace=True):
                query.append(TrainTriple(u, i, int(neg)))
        tasks.append(
            ScenarioTask(
                scenario=scenario,
                support=support,
                query=query,
                candidate_items=item_arr,
                n_catalog_items=log.n_items,
            )
        )
    return tasks


def split_meta(tasks, test_fraction, seed):
    check_fraction(test_fraction, "test_fraction")
    if len(tasks) < 2:
        raise ValueError("need at least 2 tasks to split")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(tasks))
    n_test = int(round(len(tasks) * test_fraction))
    n_test = min(max(n_test, 1), len(tasks) - 1)
    test_idx = set(order[:n_test].tolist())
    meta_test = [tasks[k] for k in sorted(test_idx)]
    meta_train = [tasks[k] for k in range(len(tasks)) if k not in test_idx]
    assert {t.scenario for t in meta_train}.isdisjoint({t.scenario for t in meta_test})
    return MetaSplit(meta_train, meta_test)


def sample_batch(task, n, rng):
    """N training triples: support positives with replacement plus fresh
    uniform negatives avoiding each user's support positives."""
    check_positive_int(n, "n")
    if not task.support:
        raise ValueError(f"scenario {task.scenario}: empty support set")
    candidates = task.candidate_items
    batch = []
    for _ in range(n):
        u, i = task.support[int(rng.integers(len(task.support)))]
        pos_set = task.support_by_user[u]
        neg = None
        for _attempt in range(100):
            j = int(candidates[int(rng.integers(len(candidates)))])
            if j not in pos_set:
                neg = j
                break
        if neg is None:
            # scenario catalogue exhausted for this user; fall back globally
            pool = [j for j in range(task.n_catalog_items) if j not in pos_set]
            if not pool:
                raise ValueError(
                    f"scenario {task.scenario}: user {u} has no valid negative items"
                )
            neg = pool[int(rng.integers(len(pool)))]
        batch.append(TrainTriple(u, i, neg))
    return batch


def gen_synthetic_family(
    n_scenarios,
    users_per,
    items_per,
    d_latent,
    noise,
    seed,
    latents=None,
    table_noise=0.1,
):
    """Synthetic scenario family that is few-shot learnable by construction.

    Every scenario, user, and item carries a latent vector; an interaction
    between user u and item i inside scenario c occurs with probability
    sigmoid((u_lat + c_lat) . i_lat / sqrt(d) + eps), eps ~ Normal(0, noise).
    The returned embedding table is the user/item latents with additive
    noise, so the frozen embeddings carry real (but imperfect) signal.
    """
    check_positive_int(n_scenarios, "n_scenarios")
    check_positive_int(users_per, "users_per")
    check_positive_int(items_per, "items_per")
    check_positive_int(d_latent, "d_latent")
    rng = np.random.default_rng(seed)
    if latents is not None:
        user_lat, item_lat, scen_lat = (np.asarray(a, dtype=np.float64) for a in latents)
    else:
        user_lat = rng.standard_normal((users_per * 4, d_latent))
        item_lat = rng.standard_normal((items_per * 4, d_latent))
        scen_lat = rng.standard_normal((n_scenarios, d_latent))
    m, n = user_lat.shape[0], item_lat.shape[0]
    records = []
    for c in range(n_scenarios):
        for _attempt in range(10):
            users = rng.choice(m, size=min(users_per, m), replace=False)
            items = rng.choice(n, size=min(items_per, n), replace=False)
            z = (user_lat[users] + scen_lat[c]) @ item_lat[items].T / np.sqrt(d_latent)
            if noise > 0:
                z = z + rng.normal(0.0, noise, size=z.shape)
            prob = 1.0 / (1.0 + np.exp(-z))
            hits = rng.random(size=z.shape) < prob
            if hits.any():
                for a, u in enumerate(users):
                    for b, i in enumerate(items):
                        if hits[a, b]:
                            records.append((c, int(u), int(i)))
                break
        else:
            raise ValueError(f"scenario {c}: no interactions after 10 regenerations")
    table = EmbeddingTable(
        user_lat + table_noise * rng.standard_normal(user_lat.shape),
        item_lat + table_noise * rng.standard_normal(item_lat.shape),
    )
    return InteractionLog(records, m, n), table


def write_interactions_csv(path, log):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("scenario_id,user_id,item_id\n")
        for c, u, i in log.records:
            fh.write(f"{c},{u},{i}\n")


def write_task_manifest(path, split):
    """JSON manifest of scenario ids and support/query sizes per split."""
    payload = {
        side: [
            {
                "scenario": t.scenario,
                "support_size": len(t.support),
                "query_size": len(t.query),
                "n_candidates": int(len(t.candidate_items)),
            }
            for t in tasks
        ]
        for side, tasks in (("meta_train", split.meta_train), ("meta_test", split.meta_test))
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
