"""Command-line entry point.

Subcommands cover the full pipeline: synthetic data generation, embedding
pretraining, meta-training, scenario adaptation, evaluation, the ablation
sweep, and the architecture comparison.  Configuration comes from an
optional JSON file of flat dotted keys (e.g. ``{"episode.t_max": 30}``)
overridden by command-line flags; every run writes a resolved-config
snapshot beside its outputs so it can be replayed from its artifacts alone.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import checkpoint, evaluation, recnet, tasks as tasks_mod
from .episode import STOP_MODES, VARIANTS, EpisodeConfig, trace_to_jsonl
from .metatrain import META_LR, META_WEIGHT_DECAY, adapt, meta_train
from .recnet import ARCHITECTURES


@dataclass
class RunConfig:
    """Every run-level knob, with documented defaults.

    JSON config files use flat dotted keys; a dot maps to an underscore
    (``episode.t_max`` -> ``episode_t_max``).  Unknown keys are rejected.
    """

    episode_t_max: int = 50
    episode_batch_size: int = 32
    episode_stop_mode: str = "stochastic"
    episode_threshold: float = 0.5
    episode_variant: str = "complete"
    episode_fixed_lr: float = 0.01
    episode_fixed_steps: int = 20
    episode_margin: float = 1.0
    meta_lr: float = META_LR
    meta_weight_decay: float = META_WEIGHT_DECAY
    meta_episodes: int = 2000
    architecture: str = "interaction"
    dimension: int = 16
    shots: int = 16
    neg_per_pos: int = 4
    test_fraction: float = 0.2
    seed: int = 0

    def episode_config(self, seed=None):
        return EpisodeConfig(
            t_max=self.episode_t_max,
            batch_size=self.episode_batch_size,
            stop_mode=self.episode_stop_mode,
            threshold=self.episode_threshold,
            variant=self.episode_variant,
            fixed_lr=self.episode_fixed_lr,
            fixed_steps=self.episode_fixed_steps,
            margin=self.episode_margin,
            seed=self.seed if seed is None else seed,
        ).validate()


_FIELD_NAMES = {f.name for f in fields(RunConfig)}


class ConfigError(ValueError):
    pass


def load_run_config(path=None, overrides=None):
    cfg = RunConfig()
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        updates = {}
        for key, value in raw.items():
            name = key.replace(".", "_")
            if name not in _FIELD_NAMES:
                raise ConfigError(f"{path}: unknown config key {key!r}")
            updates[name] = value
        cfg = replace(cfg, **updates)
    if overrides:
        cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    _validate_run_config(cfg)
    return cfg


def _validate_run_config(cfg):
    for name, value, kind in (
        ("episode.stop_mode", cfg.episode_stop_mode, STOP_MODES),
        ("episode.variant", cfg.episode_variant, VARIANTS),
        ("architecture", cfg.architecture, ARCHITECTURES),
    ):
        if value not in kind:
            raise ConfigError(f"config field {name}: {value!r} not in {kind}")
    for name in ("episode_t_max", "episode_batch_size", "meta_episodes",
                 "dimension", "shots", "neg_per_pos"):
        if int(getattr(cfg, name)) < 1:
            raise ConfigError(f"config field {name.replace('_', '.', 1)}: must be >= 1")
    if not 0.0 < cfg.test_fraction < 1.0:
        raise ConfigError("config field test_fraction: must be in (0, 1)")


def write_config_snapshot(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "resolved_config.json")
    snapshot = {name.replace("_", ".", 1) if name.startswith(("episode_", "meta_"))
                else name: value for name, value in asdict(cfg).items()}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(snapshot, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# shared data plumbing


def _load_corpus(args, cfg):
    log = tasks_mod.load_interactions_csv(args.interactions)
    table = recnet.EmbeddingTable(
        recnet.read_embeddings(args.user_embeddings),
        recnet.read_embeddings(args.item_embeddings),
    )
    all_tasks = tasks_mod.build_tasks(
        log, shots=cfg.shots, neg_per_pos=cfg.neg_per_pos, seed=cfg.seed
    )
    return log, table, all_tasks


def _data_flags(parser):
    parser.add_argument("--interactions", required=True, help="interaction CSV path")
    parser.add_argument("--user-embeddings", required=True)
    parser.add_argument("--item-embeddings", required=True)


def _common_flags(parser):
    parser.add_argument("--config", help="JSON config file with flat dotted keys")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", required=True, help="output directory")


def _overrides_from(args, extra=()):
    overrides = {"seed": args.seed}
    for name in extra:
        overrides[name] = getattr(args, name.replace(".", "_"), None)
    return overrides


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_synth(args):
    cfg = load_run_config(args.config, _overrides_from(args))
    os.makedirs(args.out, exist_ok=True)
    log, table = tasks_mod.gen_synthetic_family(
        n_scenarios=args.scenarios,
        users_per=args.users_per,
        items_per=args.items_per,
        d_latent=cfg.dimension,
        noise=args.noise,
        seed=cfg.seed,
    )
    tasks_mod.write_interactions_csv(os.path.join(args.out, "interactions.csv"), log)
    recnet.write_embeddings(os.path.join(args.out, "users.emb"), table.user_matrix)
    recnet.write_embeddings(os.path.join(args.out, "items.emb"), table.item_matrix)
    all_tasks = tasks_mod.build_tasks(
        log, shots=cfg.shots, neg_per_pos=cfg.neg_per_pos, seed=cfg.seed
    )
    split = tasks_mod.split_meta(all_tasks, cfg.test_fraction, cfg.seed)
    tasks_mod.write_task_manifest(os.path.join(args.out, "tasks.json"), split)
    write_config_snapshot(cfg, args.out)
    print(f"wrote {len(log.records)} interactions over {len(all_tasks)} scenarios to {args.out}")
    return 0


def _cmd_pretrain_embeddings(args):
    cfg = load_run_config(args.config, _overrides_from(args))
    os.makedirs(args.out, exist_ok=True)
    log = tasks_mod.load_interactions_csv(args.interactions)
    pairs = [(u, i) for _c, u, i in log.records]
    table = recnet.mf_pretrain(
        pairs, d=cfg.dimension, epochs=args.epochs, lr=args.lr, reg=args.reg,
        seed=cfg.seed,
    )
    recnet.write_embeddings(os.path.join(args.out, "users.emb"), table.user_matrix)
    recnet.write_embeddings(os.path.join(args.out, "items.emb"), table.item_matrix)
    write_config_snapshot(cfg, args.out)
    print(f"pretrained {table.n_users} user / {table.n_items} item embeddings")
    return 0


def _cmd_meta_train(args):
    cfg = load_run_config(args.config, _overrides_from(args, (
        "episode_variant", "meta_episodes", "architecture")))
    os.makedirs(args.out, exist_ok=True)
    _, table, all_tasks = _load_corpus(args, cfg)
    split = tasks_mod.split_meta(all_tasks, cfg.test_fraction, cfg.seed)
    meta, log_rows = meta_train(
        split.meta_train, table, cfg.episode_config(), cfg.meta_episodes, cfg.seed,
        architecture=cfg.architecture, lr=cfg.meta_lr,
        weight_decay=cfg.meta_weight_decay, log_every=args.log_every,
    )
    checkpoint.save_meta(os.path.join(args.out, "meta.ckpt"), meta)
    with open(os.path.join(args.out, "train_log.jsonl"), "w", encoding="utf-8") as fh:
        for row in log_rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    write_config_snapshot(cfg, args.out)
    print(f"meta-trained {cfg.meta_episodes} episodes; checkpoint in {args.out}")
    return 0


def _cmd_adapt(args):
    cfg = load_run_config(args.config, _overrides_from(args))
    os.makedirs(args.out, exist_ok=True)
    _, table, all_tasks = _load_corpus(args, cfg)
    by_scenario = {t.scenario: t for t in all_tasks}
    if args.scenario not in by_scenario:
        print(f"error: scenario {args.scenario} not found", file=sys.stderr)
        return 2
    meta = checkpoint.load_meta(args.checkpoint)
    params, trace = adapt(
        meta, by_scenario[args.scenario], table, cfg.episode_config(),
        return_trace=True,
    )
    checkpoint.save_recommender(os.path.join(args.out, "recommender.ckpt"), params)
    with open(os.path.join(args.out, "trace.jsonl"), "w", encoding="utf-8") as fh:
        fh.write(trace_to_jsonl(trace))
    write_config_snapshot(cfg, args.out)
    print(f"adapted to scenario {args.scenario} in {trace.stop_step} steps")
    return 0


def _cmd_evaluate(args):
    cfg = load_run_config(args.config, _overrides_from(args))
    os.makedirs(args.out, exist_ok=True)
    _, table, all_tasks = _load_corpus(args, cfg)
    by_scenario = {t.scenario: t for t in all_tasks}
    if args.scenario not in by_scenario:
        print(f"error: scenario {args.scenario} not found", file=sys.stderr)
        return 2
    task = by_scenario[args.scenario]
    params = checkpoint.load_recommender(args.recommender)
    n_list = tuple(args.top_n)
    recalls = evaluation.evaluate_scenario(params, table, task, n_list)
    rows = [
        {"variant": cfg.episode_variant, "seed": cfg.seed,
         "scenario": task.scenario, "N": n, "recall": r}
        for n, r in recalls.items()
    ]
    evaluation.write_results(
        rows, os.path.join(args.out, "results.csv"), os.path.join(args.out, "results.json")
    )
    write_config_snapshot(cfg, args.out)
    for n, r in recalls.items():
        print(f"scenario {task.scenario}  recall@{n} = {r:.4f}")
    return 0


def _cmd_ablate(args):
    cfg = load_run_config(args.config, _overrides_from(args, ("meta_episodes",)))
    os.makedirs(args.out, exist_ok=True)
    _, table, all_tasks = _load_corpus(args, cfg)
    split = tasks_mod.split_meta(all_tasks, cfg.test_fraction, cfg.seed)
    rows = evaluation.run_ablation(
        args.variants, split.meta_train, split.meta_test, table, cfg.episode_config(),
        cfg.meta_episodes, args.seeds, n_list=tuple(args.top_n),
        lr=cfg.meta_lr, weight_decay=cfg.meta_weight_decay,
    )
    evaluation.write_results(
        rows, os.path.join(args.out, "results.csv"), os.path.join(args.out, "results.json")
    )
    write_config_snapshot(cfg, args.out)
    for row in evaluation.summarize_results(rows)["rows"]:
        print(f"{row['variant']:>10}  recall@{row['N']} = "
              f"{row['mean_recall']:.4f} +/- {row['std_recall']:.4f}")
    return 0


def _cmd_compare_arch(args):
    cfg = load_run_config(args.config, _overrides_from(args, ("meta_episodes",)))
    os.makedirs(args.out, exist_ok=True)
    _, table, all_tasks = _load_corpus(args, cfg)
    split = tasks_mod.split_meta(all_tasks, cfg.test_fraction, cfg.seed)
    rows = evaluation.compare_architectures(
        args.architectures, split.meta_train, split.meta_test, table, cfg.episode_config(),
        cfg.meta_episodes, args.seeds, n_list=tuple(args.top_n),
        lr=cfg.meta_lr, weight_decay=cfg.meta_weight_decay,
    )
    evaluation.write_results(
        rows, os.path.join(args.out, "results.csv"), os.path.join(args.out, "results.json")
    )
    write_config_snapshot(cfg, args.out)
    for row in evaluation.summarize_results(rows)["rows"]:
        print(f"{row['variant']:>12}  recall@{row['N']} = "
              f"{row['mean_recall']:.4f} +/- {row['std_recall']:.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="scenmeta",
        description="Scenario-specific meta-learning for few-shot recommendation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic scenario family")
    _common_flags(p)
    p.add_argument("--scenarios", type=int, default=20)
    p.add_argument("--users-per", type=int, default=24)
    p.add_argument("--items-per", type=int, default=40)
    p.add_argument("--noise", type=float, default=0.5)
    p.set_defaults(func=_cmd_gen_synth)

    p = sub.add_parser("pretrain-embeddings", help="matrix-factorization embedding pretraining")
    _common_flags(p)
    p.add_argument("--interactions", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--reg", type=float, default=1e-4)
    p.set_defaults(func=_cmd_pretrain_embeddings)

    p = sub.add_parser("meta-train", help="meta-train initialization and controllers")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--episode-variant", choices=VARIANTS, default=None,
                   dest="episode_variant")
    p.add_argument("--meta-episodes", type=int, default=None, dest="meta_episodes")
    p.add_argument("--architecture", choices=ARCHITECTURES, default=None)
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=_cmd_meta_train)

    p = sub.add_parser("adapt", help="adapt to one scenario from a meta checkpoint")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", type=int, required=True)
    p.set_defaults(func=_cmd_adapt)

    p = sub.add_parser("evaluate", help="recall evaluation of an adapted recommender")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--recommender", required=True)
    p.add_argument("--scenario", type=int, required=True)
    p.add_argument("--top-n", type=int, nargs="+", default=[10])
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ablate", help="run the meta-learner ablation sweep")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--meta-episodes", type=int, default=None, dest="meta_episodes")
    p.add_argument("--top-n", type=int, nargs="+", default=[10])
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("compare-arch", help="compare recommender architectures")
    _common_flags(p)
    _data_flags(p)
    p.add_argument("--architectures", nargs="+", choices=ARCHITECTURES,
                   default=list(ARCHITECTURES))
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--meta-episodes", type=int, default=None, dest="meta_episodes")
    p.add_argument("--top-n", type=int, nargs="+", default=[10])
    p.set_defaults(func=_cmd_compare_arch)

    return parser


def cli_dispatch(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
