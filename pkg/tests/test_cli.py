"""Command-line interface: config handling and the full pipeline on disk."""

import json
import os

import numpy as np
import pytest

from scenmeta import cli


def test_load_run_config_defaults():
    cfg = cli.load_run_config()
    assert cfg.meta_lr == 1e-4
    assert cfg.meta_weight_decay == 1e-5
    assert cfg.episode_t_max == 50
    assert cfg.episode_batch_size == 32
    assert cfg.episode_fixed_steps == 20
    assert cfg.dimension == 16


def test_load_run_config_dotted_keys(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"episode.t_max": 7, "meta.episodes": 3, "shots": 4}))
    cfg = cli.load_run_config(p)
    assert cfg.episode_t_max == 7
    assert cfg.meta_episodes == 3
    assert cfg.shots == 4


def test_load_run_config_rejects_unknown_key(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"episode.tmax": 7}))  # typo
    with pytest.raises(cli.ConfigError):
        cli.load_run_config(p)


def test_load_run_config_rejects_bad_values(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"episode.variant": "nope"}))
    with pytest.raises(cli.ConfigError):
        cli.load_run_config(p)
    p.write_text(json.dumps({"test_fraction": 1.5}))
    with pytest.raises(cli.ConfigError):
        cli.load_run_config(p)
    p.write_text("[1, 2]")
    with pytest.raises(cli.ConfigError):
        cli.load_run_config(p)
    p.write_text("{not json")
    with pytest.raises(cli.ConfigError):
        cli.load_run_config(p)


def test_config_snapshot_roundtrip(tmp_path):
    cfg = cli.load_run_config()
    path = cli.write_config_snapshot(cfg, tmp_path)
    snap = json.loads(open(path).read())
    assert snap["episode.t_max"] == cfg.episode_t_max
    assert snap["meta.lr"] == cfg.meta_lr
    assert snap["dimension"] == cfg.dimension


@pytest.fixture(scope="module")
def pipeline_dir(tmp_path_factory):
    """gen-synth -> meta-train -> adapt -> evaluate on tiny settings."""
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "data"
    cfg_path = root / "cfg.json"
    cfg_path.write_text(
        json.dumps(
            {
                "dimension": 8,
                "shots": 6,
                "episode.t_max": 3,
                "episode.batch_size": 4,
                "meta.episodes": 3,
                "architecture": "mapping",
            }
        )
    )
    rc = cli.cli_dispatch(
        ["gen-synth", "--out", str(data), "--config", str(cfg_path),
         "--scenarios", "6", "--users-per", "10", "--items-per", "12"]
    )
    assert rc == 0
    run = root / "run"
    rc = cli.cli_dispatch(
        ["meta-train", "--out", str(run), "--config", str(cfg_path),
         "--interactions", str(data / "interactions.csv"),
         "--user-embeddings", str(data / "users.emb"),
         "--item-embeddings", str(data / "items.emb")]
    )
    assert rc == 0
    return root, data, run, cfg_path


def test_pipeline_meta_train_artifacts(pipeline_dir):
    root, data, run, cfg_path = pipeline_dir
    assert (run / "meta.ckpt").exists()
    lines = (run / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 3
    snap = json.loads((run / "resolved_config.json").read_text())
    assert snap["meta.episodes"] == 3


def test_pipeline_adapt_and_evaluate(pipeline_dir):
    root, data, run, cfg_path = pipeline_dir
    manifest = json.loads((data / "tasks.json").read_text())
    scenario = manifest["meta_test"][0]["scenario"]
    adapt_dir = root / "adapt"
    rc = cli.cli_dispatch(
        ["adapt", "--out", str(adapt_dir), "--config", str(cfg_path),
         "--interactions", str(data / "interactions.csv"),
         "--user-embeddings", str(data / "users.emb"),
         "--item-embeddings", str(data / "items.emb"),
         "--checkpoint", str(run / "meta.ckpt"),
         "--scenario", str(scenario)]
    )
    assert rc == 0
    assert (adapt_dir / "recommender.ckpt").exists()
    trace_lines = (adapt_dir / "trace.jsonl").read_text().splitlines()
    assert 1 <= len(trace_lines) <= 3

    eval_dir = root / "eval"
    rc = cli.cli_dispatch(
        ["evaluate", "--out", str(eval_dir), "--config", str(cfg_path),
         "--interactions", str(data / "interactions.csv"),
         "--user-embeddings", str(data / "users.emb"),
         "--item-embeddings", str(data / "items.emb"),
         "--recommender", str(adapt_dir / "recommender.ckpt"),
         "--scenario", str(scenario), "--top-n", "5", "10"]
    )
    assert rc == 0
    rows_text = (eval_dir / "results.csv").read_text()
    assert rows_text.startswith("variant,seed,scenario,N,recall")
    payload = json.loads((eval_dir / "results.json").read_text())
    cutoffs = {r["N"] for r in payload["rows"]}
    assert cutoffs == {5, 10}


def test_pipeline_adapt_unknown_scenario_fails(pipeline_dir):
    root, data, run, cfg_path = pipeline_dir
    rc = cli.cli_dispatch(
        ["adapt", "--out", str(root / "bad"), "--config", str(cfg_path),
         "--interactions", str(data / "interactions.csv"),
         "--user-embeddings", str(data / "users.emb"),
         "--item-embeddings", str(data / "items.emb"),
         "--checkpoint", str(run / "meta.ckpt"),
         "--scenario", "99999"]
    )
    assert rc == 2


def test_pipeline_ablate(pipeline_dir):
    root, data, run, cfg_path = pipeline_dir
    out = root / "ablate"
    rc = cli.cli_dispatch(
        ["ablate", "--out", str(out), "--config", str(cfg_path),
         "--interactions", str(data / "interactions.csv"),
         "--user-embeddings", str(data / "users.emb"),
         "--item-embeddings", str(data / "items.emb"),
         "--variants", "complete", "fixed_lr",
         "--seeds", "0", "--meta-episodes", "2"]
    )
    assert rc == 0
    text = (out / "results.csv").read_text()
    assert text.startswith("variant,seed,scenario,N,recall")
    summary = json.loads((out / "results.json").read_text())
    variants = {r["variant"] for r in summary["rows"]}
    assert variants == {"complete", "fixed_lr"}


def test_pipeline_pretrain_embeddings(pipeline_dir):
    root, data, run, cfg_path = pipeline_dir
    out = root / "pretrain"
    rc = cli.cli_dispatch(
        ["pretrain-embeddings", "--out", str(out), "--config", str(cfg_path),
         "--interactions", str(data / "interactions.csv"), "--epochs", "2"]
    )
    assert rc == 0
    assert (out / "users.emb").exists() and (out / "items.emb").exists()


def test_cli_dispatch_rejects_unknown_command(capsys):
    rc = cli.cli_dispatch(["no-such-command"])
    assert rc != 0
    assert "invalid choice" in capsys.readouterr().err
