"""Experiment runner: generate | train | pretrain | evaluate | report.

Configuration is a flat namespaced key-value file (``key = value`` lines,
``#`` comments).  Resolution order is defaults < file < command-line flags,
and every run directory receives a frozen ``config.resolved`` copy that
reproduces the run bit-exactly in single-threaded mode.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .datagen import (
    DataError,
    Dataset,
    GraphSpec,
    SemSpec,
    generate,
    load_dataset,
    save_dataset,
    standardize,
)
from .graphs import DirectedGraph, GraphError, compute_metrics
from .pruning import PruneConfig, PruneError, prune
from .scoring import ScoreCache, ScoreConfig, ScoreError, ordering_score
from .training import TrainConfig, pretrain_supervised, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

DEFAULTS: dict[str, str] = {
    "graph.scheme": "ER",
    "graph.d": "10",
    "graph.h": "2",
    "sem.family": "LinearGaussian",
    "sem.m": "1000",
    "sem.weight_lo": "0.5",
    "sem.weight_hi": "2.0",
    "sem.noise_scale": "1.0",
    "sem.equal_variance": "true",
    "pipeline.standardize": "false",
    "score.backend": "LinearOLS",
    "score.variance_mode": "Pooled",
    "score.pooled_variance": "1.0",
    "score.penalty_enabled": "true",
    "score.kernel_bandwidth": "1.0",
    "score.ridge": "1.0",
    "score.max_kernel_rows": "300",
    "train.reward_mode": "dense",
    "train.gamma": "0.98",
    "train.actor_lr": "1e-4",
    "train.critic_lr": "1e-3",
    "train.batch_size": "32",
    "train.sample_batch": "64",
    "train.max_episodes": "2000",
    "train.entropy_bonus": "1e-3",
    "train.entropy_decay": "0.99",
    "train.patience": "500",
    "train.critic_wiring": "per-step",
    "train.return_transform": "standardize",
    "train.checkpoint_every": "0",
    "train.pretrained": "",
    "prune.method": "Threshold",
    "prune.threshold": "0.3",
    "prune.alpha": "0.001",
    "prune.basis": "Linear",
    "run.seed": "0",
    "run.repetitions": "1",
}

# CLI flags that mirror config keys.
FLAG_KEYS = {
    "reward_mode": "train.reward_mode",
    "gamma": "train.gamma",
    "threshold": "prune.threshold",
    "backend": "score.backend",
    "seed": "run.seed",
    "episodes": "train.max_episodes",
    "repetitions": "run.repetitions",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        raise UsageError(message)


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = value
    return values


def resolve_config(args) -> dict[str, str]:
    resolved = dict(DEFAULTS)
    if getattr(args, "config", None):
        resolved.update(parse_config_file(args.config))
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            resolved[key] = str(value)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        if key not in DEFAULTS:
            raise UsageError(f"--set: unknown config key {key!r}")
        resolved[key] = value
    return resolved


def write_resolved(config: dict[str, str], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"{key} = {config[key]}" for key in sorted(config)]
    (out_dir / "config.resolved").write_text("\n".join(lines) + "\n")


def _bool(value: str) -> bool:
    if value.lower() in ("true", "1", "yes"):
        return True
    if value.lower() in ("false", "0", "no"):
        return False
    raise UsageError(f"expected a boolean, got {value!r}")


def graph_spec_from(config: dict[str, str], seed: int) -> GraphSpec:
    return GraphSpec(
        scheme=config["graph.scheme"],
        d=int(config["graph.d"]),
        h=float(config["graph.h"]),
        seed=seed,
    )


def sem_spec_from(config: dict[str, str]) -> SemSpec:
    return SemSpec(
        family=config["sem.family"],
        m=int(config["sem.m"]),
        weight_range=(float(config["sem.weight_lo"]), float(config["sem.weight_hi"])),
        noise_scale=float(config["sem.noise_scale"]),
        equal_variance=_bool(config["sem.equal_variance"]),
    )


def score_config_from(config: dict[str, str]) -> ScoreConfig:
    return ScoreConfig(
        backend=config["score.backend"],
        penalty_enabled=_bool(config["score.penalty_enabled"]),
        variance_mode=config["score.variance_mode"],
        pooled_variance=float(config["score.pooled_variance"]),
        kernel_bandwidth=float(config["score.kernel_bandwidth"]),
        ridge=float(config["score.ridge"]),
        max_kernel_rows=int(config["score.max_kernel_rows"]),
    )


def train_config_from(config: dict[str, str], seed: int) -> TrainConfig:
    pretrained = config["train.pretrained"] or None
    if pretrained is not None and not Path(pretrained).exists():
        raise DataError(f"pretrained checkpoint {pretrained!r} does not exist")
    return TrainConfig(
        reward_mode=config["train.reward_mode"],
        gamma=float(config["train.gamma"]),
        actor_lr=float(config["train.actor_lr"]),
        critic_lr=float(config["train.critic_lr"]),
        batch_size=int(config["train.batch_size"]),
        sample_batch=int(config["train.sample_batch"]),
        max_episodes=int(config["train.max_episodes"]),
        seed=seed,
        entropy_bonus=float(config["train.entropy_bonus"]),
        entropy_decay=float(config["train.entropy_decay"]),
        patience=int(config["train.patience"]),
        pretrained_checkpoint=pretrained,
        critic_wiring=config["train.critic_wiring"],
        return_transform=config["train.return_transform"],
        checkpoint_every=int(config["train.checkpoint_every"]),
    )


def prune_config_from(config: dict[str, str]) -> PruneConfig:
    return PruneConfig(
        method=config["prune.method"],
        threshold=float(config["prune.threshold"]),
        alpha=float(config["prune.alpha"]),
        basis=config["prune.basis"],
    )


def _derived_seeds(base: int, rep: int) -> tuple[int, int]:
    state = np.random.SeedSequence(entropy=base, spawn_key=(rep,)).generate_state(2)
    return int(state[0]), int(state[1])


# ---------------------------------------------------------------------------
# Subcommands.

def cmd_generate(args) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    reps = int(config["run.repetitions"])
    base_seed = int(config["run.seed"])
    sem = sem_spec_from(config)
    for rep in range(reps):
        graph_seed, data_seed = _derived_seeds(base_seed, rep)
        gspec = graph_spec_from(config, graph_seed)
        dataset = generate(gspec, sem, seed=data_seed)
        save_dataset(dataset, out / f"rep{rep:03d}")
    if reps > 0:
        write_resolved(config, out)
    print(f"generated {reps} dataset(s) under {out}")
    return EXIT_OK


def _load_for_run(path, config) -> Dataset:
    dataset = load_dataset(path)
    if _bool(config["pipeline.standardize"]):
        dataset = standardize(dataset)
    return dataset


def cmd_train(args) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    dataset = _load_for_run(args.data, config)
    seed = int(config["run.seed"])
    train_cfg = train_config_from(config, seed)
    score_cfg = score_config_from(config)
    prune_cfg = prune_config_from(config)

    write_resolved(config, out)
    cache = ScoreCache()
    state, _params = train(dataset, train_cfg, score_cfg=score_cfg, cache=cache, out_dir=out)

    graph, report = prune(dataset, state.best_ordering, prune_cfg)
    graph.to_csv(out / "pred.csv")
    (out / "prune_report.json").write_text(json.dumps(report, indent=2))
    cache.save(out / "scores.cache")

    summary = {
        "best_score": state.best_score,
        "episodes": state.episode,
        "cache_hit_rate": cache.hit_rate,
    }
    if dataset.truth.num_edges > 0:
        metrics = compute_metrics(graph, dataset.truth)
        summary.update(
            tpr=metrics.tpr,
            shd=metrics.shd,
            num_true_edges=metrics.num_true_edges,
            num_pred_edges=metrics.num_pred_edges,
        )
    (out / "metrics.json").write_text(json.dumps(summary, indent=2))
    print(f"best score {state.best_score:.4f} after {state.episode} episodes -> {out}")
    if "shd" in summary:
        print(f"tpr {summary['tpr']:.3f} shd {summary['shd']}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    datasets = [_load_for_run(path, config) for path in args.data]
    if not datasets:
        raise UsageError("pretrain needs at least one --data directory")
    seed = int(config["run.seed"])
    train_cfg = train_config_from(config, seed)
    _params, losses = pretrain_supervised(
        datasets, train_cfg, epochs=int(args.epochs), out_path=out
    )
    curve = out.with_suffix(".losses.csv")
    with open(curve, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss"])
        writer.writerows(enumerate(losses))
    print(f"pretrained on {len(datasets)} dataset(s); checkpoint {out}, curve {curve}")
    return EXIT_OK


def _read_adjacency(path) -> DirectedGraph:
    try:
        return DirectedGraph.from_csv(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read adjacency {path}: {exc}") from exc


def cmd_evaluate(args) -> int:
    pred = _read_adjacency(args.pred)
    truth = _read_adjacency(args.truth)
    metrics = compute_metrics(pred, truth)
    payload = {
        "tpr": metrics.tpr,
        "shd": metrics.shd,
        "num_true_edges": metrics.num_true_edges,
        "num_pred_edges": metrics.num_pred_edges,
    }
    text = json.dumps(payload, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def _task_key(config: dict[str, str]) -> str:
    return (
        f"{config['graph.scheme']}{config['graph.h']}"
        f"-d{config['graph.d']}-{config['sem.family']}-m{config['sem.m']}"
        f"-{config['train.reward_mode']}"
    )


def cmd_report(args) -> int:
    groups: dict[str, list[dict]] = defaultdict(list)
    curves: list[tuple[str, list[tuple[str, str, str]]]] = []
    for run in args.runs:
        run = Path(run)
        metrics_path = run / "metrics.json"
        config_path = run / "config.resolved"
        if not metrics_path.exists():
            raise DataError(f"{run} has no metrics.json")
        metrics = json.loads(metrics_path.read_text())
        key = run.name
        if config_path.exists():
            key = _task_key(parse_config_file(config_path))
        groups[key].append(metrics)
        rewards_path = run / "rewards.csv"
        if rewards_path.exists():
            with open(rewards_path, newline="") as fh:
                rows = list(csv.reader(fh))[1:]
            curves.append((str(run), rows))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "runs", "metric", "mean (std)"])
        for key in sorted(groups):
            runs = groups[key]
            for metric in ("tpr", "shd", "best_score"):
                vals = [r[metric] for r in runs if metric in r]
                if not vals:
                    continue
                mean = float(np.mean(vals))
                std = float(np.std(vals))
                writer.writerow([key, len(vals), metric, f"{mean:.1f} ({std:.1f})"])
    with open(out / "reward_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "episode", "sampled_reward", "best_so_far"])
        for run_name, rows in curves:
            for row in rows:
                writer.writerow([run_name, *row])
    print(f"aggregated {sum(len(v) for v in groups.values())} run(s) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="ordlearn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key")
        p.add_argument("--seed", type=int, help="base RNG seed")

    gen = sub.add_parser("generate", help="sample graphs and SEM data to disk")
    add_common(gen)
    gen.add_argument("--out", required=True)
    gen.add_argument("--repetitions", type=int)

    tr = sub.add_parser("train", help="search orderings and prune the best one")
    add_common(tr)
    tr.add_argument("--data", required=True, help="dataset directory")
    tr.add_argument("--out", required=True)
    tr.add_argument("--reward-mode", dest="reward_mode", choices=["dense", "episodic"])
    tr.add_argument("--gamma", type=float)
    tr.add_argument("--threshold", type=float)
    tr.add_argument("--backend", choices=["LinearOLS", "KernelRidgeGP"])
    tr.add_argument("--episodes", type=int)
    tr.add_argument("--pretrained", help="actor checkpoint to start from")

    pre = sub.add_parser("pretrain", help="supervised pretraining on known truths")
    add_common(pre)
    pre.add_argument("--data", action="append", required=True,
                     help="dataset directory (repeatable)")
    pre.add_argument("--out", required=True, help="checkpoint file to write")
    pre.add_argument("--epochs", type=int, default=300)

    ev = sub.add_parser("evaluate", help="TPR/SHD of a predicted adjacency")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True)
    ev.add_argument("--out")

    rep = sub.add_parser("report", help="aggregate metrics across run directories")
    rep.add_argument("--runs", nargs="+", required=True)
    rep.add_argument("--out", required=True)

    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "pretrain": cmd_pretrain,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "pretrained", None):
            args.set = (args.set or []) + [f"train.pretrained={args.pretrained}"]
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GraphError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ScoreError, PruneError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
