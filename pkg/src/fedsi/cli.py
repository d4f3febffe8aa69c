"""Command-line experiment runner.

Subcommands: partition (materialize per-client shards), run (train the
configured algorithm), evaluate (personalize + score a checkpoint), and
report (aggregate metrics files into a comparison table).  Every artifact
except the run manifest's timestamps is a deterministic function of
(config, seed).

Exit codes: 0 success, 1 configuration/validation error, 2 numerical
failure during training or inference, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, checkpoint_json, load_checkpoint
from .config import ExperimentConfig, load_config
from .data import (
    ClientSplit,
    FederatedDataset,
    LabeledSet,
    load_idx_pair,
    partition_label_skew,
    subset_protocol,
    synthetic_mixture,
)
from .errors import ConfigError, FedsiError, NonFiniteLoss, NotPositiveDefinite
from .federation import (
    derived_rng,
    evaluate_novel_client,
    evaluate_run,
    run_rounds,
)
from .model import LayerLayout

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3

TAG_DATA_SYNTH = 5
TAG_DATA_SUBSET = 6
TAG_DATA_PARTITION = 7


def _num(x: float) -> str:
    return format(float(x), ".17g")


def model_layout(cfg: ExperimentConfig, input_dim: int, output_dim: int) -> LayerLayout:
    return LayerLayout(input_dim=input_dim, hidden_dim=cfg.hidden_dim,
                       output_dim=output_dim)


def build_corpus(cfg: ExperimentConfig) -> tuple[LabeledSet, LabeledSet]:
    """Load or synthesize the (train, test) corpus named by the config."""
    d = cfg.data
    if d.kind == "synthetic":
        seed = int(derived_rng(cfg.seed, TAG_DATA_SYNTH).integers(2**63))
        return synthetic_mixture(d.n_classes, d.dim, d.per_class, d.separation, seed)
    for key in ("train_images", "train_labels", "test_images", "test_labels"):
        path = getattr(d, key)
        if not os.path.exists(path):
            raise FileNotFoundError(f"data.{key} file does not exist: {path}")
    train = load_idx_pair(d.train_images, d.train_labels)
    test = load_idx_pair(d.test_images, d.test_labels)
    if d.subset != "full":
        seed = int(derived_rng(cfg.seed, TAG_DATA_SUBSET).integers(2**63))
        train, test = subset_protocol(train, test, d.subset, d.dataset_name, seed)
    return train, test


def build_partition(cfg: ExperimentConfig) -> FederatedDataset:
    train, test = build_corpus(cfg)
    seed = int(derived_rng(cfg.seed, TAG_DATA_PARTITION).integers(2**63))
    return partition_label_skew(train, test, cfg.data.n_clients,
                                cfg.data.labels_per_client, seed)


def write_partition(fed: FederatedDataset, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(fed.manifest_json())
    for i, split in enumerate(fed.clients):
        np.save(out_dir / f"client_{i:03d}_train_x.npy", split.train.features)
        np.save(out_dir / f"client_{i:03d}_train_y.npy", split.train.labels)
        np.save(out_dir / f"client_{i:03d}_test_x.npy", split.test.features)
        np.save(out_dir / f"client_{i:03d}_test_y.npy", split.test.labels)


def read_partition(out_dir: Path) -> FederatedDataset:
    manifest_path = out_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no partition manifest at {manifest_path}; "
                                "run `fedsi partition` first")
    manifest = json.loads(manifest_path.read_text())
    clients = []
    labels = []
    for entry in manifest["clients"]:
        i = entry["id"]
        clients.append(ClientSplit(
            train=LabeledSet(np.load(out_dir / f"client_{i:03d}_train_x.npy"),
                             np.load(out_dir / f"client_{i:03d}_train_y.npy")),
            test=LabeledSet(np.load(out_dir / f"client_{i:03d}_test_x.npy"),
                            np.load(out_dir / f"client_{i:03d}_test_y.npy"))))
        labels.append(entry["labels"])
    num_classes = max((max(ls) for ls in labels if ls), default=-1) + 1
    return FederatedDataset(clients=clients, assigned_labels=labels,
                            seed=manifest["seed"], num_classes=num_classes)


def _dataset_tag(cfg: ExperimentConfig) -> tuple[str, str]:
    d = cfg.data
    if d.kind == "idx":
        return d.dataset_name, d.subset
    return "synthetic", "full"


def _write_run_manifest(cfg: ExperimentConfig, out: Path, outputs: dict) -> None:
    manifest = {
        "config_hash": cfg.config_hash(),
        "code_version": __version__,
        "master_seed": cfg.seed,
        "outputs": outputs,
        "created_unix": time.time(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def cmd_partition(cfg: ExperimentConfig, out: Path) -> int:
    fed = build_partition(cfg)
    write_partition(fed, out / "partition")
    print(f"wrote {fed.n_clients} client shards under {out / 'partition'}")
    return EXIT_OK


def cmd_run(cfg: ExperimentConfig, out: Path) -> int:
    dataset = read_partition(out / "partition")
    if dataset.n_clients != cfg.data.n_clients:
        raise ConfigError(f"partition has {dataset.n_clients} clients, config asks "
                          f"for {cfg.data.n_clients}; re-run `fedsi partition`")
    input_dim = dataset.clients[0].train.features.shape[1]
    layout = model_layout(cfg, input_dim, dataset.num_classes)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = cfg.config_hash()

    def writer(result, round_index):
        name = (f"checkpoint_round_{round_index:05d}.json"
                if round_index < cfg.rounds else "checkpoint_final.json")
        path = ckpt_dir / name
        path.write_text(checkpoint_json(result, round_index, cfg_hash))
        return str(path)

    result = run_rounds(cfg, dataset, layout, checkpoint_writer=writer)
    (out / "history.csv").write_text(result.history.to_csv())
    _write_run_manifest(cfg, out, {
        "checkpoint": str(ckpt_dir / "checkpoint_final.json"),
        "history": str(out / "history.csv"),
    })
    print(f"finished {cfg.rounds} rounds of {cfg.algorithm}; "
          f"final checkpoint at {ckpt_dir / 'checkpoint_final.json'}")
    return EXIT_OK


def _metrics_csv(cfg: ExperimentConfig, means: dict[str, float]) -> str:
    dataset, size = _dataset_tag(cfg)
    out = io.StringIO()
    out.write("algorithm,dataset,size,seed,accuracy,ece,mce,brier\n")
    out.write(f"{cfg.algorithm},{dataset},{size},{cfg.seed},"
              f"{_num(means['accuracy'])},{_num(means['ece'])},"
              f"{_num(means['mce'])},{_num(means['brier'])}\n")
    return out.getvalue()


def _client_metrics_csv(report) -> str:
    out = io.StringIO()
    out.write("client_id,n_test,accuracy,ece,mce,brier\n")
    for entry in report.per_client:
        m = entry.metrics
        out.write(f"{entry.client_id},{entry.n_test},{_num(m['accuracy'])},"
                  f"{_num(m['ece'])},{_num(m['mce'])},{_num(m['brier'])}\n")
    return out.getvalue()


def cmd_evaluate(cfg: ExperimentConfig, out: Path, checkpoint_path: Path | None) -> int:
    dataset = read_partition(out / "partition")
    path = checkpoint_path or (out / "checkpoints" / "checkpoint_final.json")
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = load_checkpoint(path.read_text(), expected_hash=cfg.config_hash())
    input_dim = dataset.clients[0].train.features.shape[1]
    expected = model_layout(cfg, input_dim, dataset.num_classes)
    if ckpt.result.layout != expected:
        raise CheckpointError(
            f"checkpoint layout {ckpt.result.layout} does not match the "
            f"config/partition layout {expected}")

    report = evaluate_run(cfg, ckpt.result, dataset)
    (out / "metrics.csv").write_text(_metrics_csv(cfg, report.mean_metrics()))
    (out / "client_metrics.csv").write_text(_client_metrics_csv(report))
    (out / "reliability.csv").write_text(report.reliability(cfg.ece_bins).to_csv())
    if cfg.novel_client is not None:
        novel = evaluate_novel_client(cfg, ckpt.result, dataset)
        dataset_name, size = _dataset_tag(cfg)
        text = ("algorithm,dataset,size,seed,client_id,accuracy,ece,mce,brier\n"
                f"{cfg.algorithm},{dataset_name},{size},{cfg.seed},{novel.client_id},"
                f"{_num(novel.metrics['accuracy'])},{_num(novel.metrics['ece'])},"
                f"{_num(novel.metrics['mce'])},{_num(novel.metrics['brier'])}\n")
        (out / "novel_metrics.csv").write_text(text)
    means = report.mean_metrics()
    stds = report.std_metrics()
    print("client-mean metrics (±std across clients):")
    for key in ("accuracy", "ece", "mce", "brier"):
        print(f"  {key:9s} {means[key]:.4f} ± {stds[key]:.4f}")
    return EXIT_OK


def _collect_metric_rows(root: Path) -> list[dict]:
    rows = []
    for path in sorted(root.rglob("metrics.csv")):
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                rows.append(row)
    return rows


def cmd_report(root: Path, out: Path | None) -> int:
    rows = _collect_metric_rows(root)
    groups: dict[tuple[str, str, str], list[dict]] = {}
    for row in rows:
        groups.setdefault((row["algorithm"], row["dataset"], row["size"]), []).append(row)

    header = ["algorithm", "dataset", "size", "seeds",
              "accuracy_mean", "accuracy_std", "ece_mean", "ece_std",
              "mce_mean", "mce_std", "brier_mean", "brier_std"]
    table_rows = []
    for key in sorted(groups):
        entries = groups[key]
        stats = {}
        for metric in ("accuracy", "ece", "mce", "brier"):
            values = np.array([float(e[metric]) for e in entries])
            stats[metric] = (values.mean(), values.std())
        table_rows.append([key[0], key[1], key[2], str(len(entries))]
                          + [f"{v:.6f}" for metric in ("accuracy", "ece", "mce", "brier")
                             for v in stats[metric]])

    csv_text = ",".join(header) + "\n" + "".join(",".join(r) + "\n" for r in table_rows)
    widths = [max(len(h), *(len(r[i]) for r in table_rows)) if table_rows else len(h)
              for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for r in table_rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    text = "\n".join(lines) + "\n"
    target = out or root
    target.mkdir(parents=True, exist_ok=True)
    (target / "report.csv").write_text(csv_text)
    (target / "report.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


def _default_out(cfg: ExperimentConfig) -> Path:
    dataset, size = _dataset_tag(cfg)
    return Path("fedsi_out") / f"{cfg.algorithm}_{dataset}_{size}_s{cfg.seed}"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsi",
        description="Federated subnetwork-inference experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("partition", "run", "evaluate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to a JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override experiment.seed")
        p.add_argument("--out", default=None, help="output directory")
        if name == "evaluate":
            p.add_argument("--checkpoint", default=None,
                           help="checkpoint path (default: OUT/checkpoints/checkpoint_final.json)")
    rep = sub.add_parser("report")
    rep.add_argument("--runs", default="fedsi_out", help="directory tree to scan for metrics.csv")
    rep.add_argument("--out", default=None, help="where to write report.csv/report.txt")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(Path(args.runs), Path(args.out) if args.out else None)
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
            cfg.validate(strict_ratio=True)
        out = Path(args.out) if args.out else _default_out(cfg)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "partition":
            return cmd_partition(cfg, out)
        if args.command == "run":
            return cmd_run(cfg, out)
        if args.command == "evaluate":
            ckpt = Path(args.checkpoint) if args.checkpoint else None
            return cmd_evaluate(cfg, out, ckpt)
        raise ValueError(f"unhandled command {args.command}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLoss, NotPositiveDefinite) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, CheckpointError, FedsiError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
