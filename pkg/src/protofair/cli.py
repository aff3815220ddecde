"""Command-line interface: prepare, train, evaluate, sweep, diagnose, export.

Every command writes a manifest.json recording the config hash, master
seed, input digests and outputs; with equal manifests (timestamps aside)
two runs produce byte-identical reports.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .config import (
    ConfigError,
    build_train_config,
    config_hash,
    data_paths,
    file_digest,
    group_mapping,
    load_config,
    sweep_configs,
    train_config_dict,
)
from .data import (
    DataError,
    load_interactions,
    load_item_groups,
    load_prepared,
    make_split,
    save_prepared,
)
from .diagnostics import (
    distance_profile,
    export_embeddings,
    gram_stats,
    write_distance_profile_csv,
)
from .evaluation import evaluate, write_records_csv, write_report_csv
from .model import (
    VARIANT_PROTOMF,
    FilterSpec,
    load_checkpoint,
    save_checkpoint,
)
from .train import NumericalError, sweep, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

DEFAULT_SEED = 0


class UsageError(Exception):
    """Bad flags or inconsistent inputs."""


@dataclass
class RunManifest:
    """Provenance record written next to every command's outputs."""

    command: str
    config_hash: str
    master_seed: int
    data_digests: dict[str, str]
    toolkit_version: str
    created_utc: str
    outputs: list[str] = field(default_factory=list)

    def write(self, out_dir: Path) -> None:
        path = out_dir / "manifest.json"
        path.write_text(
            json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )


def _manifest(command: str, cfg_hash: str, seed: int, digests: dict[str, str],
              outputs: list[str]) -> RunManifest:
    return RunManifest(
        command=command,
        config_hash=cfg_hash,
        master_seed=seed,
        data_digests=digests,
        toolkit_version=__version__,
        created_utc=datetime.datetime.now(datetime.timezone.utc).isoformat(),
        outputs=outputs,
    )


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=Path, help="run configuration YAML")
    sub.add_argument("--seed", type=int, help="master seed (overrides config)")
    sub.add_argument("--out", type=Path, required=True, help="output directory")


def _add_model_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--variant", choices=["mf", "protomf"])
    sub.add_argument("--latent-dim", type=int)
    sub.add_argument("--user-prototypes", type=int)
    sub.add_argument("--item-prototypes", type=int)
    sub.add_argument("--k-u", type=int, help="-1 keeps all prototypes")
    sub.add_argument("--k-t", type=int, help="-1 keeps all prototypes")
    sub.add_argument("--lambda-u", type=float)
    sub.add_argument("--lambda-t", type=float)
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--learning-rate", type=float)
    sub.add_argument("--negatives", type=int)
    sub.add_argument("--weight-decay", type=float)


def _overrides_from(args: argparse.Namespace) -> dict:
    return {
        "variant": args.variant,
        "d": args.latent_dim,
        "l_u": args.user_prototypes,
        "l_t": args.item_prototypes,
        "k_u": args.k_u,
        "k_t": args.k_t,
        "lambda_u": args.lambda_u,
        "lambda_t": args.lambda_t,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "n_negatives_train": args.negatives,
        "weight_decay": args.weight_decay,
        "seed": args.seed,
    }


def build_parser() -> _Parser:
    parser = _Parser(prog="protofair", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("prepare", help="ingest data and write the split")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = commands.add_parser("train", help="train a model on a prepared split")
    _add_common(p)
    p.add_argument("--split-dir", type=Path, required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("evaluate", help="score a checkpoint on a stage")
    _add_common(p)
    p.add_argument("--split-dir", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--stage", choices=["validation", "test"], default="test")
    p.add_argument("--dump-records", action="store_true",
                   help="also write per-user rank records")
    p.add_argument("--force", action="store_true",
                   help="evaluate even if flags disagree with the checkpoint")
    p.add_argument("--k-u", type=int)
    p.add_argument("--k-t", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = commands.add_parser("sweep", help="grid over k and lambda values")
    _add_common(p)
    p.add_argument("--split-dir", type=Path, required=True)
    _add_model_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = commands.add_parser("diagnose", help="embedding-space diagnostics")
    _add_common(p)
    p.add_argument("--split-dir", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--k-values", type=str,
                   help="comma-separated probe sizes for the distance profile")
    p.set_defaults(func=cmd_diagnose)

    p = commands.add_parser("export-embeddings",
                            help="dump item and prototype vectors as CSV")
    _add_common(p)
    p.add_argument("--split-dir", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def _load_cfg(args: argparse.Namespace) -> dict:
    return load_config(args.config) if args.config else {}


def _master_seed(args: argparse.Namespace, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(cfg.get("seed", DEFAULT_SEED))


# --- commands ---------------------------------------------------------------


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    seed = _master_seed(args, cfg)
    interactions_path, fmt, attributes_path = data_paths(cfg)
    dataset = load_interactions(interactions_path, fmt)
    digests = {str(interactions_path): file_digest(interactions_path)}
    if attributes_path is not None and attributes_path.exists():
        dataset = load_item_groups(attributes_path, dataset, group_mapping(cfg))
        digests[str(attributes_path)] = file_digest(attributes_path)
    elif attributes_path is not None:
        logger.warning(
            "attribute file %s missing; all items stay neutral", attributes_path
        )
    split = make_split(dataset, seed)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    outputs = save_prepared(dataset, split, out)
    meta = {
        "n_users": dataset.n_users,
        "n_items": dataset.n_items,
        "n_interactions": int(dataset.interactions.shape[0]),
        "n_eligible_users": int(split.validation.shape[0]),
        "shortfall": {k: sorted(v) for k, v in split.shortfall.items()},
        "seed": seed,
    }
    (out / "split_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    outputs.append("split_meta.json")
    _manifest("prepare", config_hash(cfg), seed, digests, outputs).write(out)
    print(f"prepared {dataset.n_users} users x {dataset.n_items} items -> {out}")
    return EXIT_OK


def _split_digests(split_dir: Path) -> dict[str, str]:
    return {
        str(split_dir / name): file_digest(split_dir / name)
        for name in ("dataset.tsv", "groups.tsv")
        if (split_dir / name).exists()
    }


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    overrides = _overrides_from(args)
    if overrides.get("seed") is None and "seed" in cfg:
        overrides["seed"] = int(cfg["seed"])
    train_cfg = build_train_config(cfg, overrides)
    dataset, split = load_prepared(args.split_dir)

    result = train(dataset, split, train_cfg)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    cfg_dict = train_config_dict(train_cfg)
    cfg_hash = config_hash(cfg_dict)
    save_checkpoint(
        result.params,
        result.filter,
        out / "checkpoint.npz",
        extra_meta={
            "config_hash": cfg_hash,
            "train_config": cfg_dict,
            "best_epoch": result.best_epoch,
        },
    )
    with open(out / "epochs.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["epoch", "l_original", "penalty_u", "penalty_t", "total",
             "end_penalty_u", "end_penalty_t",
             "val_hit_ratio_10", "val_ndcg_10"]
        )
        for row in result.history:
            writer.writerow(
                [row.epoch, repr(row.loss.l_original), repr(row.loss.penalty_u),
                 repr(row.loss.penalty_t), repr(row.loss.total),
                 repr(row.end_penalty_u), repr(row.end_penalty_t),
                 repr(row.val_hit_ratio_10), repr(row.val_ndcg_10)]
            )
    _manifest(
        "train", cfg_hash, train_cfg.seed, _split_digests(args.split_dir),
        ["checkpoint.npz", "epochs.csv"],
    ).write(out)
    best = result.history[result.best_epoch - 1]
    print(
        f"trained {train_cfg.variant}: best epoch {result.best_epoch} "
        f"val hit@10 {best.val_hit_ratio_10:.4f} ndcg@10 {best.val_ndcg_10:.4f}"
    )
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    params, filt, meta = load_checkpoint(args.checkpoint)
    dataset, split = load_prepared(args.split_dir)
    if params.n_users != dataset.n_users or params.n_items != dataset.n_items:
        raise DataError(
            f"checkpoint is for {params.n_users} users x {params.n_items} items "
            f"but the split has {dataset.n_users} x {dataset.n_items}"
        )

    stored = dict(meta.get("train_config") or {})
    effective = dict(stored)
    if args.k_u is not None:
        effective["k_u"] = args.k_u
    if args.k_t is not None:
        effective["k_t"] = args.k_t
    if stored and config_hash(effective) != meta.get("config_hash"):
        if not args.force:
            raise UsageError(
                "flags disagree with the checkpoint's config hash; "
                "pass --force to evaluate anyway"
            )
        filt = FilterSpec(k_u=int(effective["k_u"]), k_t=int(effective["k_t"]))

    report, records = evaluate(params, filt, split, dataset, args.stage)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    write_report_csv(report, out / "report.csv")
    outputs = ["report.json", "report.csv"]
    if args.dump_records:
        write_records_csv(records, out / "records.csv")
        outputs.append("records.csv")
    digests = _split_digests(args.split_dir)
    digests[str(args.checkpoint)] = file_digest(args.checkpoint)
    _manifest(
        "evaluate", meta.get("config_hash", ""), _master_seed(args, {}),
        digests, outputs,
    ).write(out)
    print(
        f"{args.stage}: hit@10 {report.hit_ratio_10:.4f} "
        f"ndcg@10 {report.ndcg_10:.4f} lt_visibility {report.lt_visibility:.4f}"
    )
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _load_cfg(args)
    base = build_train_config(cfg, _overrides_from(args))
    configs = sweep_configs(cfg, base)
    dataset, split = load_prepared(args.split_dir)
    seed = _master_seed(args, cfg)
    rows = sweep(configs, dataset, split, master_seed=seed)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["K_u", "lambda_u", "K_t", "lambda_t",
             "HitRatio@10", "NDCG@10", "best_epoch", "error"]
        )
        for row in rows:
            writer.writerow(
                [row.config.filter.k_u, repr(row.config.lambda_u),
                 row.config.filter.k_t, repr(row.config.lambda_t),
                 repr(row.val_hit_ratio_10), repr(row.val_ndcg_10),
                 row.best_epoch, row.error or ""]
            )
    _manifest(
        "sweep", config_hash(cfg), seed, _split_digests(args.split_dir),
        ["sweep.csv"],
    ).write(out)
    print(f"swept {len(rows)} configurations -> {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_diagnose(args: argparse.Namespace) -> int:
    params, _filt, meta = load_checkpoint(args.checkpoint)
    if params.variant != VARIANT_PROTOMF:
        raise UsageError("diagnose needs a checkpoint with prototypes")
    dataset, _split = load_prepared(args.split_dir)
    k_values = None
    if args.k_values:
        k_values = [int(x) for x in args.k_values.split(",") if x.strip()]

    profile = distance_profile(params, dataset, k_values)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    write_distance_profile_csv(profile, out / "distance_profile.csv")

    with open(out / "gram_stats.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["space", "mean_abs_offdiag", "max_abs_offdiag", "penalty"]
        )
        for space, protos in (
            ("user", params.user_prototypes),
            ("item", params.item_prototypes),
        ):
            stats = gram_stats(protos)
            writer.writerow(
                [space, repr(stats.mean_abs_offdiag),
                 repr(stats.max_abs_offdiag), repr(stats.penalty_value)]
            )
    export_embeddings(params, dataset, out / "embeddings.csv")
    digests = _split_digests(args.split_dir)
    digests[str(args.checkpoint)] = file_digest(args.checkpoint)
    _manifest(
        "diagnose", meta.get("config_hash", ""), _master_seed(args, {}), digests,
        ["distance_profile.csv", "gram_stats.csv", "embeddings.csv"],
    ).write(out)
    print(f"diagnostics -> {out}")
    return EXIT_OK


def cmd_export_embeddings(args: argparse.Namespace) -> int:
    params, _filt, meta = load_checkpoint(args.checkpoint)
    if params.variant != VARIANT_PROTOMF:
        raise UsageError("embedding export needs a checkpoint with prototypes")
    dataset, _split = load_prepared(args.split_dir)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    export_embeddings(params, dataset, out / "embeddings.csv")
    digests = _split_digests(args.split_dir)
    digests[str(args.checkpoint)] = file_digest(args.checkpoint)
    _manifest(
        "export-embeddings", meta.get("config_hash", ""), _master_seed(args, {}),
        digests, ["embeddings.csv"],
    ).write(out)
    print(f"embeddings -> {out / 'embeddings.csv'}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
