"""Command-line entry points: train, eval, heatmap.

Exit codes: 0 ok, 2 config error, 3 training divergence, 4 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_hash, load_config, write_resolved
from .data import DatasetError, batches, data_root, load_cifar10, synth_splits
from .diversity import PredictionSet, pairwise_report
from .repsim import cka_heatmap
from .reports import (write_diagonal_csv, write_heatmap_png, write_kappa_figure,
                      write_matrix_csv, write_report_csv, write_report_json)
from .tensor import Tensor
from .training import TrainingDiverged, train_sequence

log = logging.getLogger("dissim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _load_datasets(cfg: RunConfig):
    ds = cfg.dataset
    if ds.kind == "synth":
        return synth_splits(ds.seed, ds.n_train, ds.n_test, ds.classes, ds.side)
    root = data_root(ds.dir)
    return load_cifar10(root)


def cmd_train(config_path, out_override=None, seed_override=None) -> int:
    cfg = load_config(config_path)
    if out_override:
        cfg.out_dir = str(out_override)
    if seed_override is not None:
        cfg.seed = int(seed_override)
        cfg.training.seed = int(seed_override)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "resolved_config.json")

    train_ds, test_ds = _load_datasets(cfg)
    policy = cfg.augment if cfg.augment.enabled else None
    log.info("training %d model(s) of %s on %s (%d train / %d test)",
             cfg.n_models, cfg.model, cfg.dataset.kind, len(train_ds), len(test_ds))
    models, stats = train_sequence(cfg.model_config(), cfg.training, cfg.n_models,
                                   train_ds, val_ds=test_ds, policy=policy)
    chash = config_hash(cfg)
    for i, (model, st) in enumerate(zip(models, stats), start=1):
        meta = {
            "provenance": {
                "seed": cfg.training.seed + (i - 1),
                "lambda": cfg.training.lambda_,
                "metric": cfg.training.metric.value,
                "tap_ids": list(cfg.training.tap_ids),
                "sequence_position": i,
            },
            "config_hash": chash,
        }
        save_checkpoint(model, meta, out / f"model_{i:03d}.ckpt")
        st.write_jsonl(out / f"model_{i:03d}.stats.jsonl")
        final_acc = st.val_accuracy[-1] if st.val_accuracy else float("nan")
        log.info("model_%03d done; final val accuracy %.4f", i, final_acc)
    return EXIT_OK


def _load_models(paths) -> list:
    models = []
    for p in paths:
        models.append(load_checkpoint(p))
    classes = {m.config.num_classes for m in models}
    if len(classes) > 1:
        raise CheckpointError(f"checkpoints disagree on class count: {sorted(classes)}")
    return models


def _prediction_sets(models, test_ds, batch_size):
    sets = []
    for i, m in enumerate(models, start=1):
        logit_rows = []
        for xb, _ in batches(test_ds, min(batch_size, len(test_ds)), drop_small=False):
            logit_rows.append(m.forward(Tensor(xb), training=False).data)
        logits = np.concatenate(logit_rows)
        n = len(logits)
        sets.append(PredictionSet.from_logits(logits, test_ds.labels[:n], f"m{i}:{m.name}"))
    return sets


def cmd_eval(checkpoint_paths, config_path, out_prefix) -> int:
    cfg = load_config(config_path)
    if len(checkpoint_paths) < 2:
        raise ConfigError("eval needs at least 2 checkpoints")
    models = _load_models(checkpoint_paths)
    _, test_ds = _load_datasets(cfg)
    sets = _prediction_sets(models, test_ds, cfg.eval_batch_size)
    report = pairwise_report(sets, test_ds.labels[:len(sets[0].softmax)])
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    write_report_json(report, out_prefix.with_suffix(".json"))
    write_report_csv(report, out_prefix.with_suffix(".csv"))
    write_kappa_figure(report, str(out_prefix) + "_kappa.png")
    log.info("eval: %d models, mean kappa %s, ensemble accuracy %.4f",
             report.n_models, report.mean_kappa, report.ensemble_accuracy)
    return EXIT_OK


def cmd_heatmap(ckpt_a, ckpt_b, config_path, out_prefix) -> int:
    cfg = load_config(config_path)
    model_a, model_b = _load_models([ckpt_a, ckpt_b])
    _, test_ds = _load_datasets(cfg)
    data = (xb for xb, _ in batches(test_ds, min(cfg.eval_batch_size, len(test_ds))))
    matrix = cka_heatmap(model_a, model_b, data, model_a.tap_ids(), model_b.tap_ids())
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(matrix, out_prefix.with_suffix(".csv"))
    write_diagonal_csv(matrix, str(out_prefix) + "_diagonal.csv")
    write_heatmap_png(matrix, str(out_prefix) + ".png")
    log.info("heatmap: %s, mean diagonal %.4f", matrix.shape,
             float(np.mean(np.diag(matrix))))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dissim",
        description="Train representationally dissimilar ensembles and measure "
                    "prediction diversity.")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    parser.add_argument("--device", default="cpu", choices=["cpu"],
                        help="reserved; only cpu is implemented")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a sequence of models from a config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", default=None, help="override out_dir from the config")
    p_train.add_argument("--seed-override", type=int, default=None)

    p_eval = sub.add_parser("eval", help="pairwise diversity report over checkpoints")
    p_eval.add_argument("checkpoints", nargs="+")
    p_eval.add_argument("--config", required=True, help="config providing the dataset")
    p_eval.add_argument("--out", required=True, help="output path prefix")

    p_heat = sub.add_parser("heatmap", help="all-taps LinCKA heatmap between two checkpoints")
    p_heat.add_argument("checkpoint_a")
    p_heat.add_argument("checkpoint_b")
    p_heat.add_argument("--config", required=True, help="config providing the dataset")
    p_heat.add_argument("--out", required=True, help="output path prefix")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.command == "train":
            return cmd_train(args.config, args.out, args.seed_override)
        if args.command == "eval":
            return cmd_eval(args.checkpoints, args.config, args.out)
        if args.command == "heatmap":
            return cmd_heatmap(args.checkpoint_a, args.checkpoint_b, args.config, args.out)
        raise AssertionError(f"unhandled command {args.command}")
    except (ConfigError, DatasetError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        for rec in exc.diagnostics:
            log.error("recent step: %s", rec)
        return EXIT_DIVERGED
    except (CheckpointError, OSError) as exc:
        log.error("i/o error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
