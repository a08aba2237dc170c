"""Command-line entry point: synth, train, eval, interpret, compare, gradcheck."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor as tn
from .config import ConfigError, RunConfig, apply_overrides, dump_json, load_config
from .evaluation import (
    accuracy,
    auroc,
    compare_score_sets,
    edge_recovery_auc,
    pearson_dynamic_fc,
    read_scores,
    region_importance,
    write_adjacency_bin,
    write_aso_csv,
    write_importance_csv,
)
from .gradcheck import run_gradcheck, tiny_run_config
from .synthdata import FormatError, generate, read_dataset, read_planted, write_dataset
from .trainer import CheckpointError, TrainingError, check_compatible, load_checkpoint, predict, train

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration plumbing
# ---------------------------------------------------------------------------


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI or JSON config file")
    parser.add_argument("--seed", type=int, help="run seed (also the generator seed for synth)")
    parser.add_argument("--deterministic", action="store_true", help="single-threaded, bitwise-reproducible runs")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")


def _ablations(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("ablations")
    group.add_argument("--no-inception", action="store_true", help="single kernel-4 convolution per layer")
    group.add_argument("--no-self-attention", action="store_true", help="correlation adjacency instead of attention")
    group.add_argument("--no-sparsity", action="store_true", help="drop the soft threshold and set lambda_SP=0")
    group.add_argument("--no-temporal-attention", action="store_true", help="uniform snapshot weights")
    group.add_argument("--no-feature-reg", action="store_true", help="lambda_FS=0")
    group.add_argument("--no-temporal-reg", action="store_true", help="lambda_TS=0")


def apply_ablations(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    learner, loss = cfg.learner, cfg.loss
    if getattr(args, "no_inception", False):
        learner = dataclasses.replace(learner, use_inception=False)
    if getattr(args, "no_self_attention", False):
        learner = dataclasses.replace(learner, use_self_attention=False)
    if getattr(args, "no_sparsity", False):
        learner = dataclasses.replace(learner, use_sparsity=False)
        loss = dataclasses.replace(loss, sparsity=0.0)
    if getattr(args, "no_feature_reg", False):
        loss = dataclasses.replace(loss, feature_smoothness=0.0)
    if getattr(args, "no_temporal_reg", False):
        loss = dataclasses.replace(loss, temporal_smoothness=0.0)
    classifier = cfg.classifier
    if getattr(args, "no_temporal_attention", False):
        classifier = dataclasses.replace(classifier, use_temporal_attention=False)
    return dataclasses.replace(cfg, learner=learner, classifier=classifier, loss=loss)


def effective_config(args: argparse.Namespace, base: RunConfig | None = None) -> RunConfig:
    cfg = load_config(args.config) if args.config else (base or RunConfig())
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.deterministic:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, deterministic=True))
    cfg = apply_ablations(cfg, args)
    cfg.validate()
    return cfg


def _prepare_out(args: argparse.Namespace, required: bool = True) -> Path | None:
    if not args.out:
        if required:
            raise UsageError("--out DIR is required for this command")
        return None
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise UsageError(f"--out {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_data(path: str | None):
    if not path:
        raise UsageError("--data DIR is required")
    directory = Path(path)
    if not (directory / "data.bin").exists():
        raise FileNotFoundError(f"no dataset at {directory} (expected {directory / 'data.bin'})")
    return read_dataset(directory)


def _load_planted(path: str):
    try:
        return read_planted(path)
    except FileNotFoundError:
        return None


def _split_indices(ckpt, split: str, n: int) -> np.ndarray:
    if split == "all":
        return np.arange(n)
    return np.asarray(ckpt.meta["split"][split], dtype=np.int64)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = effective_config(args)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, synth=dataclasses.replace(cfg.synth, seed=args.seed))
    out = _prepare_out(args)
    dataset, planted = generate(cfg.synth)
    write_dataset(dataset, out, planted)
    s = cfg.synth
    print(
        f"wrote {len(dataset)} subjects x {s.n_regions} regions x {s.n_timepoints} timepoints to {out} "
        f"(regimes={s.n_regimes}, density={s.density}, coupling={s.coupling}, noise={s.noise}, seed={s.seed})"
    )
    return EXIT_OK


def _test_metrics(model, dataset, idx, crop: int) -> dict:
    probs, _, adjacency = predict(model, dataset.signals[idx], crop)
    labels = dataset.labels[idx]
    result = {"n": int(len(idx)), "acc": accuracy(np.argmax(probs, axis=-1), labels)}
    if probs.shape[-1] == 2 and len(np.unique(labels)) == 2:
        result["auroc"] = auroc(probs[:, 1], labels)
    return result, adjacency


def cmd_train(args) -> int:
    cfg = effective_config(args)
    dataset = _load_data(args.data)
    out = _prepare_out(args) if not args.resume else Path(args.out or Path(args.resume).parent)
    dump_json(cfg, out / "config.json")

    def progress(row, _model):
        if not args.quiet:
            print(
                f"epoch {row['epoch']:4d}  loss {row['train_loss']:.4f}  "
                f"train_acc {row['train_acc']:.3f}  val_acc {row['val_acc']:.3f}",
                flush=True,
            )

    result = train(dataset, cfg, out_dir=out, resume=args.resume, on_epoch=progress)
    ckpt = result.checkpoint
    with tn.precision(cfg.train.precision):
        model = ckpt.build_model()
        crop = ckpt.model_config.learner.n_timepoints
        test, adjacency = _test_metrics(model, dataset, result.split.test, crop)
    summary = {
        "seed": cfg.seed,
        "best_epoch": result.metrics.best_epoch,
        "best_val_acc": result.metrics.best_val_acc,
        "epochs_run": result.metrics.stopped_epoch,
        "test_acc": test["acc"],
        "test_auroc": test.get("auroc"),
        "n_parameters": model.n_parameters(),
    }
    planted = _load_planted(args.data)
    if planted is not None:
        lc = ckpt.model_config.learner
        summary["edge_recovery_auc"] = edge_recovery_auc(
            adjacency, dataset.labels[result.split.test], planted, lc.window_length, lc.window_stride
        )
    (out / "results.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "test_acc", "test_auroc"])
        writer.writerow([cfg.seed, repr(test["acc"]), repr(test.get("auroc", float("nan")))])
    _print(summary)
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    check_compatible(ckpt, dataset)
    idx = _split_indices(ckpt, args.split, len(dataset))
    if idx.size == 0:
        raise UsageError(f"split {args.split!r} is empty")
    if idx.max() >= len(dataset):
        raise CheckpointError("checkpoint split indices exceed the dataset size; wrong dataset?")
    with tn.precision(ckpt.run_config.train.precision):
        model = ckpt.build_model()
        lc = ckpt.model_config.learner
        metrics, adjacency = _test_metrics(model, dataset, idx, lc.n_timepoints)
    report = {"split": args.split, **metrics}
    planted = _load_planted(args.data)
    if planted is not None:
        report["edge_recovery_auc"] = edge_recovery_auc(
            adjacency, dataset.labels[idx], planted, lc.window_length, lc.window_stride
        )
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{args.split}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _print(report)
    return EXIT_OK


def cmd_interpret(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = _load_data(args.data)
    check_compatible(ckpt, dataset)
    out = _prepare_out(args)
    test_idx = np.asarray(ckpt.meta["split"]["test"], dtype=np.int64)
    subject = int(test_idx[0]) if args.subject is None else args.subject
    if not 0 <= subject < len(dataset):
        raise UsageError(f"subject index {subject} out of range [0, {len(dataset)})")
    lc = ckpt.model_config.learner
    with tn.precision(ckpt.run_config.train.precision):
        model = ckpt.build_model()
        _, alpha, adjacency = predict(model, dataset.signals[[subject]], lc.n_timepoints)
        _, test_alpha, test_adj = predict(model, dataset.signals[test_idx], lc.n_timepoints)
    signal = dataset.signals[subject][:, : lc.n_timepoints]
    pearson = pearson_dynamic_fc(signal, lc.window_length, lc.window_stride)
    report = region_importance(adjacency[0], alpha[0])
    write_importance_csv(report, out / "importance.csv")
    write_adjacency_bin(adjacency[0], out / "adjacency_learned.bin")
    write_adjacency_bin(pearson, out / "adjacency_pearson.bin")
    mean_adj, mean_alpha = test_adj.mean(axis=0), test_alpha.mean(axis=0)
    write_importance_csv(region_importance(mean_adj, mean_alpha), out / "importance_test.csv")
    write_adjacency_bin(mean_adj, out / "adjacency_learned_test.bin")
    summary = {
        "subject": subject,
        "top_regions": report.top.tolist(),
        "learned_zero_entries": int(np.sum(adjacency[0] == 0)),
        "pearson_zero_entries": int(np.sum(pearson == 0)),
        "n_snapshots": int(adjacency.shape[1]),
    }
    (out / "interpret.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _print(summary)
    return EXIT_OK


def _parse_score_arg(item: str) -> tuple[str, list[str]]:
    if "=" in item:
        name, files = item.split("=", 1)
        return name, [f for f in files.split(",") if f]
    return Path(item).stem if Path(item).name != "scores.csv" else Path(item).parent.name, [item]


def cmd_compare(args) -> int:
    sets: dict[str, np.ndarray] = {}
    for item in args.scores:
        name, files = _parse_score_arg(item)
        if not files:
            raise UsageError(f"no files given for {name!r}")
        if name in sets:
            raise UsageError(f"duplicate score-set name {name!r}")
        sets[name] = np.concatenate([read_scores(f, args.column) for f in files])
    if len(sets) < 2:
        raise UsageError("compare needs at least two score sets")
    seed = args.seed if args.seed is not None else 0
    rows = compare_score_sets(sets, alpha=args.alpha, n_bootstrap=args.bootstrap, seed=seed)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_aso_csv(rows, out / "aso.csv")
    for r in rows:
        print(f"{r.model_a:>16s} vs {r.model_b:<16s} eps_min={r.epsilon_min:.4f} alpha={r.alpha_adjusted:.6g}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = effective_config(args, base=tiny_run_config())
    report = run_gradcheck(cfg, seed=cfg.seed, tamper=args.tamper)
    for line in report.lines():
        print(line)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(
            json.dumps({"passed": report.passed, "max_error": report.max_error}, indent=2, sort_keys=True) + "\n"
        )
    return EXIT_OK if report.passed else EXIT_GRADCHECK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dyndepnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-graph dataset")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and report held-out metrics")
    _common(p)
    _ablations(p)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--resume", help="continue from a last.ckpt")
    p.add_argument("--quiet", action="store_true", help="no per-epoch lines")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="accuracy/AUROC (and edge recovery) of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("interpret", help="region importance and adjacency exports")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--subject", type=int, help="subject index (default: first test subject)")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("compare", help="pairwise almost-stochastic-order test")
    _common(p)
    p.add_argument("scores", nargs="+", help="score CSV files or NAME=file1,file2,...")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--column", help="score column (default: test_acc, score or the only column)")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient (64-bit)")
    _common(p)
    _ablations(p)
    p.add_argument("--tamper", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, FormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, tn.NonFiniteError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except RuntimeError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
