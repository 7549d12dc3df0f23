"""Command-line pipeline: train -> score -> select -> evaluate, plus sweep.

Every stage reads and writes files, so each one can be rerun alone.
Exit codes: 0 ok, 2 configuration, 3 I/O, 4 numeric failure,
5 selection infeasible.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import dataset as ds
from .config import ConfigError, RunConfig, config_hash, format_config, read_config_file
from .dynamics_log import LOSS_KINDS, LogFormatError, read_log, write_log
from .evaluation import (
    EvaluationError,
    find_turning_point,
    evaluate_subset,
    ratio_sweep,
    stats_markdown,
    sweep_markdown,
    write_stats_csv,
    write_sweep_csv,
)
from .scoring import ScoringError, read_scores_csv, score_by_name, write_scores_csv
from .selection import (
    SelectionError,
    balanced_select,
    ccs_select,
    random_select,
    rank_select,
    read_subset,
    write_subset,
)
from .trainer import (
    TrainingDiverged,
    accuracy,
    extract_features,
    load_params,
    save_params,
    train_with_dynamics,
)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_SELECTION = 0, 2, 3, 4, 5

METRICS = ("lbpe", "el2n", "forgetting", "aum", "entropy", "ssp")


# ---------------------------------------------------------------------------
# shared flag groups


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--csv", type=Path, help="headed CSV of features plus a label column")
    src.add_argument("--ytf", type=Path, help="YTF1 feature tensor (needs --ytl)")
    src.add_argument("--blobs", help="synthetic blobs, e.g. c=4,n=500,d=8,sep=4,std=1,noise=0.1,seed=0")
    g.add_argument("--label-column", default="label", help="CSV label column name or index")
    g.add_argument("--ytl", type=Path, help="YTL1 label file matching --ytf")
    g.add_argument("--factor", type=int, default=1, help="multi-formation factor for image tensors")
    g.add_argument("--test-fraction", type=float, dest="test_fraction")
    g.add_argument("--split-seed", type=int, dest="split_seed")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--config", type=Path, help="key = value file; flags override it")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--lr", type=float)
    g.add_argument("--momentum", type=float)
    g.add_argument("--weight-decay", type=float, dest="weight_decay")
    g.add_argument("--milestones", dest="lr_milestones", help="comma-separated epochs, e.g. 15,22")
    g.add_argument("--gamma", type=float, dest="lr_gamma")
    g.add_argument("--loss", choices=LOSS_KINDS, dest="loss_kind")
    g.add_argument("--seed", type=int, help="training seed (falls back to $YOCO_SEED)")
    g.add_argument("--hidden", dest="hidden_sizes", help="hidden layer widths, e.g. 32 or 64,32")


_RUN_KEYS = ("epochs", "batch_size", "lr", "momentum", "weight_decay", "lr_milestones", "lr_gamma",
             "loss_kind", "seed", "hidden_sizes", "test_fraction", "split_seed")


def _run_config(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, k, None) for k in _RUN_KEYS}
    return RunConfig.build(file_values, flags)


def _parse_blobs(text: str) -> tuple[ds.BlobSpec, int]:
    keys = {"c": "num_classes", "n": "samples_per_class", "d": "dim", "sep": "center_separation",
            "std": "noise_std", "noise": "label_noise_rate"}
    kwargs, seed = {}, 0
    for part in filter(None, text.split(",")):
        if "=" not in part:
            raise ConfigError(f"--blobs: expected key=value, got {part!r}")
        k, v = (s.strip() for s in part.split("=", 1))
        if k == "seed":
            seed = int(v)
        elif k in keys:
            kwargs[keys[k]] = int(v) if k in ("c", "n", "d") else float(v)
        else:
            raise ConfigError(f"--blobs: unknown key {k!r} (known: {', '.join(keys)}, seed)")
    missing = {"c", "n", "d"} - {k for k, f in keys.items() if f in kwargs}
    if missing:
        raise ConfigError(f"--blobs: missing {', '.join(sorted(missing))}")
    kwargs.setdefault("center_separation", 4.0)
    kwargs.setdefault("noise_std", 1.0)
    try:
        return ds.BlobSpec(**kwargs), seed
    except ds.DatasetError as exc:
        raise ConfigError(f"--blobs: {exc}") from None


def _load_source(args: argparse.Namespace) -> ds.Dataset:
    if args.blobs:
        spec, seed = _parse_blobs(args.blobs)
        data = ds.generate_blobs(spec, seed)
    elif args.csv:
        label = int(args.label_column) if args.label_column.lstrip("-").isdigit() else args.label_column
        data = ds.load_csv(args.csv, label)
    elif args.ytf:
        if not args.ytl:
            raise ConfigError("--ytf needs --ytl")
        data = ds.load_ytf(args.ytf, args.ytl)
    else:
        raise ConfigError("give a dataset: --csv, --ytf/--ytl or --blobs")
    if args.factor != 1:
        data = ds.multiformation_decode(data, args.factor)
    return data


def _load_split(args: argparse.Namespace, run: RunConfig) -> ds.DatasetSplit:
    data = _load_source(args)
    try:
        return ds.split(data, run.test_fraction, run.split_seed)
    except ds.DatasetError as exc:
        raise ConfigError(f"cannot split dataset: {exc}") from None


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds: not a comma-separated integer list: {text!r}") from None
    if not seeds:
        raise ConfigError("--seeds: need at least one seed")
    return seeds


def _ratios(text: str) -> list[float]:
    try:
        if ":" in text:
            lo, hi, step = (float(x) for x in text.split(":"))
            count = int(round((hi - lo) / step)) + 1
            return [round(lo + i * step, 10) for i in range(count)]
        return [float(x) for x in text.split(",")]
    except ValueError:
        raise ConfigError(f"--ratios: expected start:stop:step or a comma list, got {text!r}") from None


def _note(kind: str, digest: str) -> str:
    return f"{kind} config_hash: {digest}"


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args: argparse.Namespace) -> int:
    run = _run_config(args)
    cfg = run.train_config()
    sp = _load_split(args, run)
    print(f"config_hash: {run.config_hash}")
    params, log = train_with_dynamics(sp.train, cfg, verbose=args.verbose)
    log.note = f"config_hash={run.config_hash}"
    write_log(log, args.out)
    params_out = args.params_out or Path(args.out).with_suffix(".params")
    save_params(params, params_out)
    print(f"train_accuracy: {log.accuracies[-1]:.4f}")
    print(f"test_accuracy: {accuracy(params, sp.test):.4f}")
    print(f"wrote {args.out} ({log.n} samples x {log.num_epochs} epochs) and {params_out}")
    return EXIT_OK


def _score(args: argparse.Namespace, log):
    features = None
    if args.metric == "ssp":
        if not args.params:
            raise ConfigError("--metric ssp needs --params: prototype distances are computed on "
                              "features of a trained model")
        run = _run_config(args)
        sp = _load_split(args, run)
        if sp.train.n != log.n:
            raise ConfigError(f"dataset train split has {sp.train.n} rows, log has {log.n}")
        features = extract_features(load_params(args.params), sp.train)
    return score_by_name(
        args.metric, log,
        early_epochs=args.early_epochs, topk=args.topk, first_n=args.first_n,
        raw_logits=args.raw_logits, features=features,
        clusters_per_class=args.clusters_per_class, seed=args.score_seed,
    )


def _score_settings(args: argparse.Namespace) -> dict:
    return {"metric": args.metric, "early_epochs": args.early_epochs, "topk": args.topk,
            "first_n": args.first_n, "raw_logits": args.raw_logits,
            "clusters_per_class": args.clusters_per_class, "seed": args.score_seed}


def cmd_score(args: argparse.Namespace) -> int:
    log = read_log(args.log)
    sv = _score(args, log)
    for w in sv.warnings:
        print(f"warning: {w}", file=sys.stderr)
    digest = config_hash({**_score_settings(args), "log": sv.source_log_hash})
    print(f"config_hash: {digest}")
    write_scores_csv(sv, args.out, _note("score", digest))
    print(f"wrote {args.out} ({len(sv)} {sv.metric} scores, epochs used {sv.epochs_used})")
    return EXIT_OK


def cmd_select(args: argparse.Namespace) -> int:
    sv = read_scores_csv(args.scores)
    log = read_log(args.labels_from)
    labels, c = log.labels, log.num_classes
    if len(sv) != len(labels):
        raise ConfigError(f"{args.scores} has {len(sv)} rows but {args.labels_from} has {len(labels)} samples")
    if args.per_class is None and args.count is None:
        raise ConfigError("give --per-class or --count")
    total = args.count if args.count is not None else args.per_class * c
    if args.mode == "balanced":
        per_class = args.per_class if args.per_class is not None else total // c
        subset = balanced_select(sv, labels, per_class, args.prefer, args.clamp, c)
    elif args.mode == "rank":
        subset = rank_select(sv, labels, total, args.prefer, c)
    elif args.mode == "ccs":
        subset = ccs_select(sv, labels, total, args.hard_cutoff, args.num_strata, args.seed, c)
    else:
        subset = random_select(len(labels), total, args.seed, labels, c)
    digest = config_hash({"scores": sv.digest(), "method": subset.method, **subset.parameters})
    print(f"config_hash: {digest}")
    sidecar = write_subset(subset, args.out, sv.digest(), _note("select", digest))
    print(f"per_class_counts: {' '.join(map(str, subset.per_class_counts))}")
    print(f"wrote {args.out} ({len(subset)} samples) and {sidecar}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    run = _run_config(args)
    cfg = run.train_config()
    seeds = _seeds(args.seeds)
    sp = _load_split(args, run)
    subset = read_subset(args.subset, sp.train.labels, sp.train.num_classes)
    if len(subset) == 0:
        raise ConfigError(f"{args.subset}: empty subset")
    digest = config_hash({**run.values, "seeds": seeds, "subset": subset.indices.tolist()})
    print(f"config_hash: {digest}")
    stats = evaluate_subset(sp.train, subset, sp.test, cfg, seeds)
    for w in stats.warnings:
        print(f"warning: {w}", file=sys.stderr)
    rows = [(Path(args.subset).stem, stats)]
    note = _note("evaluate", digest)
    write_stats_csv(rows, args.out, note)
    md = Path(args.out).with_suffix(".md")
    md.write_text(stats_markdown(rows, note))
    print(f"accuracy: {stats.mean:.4f} ± {stats.std:.4f} over {len(seeds)} seed(s)")
    print(f"wrote {args.out} and {md}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    run = _run_config(args)
    cfg = run.train_config()
    seeds = _seeds(args.seeds)
    ratios = _ratios(args.ratios)
    log = read_log(args.log)
    sv = _score(args, log)
    sp = _load_split(args, run)
    if sp.train.n != log.n:
        raise ConfigError(f"dataset train split has {sp.train.n} rows, log has {log.n}")
    digest = config_hash({**run.values, **_score_settings(args), "seeds": seeds, "ratios": ratios,
                          "log": sv.source_log_hash})
    print(f"config_hash: {digest}")
    rows = ratio_sweep(sp.train, sp.test, sv, ratios, cfg, seeds)
    note = _note("sweep", digest)
    write_sweep_csv(rows, args.out, note)
    md = Path(args.out).with_suffix(".md")
    md.write_text(sweep_markdown(rows, note))
    tp = find_turning_point(rows) if len(rows) >= 2 else None
    if tp is None or tp.crossover_ratio is None:
        print(f"turning point: none detected (sign changes: {tp.sign_changes if tp else 0})")
    else:
        print(f"turning point: {tp.crossover_ratio:.4f} (sign changes: {tp.sign_changes})")
    print(f"wrote {args.out} and {md}")
    return EXIT_OK


def cmd_defaults(args: argparse.Namespace) -> int:
    run = RunConfig.build()
    sys.stdout.write(format_config(run.values))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_metric_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--metric", choices=METRICS, default="lbpe")
    p.add_argument("--early-epochs", type=int, dest="early_epochs",
                   help="epochs of dynamics to use (default: all; 100 of 1000 at CIFAR scale)")
    p.add_argument("--topk", type=int, default=5,
                   help="average over the K most accurate epochs (default 5; 10 at CIFAR scale)")
    p.add_argument("--first-n", type=int, default=10, dest="first_n", help="EL2N averaging window")
    p.add_argument("--raw-logits", action="store_true", dest="raw_logits",
                   help="LBPE on raw logits instead of softmax probabilities")
    p.add_argument("--params", type=Path, help="model parameters (ssp features)")
    p.add_argument("--clusters-per-class", type=int, default=1, dest="clusters_per_class")
    p.add_argument("--score-seed", type=int, default=0, dest="score_seed", help="k-means seed for ssp")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prunekit", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train and record per-epoch dynamics")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True, help="output .ydlg log")
    p.add_argument("--params-out", type=Path, dest="params_out", help="default: <out>.params")
    p.add_argument("--verbose", action="store_true", help="print one line per epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="per-sample scores from a dynamics log")
    p.add_argument("--log", type=Path, required=True)
    _add_metric_flags(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("select", help="build a subset from scores")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--labels-from", type=Path, required=True, dest="labels_from", help="dynamics log")
    size = p.add_mutually_exclusive_group()
    size.add_argument("--per-class", type=int, dest="per_class")
    size.add_argument("--count", type=int)
    mode = p.add_mutually_exclusive_group()
    for m in ("balanced", "rank", "ccs", "random"):
        mode.add_argument(f"--{m}", action="store_const", const=m, dest="mode")
    p.set_defaults(mode="balanced")
    p.add_argument("--prefer", choices=("easy", "hard"), default="easy")
    p.add_argument("--clamp", action="store_true", help="let short classes contribute what they have")
    p.add_argument("--hard-cutoff", type=float, default=0.3, dest="hard_cutoff")
    p.add_argument("--num-strata", type=int, default=50, dest="num_strata")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="retrain on a subset and report test accuracy")
    p.add_argument("--subset", type=Path, required=True)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="easy-vs-hard accuracy across pruning ratios")
    p.add_argument("--log", type=Path, required=True)
    _add_metric_flags(p)
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--ratios", default="0.1:0.9:0.1")
    p.add_argument("--seeds", default="0")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("defaults", help="print default configuration as key = value")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad flags
    try:
        return args.func(args)
    except (ConfigError, ScoringError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SelectionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SELECTION
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, LogFormatError, ds.DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
