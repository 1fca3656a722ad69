"""Command-line experiment runner.

Subcommands: train, eval, sweep, synth, dump-recon. Every option can also be
supplied through ``--config FILE`` holding one ``key = value`` per line with
``#`` comments; explicit flags override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import bench, plots
from .bench import (DEFAULT_BUDGETS, METHOD_NAMES, ExperimentConfig, ModelProfile,
                    dump_reconstructions, emit_report, emit_rounds, evaluate_accuracy,
                    load_any_model, profile_by_name, run_sweep, train_method)
from .checkpoint import CheckpointError
from .data import (DatasetError, SynthSpec, label_budget, save_recordings,
                   segments_matrix, synth_generate)
from .nn import TrainingDiverged
from .rng import RngStream, derive_seed

EXIT_OK = 0
EXIT_ERROR = 2


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v)


def _str_tuple(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _add_profile_options(p: argparse.ArgumentParser):
    g = p.add_argument_group("model hyperparameters (override the profile)")
    g.add_argument("--profile", choices=sorted(bench.PROFILES),
                   help="hyperparameter preset (default: desk for synth, paper otherwise)")
    g.add_argument("--latent-dim", type=int, help="latent/code dimension")
    g.add_argument("--enc-filters", type=_int_tuple, help="encoder conv channels, e.g. 16,32")
    g.add_argument("--cls-filters", type=_int_tuple, help="classifier conv channels")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float, help="RMSprop learning rate")
    g.add_argument("--dropout", type=float)
    g.add_argument("--alpha-scale", type=float,
                   help="classification weight = alpha-scale * n_labeled")
    g.add_argument("--beta-warmup", type=int, help="KL annealing warmup epochs")
    g.add_argument("--no-anneal-m2", action="store_true",
                   help="pin the KL weight at 1 for the M2 objective")
    g.add_argument("--pca-k", type=int, help="number of principal components")
    g.add_argument("--classifier-loss", choices=("logistic", "hinge"),
                   help="external linear classifier loss")


def _add_dataset_options(p: argparse.ArgumentParser):
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", choices=("synth", "cwru", "ims"), default="synth")
    g.add_argument("--root", help="dataset root directory (required for cwru/ims)")
    g.add_argument("--snr-db", type=float, default=10.0, help="synthetic noise level")
    g.add_argument("--recordings-per-class", type=int, default=100,
                   help="synthetic training recordings per class")
    g.add_argument("--test-recordings", type=int, default=10,
                   help="synthetic held-out recordings per class")
    g.add_argument("--fixed-test", action="store_true",
                   help="keep the synthetic test recordings fixed across rounds")


def _resolve_profile(args) -> ModelProfile:
    name = args.profile or ("desk" if args.dataset == "synth" else "paper")
    profile = profile_by_name(name)
    overrides = {}
    for flag, fld in [("latent_dim", "latent_dim"), ("enc_filters", "enc_filters"),
                      ("cls_filters", "cls_filters"), ("batch_size", "batch_size"),
                      ("epochs", "epochs"), ("lr", "lr"), ("dropout", "dropout"),
                      ("alpha_scale", "alpha_scale"), ("beta_warmup", "beta_warmup"),
                      ("pca_k", "pca_k"), ("classifier_loss", "classifier_loss")]:
        value = getattr(args, flag, None)
        if value is not None:
            overrides[fld] = value
    if getattr(args, "no_anneal_m2", False):
        overrides["anneal_m2"] = False
    return dataclasses.replace(profile, **overrides)


def _experiment_config(args, profile: ModelProfile, methods=None, budgets=None,
                       rounds=1) -> ExperimentConfig:
    if args.dataset in ("cwru", "ims") and not args.root:
        raise DatasetError(
            f"dataset {args.dataset!r} needs --root pointing at the converted "
            f"layout described in the README")
    return ExperimentConfig(
        dataset=args.dataset,
        methods=tuple(methods or METHOD_NAMES),
        budgets=tuple(budgets or ()),
        rounds=rounds,
        seed=args.seed,
        root=args.root,
        label_policy=getattr(args, "policy", None),
        fixed_test=getattr(args, "fixed_test", False),
        profile=profile,
        snr_db=args.snr_db,
        synth_train_recordings=args.recordings_per_class,
        synth_test_recordings=args.test_recordings,
    )


def _single_split(args, profile: ModelProfile, n_labels: int):
    cfg = _experiment_config(args, profile)
    source = bench._Source(cfg)
    train, test = source.split_for_round(0)
    split = label_budget(train, test, n_labels, policy=cfg.resolved_policy(),
                         seed=derive_seed(cfg.seed, "labels", 0, n_labels))
    return cfg, source, split


def _write_train_log(log, path):
    if log is None:
        return
    if hasattr(log, "write_csv"):
        log.write_csv(path)
    else:  # plain per-epoch loss list (AE / CNN)
        with open(path, "w", newline="") as fh:
            fh.write("epoch,loss\n")
            for epoch, value in enumerate(log):
                fh.write(f"{epoch},{value:.6f}\n")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    profile = _resolve_profile(args)
    cfg, source, split = _single_split(args, profile, args.labels)
    print(f"training {args.method} on {args.dataset}: "
          f"{len(split.labeled)} labeled / {len(split.unlabeled)} unlabeled / "
          f"{len(split.test)} test segments")
    seed = derive_seed(cfg.seed, cfg.dataset, args.method, args.labels, 0)
    model, log = train_method(args.method, split, profile, source.n_classes, seed,
                              return_log=True)
    x_t, y_t = segments_matrix(split.test)
    acc = evaluate_accuracy(model, x_t, y_t)
    print(f"test accuracy: {acc:.2f}%")
    if args.out:
        model.save(args.out)
        print(f"checkpoint written to {args.out}")
    if args.log:
        _write_train_log(log, args.log)
        print(f"training log written to {args.log}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_any_model(args.checkpoint)
    profile = _resolve_profile(args)
    cfg, source, split = _single_split(args, profile, 0)
    x_t, y_t = segments_matrix(split.test)
    acc = evaluate_accuracy(model, x_t, y_t)
    print(f"{getattr(model, 'kind', type(model).__name__)} checkpoint on "
          f"{args.dataset} test set ({len(x_t)} segments): {acc:.2f}%")
    return EXIT_OK


def cmd_sweep(args) -> int:
    profile = _resolve_profile(args)
    methods = args.methods or METHOD_NAMES
    budgets = args.budgets or DEFAULT_BUDGETS[args.dataset]
    cfg = _experiment_config(args, profile, methods=methods, budgets=budgets,
                             rounds=args.rounds)
    os.makedirs(args.out_dir, exist_ok=True)
    print(f"sweep: dataset={cfg.dataset} methods={','.join(cfg.methods)} "
          f"budgets={list(cfg.resolved_budgets())} rounds={cfg.rounds} "
          f"seed={cfg.seed} profile={profile.name}")
    report = run_sweep(cfg, progress=print if args.verbose else None)

    report_path = os.path.join(args.out_dir, "report.csv")
    rounds_path = os.path.join(args.out_dir, "rounds.csv")
    emit_report(report, report_path, seconds_mode=args.seconds_mode)
    emit_rounds(report, rounds_path)
    print(f"report written to {report_path}")
    print(f"per-round accuracies written to {rounds_path}")
    if not args.no_figures:
        fig_path = os.path.join(args.out_dir, f"sweep_{cfg.dataset}.png")
        plots.sweep_figure(report, fig_path,
                           title=f"{cfg.dataset}: accuracy vs label budget")
        print(f"figure written to {fig_path}")

    print(f"{'method':>8} {'N':>7} {'acc%':>8} {'std':>6} {'rounds':>6} {'sec':>8}")
    for row in report.sorted_rows():
        print(f"{row.method:>8} {row.n_labels:>7} {row.mean:>8.2f} {row.std:>6.2f} "
              f"{len(row.completed):>6} {row.seconds:>8.1f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    spec = SynthSpec(snr_db=args.snr_db)
    rng = RngStream(args.seed).child("synth")
    total = 0
    for cls in range(spec.n_classes):
        recs = synth_generate(cls, args.recordings_per_class + args.test_recordings,
                              rng, spec)
        save_recordings(args.out, recs)
        total += len(recs)
    print(f"wrote {total} synthetic recordings "
          f"({spec.n_classes} classes) to {args.out}")
    return EXIT_OK


def cmd_dump_recon(args) -> int:
    model = load_any_model(args.checkpoint)
    profile = _resolve_profile(args)
    cfg, source, split = _single_split(args, profile, 0)
    segments = split.test[:args.count]
    x, _ = segments_matrix(segments)
    rng = RngStream(args.seed).child("recon-sample") if args.sample else None
    xhat = dump_reconstructions(model, segments, args.out, rng=rng)
    print(f"wrote {len(segments)} (original, reconstruction) rows to {args.out}")
    if not args.no_figures:
        fig_path = args.figure or os.path.splitext(args.out)[0] + ".png"
        plots.reconstruction_figure(x, xhat, fig_path)
        print(f"figure written to {fig_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semivib",
        description="Semi-supervised bearing fault diagnosis benchmark runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train one method on one labeled split")
    _add_dataset_options(p_train)
    _add_profile_options(p_train)
    p_train.add_argument("--method", choices=METHOD_NAMES, required=True)
    p_train.add_argument("--labels", type=int, required=True,
                         help="number of labeled training segments")
    p_train.add_argument("--policy", choices=("random", "from_end"),
                         help="label selection policy (default per dataset)")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--out", help="checkpoint output path")
    p_train.add_argument("--log", help="training-log CSV output path")
    p_train.add_argument("--config", help="key = value config file")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a test set")
    _add_dataset_options(p_eval)
    _add_profile_options(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--seed", type=int, default=0)
    p_eval.add_argument("--config", help="key = value config file")
    p_eval.set_defaults(func=cmd_eval)

    p_sweep = sub.add_parser("sweep", help="label-budget sweep over methods")
    _add_dataset_options(p_sweep)
    _add_profile_options(p_sweep)
    p_sweep.add_argument("--methods", type=_str_tuple,
                         help=f"comma list from {','.join(METHOD_NAMES)}")
    p_sweep.add_argument("--budgets", type=_int_tuple,
                         help="comma list of label budgets (default per dataset)")
    p_sweep.add_argument("--rounds", type=int, default=10)
    p_sweep.add_argument("--policy", choices=("random", "from_end"))
    p_sweep.add_argument("--seed", type=int, default=0)
    p_sweep.add_argument("--out-dir", default="results")
    p_sweep.add_argument("--seconds-mode", choices=("wall", "zero"), default="wall",
                         help="zero writes 0.00 timings for byte-reproducible reports")
    p_sweep.add_argument("--no-figures", action="store_true")
    p_sweep.add_argument("--verbose", action="store_true")
    p_sweep.add_argument("--config", help="key = value config file")
    p_sweep.set_defaults(func=cmd_sweep)

    p_synth = sub.add_parser("synth", help="write a synthetic dataset to disk")
    p_synth.add_argument("--out", required=True, help="output dataset root")
    p_synth.add_argument("--recordings-per-class", type=int, default=100)
    p_synth.add_argument("--test-recordings", type=int, default=10)
    p_synth.add_argument("--snr-db", type=float, default=10.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--config", help="key = value config file")
    p_synth.set_defaults(func=cmd_synth)

    p_dump = sub.add_parser("dump-recon",
                            help="dump (original, reconstruction) pairs from a checkpoint")
    _add_dataset_options(p_dump)
    _add_profile_options(p_dump)
    p_dump.add_argument("--checkpoint", required=True)
    p_dump.add_argument("--count", type=int, default=8,
                        help="number of test segments to dump")
    p_dump.add_argument("--out", required=True, help="output CSV path")
    p_dump.add_argument("--figure", help="figure path (default: alongside the CSV)")
    p_dump.add_argument("--no-figures", action="store_true")
    p_dump.add_argument("--sample", action="store_true",
                        help="reconstruct from a sampled latent code instead of the mean")
    p_dump.add_argument("--seed", type=int, default=0)
    p_dump.add_argument("--config", help="key = value config file")
    p_dump.set_defaults(func=cmd_dump_recon)
    return parser


def _parse_config_file(path) -> list[str]:
    """Translate `key = value` lines into CLI flags (parsed before explicit
    flags, so the command line wins)."""
    if not os.path.isfile(path):
        raise DatasetError(f"config file {path!r} does not exist")
    flags = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not eq or not key or not value:
                raise DatasetError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            flag = "--" + key.replace("_", "-")
            if value.lower() in ("true", "false"):
                if value.lower() == "true":
                    flags.append(flag)
            else:
                flags.extend([flag, value])
    return flags


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if "--config" in argv:
        i = argv.index("--config")
        try:
            path = argv[i + 1]
        except IndexError:
            print("error: --config needs a file path", file=sys.stderr)
            return EXIT_ERROR
        del argv[i:i + 2]
        try:
            config_flags = _parse_config_file(path)
        except DatasetError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_ERROR
        argv = argv[:1] + config_flags + argv[1:]

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DatasetError, CheckpointError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
