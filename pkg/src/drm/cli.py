"""Command-line entry points.

Subcommands: generate (export raw environment samples), train (one fixed
training run), sweep (leave-one-out random search), report (aggregate sweep
records), verify-theory (random-SCM theory checks), balance (batch marginal
and decorrelation statistics). Every command exits 0 on success and nonzero
on any error; all randomness is controlled by config/seed arguments.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys

from .core import stack_environments
from .data import export_csv, make_environment, split_train_val
from .harness import (_build_balanced_validation, _run_trial, _seed_int,
                      balance_statistics, env_specs, parse_algorithm,
                      parse_config, read_records_csv, report, run_sweep,
                      select_model, verify_theory, write_bound_rows_csv,
                      write_records_csv)


def _load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def cmd_generate(args) -> int:
    config = _load_config(args.spec)
    specs = env_specs(config, config.seeds[0])
    datasets = [make_environment(spec, env=i) for i, spec in enumerate(specs)]
    export_csv(datasets, args.out)
    total = sum(len(d) for d in datasets)
    print(f"wrote {total} samples from {len(datasets)} environments to {args.out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    if not config.algorithm:
        raise ValueError("config must set `algorithm` for the train command")
    if not config.test_env:
        raise ValueError("config must set `test_env` for the train command")
    base, use_tb, use_vb = parse_algorithm(config.algorithm)
    rep = config.seeds[0]
    specs = env_specs(config, rep)
    datasets = [make_environment(spec, env=i) for i, spec in enumerate(specs)]
    test_idx = config.env_index(config.test_env)
    train_idx = [i for i in range(len(specs)) if i != test_idx]
    if not train_idx:
        raise ValueError("no training environments left")
    splits = [split_train_val(datasets[i], config.split_ratio,
                              _seed_int(config.master_seed, rep, 200 + i))
              for i in train_idx]
    train_pool = stack_environments([s[0] for s in splits])
    val_pool = stack_environments([s[1] for s in splits])
    hp = {"learning_rate": config.learning_rate,
          "weight_decay": config.weight_decay,
          "batch_size": config.batch_size, "hidden": config.hidden}
    base_idx = ("erm", "vrex", "groupdro").index(base)
    vb_keys = (config.master_seed, rep, test_idx)
    _, _, balanced_val = _build_balanced_validation(config, train_pool,
                                                    val_pool, vb_keys)
    seed_keys = (config.master_seed, rep, test_idx, base_idx, int(use_tb), 0)
    ckpts, s1_acc = _run_trial(config, base, use_tb, hp, train_pool, val_pool,
                               datasets[test_idx], balanced_val, seed_keys)
    print(f"stage1_val_acc={s1_acc:.4f}")
    print("step,val_acc,val_balanced_acc,test_acc")
    for ck in ckpts:
        print(f"{ck['step']},{ck['val_acc']:.4f},"
              f"{ck['val_balanced_acc']:.4f},{ck['test_acc']:.4f}")
    mode = "balanced_val" if use_vb else config.selection
    rows = [{"trial": 0, **ck} for ck in ckpts]
    chosen = select_model(rows, mode)
    print(f"selected[{mode}]: step={chosen['step']} "
          f"test_acc={chosen['test_acc']:.4f}")
    if args.out:
        records = [{"seed": rep, "test_env": config.test_env, "algorithm": base,
                    "use_tb": int(use_tb), "trial": 0, "step": ck["step"],
                    **hp, "stage1_val_acc": s1_acc, "val_acc": ck["val_acc"],
                    "val_balanced_acc": ck["val_balanced_acc"],
                    "test_acc": ck["test_acc"]} for ck in ckpts]
        write_records_csv(records, args.out)
    return 0


def _print_table(table) -> None:
    header = ["algorithm"] + table.env_names + ["min", "avg"]
    print(",".join(header))
    for row in table.rows:
        cells = [f"{row.means[e]:.4f}" if e in row.means else ""
                 for e in table.env_names]
        print(",".join([row.algorithm] + cells
                       + [f"{row.minimum:.4f}", f"{row.average:.4f}"]))


def cmd_sweep(args) -> int:
    config = _load_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    records = run_sweep(config)
    write_records_csv(records, os.path.join(args.out_dir, "records.csv"))
    shutil.copyfile(args.config, os.path.join(args.out_dir, "config.txt"))
    table = report(records, config, os.path.join(args.out_dir, "results.csv"))
    _print_table(table)
    print(f"wrote {len(records)} records to {args.out_dir}")
    return 0


def cmd_report(args) -> int:
    config = _load_config(os.path.join(args.in_dir, "config.txt"))
    records = read_records_csv(os.path.join(args.in_dir, "records.csv"))
    table = report(records, config, args.out)
    _print_table(table)
    return 0


def cmd_verify_theory(args) -> int:
    rows, summary = verify_theory(args.n, args.delta, args.m, args.seed)
    if args.out:
        write_bound_rows_csv(rows, args.out)
    for key, value in summary.items():
        print(f"{key}={value}")
    if summary["passing"] < args.n:
        print("error: not enough assumption-passing pairs", file=sys.stderr)
        return 1
    if summary["lemma_violations"] > 0:
        print("error: divergence-contraction violations found", file=sys.stderr)
        return 1
    if summary["theorem_violation_rate"] > args.delta:
        print("error: bound violation rate exceeds delta", file=sys.stderr)
        return 1
    return 0


def cmd_balance(args) -> int:
    config = _load_config(args.config)
    stats = balance_statistics(config)
    for key, value in stats.items():
        print(f"{key}={value}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("key,value\n")
            for key, value in stats.items():
                fh.write(f"{key},{value}\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="drm",
        description="Balanced-batch domain generalization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="export environment samples to CSV")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="single training run from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="leave-one-out random hyperparameter search")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate sweep records into a result table")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify-theory", help="random-SCM theory verification")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--delta", type=float, default=0.1)
    p.add_argument("--m", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_verify_theory)

    p = sub.add_parser("balance", help="batch marginal and decorrelation statistics")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_balance)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface the failure via the exit code
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
