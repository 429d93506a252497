"""Command-line entry points: train, matrix, probe.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 missing
artifact. Matrix cells run as isolated subprocesses with disjoint run
directories, so one failed cell cannot corrupt another.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats

from .config import ConfigError, parse_config_file, resolve_config
from .data import IdxLoadError, load_idx, load_mnist_dir
from .models import ModelVariant, build_model
from .probes import export_embeddings, extract_film_params, extract_z_embeddings, logistic_probe_cv
from .tensor import ValidationError
from .training import (
    TrainConfig,
    evaluate,
    load_run_checkpoint,
    restore_snapshot,
    run_training,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_MISSING_ARTIFACT = 4

QUICK_TRAIN_IMAGES = 10_000
QUICK_EPOCHS = 3

# Table-style row order for aggregate reports
MATRIX_VARIANTS = ("unconditional", "adversarial", "embedding_conditioned",
                   "self_modulated", "conditional")


def _load_data(data_dir):
    try:
        return load_mnist_dir(data_dir)
    except FileNotFoundError as exc:
        raise IdxLoadError(f"dataset file missing: {exc}") from exc


def execute_run(cfg: TrainConfig, train_ds, test_ds, run_dir, quick: bool = False,
                data_dir=None, log=None) -> dict:
    """Train, select checkpoints, run the final evaluation, write summary.json."""
    if quick:
        cfg = TrainConfig(**{**cfg.to_dict(), "epochs": QUICK_EPOCHS})
        train_ds = train_ds.subset(slice(QUICK_TRAIN_IMAGES))
    run_dir = Path(run_dir)
    history, selection = run_training(cfg, train_ds, test_ds, run_dir=run_dir, log=log)

    with open(run_dir / "config.txt", "a") as fh:
        if data_dir is not None:
            fh.write(f"data_dir = {data_dir}\n")
        fh.write(f"run_dir = {run_dir}\n")
        fh.write(f"quick = {quick}\n")

    chosen = selection.evaluation_checkpoint()
    bundle = build_model(cfg.variant, cfg.seed)
    restore_snapshot(bundle, chosen.params)
    eval_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3]))
    in_acc = evaluate(bundle, test_ds, "in_domain", eval_rng)
    summary = {
        "config": cfg.to_dict(),
        "quick": quick,
        "selection": selection.summary(),
        "final_eval": {
            "checkpoint": "oracle" if selection.oracle is not None else "val_acc",
            "epoch": chosen.epoch,
            "in_domain_acc": in_acc,
            "out_of_domain_acc": chosen.ood_acc,
        },
        "history_epochs": len(history),
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    if log is not None:
        ood = chosen.ood_acc
        log(f"final: in_domain={in_acc:.2f}" + (f" out_of_domain={ood:.2f}" if ood is not None else "")
            + f" (checkpoint: {summary['final_eval']['checkpoint']})")
    return summary


def _train_overrides(args) -> dict:
    return {"variant": args.variant, "seed": args.seed, "epochs": args.epochs,
            "domain_weight": args.domain_weight, "film_penalty_weight": args.film_penalty_weight,
            "lr": args.lr, "batch_size": args.batch}


def cmd_train(args) -> int:
    cfg, run_settings = resolve_config(args.config, _train_overrides(args))
    data_dir = args.data_dir or run_settings.get("data_dir") or "data"
    run_dir = args.run_dir or run_settings.get("run_dir") \
        or f"runs/{cfg.variant.value}_seed{cfg.seed}"
    quick = args.quick or run_settings.get("quick", False)
    train_ds, test_ds = _load_data(data_dir)
    execute_run(cfg, train_ds, test_ds, run_dir, quick=quick, data_dir=data_dir, log=print)
    return EXIT_OK


def _aggregate(root: Path, variants, seeds) -> dict:
    rows = {}
    for variant in variants:
        in_accs, ood_accs, statuses = [], [], []
        for seed in seeds:
            summary_path = root / f"{variant}_seed{seed}" / "summary.json"
            if not summary_path.exists():
                statuses.append("failed")
                continue
            final = json.loads(summary_path.read_text())["final_eval"]
            statuses.append("ok")
            in_accs.append(final["in_domain_acc"])
            if final["out_of_domain_acc"] is not None:
                ood_accs.append(final["out_of_domain_acc"])

        def ci(vals):
            if len(vals) < 2:
                return None
            return float(stats.t.ppf(0.975, len(vals) - 1) * np.std(vals, ddof=1) / np.sqrt(len(vals)))

        rows[variant] = {
            "status": "ok" if all(s == "ok" for s in statuses) else "failed",
            "seeds": list(seeds),
            "in_domain_mean": float(np.mean(in_accs)) if in_accs else None,
            "in_domain_ci95": ci(in_accs),
            "out_of_domain_mean": float(np.mean(ood_accs)) if ood_accs else None,
            "out_of_domain_ci95": ci(ood_accs),
        }
    return rows


def _format_cell(mean, half):
    if mean is None:
        return "--"
    return f"{mean:.2f}" + (f" ± {half:.2f}" if half is not None else "")


def _write_aggregate(root: Path, rows: dict):
    (root / "aggregate.json").write_text(json.dumps(rows, indent=2) + "\n")
    lines = ["variant,in_domain_mean,in_domain_ci95,out_of_domain_mean,out_of_domain_ci95,status"]
    for variant, r in rows.items():
        lines.append(",".join([
            variant,
            *(("" if r[k] is None else repr(r[k]))
              for k in ("in_domain_mean", "in_domain_ci95", "out_of_domain_mean", "out_of_domain_ci95")),
            r["status"]]))
    (root / "aggregate.csv").write_text("\n".join(lines) + "\n")

    width = max(len(v) for v in rows) + 2
    text = [f"{'model':<{width}} {'in-domain acc (%)':>20} {'out-of-domain acc (%)':>24}"]
    for variant, r in rows.items():
        in_cell = _format_cell(r["in_domain_mean"], r["in_domain_ci95"])
        ood_cell = _format_cell(r["out_of_domain_mean"], r["out_of_domain_ci95"])
        mark = "" if r["status"] == "ok" else "   [FAILED]"
        text.append(f"{variant:<{width}} {in_cell:>20} {ood_cell:>24}{mark}")
    table = "\n".join(text)
    (root / "aggregate.txt").write_text(table + "\n")
    return table


def cmd_matrix(args) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in [m.value for m in ModelVariant]:
            raise ConfigError(f"unknown variant {v!r}")
    seeds = [int(s) for s in args.seeds.split(",")]
    root = Path(args.run_dir or "runs/matrix")
    root.mkdir(parents=True, exist_ok=True)
    data_dir = args.data_dir or "data"
    _load_data(data_dir)  # fail fast with a data error before spawning cells

    threads = max(1, (os.cpu_count() or 1) // max(1, args.jobs))
    env = dict(os.environ)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        env[var] = str(threads)

    def launch(cell):
        variant, seed = cell
        cmd = [sys.executable, "-m", "domcond", "train",
               "--variant", variant, "--seed", str(seed),
               "--data-dir", str(data_dir),
               "--run-dir", str(root / f"{variant}_seed{seed}")]
        if args.config:
            cmd += ["--config", str(args.config)]
        for flag, value in (("--epochs", args.epochs), ("--lambda", args.domain_weight),
                            ("--gamma", args.film_penalty_weight), ("--lr", args.lr),
                            ("--batch", args.batch)):
            if value is not None:
                cmd += [flag, str(value)]
        if args.quick:
            cmd.append("--quick")
        proc = subprocess.run(cmd, env=env, capture_output=True, text=True)
        if proc.returncode != 0:
            sys.stderr.write(f"[{variant} seed {seed}] exit {proc.returncode}\n{proc.stderr}\n")
        return proc.returncode

    cells = [(v, s) for v in variants for s in seeds]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        codes = list(pool.map(launch, cells))

    rows = _aggregate(root, variants, seeds)
    print(_write_aggregate(root, rows))
    failed = [c for c in codes if c != 0]
    return failed[0] if failed else EXIT_OK


def cmd_probe(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.exists():
        raise FileNotFoundError(f"run directory not found: {run_dir}")
    stored = parse_config_file(run_dir / "config.txt") if (run_dir / "config.txt").exists() else {}
    stored_data_dir = stored.pop("data_dir", None)
    data_dir = args.data_dir or stored_data_dir or "data"
    for key in ("run_dir", "quick"):
        stored.pop(key, None)
    cfg = TrainConfig(**stored)

    if args.source == "z":
        source = ("z", None)
    elif args.source.startswith("film:"):
        try:
            source = ("film", int(args.source.split(":", 1)[1]))
        except ValueError:
            raise ConfigError(f"bad --source {args.source!r}: expected film:<layer>")
    else:
        raise ConfigError(f"bad --source {args.source!r}: expected 'z' or 'film:<layer>'")
    if args.target not in ("domain", "class"):
        raise ConfigError(f"bad --target {args.target!r}: expected 'domain' or 'class'")

    bundle = build_model(cfg.variant, cfg.seed)
    load_run_checkpoint(run_dir, bundle, "oracle")
    try:
        test_ds = load_idx(Path(data_dir) / "t10k-images-idx3-ubyte",
                           Path(data_dir) / "t10k-labels-idx1-ubyte")
    except FileNotFoundError as exc:
        raise IdxLoadError(f"dataset file missing: {exc}") from exc

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
    if source[0] == "z":
        es = extract_z_embeddings(bundle, test_ds, rng)
    else:
        es = extract_film_params(bundle, test_ds, rng, source[1])
    report = logistic_probe_cv(es, target=args.target, folds=args.folds,
                               rng=np.random.default_rng(np.random.SeedSequence([cfg.seed, 5])))

    folds = ", ".join(f"{a:.2f}" for a in report.fold_accuracies)
    print(f"probe source={es.source} target={args.target} dim={es.vectors.shape[1]}")
    print(f"fold accuracies (%): {folds}")
    print(f"mean: {report.mean:.2f} ± {report.ci95_half_width:.2f} (95% CI)")

    csv_path = run_dir / f"embeddings_{es.source}_{args.target}.csv"
    export_embeddings(es, csv_path)
    summary_path = run_dir / "summary.json"
    summary = json.loads(summary_path.read_text()) if summary_path.exists() else {}
    summary.setdefault("probes", {})[f"{es.source}/{args.target}"] = report.to_dict()
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="domcond",
                                     description="domain-conditional digit classifiers")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--data-dir", default=None, help="directory with IDX dataset files")
        p.add_argument("--run-dir", default=None)
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lambda", dest="domain_weight", type=float, default=None,
                       help="domain loss mix in [0, 1]")
        p.add_argument("--gamma", dest="film_penalty_weight", type=float, default=None,
                       help="modulation identity-penalty weight")
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--quick", action="store_true",
                       help="10k training images, 3 epochs")

    p_train = sub.add_parser("train", help="train a single variant")
    add_common(p_train)
    p_train.add_argument("--variant", default=None,
                         choices=[v.value for v in ModelVariant])
    p_train.add_argument("--seed", type=int, default=None)
    p_train.set_defaults(fn=cmd_train)

    p_matrix = sub.add_parser("matrix", help="train a variant x seed grid and aggregate")
    add_common(p_matrix)
    p_matrix.add_argument("--variants", default=",".join(MATRIX_VARIANTS))
    p_matrix.add_argument("--seeds", default="0,1,2")
    p_matrix.add_argument("--jobs", type=int, default=1)
    p_matrix.set_defaults(fn=cmd_matrix)

    p_probe = sub.add_parser("probe", help="linear-probe a trained run's representations")
    p_probe.add_argument("--run-dir", required=True)
    p_probe.add_argument("--source", default="z", help="'z' or 'film:<layer>'")
    p_probe.add_argument("--target", default="domain", help="'domain' or 'class'")
    p_probe.add_argument("--data-dir", default=None)
    p_probe.add_argument("--folds", type=int, default=5)
    p_probe.set_defaults(fn=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    try:
        return args.fn(args)
    except (ConfigError, ValidationError) as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except IdxLoadError as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except FileNotFoundError as exc:
        sys.stderr.write(f"missing artifact: {exc}\n")
        return EXIT_MISSING_ARTIFACT


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
