"""The ``dgml`` command line: data generation, training, evaluation, sweeps.

Exit codes are a stable contract: 0 success, 2 configuration error, 3 I/O
or file-format error, 4 numeric failure (NaN training abort, failed
gradient check), 5 violated internal invariant. All commands are
deterministic given the same config and seed; no command mutates its input
dataset or checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

from .configs import ConfigError, RunConfig, load_run_config, parse_run_config
from .model import CheckpointError, load_checkpoint, make_variant, save_checkpoint
from .synthdata import DatasetParseError, build_dataset, read_dataset, write_dataset
from .training import (
    EvalCondition,
    TrainingDivergedError,
    collect_gate_histogram,
    evaluate,
    model_grad_check,
    train,
    write_learning_curve,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_INVARIANT = 5

DEFAULT_VARIANCES = (0.0, 400.0, 450.0, 500.0)


class InvariantViolation(RuntimeError):
    """An internal consistency guarantee failed at runtime."""


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return parse_run_config({})
    return load_run_config(path)


def _fail(msg: str, code: int) -> int:
    print(f"dgml: error: {msg}", file=sys.stderr)
    return code


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out)
    dataset = build_dataset(cfg.dataset, seed)
    write_dataset(dataset, out)
    counts = {name: len(dataset.split(name)) for name in ("train", "eval_known", "eval_unknown")}
    known = sum(1 for _, role in dataset.objects if role == "known")
    unknown = len(dataset.objects) - known
    print(f"dataset written to {out}")
    print(f"objects: {known} known + {unknown} unknown")
    print(f"sequences: {counts['train']} train / {counts['eval_known']} eval-known / {counts['eval_unknown']} eval-unknown")
    print(f"manifest sha256: {_sha256(out / 'manifest.json')}")
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.train.seed
    variant = args.variant or cfg.model.variant
    train_cfg = cfg.train if seed == cfg.train.seed else dataclasses.replace(cfg.train, seed=seed)
    dataset = read_dataset(args.dataset)
    params = make_variant(variant, cfg.model.profile, seed=seed)
    result = train(params, dataset, train_cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.dgml"
    curve = out / "learning_curve.csv"
    save_checkpoint(ckpt, params, optimizer_state=result.optimizer.state_arrays())
    write_learning_curve(curve, result.log)
    if result.log:
        last = result.log[-1]
        val = "n/a" if last.val_loss is None else f"{last.val_loss:.6f}"
        print(f"final train loss {last.train_loss:.6f}, val loss {val} after {len(result.log)} epochs")
    else:
        print("0 epochs requested; wrote the initial parameters")
    print(f"checkpoint: {ckpt}")
    print(f"learning curve: {curve}")
    return EXIT_OK


def _eval_split_reports(params, dataset, condition, seed):
    reports = {}
    for split, label in (("eval_known", "known"), ("eval_unknown", "unknown")):
        if dataset.split(split):
            reports[label] = evaluate(params, dataset, split, condition, seed=seed)
    if not reports:
        raise InvariantViolation("dataset has no evaluation sequences in any split")
    return reports


def _cmd_eval(args) -> int:
    condition = EvalCondition.parse(args.condition)
    params, _ = load_checkpoint(args.checkpoint)
    dataset = read_dataset(args.dataset)
    reports = _eval_split_reports(params, dataset, condition, args.seed)
    doc = {
        "condition": condition.describe(),
        "variant": params.variant,
        "splits": {label: report.to_dict() for label, report in reports.items()},
        "meta": {"checkpoint": str(args.checkpoint), "dataset": str(args.dataset), "seed": args.seed},
    }
    for label, report in reports.items():
        gate = ""
        if report.mean_alpha is not None:
            gate = f", mean alpha {report.mean_alpha:.3f} / mean beta {report.mean_beta:.3f}"
        print(f"{label}: acc_trans {report.acc_trans:.4f} mm, acc_rot {report.acc_rot:.4f} deg{gate}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        _write_json(out, doc)
        print(f"metrics: {out}")
    return EXIT_OK


def _format_variance(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else f"{v:g}"


def _cmd_sweep_noise(args) -> int:
    params, _ = load_checkpoint(args.checkpoint)
    if params.variant != "dgml":
        raise ConfigError(f"sweep-noise needs a dgml checkpoint, got variant {params.variant!r}")
    dataset = read_dataset(args.dataset)
    try:
        variances = [float(v) for v in args.variances.split(",")] if args.variances else list(DEFAULT_VARIANCES)
    except ValueError as exc:
        raise ConfigError(f"--variances must be a comma-separated number list: {exc}") from None
    if any(v < 0 for v in variances):
        raise ConfigError(f"variances must be >= 0, got {variances}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    summary_rows = []
    for var in variances:
        condition = EvalCondition(kind="noise", variance=var, modality="tactile")
        hist = collect_gate_histogram(
            params, dataset, split=args.split, bins=args.bins, condition=condition, seed=args.seed
        )
        hist_path = out / f"hist_var{_format_variance(var)}.csv"
        with open(hist_path, "w") as fh:
            fh.write("bin_lo,bin_hi,count\n")
            for lo, hi, count in zip(hist.edges[:-1], hist.edges[1:], hist.counts):
                fh.write(f"{lo!r},{hi!r},{int(count)}\n")
        report = evaluate(params, dataset, args.split, condition, seed=args.seed)
        summary_rows.append((var, report.mean_alpha, report.acc_trans, report.acc_rot))
        print(f"variance {var:g}: mean alpha {report.mean_alpha:.4f} ({hist_path.name})")

    with open(out / "summary.csv", "w") as fh:
        fh.write("variance,mean_alpha,acc_trans_mm,acc_rot_deg\n")
        for var, alpha, acc_t, acc_r in summary_rows:
            fh.write(f"{_format_variance(var)},{alpha!r},{acc_t!r},{acc_r!r}\n")
    print(f"summary: {out / 'summary.csv'}")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    from .model import PROFILES

    if args.profile not in PROFILES:
        raise ConfigError(f"--profile must be one of {sorted(PROFILES)}, got {args.profile!r}")
    params = make_variant("dgml", PROFILES[args.profile], seed=args.seed)
    report = model_grad_check(
        params,
        steps=args.steps,
        eps=args.eps,
        samples_per_tensor=None if args.exhaustive else args.samples,
        seed=args.seed,
        _corrupt="lstm.w_x" if args.inject_fault else None,
    )
    print(f"{'tensor':<24} {'max rel err':>12} {'checked':>8}")
    for entry in report.entries:
        print(f"{entry.name:<24} {entry.max_rel_error:>12.3e} {entry.checked:>8}")
    if report.nan_sites:
        print(f"NaN encountered at: {', '.join(report.nan_sites)}")
    if report.passed(args.tolerance):
        print(f"PASS: all {len(report.entries)} parameter tensors below {args.tolerance:g}")
        return EXIT_OK
    bad = ", ".join(e.name for e in report.failures(args.tolerance))
    print(f"FAIL: above tolerance {args.tolerance:g}: {bad}", file=sys.stderr)
    return EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument parsing and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    p.add_argument("--config", help="run-config JSON (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="output dataset directory (must not already hold files)")
    p.add_argument("--seed", type=int, help="override the config's first seed")
    p.set_defaults(fn=_cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant on a dataset")
    p.add_argument("--config", help="run-config JSON")
    p.add_argument("--dataset", required=True, help="dataset directory from gen-data")
    p.add_argument("--variant", choices=["dgml", "no-gate", "image-only", "tactile-only"])
    p.add_argument("--out", required=True, help="output directory for checkpoint + learning curve")
    p.add_argument("--seed", type=int, help="override the config's training seed")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint under a condition")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--condition", default="normal", help="normal|mute-image|mute-tactile")
    p.add_argument("--seed", type=int, default=0, help="seed for the condition's random perturbations")
    p.add_argument("--out", help="write the metrics JSON here")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("sweep-noise", help="gate histograms under increasing tactile noise")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--variances", help="comma-separated noise variances (default 0,400,450,500)")
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--split", default="eval_known", choices=["train", "eval_known", "eval_unknown"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for histogram CSVs + summary")
    p.set_defaults(fn=_cmd_sweep_noise)

    p = sub.add_parser("grad-check", help="finite-difference check of the end-to-end model")
    p.add_argument("--profile", default="desk")
    p.add_argument("--steps", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--samples", type=int, default=50, help="probed elements per tensor")
    p.add_argument("--exhaustive", action="store_true", help="probe every element")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help="test hook: corrupt one gradient, must fail")
    p.set_defaults(fn=_cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except ValueError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except (DatasetParseError, CheckpointError, FileExistsError, FileNotFoundError, OSError) as exc:
        return _fail(str(exc), EXIT_IO)
    except TrainingDivergedError as exc:
        return _fail(str(exc), EXIT_NUMERIC)
    except InvariantViolation as exc:
        return _fail(str(exc), EXIT_INVARIANT)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
