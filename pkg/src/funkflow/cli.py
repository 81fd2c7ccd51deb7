"""Command-line interface tying the pipeline together.

Exit codes: 0 success, 1 validation error (bad inputs/flags/files), 2
numerical failure. Errors print a single machine-parseable line to stderr
with the prefix "funkflow-error:". FUNKFLOW_THREADS caps worker
parallelism; FUNKFLOW_NUMBA selects the kernel backend.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import evaluate as ev
from . import inference, io
from .errors import NumericalError, ValidationError
from .gradcheck import run_gradcheck
from .model import init_model_params
from .nn import lr_schedule
from .sim import simulate_studies, study_pk_metrics
from .training import TrainConfig, train


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage text + exit 1 instead of argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"funkflow-error: validation: {message}\n")
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="funkflow",
                     description="Simulate PK studies, train the flow model, "
                                 "and run synthesis/forecasting/evaluation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate synthetic studies")
    p.add_argument("--config", help="prior JSON (study-configuration table fields)")
    p.add_argument("--num-studies", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train the vector field on a study corpus")
    p.add_argument("--data", required=True, help="directory of study JSON files")
    p.add_argument("--config", help="JSON with optional 'model'/'train' sections")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synthesize", help="sample virtual subjects for a study")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--study", required=True)
    p.add_argument("--num-samples", type=int, default=100)
    p.add_argument("--times", required=True,
                   help="comma-separated query times in hours")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--method", choices=("euler", "rk4"), default="euler")
    p.add_argument("--out", required=True)

    p = sub.add_parser("forecast", help="prefix-conditioned individual forecast")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--study", required=True)
    p.add_argument("--subject", required=True, help="subject id within the study")
    p.add_argument("--prefix", type=int, default=4,
                   help="number of leading observations to condition on")
    p.add_argument("--num-samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--method", choices=("euler", "rk4"), default="euler")
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="leave-one-out metrics over studies")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--prefix-len", type=int, default=4)
    p.add_argument("--metrics", default="loo,coverage",
                   help="comma list from {loo,coverage,vpc,mmd}")
    p.add_argument("--num-samples", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pkmetrics", help="dose-normalized exposure metrics")
    p.add_argument("--data", required=True, help="study JSON file or directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    p.add_argument("--config", help="JSON with a 'model' section")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_simulate(args) -> int:
    prior = io.load_prior(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    studies = simulate_studies(prior, args.num_studies, args.seed)
    for study in studies:
        io.save_study(study, out / f"{study.study_id}.json")
    print(f"wrote {len(studies)} studies to {out}")
    return 0


def _cmd_train(args) -> int:
    model_config, train_config = io.load_run_config(args.config)
    train_config.seed = args.seed
    studies = io.load_studies_dir(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    params = init_model_params(model_config, np.random.default_rng(args.seed))

    def checkpoint(p, epoch, loss, tag):
        name = "best.ckpt" if tag == "best" else f"epoch_{epoch:04d}.ckpt"
        io.save_checkpoint(out / name, p, model_config,
                           metadata={"epoch": epoch, "mean_loss": loss, "tag": tag},
                           master_seed=args.seed)

    result = train(params, studies, model_config, train_config,
                   checkpoint_fn=checkpoint,
                   log_fn=lambda row: print(
                       f"epoch {row['epoch']:4d}  loss {row['mean_loss']:.6f}  "
                       f"lr {row['lr']:.2e}  {row['seconds']:.1f}s"))
    io.save_checkpoint(out / "final.ckpt", params, model_config,
                       metadata={"epochs": train_config.epochs,
                                 "best_loss": result.best_loss},
                       master_seed=args.seed)
    io.save_loss_history(out / "loss_history.csv", result.history)
    print(f"final checkpoint and loss history in {out}")
    return 0


def _parse_times(raw: str) -> np.ndarray:
    try:
        times = np.array([float(v) for v in raw.split(",") if v.strip() != ""])
    except ValueError:
        raise ValidationError(f"--times must be comma-separated numbers, got {raw!r}")
    if times.size == 0:
        raise ValidationError("--times is empty")
    return times


def _cmd_synthesize(args) -> int:
    params, config, _ = io.load_checkpoint(args.ckpt)
    study = io.load_study(args.study)
    times = _parse_times(args.times)
    rng = np.random.default_rng(args.seed)
    samples = inference.synthesize_population(
        params, config, study, args.num_samples, times, rng,
        steps=args.steps, method=args.method)
    io.write_json(args.out, {
        "study_id": study.study_id,
        "query_times": times,
        "samples": samples,
        "quantiles": {str(q): np.quantile(samples, q, axis=0)
                      for q in inference.QUANTILES},
        "mean": samples.mean(axis=0),
        "seed": args.seed,
    })
    print(f"wrote {args.num_samples} synthesized trajectories to {args.out}")
    return 0


def _cmd_forecast(args) -> int:
    params, config, _ = io.load_checkpoint(args.ckpt)
    study = io.load_study(args.study)
    target = next((r for r in study.individuals if r.id == args.subject), None)
    if target is None:
        raise ValidationError(f"subject {args.subject!r} not in study {study.study_id}")
    if target.times.size <= args.prefix:
        raise ValidationError(
            f"subject {args.subject!r} has {target.times.size} observations; "
            f"prefix {args.prefix} leaves nothing to forecast")
    from .training import context_without

    context = context_without(study, target.id)
    rng = np.random.default_rng(args.seed)
    result = inference.forecast_individual(
        params, config, context, target.times[:args.prefix],
        target.concentrations[:args.prefix], target.dose,
        target.times[args.prefix:], args.num_samples, rng,
        steps=args.steps, method=args.method)
    io.write_json(args.out, {
        "study_id": study.study_id,
        "subject_id": target.id,
        "prefix_len": result.prefix_len,
        "times": result.times,
        "samples": result.samples,
        "mean": result.mean,
        "quantiles": {str(q): v for q, v in result.quantiles.items()},
        "observed_future": target.concentrations[args.prefix:],
        "seed": args.seed,
    })
    print(f"wrote forecast for {target.id} to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    params, config, _ = io.load_checkpoint(args.ckpt)
    studies = io.load_studies_dir(args.data)
    metrics = {m.strip() for m in args.metrics.split(",") if m.strip()}
    unknown = metrics - {"loo", "coverage", "vpc", "mmd"}
    if unknown:
        raise ValidationError(f"unknown metrics {sorted(unknown)}")
    eligible = [r for s in studies for r in s.individuals
                if r.times.size > args.prefix_len]
    if not eligible:
        raise ValidationError(
            f"prefix length {args.prefix_len} leaves no subject with future "
            "observations to evaluate")
    report: dict = {"prefix_len": args.prefix_len, "seed": args.seed,
                    "n_studies": len(studies)}
    if metrics & {"loo", "coverage"}:
        loo = ev.loo_forecast_eval(params, config, studies,
                                   prefix_len=args.prefix_len,
                                   n_samples=args.num_samples, seed=args.seed,
                                   steps=args.steps)
        if "loo" in metrics:
            scores = loo.scores
            report["loo"] = {
                "rows": loo.rows, "skipped": loo.skipped,
                "per_study": loo.per_study,
                "mean": float(scores.mean()), "sd": float(scores.std(ddof=1))
                if scores.size > 1 else 0.0,
            }
        if "coverage" in metrics:
            report["coverage"] = ev.aggregate_coverage(loo.rows)
    if "vpc" in metrics:
        report["vpc"] = {
            s.study_id: ev.vpc(params, config, s, seed=args.seed,
                               steps=args.steps).rows
            for s in studies
        }
    if "mmd" in metrics:
        observed = [(r.times, r.concentrations) for s in studies
                    for r in s.individuals]
        generated = []
        for i, s in enumerate(studies):
            rng = np.random.default_rng(np.random.SeedSequence(
                entropy=[args.seed, 7_000_000 + i]))
            for r in s.individuals:
                draw = inference.synthesize_population(
                    params, config, s, 1, r.times, rng, dose=r.dose,
                    steps=args.steps)
                generated.append((r.times, draw[0]))
        report["mmd"] = ev.mmd_permutation_test(observed, generated,
                                                seed=args.seed)
    io.write_json(args.out, report)
    print(f"wrote evaluation report to {args.out}")
    return 0


def _cmd_pkmetrics(args) -> int:
    studies = io.load_studies_dir(args.data)
    io.write_json(args.out, {"studies": [study_pk_metrics(s) for s in studies]})
    print(f"wrote PK metrics for {len(studies)} studies to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .model import MINI_CONFIG

    if args.config:
        config, _ = io.load_run_config(args.config)
    else:
        config = MINI_CONFIG
    out = run_gradcheck(config, tolerance=args.tolerance, seed=args.seed)
    print(f"gradcheck: max_rel_err={out['max_rel_err']:.3e} over "
          f"{out['num_params']} parameters (worst: {out['worst_param']})")
    if not out["passed"]:
        raise NumericalError(
            f"gradient check failed: {out['max_rel_err']:.3e} > {args.tolerance:g}")
    return 0


_COMMANDS = {
    "simulate": _cmd_simulate,
    "train": _cmd_train,
    "synthesize": _cmd_synthesize,
    "forecast": _cmd_forecast,
    "evaluate": _cmd_evaluate,
    "pkmetrics": _cmd_pkmetrics,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ValidationError as exc:
        sys.stderr.write(f"funkflow-error: validation: {exc}\n")
        return 1
    except NumericalError as exc:
        sys.stderr.write(f"funkflow-error: numerical: {exc}\n")
        return 2
    except FileNotFoundError as exc:
        sys.stderr.write(f"funkflow-error: validation: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
