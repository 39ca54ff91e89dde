"""``prguide`` command line: sample, sweep, diagnose, train-toy.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
import argparse
import csv
import sys
from pathlib import Path

import numpy as np
import yaml

from prguide.config import ConfigError, load_config, load_train_config, validate_sampling
from prguide.diagnostics import collect_cp_stats, export_stats_csv, render_histogram_image
from prguide.exceptions import FormatError, NumericalDivergenceError, ParameterError
from prguide.experiment import (
    SWEEP_AXES,
    axis_dir_name,
    build_scenario,
    has_metrics,
    run_modes,
    write_manifest,
    write_metrics,
)
from prguide.sampler import read_trace_csv

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_run_flags(p):
    p.add_argument("--config", type=Path, help="YAML experiment config (defaults to the toy scenario)")
    p.add_argument("--out", type=Path, help="output directory (default: config, then $PRGUIDE_OUTPUT_ROOT, then ./runs)")
    p.add_argument("--seed", type=_int_list, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--mode", type=_str_list, help="comma-separated modes from CFG,CG,PR")
    p.add_argument("--omega-text", type=float)
    p.add_argument("--omega-cons", type=float)
    p.add_argument("--steps", type=int)


def build_parser():
    parser = _Parser(prog="prguide", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample", help="sample every (mode, seed) pair")
    _add_run_flags(p)

    p = sub.add_parser("sweep", help="sample across values of one guidance scale")
    _add_run_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, type=_float_list, help="comma-separated axis values")

    p = sub.add_parser("diagnose", help="aggregate trace CSVs into Consistency_p statistics")
    p.add_argument("trace_dir", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--half-range", type=float, default=3.0)

    p = sub.add_parser("train-toy", help="train toy MLP base / personalized models")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path)
    return parser


def _overrides(args):
    return {
        "seeds": args.seed,
        "modes": args.mode,
        "omega_text": args.omega_text,
        "omega_cons": args.omega_cons,
        "steps": args.steps,
    }


def cmd_sample(args):
    config = load_config(args.config, _overrides(args), args.out)
    scenario = build_scenario(config)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = run_modes(config, scenario, config.sampling, out)
    if has_metrics(scenario):
        write_metrics(rows, out / "metrics.csv")
    write_manifest(out, "sample", config.raw)
    print(f"wrote {len(rows)} runs to {out}")
    return EXIT_OK


def cmd_sweep(args):
    if not args.values:
        raise ConfigError("--values must list at least one value")
    config = load_config(args.config, _overrides(args), args.out)
    scenario = build_scenario(config)
    if not has_metrics(scenario):
        raise ConfigError("sweep needs an analytic reference model and references for its metrics")
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in args.values:
        sampling = dict(config.sampling, **{args.axis: value})
        validate_sampling(sampling, source=args.axis)
        for mode, seed, pa, ids in run_modes(config, scenario, sampling, out / axis_dir_name(args.axis, value)):
            rows.append((mode, value, seed, pa, ids))
    write_metrics(rows, out / "metrics.csv", axis=True)
    write_manifest(out, "sweep", config.raw, {"sweep": {"axis": args.axis, "values": list(args.values)}})
    print(f"wrote {len(rows)} runs to {out}")
    return EXIT_OK


def cmd_diagnose(args):
    trace_dir = args.trace_dir
    if not trace_dir.is_dir():
        raise ConfigError(f"trace directory {trace_dir} does not exist")
    paths = sorted(trace_dir.rglob("trace.csv"))
    if not paths:
        raise ConfigError(f"no trace.csv files under {trace_dir}")
    traces = [read_trace_csv(p, half_range=args.half_range) for p in paths]
    try:
        stats = collect_cp_stats(traces)
    except ParameterError as exc:
        raise ConfigError(f"{trace_dir}: {exc}") from exc
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    export_stats_csv(stats, out / "cp_stats.csv")
    for rec in stats.records:
        render_histogram_image(stats, rec.t, out / f"hist_t{rec.t:04d}.ppm")
    print(f"aggregated {len(traces)} traces over {len(stats.records)} steps into {out}")
    return EXIT_OK


def _write_log(losses, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "loss"])
        for i, loss in enumerate(losses, start=1):
            wr.writerow([i, repr(float(loss))])


def cmd_train_toy(args):
    from prguide.grid import LatentGrid, save_grid
    from prguide.models import Condition, MlpDenoiser, finetune_subject, save_model
    from prguide.schedule import make_schedule

    config = load_train_config(args.config, args.out)
    scenario = build_scenario(config)
    raw = config.raw
    gmm = scenario.base
    label, subject = raw["condition"]["label"], raw["condition"]["subject"]
    rng = np.random.default_rng(raw["data"]["seed"])
    labels = np.unique(gmm.labels)
    per_label = np.array_split(np.arange(raw["data"]["n_samples"]), labels.size)
    data, conds = [], []
    for lab, idx in zip(labels, per_label):
        cond = Condition.prompt(int(lab))
        for x in gmm.sample_clean(idx.size, cond, rng):
            data.append(LatentGrid.from_locations(x))
            conds.append(cond)
    tr = raw["training"]
    schedule = make_schedule(tr["schedule_steps"])
    base = MlpDenoiser(
        hidden_layer_sizes=tuple(tr["hidden_layer_sizes"]), activation=tr["activation"],
        prediction=tr["prediction"],
        n_subjects=subject + 1, learning_rate=tr["learning_rate"], n_steps=tr["n_steps"],
        batch_size=tr["batch_size"], p_uncond=tr["p_uncond"], random_state=tr["random_state"],
    ).fit(data, conds, schedule=schedule)
    ft = raw["finetune"]
    theta = finetune_subject(
        base, scenario.references, subject, schedule, label=label, n_steps=ft["n_steps"],
        learning_rate=ft["learning_rate"], batch_size=ft["batch_size"], random_state=ft["random_state"],
    )
    out = config.output_dir
    (out / "references").mkdir(parents=True, exist_ok=True)
    save_model(base, out / "base.prgm")
    save_model(theta, out / "personalized.prgm")
    save_model(gmm, out / "reference_model.prgm")
    for i, ref in enumerate(scenario.references):
        save_grid(ref, out / "references" / f"ref_{i:02d}.lgrd")
    _write_log(base.loss_curve_, out / "train_log.csv")
    _write_log(theta.loss_curve_, out / "finetune_log.csv")
    sample_cfg = {
        "scenario": {
            "kind": "files",
            "base_model": "base.prgm",
            "personalized_model": "personalized.prgm",
            "reference_model": "reference_model.prgm",
            "references": "references",
        },
        "condition": {"label": label, "subject": subject},
        "sampling": {"schedule": "cosine", "steps": tr["schedule_steps"]},
    }
    (out / "sample.yaml").write_text(yaml.safe_dump(sample_cfg, sort_keys=True))
    write_manifest(out, "train-toy", raw)
    print(f"trained base and personalized models into {out}")
    return EXIT_OK


COMMANDS = {
    "sample": cmd_sample,
    "sweep": cmd_sweep,
    "diagnose": cmd_diagnose,
    "train-toy": cmd_train_toy,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FormatError) as exc:
        print(f"prguide {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalDivergenceError, OSError, ValueError) as exc:
        print(f"prguide {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
