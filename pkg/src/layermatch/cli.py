"""Command-line front end: single runs, method/seed matrices, numerical
verification, and report rendering.

Subcommands:

  train   --config FILE [--method M] [--seed S] [--out DIR]
  matrix  --config FILE [--jobs J] [--out DIR]
  verify  --check {chainrule,gradcheck,lemma41,theorem42}
  report  --in DIR --format {text,csv,json}

Config files are flat ``key = value`` lines with ``#`` comments.  Keys
are the TrainConfig field names plus the plan-level keys ``methods``,
``seeds``, ``output_dir`` and ``sweep_<field>``.  Unknown keys are hard
errors.  The environment variable LAYERMATCH_SEED overrides the config
seed; an explicit --seed flag beats both.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data, netcore, theoryverify, trainer
from .trainer import METHODS, TrainConfig

SEED_ENV_VAR = "LAYERMATCH_SEED"

PLAN_KEYS = ("methods", "seeds", "output_dir")


class ConfigError(Exception):
    """Bad key, bad value, or unreadable config file."""


@dataclass
class ExperimentPlan:
    base_config: TrainConfig
    methods: list
    seeds: list
    sweeps: dict = field(default_factory=dict)  # field name -> list of values
    output_dir: str = "runs"


@dataclass
class Cell:
    """One (method, seed, sweep point) of the experiment matrix."""

    config: TrainConfig
    label: str  # method plus sweep assignment, seed excluded
    cell_id: str  # unique per cell, used for file names


def _type_hints():
    return typing.get_type_hints(TrainConfig)


def _coerce(key: str, raw: str, hint):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    if hint is bool:
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key {key}: expected a boolean, got {raw!r}")
    if hint is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key}: expected an integer, got {raw!r}") from None
    if hint is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key}: expected a number, got {raw!r}") from None
    if hint is str:
        return raw
    if hint is tuple or origin is tuple:
        try:
            return tuple(int(v) for v in raw.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"key {key}: expected comma-separated integers") from None
    # optional strings: both typing.Optional and the | form land here
    args = typing.get_args(hint)
    if args and type(None) in args:
        if raw.lower() in ("", "none"):
            return None
        return raw
    raise ConfigError(f"key {key}: unsupported value type {hint}")


def read_kv_file(path) -> dict:
    """Parse flat ``key = value`` lines; # starts a comment."""
    out: dict = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, _, value = body.partition("=")
        key = key.strip()
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key}")
        out[key] = value.strip()
    return out


def _parse_int_list(key: str, raw: str) -> list:
    try:
        return [int(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"key {key}: expected comma-separated integers") from None


def parse_config(path, overrides: dict | None = None) -> ExperimentPlan:
    """Build a fully resolved plan from a config file.

    ``overrides`` maps TrainConfig field names to already-typed values
    (the CLI flags).  Precedence: flag > LAYERMATCH_SEED > file > default.
    """
    raw = read_kv_file(path) if path is not None else {}
    hints = _type_hints()
    cfg_kwargs: dict = {}
    methods: list | None = None
    seeds: list | None = None
    output_dir = "runs"
    sweeps: dict = {}
    for key, value in raw.items():
        if key == "methods":
            methods = [m.strip() for m in value.split(",") if m.strip()]
        elif key == "seeds":
            seeds = _parse_int_list(key, value)
        elif key == "output_dir":
            output_dir = value
        elif key.startswith("sweep_"):
            target = key[len("sweep_") :]
            if target not in hints:
                raise ConfigError(f"unknown key {key} (no config field {target})")
            hint = hints[target]
            sweeps[target] = [_coerce(target, v, hint) for v in value.split(",")]
        elif key in hints:
            cfg_kwargs[key] = _coerce(key, value, hints[key])
        else:
            raise ConfigError(f"unknown key {key}")

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            cfg_kwargs["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}"
            ) from None
    for key, value in (overrides or {}).items():
        if value is not None:
            cfg_kwargs[key] = value

    config = TrainConfig(**cfg_kwargs)
    try:
        config.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if methods is None:
        methods = [config.method]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r} in methods")
    if seeds is None:
        seeds = [config.seed]
    return ExperimentPlan(config, methods, seeds, sweeps, output_dir)


def format_resolved(config: TrainConfig) -> str:
    """Dump every field as config syntax, defaults included."""
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines)


def cells(plan: ExperimentPlan) -> list:
    """Enumerate the matrix: methods, seeds, then sweep points, sorted.

    The order is lexicographic over (method, seed, sweep key, value
    position) so resumption and summaries are stable.
    """
    sweep_keys = sorted(plan.sweeps)
    combos: list = [{}]
    for key in sweep_keys:
        combos = [dict(c, **{key: v}) for c in combos for v in plan.sweeps[key]]
    out = []
    for method in sorted(plan.methods):
        for seed in sorted(plan.seeds):
            for combo in combos:
                cfg = dataclasses.replace(
                    plan.base_config, method=method, seed=seed, **combo
                )
                suffix = "".join(
                    f"__{k}-{combo[k]}" for k in sweep_keys
                )
                label = method + suffix
                out.append(Cell(cfg, label, f"{method}__s{seed}{suffix}"))
    return out


@dataclass
class CellOutcome:
    cell: Cell
    final_acc: float | None
    error: str | None = None
    skipped: bool = False


def _cell_paths(output_dir, cell_id: str):
    base = Path(output_dir)
    return base / f"{cell_id}.metrics.csv", base / f"{cell_id}.ckpt"


def run_cell(cell: Cell, output_dir) -> CellOutcome:
    """Train one cell and write its metrics CSV and final checkpoint.

    A cell whose checkpoint already exists is skipped (resume support);
    its final accuracy is read back from the metrics file.
    """
    metrics_path, ckpt_path = _cell_paths(output_dir, cell.cell_id)
    if ckpt_path.exists() and metrics_path.exists():
        records = trainer.read_metrics_csv(metrics_path)
        acc = records[-1].test_acc if records else None
        return CellOutcome(cell, acc, skipped=True)
    try:
        result = trainer.run(cell.config)
        trainer.write_metrics_csv(result.metrics, metrics_path)
        trainer.save_checkpoint(ckpt_path, result.eval_model())
        acc = result.metrics[-1].test_acc if result.metrics else None
        return CellOutcome(cell, acc)
    except Exception as exc:  # noqa: BLE001 - cell failures must not kill the matrix
        return CellOutcome(cell, None, error=f"{type(exc).__name__}: {exc}")


@dataclass
class SummaryRow:
    label: str
    n_runs: int
    mean_acc: float
    two_sigma: float | None  # None with fewer than two runs


def summarize(outcomes) -> list:
    """Aggregate per-cell final accuracies into mean and 2-sigma by label."""
    by_label: dict[str, list] = {}
    for oc in outcomes:
        if oc.final_acc is not None:
            by_label.setdefault(oc.cell.label, []).append(oc.final_acc)
    rows = []
    for label in sorted(by_label):
        accs = by_label[label]
        mean = float(np.mean(accs))
        spread = 2.0 * float(np.std(accs, ddof=1)) if len(accs) > 1 else None
        rows.append(SummaryRow(label, len(accs), mean, spread))
    return rows


def run_matrix(plan: ExperimentPlan, jobs: int = 1):
    """Execute every cell (optionally a few at a time) and summarize.

    Returns (outcomes, summary rows, ok flag); ok is False when any
    cell errored.  Failed cells are reported, not fatal.
    """
    Path(plan.output_dir).mkdir(parents=True, exist_ok=True)
    all_cells = cells(plan)
    if jobs <= 1:
        outcomes = [run_cell(c, plan.output_dir) for c in all_cells]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(
                pool.map(lambda c: run_cell(c, plan.output_dir), all_cells)
            )
    ok = all(oc.error is None for oc in outcomes)
    return outcomes, summarize(outcomes), ok


def _fmt_pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def render_summary(rows, fmt: str) -> str:
    """Render summary rows as text, csv, or json (same numbers in each)."""
    if fmt == "text":
        width = max([len(r.label) for r in rows], default=5)
        lines = [f"{'label'.ljust(width)}  n  accuracy"]
        for r in rows:
            spread = "" if r.two_sigma is None else f" ± {_fmt_pct(r.two_sigma)}"
            lines.append(f"{r.label.ljust(width)}  {r.n_runs}  {_fmt_pct(r.mean_acc)}{spread}")
        return "\n".join(lines) + "\n"
    if fmt == "csv":
        lines = ["label,n_runs,mean_acc_pct,two_sigma_pct"]
        for r in rows:
            spread = "" if r.two_sigma is None else _fmt_pct(r.two_sigma)
            lines.append(f"{r.label},{r.n_runs},{_fmt_pct(r.mean_acc)},{spread}")
        return "\n".join(lines) + "\n"
    if fmt == "json":
        payload = [
            {
                "label": r.label,
                "n_runs": r.n_runs,
                "mean_acc_pct": float(_fmt_pct(r.mean_acc)),
                "two_sigma_pct": None if r.two_sigma is None else float(_fmt_pct(r.two_sigma)),
            }
            for r in rows
        ]
        return json.dumps(payload, indent=2) + "\n"
    raise ValueError(f"unknown report format {fmt!r}")


def summarize_directory(run_dir) -> list:
    """Rebuild a summary from the metrics files a matrix left behind."""
    run_dir = Path(run_dir)
    outcomes = []
    for metrics_path in sorted(run_dir.glob("*.metrics.csv")):
        cell_id = metrics_path.name[: -len(".metrics.csv")]
        parts = cell_id.split("__")
        label = parts[0] + "".join(f"__{p}" for p in parts[2:])
        records = trainer.read_metrics_csv(metrics_path)
        if not records:
            continue
        cell = Cell(TrainConfig(), label, cell_id)
        outcomes.append(CellOutcome(cell, records[-1].test_acc))
    if not outcomes:
        raise ValueError(f"no metrics files under {run_dir}")
    return summarize(outcomes)


# ---------------------------------------------------------------------------
# verify checks


def _check_chainrule(args) -> list:
    rng = np.random.default_rng(args.seed)
    rows = []
    for arch, act in ((([2, 6, 5]), "tanh"), (([3, 4, 4, 3]), "relu")):
        fe = netcore.init_feature_extractor(arch, act, rng)
        beta = rng.normal(size=fe.feature_dim)
        model = theoryverify.BinaryHeadModel(fe, beta, float(rng.normal()))
        x = rng.normal(size=(100, arch[0]))
        dev = theoryverify.chain_rule_identity_check(model, x)
        rows.append(
            theoryverify.CheckRow(
                "chainrule", f"max_dev_{act}_{len(arch) - 1}layer", dev, 1e-10, dev < 1e-10
            )
        )
    return rows


def _sigmoid_line_model() -> theoryverify.BinaryHeadModel:
    """P(x) = sigmoid(x): identity extractor, unit weight."""
    fe = netcore.FeatureExtractorParams(
        [np.array([[1.0]])], [np.zeros((1, 1))], ["identity"]
    )
    return theoryverify.BinaryHeadModel(fe, np.array([1.0]), 0.0)


def _check_lemma41(args) -> list:
    model = _sigmoid_line_model()
    grid = theoryverify.GridSpec((-5.0,), (5.0,))
    rows_out = []
    conv = theoryverify.integral_convergence(model, grid, [0.1, 0.05, 0.01])
    exact = float(1.0 / (1.0 + math.exp(-5.0)) - 1.0 / (1.0 + math.exp(5.0)))
    rows_out.append(
        theoryverify.CheckRow(
            "lemma41",
            "reference_integral_vs_exact",
            abs(conv[0].integral_estimate - exact),
            1e-6,
            abs(conv[0].integral_estimate - exact) < 1e-6,
        )
    )
    for row in conv:
        rows_out.append(
            theoryverify.CheckRow("lemma41", f"gap_h={row.h:g}", row.gap, None, None)
        )
    finest = min(conv, key=lambda r: r.h)
    rows_out.append(
        theoryverify.CheckRow(
            "lemma41", "gap_at_finest_h", finest.gap, 1e-3, finest.gap < 1e-3
        )
    )
    g1 = next(r for r in conv if abs(r.h - 0.1) < 1e-12).gap
    g2 = next(r for r in conv if abs(r.h - 0.05) < 1e-12).gap
    ratio = g1 / g2 if g2 > 0 else float("inf")
    rows_out.append(
        theoryverify.CheckRow(
            "lemma41", "halving_ratio_0.1_to_0.05", ratio, None, 1.4 <= ratio <= 2.6
        )
    )
    return rows_out


def _check_theorem42(args) -> list:
    if args.config:
        plan = parse_config(args.config)
        config = plan.base_config
    else:
        config = TrainConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    result = trainer.run(config)
    bundle_probe = trainer.prepare_data(config).test
    probe = data.stack_features(bundle_probe)
    fractions, smoothed, ok = theoryverify.flatness_trend(
        result.snapshots, probe, args.epsilon
    )
    rows = [
        theoryverify.CheckRow(
            "theorem42", f"fraction_iter_{it}", frac, None, None
        )
        for it, frac in fractions
    ]
    rows.append(
        theoryverify.CheckRow(
            "theorem42", "smoothed_first", smoothed[0], None, None
        )
    )
    rows.append(
        theoryverify.CheckRow(
            "theorem42",
            "smoothed_last_minus_first",
            smoothed[-1] - smoothed[0],
            0.0,
            ok,
        )
    )
    return rows


def _check_gradcheck(args) -> list:
    report = theoryverify.gradcheck_suite(seed=args.seed or 0)
    return [
        theoryverify.CheckRow(
            "gradcheck", f"{s.name}_worst_rel_err", s.worst_rel_err, report.tolerance, s.passed
        )
        for s in report.surfaces
    ]


CHECKS = {
    "chainrule": _check_chainrule,
    "lemma41": _check_lemma41,
    "theorem42": _check_theorem42,
    "gradcheck": _check_gradcheck,
}


# ---------------------------------------------------------------------------
# entry points


def _cmd_train(args) -> int:
    overrides = {"method": args.method, "seed": args.seed}
    plan = parse_config(args.config, overrides)
    config = plan.base_config
    out_dir = Path(args.out or plan.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(format_resolved(config))
    result = trainer.run(config)
    cell_id = f"{config.method}__s{config.seed}"
    metrics_path, ckpt_path = _cell_paths(out_dir, cell_id)
    trainer.write_metrics_csv(result.metrics, metrics_path)
    trainer.save_checkpoint(ckpt_path, result.eval_model())
    if result.metrics:
        last = result.metrics[-1]
        print(f"final test_acc {last.test_acc:.4f}  gamma {last.gamma:.4f}")
    print(f"wrote {metrics_path} and {ckpt_path}")
    return 0


def _cmd_matrix(args) -> int:
    plan = parse_config(args.config)
    if args.out:
        plan.output_dir = args.out
    print(format_resolved(plan.base_config))
    print(f"methods = {','.join(plan.methods)}")
    print(f"seeds = {','.join(str(s) for s in plan.seeds)}")
    outcomes, summary, ok = run_matrix(plan, jobs=args.jobs)
    for oc in outcomes:
        if oc.error:
            print(f"FAILED {oc.cell.cell_id}: {oc.error}", file=sys.stderr)
        elif oc.skipped:
            print(f"skipped {oc.cell.cell_id} (checkpoint present)")
    sys.stdout.write(render_summary(summary, "text"))
    summary_path = Path(plan.output_dir) / "summary.csv"
    summary_path.write_text(render_summary(summary, "csv"))
    print(f"wrote {summary_path}")
    return 0 if ok else 1


def _cmd_verify(args) -> int:
    rows = CHECKS[args.check](args)
    sys.stdout.write(theoryverify.render_text(rows))
    if args.out:
        Path(args.out).write_text(theoryverify.render_csv(rows))
        print(f"wrote {args.out}")
    failed = [r for r in rows if r.passed is False]
    return 1 if failed else 0


def _cmd_report(args) -> int:
    summary = summarize_directory(args.in_dir)
    sys.stdout.write(render_summary(summary, args.format))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="layermatch",
        description="Train and audit pseudo-label learners on small synthetic datasets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run one training configuration")
    p_train.add_argument("--config", required=True, help="path to a key=value config")
    p_train.add_argument("--method", choices=METHODS, help="override the config method")
    p_train.add_argument("--seed", type=int, help="override the config seed")
    p_train.add_argument("--out", help="output directory (default from config)")
    p_train.set_defaults(fn=_cmd_train)

    p_matrix = sub.add_parser("matrix", help="run a method x seed x sweep matrix")
    p_matrix.add_argument("--config", required=True)
    p_matrix.add_argument("--jobs", type=int, default=1, help="concurrent cells")
    p_matrix.add_argument("--out", help="override the config output_dir")
    p_matrix.set_defaults(fn=_cmd_matrix)

    p_verify = sub.add_parser("verify", help="run a numerical check")
    p_verify.add_argument("--check", required=True, choices=sorted(CHECKS))
    p_verify.add_argument("--config", help="training config for trace-based checks")
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.add_argument("--epsilon", type=float, default=0.05,
                          help="flatness bound for the trend check")
    p_verify.add_argument("--out", help="also write the report CSV here")
    p_verify.set_defaults(fn=_cmd_verify)

    p_report = sub.add_parser("report", help="summarize a matrix output directory")
    p_report.add_argument("--in", dest="in_dir", required=True)
    p_report.add_argument("--format", default="text", choices=("text", "csv", "json"))
    p_report.set_defaults(fn=_cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
