"""Command-line entry point: ``quantlab {stats,simulate,experiment,microbench,run-all}``.

Exit codes: 0 success, 1 usage or configuration error, 2 I/O failure,
3 malformed tensor dump, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import report
from .errors import (
    InsufficientRows,
    IoFailure,
    MalformedHeader,
    NonFiniteValue,
    PolicyLengthMismatch,
    ShapeMismatch,
    SingularProbe,
)
from .quant import PrecisionPolicy
from .simulator import (
    ResidualStackConfig,
    collapse_experiment,
    dominant_signal_config,
    propagate_errors,
    reference_config,
    stack_layers,
    standard_methods,
)
from .stats import depth_profile, thread_limit
from .tensor import load_dump

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MALFORMED, EXIT_INVARIANT = 0, 1, 2, 3, 4
RATIO_TOLERANCE = (0.9, 1.1)

METHOD_METRICS = "method_metrics.csv"
OUTLIER_STATS = "outlier_stats.csv"
MICROBENCH = "microbench.csv"
PROPAGATION = "propagation.csv"


class UsageError(Exception):
    pass


class InvariantViolation(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 1000
    bits: int = 8
    percentiles: tuple = (99.0, 99.5, 99.9, 99.99)
    k_grid: tuple = (2, 3, 4)
    # field overrides for the depth-trend / propagation stack
    stack: dict = field(default_factory=dict)
    # field overrides for the collapse-experiment stack
    collapse_stack: dict = field(default_factory=dict)
    # one directive for every layer, or a list with one per layer
    policy: object = "minmax"
    injected_variance: Optional[float] = None
    dumps: tuple = ()
    out: str = "results"
    microbench_iterations: int = 500
    microbench_warmup: int = 100
    # rows taken from each dump are stats_samples * stats_seq_len when the
    # sequence length is given; otherwise dumps are used whole
    stats_samples: int = 64
    stats_seq_len: Optional[int] = None

    def validate(self) -> None:
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise UsageError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        if isinstance(self.bits, bool) or not isinstance(self.bits, int) or not 2 <= self.bits <= 16:
            raise UsageError(f"bits must be an integer in [2, 16], got {self.bits!r}")
        if not self.percentiles or any(not 0 < float(p) <= 100 for p in self.percentiles):
            raise UsageError("percentiles must be a non-empty list of values in (0, 100]")
        if not self.k_grid or any(isinstance(k, bool) or int(k) != k or k < 1 for k in self.k_grid):
            raise UsageError("k_grid must be a non-empty list of positive integers")
        if self.microbench_iterations < 100 or self.microbench_warmup < 1:
            raise UsageError("microbench needs >= 100 iterations and >= 1 warmup")
        if self.stats_samples < 1 or (self.stats_seq_len is not None and self.stats_seq_len < 1):
            raise UsageError("stats_samples and stats_seq_len must be positive")
        for name in ("stack", "collapse_stack"):
            overrides = getattr(self, name)
            if not isinstance(overrides, dict):
                raise UsageError(f"{name} must be an object of field overrides")
            if "seed" in overrides:
                raise UsageError(f"set the seed at top level, not inside {name}")
            unknown = set(overrides) - _STACK_FIELDS
            if unknown:
                raise UsageError(f"unknown {name} fields: {sorted(unknown)}")

    def stack_config(self) -> ResidualStackConfig:
        return _build_stack(reference_config, self.stack, self.seed)

    def collapse_config(self) -> ResidualStackConfig:
        return _build_stack(dominant_signal_config, self.collapse_stack, self.seed)

    def precision_policy(self, depth: int) -> PrecisionPolicy:
        try:
            if isinstance(self.policy, str):
                policy = PrecisionPolicy.uniform(self.policy, depth)
            else:
                policy = PrecisionPolicy(tuple(self.policy))
            policy.check_depth(depth)
        except (ValueError, TypeError) as exc:
            raise UsageError(f"invalid policy: {exc}") from exc
        return policy


_STACK_FIELDS = {f.name for f in dataclasses.fields(ResidualStackConfig)} | {"n_dominant"}
_CONFIG_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}


def _build_stack(factory, overrides: dict, seed: int) -> ResidualStackConfig:
    kw = dict(overrides)
    if "dominant" in kw:
        kw["dominant"] = tuple(kw["dominant"])
    try:
        return factory(seed=seed, **kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid stack configuration: {exc}") from exc


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read config {path!r}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    unknown = set(doc) - _CONFIG_FIELDS
    if unknown:
        raise UsageError(f"unknown config fields: {sorted(unknown)}")
    for key in ("percentiles", "k_grid", "dumps"):
        if key in doc:
            if not isinstance(doc[key], list):
                raise UsageError(f"{key} must be a list")
            doc[key] = tuple(doc[key])
    if doc.get("dumps"):
        # relative dump paths are taken relative to the config file
        base = Path(path).parent
        doc["dumps"] = tuple(str(base / p) for p in doc["dumps"])
    return RunConfig(**doc)


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON run configuration")
    common.add_argument("--seed", type=_u64, help="random seed (default 1000)")
    common.add_argument("--out", help="output directory (default results)")
    common.add_argument("--bits", type=int, help="bit width (default 8)")
    common.add_argument("--dumps", nargs="+", metavar="PATH", help="QLT1 activation dumps, in layer order")

    parser = _Parser(prog="quantlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("stats", parents=[common], help="outlier statistics of activation dumps")
    sub.add_parser("simulate", parents=[common], help="error propagation through the synthetic stack")
    sub.add_parser("experiment", parents=[common], help="calibration-method collapse experiment")
    sub.add_parser("microbench", parents=[common], help="latency of quantization ops")
    sub.add_parser("run-all", parents=[common], help="every stage, writing all CSVs")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config)
    for name in ("seed", "out", "bits"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg, name, value)
    if args.dumps:
        cfg.dumps = tuple(args.dumps)
    try:
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return cfg


def prepare_out_dir(out: str) -> Path:
    """Create ``out`` and prove it is writable before any work starts."""
    path = Path(out)
    try:
        path.mkdir(parents=True, exist_ok=True)
        with tempfile.TemporaryFile(dir=path):
            pass
    except OSError as exc:
        raise IoFailure(f"output directory {out!r} is not writable: {exc}") from exc
    return path


def _print_profile(profile) -> None:
    rows = [
        (label, report.fmt(s.mean_variance), report.fmt(s.kurtosis), report.fmt(s.top1_energy))
        for label, s in profile
    ]
    print(report.render_table(report.OUTLIER_HEADER, rows))


def _dump_labels(paths: Sequence[str]) -> list[str]:
    labels = [Path(p).stem for p in paths]
    if len(set(labels)) != len(labels):
        raise UsageError("dump file names must be unique; they become layer labels")
    return labels


def cmd_stats(cfg: RunConfig) -> int:
    if not cfg.dumps:
        raise UsageError("stats needs at least one dump (--dumps or config 'dumps')")
    labels = _dump_labels(cfg.dumps)
    out = prepare_out_dir(cfg.out)
    limit = None if cfg.stats_seq_len is None else cfg.stats_samples * cfg.stats_seq_len
    layers = []
    for label, path in zip(labels, cfg.dumps):
        t = load_dump(path)
        layers.append((label, t if limit is None else t.head(limit)))
    profile = depth_profile(layers, max_workers=thread_limit())
    report.emit_outlier_stats(profile, out / OUTLIER_STATS)
    _print_profile(profile)
    return EXIT_OK


def synthetic_profile(cfg: RunConfig):
    return depth_profile(stack_layers(cfg.stack_config()), max_workers=thread_limit())


def cmd_simulate(cfg: RunConfig) -> int:
    stack = cfg.stack_config()
    policy = cfg.precision_policy(stack.depth)
    out = prepare_out_dir(cfg.out)
    quantized = propagate_errors(stack, policy, cfg.bits, mode="quantized")
    injected = propagate_errors(
        stack, policy, cfg.bits, mode="injected",
        injected_variance=cfg.injected_variance, collect_stats=False,
    )
    report.emit_propagation(quantized, injected, out / PROPAGATION)

    rows = [
        (l, report.fmt(quantized.error_var[l]), report.fmt(injected.error_var[l]),
         report.fmt(sum(injected.branch_error_var[: l + 1])))
        for l in range(stack.depth)
    ]
    print(report.render_table(("layer", "quantized_var", "injected_var", "injected_sum_branch_var"), rows))
    q_ratio, i_ratio = quantized.variance_ratio, injected.variance_ratio
    print(f"quantized mode: Var[eps_L] / sum Var[e_l] = {_ratio_text(q_ratio)} (mean eps_L {quantized.final_mean:.3e})")
    print(f"injected mode:  Var[eps_L] / sum Var[e_l] = {_ratio_text(i_ratio)}")
    lo, hi = RATIO_TOLERANCE
    if i_ratio is None:
        print("variance check: skipped (policy retains every layer)")
        return EXIT_OK
    if not lo <= i_ratio <= hi:
        print(f"variance check: FAIL, ratio outside [{lo}, {hi}]", file=sys.stderr)
        return EXIT_INVARIANT
    print(f"variance check: ok, within [{lo}, {hi}]")
    return EXIT_OK


def _ratio_text(r: Optional[float]) -> str:
    return "n/a" if r is None else f"{r:.4f}"


def ordering_checks(acc: dict, percentiles=(99.0,), k_grid=(2, 4)) -> list[tuple[str, bool]]:
    """Expected ordering of calibration methods, for whichever labels are present."""
    checks = []
    fp32 = acc.get("fp32")
    if fp32 is None:
        return checks
    hi_k = f"peg_k{max(k_grid)}"
    lo_k = f"peg_k{min(k_grid)}"
    low_p = f"percentile_{min(percentiles):g}"
    if "mixed" in acc:
        checks.append(("mixed == fp32", acc["mixed"] == fp32))
        if hi_k in acc:
            checks.append((f"mixed >= {hi_k}", acc["mixed"] >= acc[hi_k]))
    if hi_k in acc:
        checks.append((f"{hi_k} >= 0.95 * fp32", acc[hi_k] >= 0.95 * fp32))
        if lo_k in acc and lo_k != hi_k:
            checks.append((f"{hi_k} > {lo_k}", acc[hi_k] > acc[lo_k]))
    if "minmax" in acc:
        checks.append(("minmax <= 0.6 * fp32", acc["minmax"] <= 0.6 * fp32))
        if low_p in acc:
            checks.append((f"{low_p} <= minmax + 0.02", acc[low_p] <= acc["minmax"] + 0.02))
    pct = [v for k, v in acc.items() if k.startswith("percentile_")]
    if len(pct) > 1:
        checks.append(("percentile spread <= 0.05", max(pct) - min(pct) <= 0.05))
    return checks


def cmd_experiment(cfg: RunConfig) -> int:
    stack = cfg.collapse_config()
    out = prepare_out_dir(cfg.out)
    methods = standard_methods(stack.depth, cfg.percentiles, cfg.k_grid)
    result = collapse_experiment(stack, methods, cfg.bits)
    rows = report.method_rows(result.accuracies)
    report.emit_method_metrics(rows, out / METHOD_METRICS)
    print(report.render_table(
        report.METHOD_HEADER, [(r.method, report.fmt(r.accuracy), report.fmt(r.delta_vs_ref)) for r in rows]
    ))
    checks = ordering_checks(result.accuracies, cfg.percentiles, cfg.k_grid)
    for name, ok in checks:
        print(f"  [{'ok' if ok else 'FAIL'}] {name}")
    verdict = "holds" if checks and all(ok for _, ok in checks) else "does not hold"
    print(f"method ordering verdict: {verdict}")
    return EXIT_OK


def cmd_microbench(cfg: RunConfig) -> int:
    out = prepare_out_dir(cfg.out)
    rows = report.run_microbench(
        iterations=cfg.microbench_iterations, warmup=cfg.microbench_warmup, bits=cfg.bits
    )
    report.emit_microbench(rows, out / MICROBENCH)
    print(report.render_table(
        report.MICROBENCH_HEADER,
        [(r.op, f"{r.p50_ns:.0f}", f"{r.p95_ns:.0f}", r.iterations) for r in rows],
    ))
    return EXIT_OK


def cmd_run_all(cfg: RunConfig) -> int:
    prepare_out_dir(cfg.out)
    # fail on configuration problems before any stage runs
    cfg.precision_policy(cfg.stack_config().depth)
    cfg.collapse_config()
    if cfg.dumps:
        _dump_labels(cfg.dumps)

    def outlier_stage():
        if cfg.dumps:
            return cmd_stats(cfg)
        profile = synthetic_profile(cfg)
        report.emit_outlier_stats(profile, Path(cfg.out) / OUTLIER_STATS)
        _print_profile(profile)
        return EXIT_OK

    stages = [
        ("outlier statistics", outlier_stage),
        ("error propagation", lambda: cmd_simulate(cfg)),
        ("percentile / PEG sweep and collapse experiment", lambda: cmd_experiment(cfg)),
        ("microbenchmark", lambda: cmd_microbench(cfg)),
    ]
    for name, stage in stages:
        print(f"== {name}")
        start = time.perf_counter()
        code = _guarded(stage)
        print(f"   ({time.perf_counter() - start:.1f} s)")
        if code != EXIT_OK:
            return code
    return EXIT_OK


COMMANDS = {
    "stats": cmd_stats,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
    "microbench": cmd_microbench,
    "run-all": cmd_run_all,
}


def _guarded(fn) -> int:
    """Run ``fn`` and translate failures into exit codes."""
    try:
        return fn()
    except UsageError as exc:
        print(f"quantlab: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MalformedHeader, ShapeMismatch, NonFiniteValue) as exc:
        print(f"quantlab: malformed dump: {exc}", file=sys.stderr)
        return EXIT_MALFORMED
    except (IoFailure, OSError) as exc:
        print(f"quantlab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SingularProbe, InvariantViolation, InsufficientRows) as exc:
        print(f"quantlab: invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except PolicyLengthMismatch as exc:
        print(f"quantlab: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()

    def run() -> int:
        args = parser.parse_args(argv)
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)

    return _guarded(run)


if __name__ == "__main__":
    raise SystemExit(main())
