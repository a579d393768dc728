"""CSV emitters, plain-text tables and a small latency harness."""

from __future__ import annotations

import csv
import io
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import quant
from .errors import IoFailure
from .stats import DepthProfile
from .tensor import ActivationTensor

METHOD_HEADER = ("method", "accuracy", "delta_vs_ref")
OUTLIER_HEADER = ("layer", "mean_variance", "kurtosis", "top1_energy")
MICROBENCH_HEADER = ("op", "p50_ns", "p95_ns", "iterations")
PROPAGATION_HEADER = (
    "layer",
    "quantized_error_mean",
    "quantized_error_var",
    "quantized_branch_var",
    "injected_error_var",
    "injected_branch_var",
    "kurtosis",
    "top1_energy",
)


def fmt(value: Optional[float]) -> str:
    """Six-decimal fixed notation; None becomes an empty field."""
    if value is None:
        return ""
    s = f"{value:.6f}"
    return "0.000000" if s == "-0.000000" else s


def write_atomic(path, text: str) -> None:
    """Replace ``path`` with ``text`` via a temporary file in the same directory."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    except OSError as exc:
        raise IoFailure(f"cannot write {str(path)!r}: {exc}") from exc
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise IoFailure(f"cannot write {str(path)!r}: {exc}") from exc


def csv_text(header: Sequence[str], rows: Iterable[Sequence[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


@dataclass(frozen=True)
class MethodMetricsRow:
    method: str
    accuracy: float
    delta_vs_ref: float


def method_rows(accuracies: dict, reference: str = "fp32") -> list[MethodMetricsRow]:
    """Rows in dict order with deltas against ``accuracies[reference]``."""
    if reference not in accuracies:
        raise ValueError(f"reference method {reference!r} missing")
    ref = accuracies[reference]
    return [MethodMetricsRow(m, a, a - ref) for m, a in accuracies.items()]


def emit_method_metrics(rows: Sequence[MethodMetricsRow], path, reference: str = "fp32") -> None:
    if not any(r.method == reference for r in rows):
        raise ValueError(f"reference row {reference!r} missing")
    body = [(r.method, fmt(r.accuracy), fmt(r.delta_vs_ref)) for r in rows]
    write_atomic(path, csv_text(METHOD_HEADER, body))


@dataclass(frozen=True)
class OutlierStatsRow:
    layer: str
    mean_variance: Optional[float]
    kurtosis: Optional[float]
    top1_energy: Optional[float]


def outlier_rows(profile: DepthProfile) -> list[OutlierStatsRow]:
    return [
        OutlierStatsRow(label, s.mean_variance, s.kurtosis, s.top1_energy)
        for label, s in profile
    ]


def emit_outlier_stats(profile: DepthProfile, path) -> None:
    body = [
        (r.layer, fmt(r.mean_variance), fmt(r.kurtosis), fmt(r.top1_energy))
        for r in outlier_rows(profile)
    ]
    write_atomic(path, csv_text(OUTLIER_HEADER, body))


def emit_propagation(quantized, injected, path) -> None:
    """Per-layer error growth of a quantized and an injected-noise run."""
    body = []
    for l in range(quantized.depth):
        stats = quantized.clean_stats[l] if quantized.clean_stats else None
        body.append(
            (
                str(l),
                fmt(quantized.error_mean[l]),
                fmt(quantized.error_var[l]),
                fmt(quantized.branch_error_var[l]),
                fmt(injected.error_var[l]),
                fmt(injected.branch_error_var[l]),
                fmt(stats.kurtosis if stats else None),
                fmt(stats.top1_energy if stats else None),
            )
        )
    write_atomic(path, csv_text(PROPAGATION_HEADER, body))


@dataclass(frozen=True)
class MicrobenchRow:
    op: str
    p50_ns: float
    p95_ns: float
    iterations: int

    def __post_init__(self):
        if self.iterations < 100:
            raise ValueError("a microbench row needs >= 100 iterations")
        if self.p50_ns > self.p95_ns:
            raise ValueError("p50 exceeds p95")


def emit_microbench(rows: Sequence[MicrobenchRow], path) -> None:
    body = [(r.op, fmt(r.p50_ns), fmt(r.p95_ns), str(r.iterations)) for r in rows]
    write_atomic(path, csv_text(MICROBENCH_HEADER, body))


def benchmark_ops(t: ActivationTensor, bits: int = 8) -> dict:
    """Named zero-argument callables over ``t`` for the latency harness."""
    params = quant.scale_minmax(t, bits)
    return {
        "scale_minmax": lambda: quant.scale_minmax(t, bits),
        "scale_percentile_99.9": lambda: quant.scale_percentile(t, 99.9, bits),
        "quantize_affine": lambda: quant.quantize_affine(t, params),
        "fake_quant": lambda: quant.fake_quant(t, params),
        "peg_fake_quant_k4": lambda: quant.peg_fake_quant(t, 4, bits),
        "resolution_factor": lambda: quant.resolution_factor(t),
    }


def time_callable(fn: Callable[[], object], iterations: int, warmup: int) -> np.ndarray:
    """Per-call wall time in nanoseconds; warmup calls are not recorded."""
    for _ in range(warmup):
        fn()
    out = np.empty(iterations, dtype=np.int64)
    for i in range(iterations):
        start = time.perf_counter_ns()
        fn()
        out[i] = time.perf_counter_ns() - start
    return out


def run_microbench(
    ops: Optional[Sequence[str]] = None,
    iterations: int = 500,
    warmup: int = 100,
    rows: int = 256,
    cols: int = 768,
    bits: int = 8,
    seed: int = 0,
) -> list[MicrobenchRow]:
    """p50/p95 latency of quantization ops on a fixed Gaussian ``rows x cols`` tensor."""
    if iterations < 100:
        raise ValueError(f"iterations must be >= 100, got {iterations}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    t = ActivationTensor(np.random.default_rng(seed).standard_normal((rows, cols)))
    table = benchmark_ops(t, bits)
    names = list(table) if ops is None else list(ops)
    unknown = [n for n in names if n not in table]
    if unknown:
        raise ValueError(f"unknown ops {unknown}; choose from {sorted(table)}")
    result = []
    for name in names:
        ns = np.sort(time_callable(table[name], iterations, warmup))
        p50, p95 = np.percentile(ns, [50, 95])
        result.append(MicrobenchRow(name, float(p50), float(p95), iterations))
    return result


def render_table(header: Sequence[str], rows: Iterable[Sequence[object]]) -> str:
    """Left-aligned plain-text table."""
    cells = [[str(h) for h in header]] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)
