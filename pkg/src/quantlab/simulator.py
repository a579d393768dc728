"""Synthetic residual stack with heavy-tailed, channel-dominant activations.

The stack follows ``h[l+1] = h[l] + f_l(h[l])`` where ``f_l`` is linear:

* bulk channels are rotated by a fixed random orthogonal matrix and scaled
  by ``residual_scale``;
* dominant channels are multiplied by ``dominance_gain - 1``, so after ``l``
  layers they are exactly ``dominance_gain**l`` times their initial value.

Embedding rows carry a shared Pareto-distributed scale ``tau`` (tail index
``tail_index``). Rotation keeps the per-row scale, so the heavy tail
survives every layer. An optional "massive" tier of dominant channels sits
at a large constant offset, which is what breaks a single global scale.

RNG streams are keyed by ``SeedSequence([seed, stream, ...])``:
0 embedding, 1 per-layer mixer, 2 label noise, 3 per-layer injected errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import SingularProbe
from .quant import (
    Directive,
    PrecisionPolicy,
    QuantizeMinMax,
    QuantizePEG,
    QuantizePercentile,
    Retain,
    apply_directive_array,
    directive_scales,
)
from .stats import layer_stats
from .tensor import ActivationTensor

_EMBED, _MIXER, _LABEL, _INJECT = 0, 1, 2, 3
RIDGE = 1e-6


def spread_channels(width: int, count: int) -> tuple:
    """``count`` channel indices spaced evenly over ``[0, width)``."""
    if not 0 <= count <= width:
        raise ValueError(f"cannot pick {count} channels out of {width}")
    return tuple(int(i) for i in (np.arange(count) * width) // max(count, 1))


@dataclass(frozen=True)
class ResidualStackConfig:
    depth: int = 12
    width: int = 768
    dominant: tuple = field(default_factory=lambda: spread_channels(768, 8))
    dominance_gain: float = 1.35
    tail_index: float = 3.0
    base_std: float = 1.0
    seed: int = 1000
    samples: int = 4096
    # initial std of dominant channels relative to base_std
    dominant_scale: float = 2.0
    # correlation of dominant channels through a shared per-row factor
    dominant_corr: float = 0.9
    residual_scale: float = 0.3
    # the first `massive` dominant channels get a constant offset
    massive: int = 0
    massive_ratio: float = 1.0
    massive_offset: float = 0.0
    # collapse-experiment label construction
    label_noise: float = 0.3
    massive_weight: float = 0.15

    def __post_init__(self):
        dom = tuple(int(i) for i in self.dominant)
        object.__setattr__(self, "dominant", dom)
        if self.depth < 1 or self.width < 1 or self.samples < 1:
            raise ValueError("depth, width and samples must be >= 1")
        if len(set(dom)) != len(dom) or any(not 0 <= i < self.width for i in dom):
            raise ValueError("dominant channels must be distinct indices in [0, width)")
        if len(dom) >= self.width:
            raise ValueError("at least one bulk channel is required")
        if self.dominance_gain < 1.0:
            raise ValueError("dominance_gain must be >= 1")
        for name in ("tail_index", "base_std", "dominant_scale", "residual_scale", "massive_ratio"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dominant_corr <= 1.0:
            raise ValueError("dominant_corr must lie in [0, 1]")
        if not 0 <= self.massive <= len(dom):
            raise ValueError("massive must not exceed the number of dominant channels")
        if self.massive_offset < 0 or self.label_noise < 0 or self.massive_weight < 0:
            raise ValueError("massive_offset, label_noise and massive_weight must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def bulk(self) -> np.ndarray:
        mask = np.ones(self.width, dtype=bool)
        mask[list(self.dominant)] = False
        return np.flatnonzero(mask)

    def with_overrides(self, **kw) -> "ResidualStackConfig":
        """Copy with fields replaced. Changing ``width`` alone re-spreads the dominant set."""
        if "width" in kw and "dominant" not in kw:
            kw["dominant"] = spread_channels(kw["width"], len(self.dominant))
        if "n_dominant" in kw:
            n = kw.pop("n_dominant")
            kw["dominant"] = spread_channels(kw.get("width", self.width), n)
        return replace(self, **kw)


def reference_config(**overrides) -> ResidualStackConfig:
    """Default stack for depth-trend studies: 12 layers, 768 channels, 8 dominant."""
    return ResidualStackConfig().with_overrides(**overrides)


def dominant_signal_config(**overrides) -> ResidualStackConfig:
    """Stack used by the collapse experiment.

    Two of the eight dominant channels are massive (about 100x the bulk
    std); the label mostly depends on the other six.
    """
    base = ResidualStackConfig(
        width=256,
        dominant=spread_channels(256, 8),
        samples=8192,
        dominance_gain=2.0,
        dominant_corr=0.95,
        massive=2,
        massive_ratio=50.0,
        massive_offset=50.0,
    )
    return base.with_overrides(**overrides)


def _rng(cfg: ResidualStackConfig, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, *key]))


def pareto_row_scale(rng: np.random.Generator, n: int, alpha: float) -> np.ndarray:
    """Per-row scale with a Pareto(alpha) tail, by inverse CDF ``(1-U)**(-1/alpha)``.

    Normalised to unit mean square when ``alpha > 2``; ``alpha = inf``
    returns ones (Gaussian rows).
    """
    if math.isinf(alpha):
        return np.ones((n, 1))
    u = rng.random((n, 1))
    tau = (1.0 - u) ** (-1.0 / alpha)
    if alpha > 2:
        tau /= math.sqrt(alpha / (alpha - 2))
    return tau


def embed(cfg: ResidualStackConfig) -> np.ndarray:
    """Initial residual-stream activations ``h[0]`` (float64, samples x width)."""
    rng = _rng(cfg, _EMBED)
    n, dom, bulk = cfg.samples, list(cfg.dominant), cfg.bulk
    tau = pareto_row_scale(rng, n, cfg.tail_index)
    h = np.empty((n, cfg.width))
    h[:, bulk] = cfg.base_std * tau * rng.standard_normal((n, bulk.size))
    if dom:
        rho = cfg.dominant_corr
        shared = rng.standard_normal((n, 1))
        own = rng.standard_normal((n, len(dom)))
        amp = cfg.dominant_scale * cfg.base_std
        h[:, dom] = amp * tau * (math.sqrt(rho) * shared + math.sqrt(1.0 - rho) * own)
        if cfg.massive:
            m = dom[: cfg.massive]
            h[:, m] = amp * cfg.massive_ratio * (
                cfg.massive_offset + rng.standard_normal((n, cfg.massive))
            )
    return h


@lru_cache(maxsize=64)
def _mixer(seed: int, layer: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _MIXER, layer]))
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    q *= np.sign(np.diag(r))
    q.setflags(write=False)
    return q


def branch(cfg: ResidualStackConfig, layer: int, h: np.ndarray) -> np.ndarray:
    """Residual branch output ``f_l(h)``."""
    bulk, dom = cfg.bulk, list(cfg.dominant)
    f = np.empty_like(h)
    f[:, bulk] = cfg.residual_scale * (h[:, bulk] @ _mixer(cfg.seed, layer, bulk.size))
    if dom:
        f[:, dom] = (cfg.dominance_gain - 1.0) * h[:, dom]
    return f


def iterate_stack(cfg: ResidualStackConfig) -> Iterator[tuple]:
    """Yield ``(l, h_l, f_l(h_l))`` for every layer; ``h_L = h + f`` of the last one."""
    h = embed(cfg)
    for layer in range(cfg.depth):
        f = branch(cfg, layer, h)
        yield layer, h, f
        h = h + f


def final_activations(cfg: ResidualStackConfig) -> np.ndarray:
    """Stack output ``h_L``."""
    for _, h, f in iterate_stack(cfg):
        pass
    return h + f


def generate_layer(cfg: ResidualStackConfig, layer_index: int) -> ActivationTensor:
    """Activations entering layer ``layer_index``; deterministic in (seed, layer)."""
    if not 0 <= layer_index < cfg.depth:
        raise ValueError(f"layer index must be in [0, {cfg.depth}), got {layer_index}")
    for layer, h, _ in iterate_stack(cfg):
        if layer == layer_index:
            return ActivationTensor._trusted(h)


def stack_layers(cfg: ResidualStackConfig) -> list[tuple]:
    """``(label, tensor)`` for the input of every layer, ready for ``depth_profile``."""
    return [(f"layer{l:02d}", ActivationTensor._trusted(h)) for l, h, _ in iterate_stack(cfg)]


def energy_concentrated(
    rows: int, cols: int, share: float, p_fraction: float = 0.01, seed: int = 0
) -> np.ndarray:
    """Gaussian tensor whose top ``p_fraction`` channels hold ``share`` of the energy."""
    from .stats import top_count

    if not 0.0 < share < 1.0:
        raise ValueError("share must lie in (0, 1)")
    k = top_count(p_fraction, cols)
    if k >= cols:
        raise ValueError("need at least one channel outside the top set")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((rows, cols))
    # per-channel energy ratio r solves k r / (k r + cols - k) = share
    r = share * (cols - k) / (k * (1.0 - share))
    top = rng.choice(cols, size=k, replace=False)
    x[:, top] *= math.sqrt(r)
    return x


# ---------------------------------------------------------------------------
# Error propagation


@dataclass(frozen=True)
class PropagationResult:
    """Per-layer error of the quantized stack against the clean one.

    ``error_mean[l]`` and ``error_var[l]`` describe ``eps = h - h_hat`` after
    layer ``l``; ``branch_error_var[l]`` is the variance of the error added by
    layer ``l`` alone. ``clean_stats[l]`` summarises the clean input of layer ``l``.
    """

    mode: str
    error_mean: tuple
    error_var: tuple
    branch_error_var: tuple
    clean_stats: tuple

    @property
    def depth(self) -> int:
        return len(self.error_var)

    @property
    def final_mean(self) -> float:
        return self.error_mean[-1]

    @property
    def final_var(self) -> float:
        return self.error_var[-1]

    @property
    def variance_ratio(self) -> Optional[float]:
        """``Var[eps_L] / sum_l Var[e_l]``; 1 for independent zero-mean layer errors."""
        total = math.fsum(self.branch_error_var)
        if total == 0.0:
            return None
        return self.final_var / total


def propagate_errors(
    cfg: ResidualStackConfig,
    policy: PrecisionPolicy,
    b: int = 8,
    mode: str = "quantized",
    injected_variance: Optional[float] = None,
    collect_stats: bool = True,
) -> PropagationResult:
    """Run the clean stack and a perturbed copy side by side.

    Each layer's branch is evaluated on the clean input and then perturbed,
    so the quantized stream is ``h_hat[l+1] = h_hat[l] + Q(f_l(h_l))``.

    ``mode="quantized"`` perturbs with the layer's directive, calibrated on
    that branch output. ``mode="injected"`` adds independent zero-mean noise
    instead: Gaussian with ``injected_variance`` if given, otherwise uniform
    over one quantization step of the directive. Retain layers add no error
    in either mode.
    """
    if mode not in ("quantized", "injected"):
        raise ValueError(f"unknown mode {mode!r}")
    if injected_variance is not None and injected_variance < 0:
        raise ValueError("injected_variance must be >= 0")
    policy.check_depth(cfg.depth)
    eps = None
    means, vars_, branch_vars, stats = [], [], [], []
    for layer, h, f in iterate_stack(cfg):
        directive = policy[layer]
        if collect_stats:
            stats.append(layer_stats(h))
        if eps is None:
            eps = np.zeros_like(h)
        if isinstance(directive, Retain):
            e = None
        elif mode == "quantized":
            e = f - apply_directive_array(f, directive, b)
        else:
            rng = _rng(cfg, _INJECT, layer)
            if injected_variance is not None:
                e = rng.normal(0.0, math.sqrt(injected_variance), size=f.shape)
            else:
                step = directive_scales(directive, f, b)
                e = (rng.random(f.shape) - 0.5) * step
        if e is not None:
            eps += e
            branch_vars.append(float(e.var()))
        else:
            branch_vars.append(0.0)
        means.append(float(eps.mean()))
        vars_.append(float(eps.var()))
    return PropagationResult(mode, tuple(means), tuple(vars_), tuple(branch_vars), tuple(stats))


# ---------------------------------------------------------------------------
# Collapse experiment


@dataclass(frozen=True)
class CollapseMethod:
    """A calibration method: directives for every branch plus one for the stack output."""

    label: str
    layers: PrecisionPolicy
    readout: Directive

    @classmethod
    def uniform(cls, label: str, directive, depth: int) -> "CollapseMethod":
        policy = PrecisionPolicy.uniform(directive, depth)
        return cls(label, policy, policy[0])


def standard_methods(
    depth: int,
    percentiles: Sequence[float] = (99.0, 99.5, 99.9, 99.99),
    k_grid: Sequence[int] = (2, 3, 4),
) -> list[CollapseMethod]:
    """fp32 reference, mixed precision, min-max, a percentile sweep and a PEG sweep.

    Every quantized tensor in the simulated stack is a residual-sum input,
    which mixed precision keeps at full precision, so "mixed" retains all.
    """
    methods = [
        CollapseMethod.uniform("fp32", Retain(), depth),
        CollapseMethod.uniform("mixed", Retain(), depth),
        CollapseMethod.uniform("minmax", QuantizeMinMax(), depth),
    ]
    methods += [CollapseMethod.uniform(f"percentile_{p:g}", QuantizePercentile(p), depth) for p in percentiles]
    methods += [CollapseMethod.uniform(f"peg_k{k}", QuantizePEG(k), depth) for k in k_grid]
    return methods


@dataclass(frozen=True)
class CollapseResult:
    """Probe accuracy per method label, in method order."""

    accuracies: dict
    reference: str = "fp32"

    def __post_init__(self):
        if self.reference not in self.accuracies:
            raise ValueError(f"reference method {self.reference!r} missing")
        for label, acc in self.accuracies.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy of {label!r} outside [0, 1]: {acc}")

    @property
    def reference_accuracy(self) -> float:
        return self.accuracies[self.reference]

    def __getitem__(self, label: str) -> float:
        return self.accuracies[label]


def _standardize(x: np.ndarray, rows: np.ndarray):
    mu = x[rows].mean(axis=0)
    sd = x[rows].std(axis=0)
    if np.any(sd == 0):
        raise SingularProbe("a probe feature is constant on the calibration rows")
    return mu, sd


def _with_intercept(z: np.ndarray) -> np.ndarray:
    return np.column_stack([z, np.ones(z.shape[0])])


def fit_probe(x: np.ndarray, y: np.ndarray, ridge: float = RIDGE) -> np.ndarray:
    """Closed-form ridge regression weights for design matrix ``x``."""
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise SingularProbe(f"probe design matrix is rank-deficient ({x.shape[1]} columns)")
    gram = x.T @ x + ridge * np.eye(x.shape[1])
    return np.linalg.solve(gram, x.T @ y)


def probe_labels(cfg: ResidualStackConfig, clean_out: np.ndarray, calib: np.ndarray) -> np.ndarray:
    """Balanced +-1 labels from a weighted sum of standardized dominant channels."""
    dom = list(cfg.dominant)
    mu, sd = _standardize(clean_out[:, dom], calib)
    z = (clean_out[:, dom] - mu) / sd
    w = np.ones(len(dom))
    w[: cfg.massive] = cfg.massive_weight
    score = z @ w / np.linalg.norm(w)
    score = score + cfg.label_noise * _rng(cfg, _LABEL).standard_normal(score.size)
    return np.where(score > np.median(score), 1.0, -1.0)


def collapse_experiment(
    cfg: ResidualStackConfig, methods: Sequence[CollapseMethod], b: int = 8
) -> CollapseResult:
    """Probe accuracy on the stack output under each calibration method.

    The first half of the rows calibrates quantizer scales and fits the
    probe on clean dominant-channel features; the second half is scored.
    Every method quantizes each branch output and the final activations
    with scales fixed on the calibration rows.
    """
    if not methods:
        raise ValueError("at least one method is required")
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise ValueError("method labels must be unique")
    for m in methods:
        m.layers.check_depth(cfg.depth)
    if not any(m.label == "fp32" for m in methods):
        methods = [CollapseMethod.uniform("fp32", Retain(), cfg.depth), *methods]
    if cfg.samples < 4 or not cfg.dominant:
        raise SingularProbe("the probe needs dominant channels and at least 4 rows")

    n = cfg.samples
    calib = np.arange(n) < n // 2
    held = ~calib

    hats: dict = {}
    for layer, h, f in iterate_stack(cfg):
        if not hats:
            hats = {m.label: h.copy() for m in methods}
        cal_f = f[calib]
        for m in methods:
            d = m.layers[layer]
            if isinstance(d, Retain):
                hats[m.label] += f
            else:
                hats[m.label] += apply_directive_array(f, d, b, cal_f)
    clean_out = h + f

    y = probe_labels(cfg, clean_out, calib)
    dom = list(cfg.dominant)
    mu, sd = _standardize(clean_out[:, dom], calib)
    weights = fit_probe(_with_intercept((clean_out[calib][:, dom] - mu) / sd), y[calib])

    acc = {}
    for m in methods:
        out = apply_directive_array(hats[m.label], m.readout, b, hats[m.label][calib])
        pred = _with_intercept((out[held][:, dom] - mu) / sd) @ weights
        acc[m.label] = float(np.mean(np.sign(pred) == y[held]))
    return CollapseResult(acc)
