import math

import numpy as np
import pytest

from quantlab.errors import PolicyLengthMismatch, SingularProbe
from quantlab.quant import PrecisionPolicy, QuantizeMinMax, Retain, fake_quant, scale_minmax
from quantlab.simulator import (
    CollapseMethod,
    ResidualStackConfig,
    branch,
    collapse_experiment,
    dominant_signal_config,
    embed,
    final_activations,
    fit_probe,
    generate_layer,
    iterate_stack,
    pareto_row_scale,
    propagate_errors,
    reference_config,
    spread_channels,
    standard_methods,
)
from quantlab.stats import kurtosis, per_channel_variance


def small(**kw):
    base = dict(depth=4, width=32, dominant=spread_channels(32, 2), samples=512, seed=7)
    base.update(kw)
    return ResidualStackConfig(**base)


def test_spread_channels():
    assert spread_channels(256, 8) == (0, 32, 64, 96, 128, 160, 192, 224)
    assert spread_channels(10, 0) == ()


@pytest.mark.parametrize(
    "kw",
    [
        {"depth": 0},
        {"dominant": (0, 0)},
        {"dominant": (40,)},
        {"dominance_gain": 0.5},
        {"tail_index": 0.0},
        {"massive": 3},
        {"dominant_corr": 1.5},
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        small(**kw)


def test_gaussian_fallback_kurtosis():
    cfg = small(dominant=(), tail_index=math.inf, samples=20000, depth=2)
    assert kurtosis(generate_layer(cfg, 1)) == pytest.approx(3.0, abs=0.05)


def test_pareto_scale_tail_and_normalisation():
    rng = np.random.default_rng(0)
    tau = pareto_row_scale(rng, 400_000, 5.0).ravel() * math.sqrt(5 / 3)
    # survival function of Pareto(alpha) with x_m = 1 is t**-alpha
    for t in (1.5, 2.0, 3.0):
        assert np.mean(tau > t) == pytest.approx(t ** -5.0, rel=0.05)
    assert np.mean((tau / math.sqrt(5 / 3)) ** 2) == pytest.approx(1.0, rel=0.02)


def test_dominant_std_grows_by_gain_per_layer():
    cfg = small(dominant=(5,), dominance_gain=2.0, depth=5, samples=4000)
    v0 = per_channel_variance(generate_layer(cfg, 0))[5]
    v4 = per_channel_variance(generate_layer(cfg, 4))[5]
    assert math.sqrt(v4 / v0) == pytest.approx(16.0, rel=1e-9)


def test_generation_is_deterministic():
    cfg = small()
    assert generate_layer(cfg, 2).bit_equal(generate_layer(cfg, 2))
    other = generate_layer(small(seed=8), 2)
    assert not generate_layer(cfg, 2).bit_equal(other)


def test_generate_layer_range():
    with pytest.raises(ValueError):
        generate_layer(small(), 4)


def test_residual_recursion_holds():
    cfg = small()
    prev = None
    for l, h, f in iterate_stack(cfg):
        if prev is not None:
            np.testing.assert_array_equal(h, prev[0] + prev[1])
        np.testing.assert_array_equal(f, branch(cfg, l, h))
        prev = (h, f)
    np.testing.assert_array_equal(final_activations(cfg), prev[0] + prev[1])


def test_bulk_mixer_preserves_row_norm():
    cfg = small()
    h = embed(cfg)
    f = branch(cfg, 0, h)
    b = cfg.bulk
    np.testing.assert_allclose(
        np.linalg.norm(f[:, b], axis=1), cfg.residual_scale * np.linalg.norm(h[:, b], axis=1), rtol=1e-10
    )


def test_massive_channels_sit_at_offset():
    cfg = small(massive=1, massive_ratio=10.0, massive_offset=5.0, samples=4000)
    h = embed(cfg)
    m = cfg.dominant[0]
    assert h[:, m].mean() == pytest.approx(cfg.dominant_scale * 10.0 * 5.0, rel=0.02)


# --- error propagation ------------------------------------------------------------


def test_all_retain_has_no_error():
    cfg = small()
    for mode in ("quantized", "injected"):
        r = propagate_errors(cfg, PrecisionPolicy.uniform(Retain(), cfg.depth), mode=mode)
        assert r.error_var == (0.0,) * cfg.depth
        assert r.error_mean == (0.0,) * cfg.depth
        assert r.variance_ratio is None


def test_single_layer_error_is_fake_quant_error():
    cfg = small(depth=1)
    r = propagate_errors(cfg, PrecisionPolicy.uniform(QuantizeMinMax(), 1), 8)
    f = branch(cfg, 0, embed(cfg))
    err = f - fake_quant(f, scale_minmax(f, 8))
    assert r.final_var == pytest.approx(float(err.var()), rel=1e-12)
    assert r.variance_ratio == pytest.approx(1.0, rel=1e-12)
    assert r.depth == 1 and len(r.clean_stats) == 1


def test_injected_variance_adds_up():
    cfg = small(depth=12, samples=20000, width=8, dominant=(1,))
    r = propagate_errors(
        cfg, PrecisionPolicy.uniform("minmax", 12), mode="injected", injected_variance=0.25, collect_stats=False
    )
    assert r.final_var == pytest.approx(12 * 0.25, rel=0.05)
    assert 0.95 <= r.variance_ratio <= 1.05


def test_injected_uniform_noise_uses_quantizer_step():
    cfg = small(depth=1, samples=20000)
    r = propagate_errors(cfg, PrecisionPolicy.uniform("minmax", 1), mode="injected")
    f = branch(cfg, 0, embed(cfg))
    step = scale_minmax(f, 8).scale
    assert r.final_var == pytest.approx(step ** 2 / 12, rel=0.03)


def test_quantized_errors_track_clean_trajectory():
    cfg = small()
    policy = PrecisionPolicy.uniform("minmax", cfg.depth)
    r = propagate_errors(cfg, policy)
    eps = np.zeros((cfg.samples, cfg.width))
    for l, h, f in iterate_stack(cfg):
        eps += f - fake_quant(f, scale_minmax(f, 8))
        assert r.error_var[l] == pytest.approx(float(eps.var()), rel=1e-12)


def test_propagation_policy_length():
    with pytest.raises(PolicyLengthMismatch):
        propagate_errors(small(), PrecisionPolicy.uniform("minmax", 3))


def test_propagation_deterministic():
    cfg = small()
    p = PrecisionPolicy.uniform("peg:2", cfg.depth)
    assert propagate_errors(cfg, p, mode="injected") == propagate_errors(cfg, p, mode="injected")


def test_retain_layers_add_no_error():
    cfg = small()
    policy = PrecisionPolicy([Retain(), QuantizeMinMax(), Retain(), Retain()])
    r = propagate_errors(cfg, policy)
    assert r.error_var[0] == 0.0
    assert r.error_var[1] > 0 and r.error_var[3] == r.error_var[1]


# --- collapse experiment ----------------------------------------------------------


def collapse_small(**kw):
    return dominant_signal_config(samples=2048, **kw)


def test_fp32_equals_clean_probe_accuracy():
    cfg = collapse_small()
    methods = [CollapseMethod.uniform("fp32", Retain(), cfg.depth), CollapseMethod.uniform("mixed", "retain", cfg.depth)]
    r = collapse_experiment(cfg, methods)
    assert r["fp32"] == r["mixed"] == r.reference_accuracy
    assert r.reference_accuracy > 0.85


def test_collapse_adds_reference_when_missing():
    cfg = collapse_small()
    r = collapse_experiment(cfg, [CollapseMethod.uniform("minmax", "minmax", cfg.depth)])
    assert list(r.accuracies) == ["fp32", "minmax"]


def test_collapse_is_deterministic():
    cfg = collapse_small()
    methods = standard_methods(cfg.depth, (99.0,), (2,))
    assert collapse_experiment(cfg, methods) == collapse_experiment(cfg, methods)


def test_collapse_requires_methods():
    with pytest.raises(ValueError):
        collapse_experiment(collapse_small(), [])


def test_standard_methods_labels():
    labels = [m.label for m in standard_methods(12)]
    assert labels == [
        "fp32", "mixed", "minmax", "percentile_99", "percentile_99.5",
        "percentile_99.9", "percentile_99.99", "peg_k2", "peg_k3", "peg_k4",
    ]


def test_probe_rank_deficiency():
    x = np.column_stack([np.ones(10), np.ones(10)])
    with pytest.raises(SingularProbe):
        fit_probe(x, np.ones(10))


def test_probe_without_dominant_channels_is_singular():
    methods = [CollapseMethod.uniform("fp32", Retain(), 1)]
    with pytest.raises(SingularProbe):
        collapse_experiment(ResidualStackConfig(depth=1, width=8, dominant=(), samples=64), methods)


def test_fit_probe_recovers_linear_rule():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.standard_normal((500, 3)), np.ones(500)])
    w = np.array([1.0, -2.0, 0.5, 0.3])
    np.testing.assert_allclose(fit_probe(x, x @ w), w, atol=1e-6)


def test_collapse_accuracy_falls_with_massive_magnitude():
    accs = []
    for ratio in [1, 4, 16, 64]:
        cfg = collapse_small(massive_ratio=float(ratio))
        accs.append(collapse_experiment(cfg, [CollapseMethod.uniform("minmax", "minmax", cfg.depth)])["minmax"])
    assert all(a > b for a, b in zip(accs, accs[1:]))
    assert accs[-1] < 0.6
