"""Symmetric fake quantization, calibration strategies and channel grouping.

Everything here is simulated in floating point: values are mapped to the
integer grid ``[-(2**(b-1) - 1), 2**(b-1) - 1]`` and straight back.  The
zero point is always 0.

Functions accept an :class:`ActivationTensor` or anything ``np.asarray``
understands. The ``*_array`` helpers work on raw arrays and are what the
simulator uses in its inner loops.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import DegenerateScale, InvalidK, PolicyLengthMismatch
from .tensor import ActivationTensor

EPSILON = 2.0 ** -24
MIN_BITS = 2
MAX_BITS = 16


def qmax(bits: int) -> int:
    """Largest representable magnitude on the symmetric grid."""
    _check_bits(bits)
    return 2 ** (bits - 1) - 1


def _check_bits(bits):
    if isinstance(bits, bool) or int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bits must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")


def _values(t) -> np.ndarray:
    if isinstance(t, ActivationTensor):
        return t.data
    return np.asarray(t)


def _wrap_like(t, arr: np.ndarray):
    if isinstance(t, ActivationTensor):
        return ActivationTensor._trusted(arr)
    return arr


@dataclass(frozen=True)
class QuantParams:
    """Scale, zero point and bit width of a symmetric quantizer."""

    scale: float
    zero_point: int = 0
    bits: int = 8
    degenerate: bool = False

    def __post_init__(self):
        _check_bits(self.bits)
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and positive, got {self.scale!r}")
        if self.zero_point != 0:
            raise ValueError("only symmetric quantization (zero_point = 0) is supported")

    @property
    def qmax(self) -> int:
        return qmax(self.bits)

    @property
    def clip_value(self) -> float:
        """Largest magnitude that survives without saturating."""
        return self.scale * self.qmax


def _params_from_range(amax: float, bits: int) -> QuantParams:
    if amax == 0.0:
        return QuantParams(EPSILON, 0, bits, degenerate=True)
    return QuantParams(float(amax) / qmax(bits), 0, bits)


def scale_minmax(t, b: int = 8) -> QuantParams:
    """Scale from the largest absolute value. An all-zero input gets ``EPSILON``."""
    _check_bits(b)
    x = _values(t)
    return _params_from_range(float(np.max(np.abs(x))), b)


def percentile_abs(x, p: float) -> float:
    """``p``-th percentile of ``|x|`` by linear interpolation at rank ``p/100 * (n-1)``."""
    if not 0.0 < p <= 100.0:
        raise ValueError(f"percentile must lie in (0, 100], got {p!r}")
    a = np.abs(np.asarray(x, dtype=np.float64)).ravel()
    return float(np.percentile(a, p, method="linear"))


def scale_percentile(t, p: float, b: int = 8) -> QuantParams:
    """Scale from a high percentile of ``|x|``; values above it will saturate."""
    _check_bits(b)
    value = percentile_abs(_values(t), p)
    if value == 0.0:
        if p == 100.0:
            # all-zero input; behave exactly like min-max
            return _params_from_range(0.0, b)
        raise DegenerateScale(f"percentile {p} of |x| is zero")
    return _params_from_range(value, b)


def round_half_away(v: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(v) + 0.5), v)


def quantize_array(x: np.ndarray, scale, bits: int) -> np.ndarray:
    """Integer codes for ``x``; ``scale`` may be a scalar or a per-column vector."""
    m = qmax(bits)
    v = np.asarray(x, dtype=np.float64) / scale
    return np.clip(round_half_away(v), -m, m).astype(np.int32)


def fake_quant_array(x: np.ndarray, scale, bits: int) -> np.ndarray:
    """Quantize-dequantize ``x``; the result keeps the input's float dtype."""
    x = np.asarray(x)
    out = quantize_array(x, scale, bits) * np.asarray(scale, dtype=np.float64)
    return out.astype(x.dtype if x.dtype.kind == "f" else np.float64, copy=False)


@dataclass(frozen=True)
class GroupScheme:
    """Channel permutation plus contiguous group boundaries over the permuted order.

    Group ``g`` holds the original channels ``permutation[boundaries[g]:boundaries[g+1]]``.
    ``group_params`` is empty until scales have been calibrated.
    """

    permutation: np.ndarray
    boundaries: tuple
    group_params: tuple = ()

    def __post_init__(self):
        perm = np.asarray(self.permutation, dtype=np.int64)
        d = perm.size
        if d == 0 or not np.array_equal(np.sort(perm), np.arange(d)):
            raise ValueError("permutation must be a bijection over [0, D)")
        b = tuple(int(v) for v in self.boundaries)
        if len(b) < 2 or b[0] != 0 or b[-1] != d or any(x >= y for x, y in zip(b, b[1:])):
            raise ValueError(f"boundaries {b} do not partition {d} channels")
        if self.group_params and len(self.group_params) != len(b) - 1:
            raise ValueError("one QuantParams per group is required")
        perm.setflags(write=False)
        object.__setattr__(self, "permutation", perm)
        object.__setattr__(self, "boundaries", b)
        object.__setattr__(self, "group_params", tuple(self.group_params))

    @property
    def k(self) -> int:
        return len(self.boundaries) - 1

    @property
    def width(self) -> int:
        return self.permutation.size

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(self.width)
        return inv

    def group_sizes(self) -> list[int]:
        return [b - a for a, b in zip(self.boundaries, self.boundaries[1:])]

    def groups(self) -> list[np.ndarray]:
        """Original channel indices of each group."""
        return [self.permutation[a:b] for a, b in zip(self.boundaries, self.boundaries[1:])]

    def column_scales(self) -> np.ndarray:
        """Per-channel scale vector in the original channel order."""
        if not self.group_params:
            raise ValueError("group scheme has no calibrated scales")
        scales = np.empty(self.width)
        for idx, params in zip(self.groups(), self.group_params):
            scales[idx] = params.scale
        return scales

    @property
    def bits(self) -> int:
        return self.group_params[0].bits


@dataclass(frozen=True)
class QuantizedTensor:
    """Integer codes plus the parameters needed to map them back."""

    q: np.ndarray
    params: Union[QuantParams, GroupScheme]

    def __post_init__(self):
        q = np.asarray(self.q)
        m = qmax(self.params.bits)
        if q.size and (q.min() < -m or q.max() > m):
            raise ValueError(f"integer codes exceed the {self.params.bits}-bit range")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)


def quantize_affine(t, params: QuantParams) -> QuantizedTensor:
    """Round half away from zero and saturate to the representable range."""
    return QuantizedTensor(quantize_array(_values(t), params.scale, params.bits), params)


def dequantize(qt: QuantizedTensor, dtype=np.float64) -> ActivationTensor:
    """Map integer codes back to real values, ``s * (q - z)``."""
    if isinstance(qt.params, GroupScheme):
        scale = qt.params.column_scales()
    else:
        scale = qt.params.scale
    out = (qt.q * np.asarray(scale, dtype=np.float64)).astype(dtype, copy=False)
    return ActivationTensor._trusted(out)


def fake_quant(t, params: QuantParams):
    """Quantize then dequantize; returns the same kind of object it was given."""
    return _wrap_like(t, fake_quant_array(_values(t), params.scale, params.bits))


def peg_partition(channel_stats, k: int) -> GroupScheme:
    """Spread channels over ``k`` groups so large channels do not cluster.

    Channels are ranked by ``channel_stats`` (largest first, ties by index) and
    dealt round-robin. Within a group channels keep ascending index order, so
    ``k = 1`` gives the identity permutation.
    """
    stats = np.asarray(channel_stats, dtype=np.float64).ravel()
    d = stats.size
    if isinstance(k, bool) or int(k) != k or not 1 <= k <= d:
        raise InvalidK(f"group count must be in [1, {d}], got {k!r}")
    k = int(k)
    order = np.lexsort((np.arange(d), -stats))
    groups = [np.sort(order[g::k]) for g in range(k)]
    perm = np.concatenate(groups)
    bounds = np.concatenate([[0], np.cumsum([g.size for g in groups])])
    return GroupScheme(perm, tuple(bounds))


def channel_absmax(x) -> np.ndarray:
    return np.max(np.abs(_values(x)), axis=0)


def calibrate_groups(scheme: GroupScheme, calibration, b: int) -> GroupScheme:
    """Attach a min-max scale to each group, measured on ``calibration``."""
    cal = _values(calibration)
    permuted = cal[:, scheme.permutation]
    params = tuple(
        _params_from_range(float(np.max(np.abs(permuted[:, lo:hi]))), b)
        for lo, hi in zip(scheme.boundaries, scheme.boundaries[1:])
    )
    return GroupScheme(scheme.permutation, scheme.boundaries, params)


def peg_quantize(t, k: int, b: int = 8, calibration=None) -> QuantizedTensor:
    """Per-group quantization with codes returned in the original channel order.

    Grouping and scales come from ``calibration`` (default: ``t`` itself).
    """
    _check_bits(b)
    x = _values(t)
    cal = x if calibration is None else _values(calibration)
    scheme = calibrate_groups(peg_partition(channel_absmax(cal), k), cal, b)
    permuted = x[:, scheme.permutation]
    q = np.empty(permuted.shape, dtype=np.int32)
    for (lo, hi), params in zip(zip(scheme.boundaries, scheme.boundaries[1:]), scheme.group_params):
        q[:, lo:hi] = quantize_array(permuted[:, lo:hi], params.scale, b)
    return QuantizedTensor(q[:, scheme.inverse], scheme)


def peg_fake_quant(t, k: int, b: int = 8, calibration=None):
    """Per-embedding-group fake quantization. Returns ``(tensor, scheme)``."""
    x = _values(t)
    qt = peg_quantize(x, k, b, calibration)
    dtype = x.dtype if x.dtype.kind == "f" else np.float64
    out = dequantize(qt, dtype).data
    return _wrap_like(t, out), qt.params


class Resolution(NamedTuple):
    rho: float
    degenerate: bool


def resolution_factor(t, bulk_percentile: float = 99.0) -> Resolution:
    """Spread of the bulk relative to the largest magnitude.

    The bulk is every value with ``|x|`` at or below the ``bulk_percentile``
    of ``|x|``; its population standard deviation is divided by ``max|x|``.
    """
    x = np.asarray(_values(t), dtype=np.float64).ravel()
    if x.size < 2:
        raise ValueError("resolution factor needs at least 2 values")
    a = np.abs(x)
    amax = float(a.max())
    if amax == 0.0:
        return Resolution(0.0, True)
    bulk = x[a <= percentile_abs(a, bulk_percentile)]
    sigma = float(bulk.std())
    if sigma == 0.0:
        return Resolution(0.0, True)
    return Resolution(sigma / amax, False)


# ---------------------------------------------------------------------------
# Per-layer directives


@dataclass(frozen=True)
class Retain:
    """Leave the tensor in full precision."""

    @property
    def label(self) -> str:
        return "retain"


@dataclass(frozen=True)
class QuantizeMinMax:
    @property
    def label(self) -> str:
        return "minmax"


@dataclass(frozen=True)
class QuantizePercentile:
    p: float

    def __post_init__(self):
        if not 0.0 < self.p <= 100.0:
            raise ValueError(f"percentile must lie in (0, 100], got {self.p!r}")

    @property
    def label(self) -> str:
        return f"percentile:{self.p:g}"


@dataclass(frozen=True)
class QuantizePEG:
    k: int

    def __post_init__(self):
        if isinstance(self.k, bool) or int(self.k) != self.k or self.k < 1:
            raise InvalidK(f"group count must be a positive integer, got {self.k!r}")

    @property
    def label(self) -> str:
        return f"peg:{self.k}"


Directive = Union[Retain, QuantizeMinMax, QuantizePercentile, QuantizePEG]

_DIRECTIVE_RE = re.compile(r"^(retain|minmax|percentile:([0-9.eE+-]+)|peg:(\d+))$")


def parse_directive(text: str) -> Directive:
    """Parse ``retain``, ``minmax``, ``percentile:<p>`` or ``peg:<k>``."""
    m = _DIRECTIVE_RE.match(text.strip().lower())
    if not m:
        raise ValueError(f"unknown directive {text!r}")
    if m.group(1) == "retain":
        return Retain()
    if m.group(1) == "minmax":
        return QuantizeMinMax()
    if m.group(2) is not None:
        return QuantizePercentile(float(m.group(2)))
    return QuantizePEG(int(m.group(3)))


@dataclass(frozen=True)
class PrecisionPolicy:
    """One directive per layer of the stack it is applied to."""

    directives: tuple = field(default_factory=tuple)

    def __post_init__(self):
        parsed = tuple(parse_directive(d) if isinstance(d, str) else d for d in self.directives)
        object.__setattr__(self, "directives", parsed)

    @classmethod
    def uniform(cls, directive, depth: int) -> "PrecisionPolicy":
        if isinstance(directive, str):
            directive = parse_directive(directive)
        return cls((directive,) * depth)

    def __len__(self):
        return len(self.directives)

    def __iter__(self):
        return iter(self.directives)

    def __getitem__(self, i):
        return self.directives[i]

    def check_depth(self, depth: int) -> None:
        if len(self.directives) != depth:
            raise PolicyLengthMismatch(
                f"policy has {len(self.directives)} directives for {depth} layers"
            )


def apply_directive_array(x: np.ndarray, directive: Directive, b: int, calibration=None) -> np.ndarray:
    """Fake-quantize ``x`` per ``directive`` with scales measured on ``calibration``.

    ``calibration`` defaults to ``x``. Retain returns ``x`` itself.
    """
    if isinstance(directive, Retain):
        return x
    cal = x if calibration is None else calibration
    if isinstance(directive, QuantizeMinMax):
        return fake_quant_array(x, scale_minmax(cal, b).scale, b)
    if isinstance(directive, QuantizePercentile):
        return fake_quant_array(x, scale_percentile(cal, directive.p, b).scale, b)
    if isinstance(directive, QuantizePEG):
        out, _ = peg_fake_quant(x, directive.k, b, cal)
        return out
    raise TypeError(f"not a directive: {directive!r}")


def directive_scales(directive: Directive, calibration: np.ndarray, b: int) -> Optional[np.ndarray]:
    """Per-channel quantization step a directive would use, or None for Retain."""
    d = calibration.shape[1]
    if isinstance(directive, Retain):
        return None
    if isinstance(directive, QuantizeMinMax):
        return np.full(d, scale_minmax(calibration, b).scale)
    if isinstance(directive, QuantizePercentile):
        return np.full(d, scale_percentile(calibration, directive.p, b).scale)
    if isinstance(directive, QuantizePEG):
        scheme = calibrate_groups(
            peg_partition(channel_absmax(calibration), directive.k), calibration, b
        )
        return scheme.column_scales()
    raise TypeError(f"not a directive: {directive!r}")


def apply_policy(
    layers: Sequence[ActivationTensor], policy: PrecisionPolicy, b: int = 8
) -> list[ActivationTensor]:
    """Transform each layer by its own directive, calibrating on that layer."""
    _check_bits(b)
    policy.check_depth(len(layers))
    out = []
    for layer, directive in zip(layers, policy):
        if isinstance(directive, Retain):
            out.append(layer)
        else:
            out.append(_wrap_like(layer, apply_directive_array(_values(layer), directive, b)))
    return out
