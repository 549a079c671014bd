"""Symmetric fixed-point quantization of weights and activations.

Values are mapped onto the grid ``k * 2**-(b-1) / alpha`` after saturating
``alpha * x`` to ``[-1, 1]``::

    Q(x) = round(clip(alpha * x) * 2**(b-1)) * 2**-(b-1) / alpha

In ``"symmetric"`` mode the integer code ``k`` spans ``[-2**(b-1), 2**(b-1)]``;
``"hardware-int"`` additionally clamps it to ``[-2**(b-1), 2**(b-1) - 1]``.
A bit-width of 16 is the unquantized baseline and leaves values untouched.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from .tensorcore import DENSE, Batch, ModelGraph, _forward_cache

BASELINE_BITS = 16
DEFAULT_PALETTE = (16, 8, 4)
MODES = ("symmetric", "hardware-int")
ROUNDINGS = ("nearest", "case")


class QuantError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class QuantParams:
    """Bit-width, scale(s) and rounding for one tensor.

    ``scale`` is a scalar (per-tensor) or a vector with one entry per output
    channel (row of a weight matrix).
    """

    bits: int
    scale: float | np.ndarray
    rounding: str = "nearest"
    mode: str = "symmetric"

    def __post_init__(self):
        if int(self.bits) != self.bits or not 2 <= self.bits <= BASELINE_BITS:
            raise QuantError(f"bits must be an integer in [2, 16], got {self.bits}")
        scale = np.asarray(self.scale, dtype=np.float64)
        if scale.ndim > 1 or scale.size == 0:
            raise QuantError("scale must be a scalar or a 1-D vector")
        if not np.all(np.isfinite(scale)) or np.any(scale <= 0):
            raise QuantError("scale must be positive and finite")
        if self.rounding not in ROUNDINGS:
            raise QuantError(f"unknown rounding {self.rounding!r}")
        if self.mode not in MODES:
            raise QuantError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "scale", scale)

    @property
    def identity(self) -> bool:
        return self.bits >= BASELINE_BITS

    def code_range(self) -> tuple[int, int]:
        half = 1 << (self.bits - 1)
        return -half, (half - 1 if self.mode == "hardware-int" else half)

    def step(self) -> np.ndarray:
        """Grid spacing in value space, ``2**-(b-1) / alpha``."""
        return 2.0 ** -(self.bits - 1) / self.scale


def _broadcast_scale(x: np.ndarray, scale: np.ndarray) -> np.ndarray:
    if scale.ndim == 0 or scale.size == 1:
        return scale.reshape(())
    if x.ndim == 0 or x.shape[0] != scale.shape[0]:
        raise QuantError(f"{scale.shape[0]} channel scales for tensor of shape {x.shape}")
    return scale.reshape((-1,) + (1,) * (x.ndim - 1))


def _grid_units(x: np.ndarray, p: QuantParams):
    """Return ``(u, alpha)``: the pre-rounding position in integer grid units."""
    x = np.asarray(x)
    if not np.all(np.isfinite(x)):
        raise QuantError("cannot quantize non-finite values")
    alpha = _broadcast_scale(x, p.scale)
    u = np.clip(alpha * x.astype(np.float64), -1.0, 1.0) * float(1 << (p.bits - 1))
    return u, alpha


def _from_codes(codes: np.ndarray, alpha, p: QuantParams, dtype) -> np.ndarray:
    return (codes * 2.0 ** -(p.bits - 1) / alpha).astype(dtype)


def quantize_codes(x, p: QuantParams) -> np.ndarray:
    """Integer grid codes for round-to-nearest (ties to even)."""
    u, _ = _grid_units(x, p)
    lo, hi = p.code_range()
    return np.clip(np.rint(u), lo, hi)


def quantize_tensor(x, p: QuantParams) -> np.ndarray:
    """Round-to-nearest quantization onto the grid defined by ``p``."""
    x = np.asarray(x)
    if p.identity:
        if not np.all(np.isfinite(x)):
            raise QuantError("cannot quantize non-finite values")
        return x.copy()
    u, alpha = _grid_units(x, p)
    lo, hi = p.code_range()
    codes = np.clip(np.rint(u), lo, hi)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float32
    return _from_codes(codes, alpha, p, dtype)


def weight_scales(w, granularity: str = "per-channel") -> np.ndarray:
    """``alpha = 1 / max|w|`` per group; all-zero groups get ``alpha = 1``.

    Per-channel groups are the rows (output channels). Always returns a
    1-D float64 array (length 1 for per-tensor).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise QuantError("cannot compute scales of an empty tensor")
    if granularity == "per-tensor":
        peak = np.abs(w).max(keepdims=True).reshape(1)
    elif granularity == "per-channel":
        peak = np.abs(w.reshape(w.shape[0], -1)).max(axis=1) if w.ndim > 1 else np.abs(w)
    else:
        raise QuantError(f"unknown granularity {granularity!r}")
    out = np.ones_like(peak)
    nz = peak > 0
    out[nz] = 1.0 / peak[nz]
    return out


def percentile_abs(values, percentile: float) -> float:
    """Empirical percentile of ``|values|`` with linear interpolation.

    The rank is ``r = (p/100) * (n-1)`` on the zero-indexed sorted values.
    """
    if not 0 < percentile <= 100:
        raise QuantError(f"percentile must be in (0, 100], got {percentile}")
    a = np.sort(np.abs(np.asarray(values, dtype=np.float64)).ravel())
    if a.size == 0:
        raise QuantError("no activation values observed")
    r = percentile / 100.0 * (a.size - 1)
    lo = int(math.floor(r))
    hi = min(lo + 1, a.size - 1)
    return float(a[lo] + (r - lo) * (a[hi] - a[lo]))


def case_round_codes(w, p: QuantParams) -> tuple[np.ndarray, np.ndarray]:
    """CASE rounding in grid units.

    Starting from round-to-nearest, each channel (row) flips the fewest
    rounding directions needed to bring the summed signed error within half
    a grid step. Flips take the elements with the largest error whose
    direction agrees with the sign of the sum (lowest index first on ties),
    and never leave the code range.

    Returns:
        ``(codes, flips)`` with integer-valued codes shaped like ``w`` and
        the number of flipped elements per channel.
    """
    w = np.asarray(w)
    u, _ = _grid_units(w, p)
    lo, hi = p.code_range()
    rows = u.reshape(u.shape[0], -1) if u.ndim > 1 else u.reshape(1, -1)
    codes = np.clip(np.rint(rows), lo, hi)
    flips = np.zeros(rows.shape[0], dtype=np.int64)
    for c in range(rows.shape[0]):
        err = codes[c] - rows[c]
        total = float(err.sum())
        if abs(total) <= 0.5:
            continue
        sign = 1.0 if total > 0 else -1.0
        need = math.ceil(abs(total) - 0.5)
        moved = codes[c] - sign
        ok = (err * sign > 0) & (moved >= lo) & (moved <= hi)
        cand = np.flatnonzero(ok)
        order = cand[np.argsort(-np.abs(err[cand]), kind="stable")][:need]
        codes[c, order] -= sign
        flips[c] = order.size
    return codes.reshape(u.shape), flips


def case_round(w, p: QuantParams) -> np.ndarray:
    w = np.asarray(w)
    if p.identity:
        return w.copy()
    codes, _ = case_round_codes(w, p)
    alpha = _broadcast_scale(w, p.scale)
    return _from_codes(codes, alpha, p, w.dtype if w.dtype.kind == "f" else np.float32)


def quantize_weights(w, p: QuantParams) -> np.ndarray:
    return case_round(w, p) if p.rounding == "case" else quantize_tensor(w, p)


# --------------------------------------------------------------------------
# configurations and model views


class QuantConfig:
    """Per-layer weight and activation bit-widths.

    Activation bits default to the weight bits of the same layer so both
    operands of a matmul share precision.
    """

    def __init__(self, weight_bits: Mapping[str, int], act_bits: Mapping[str, int] | None = None):
        self.weight_bits = {k: int(v) for k, v in weight_bits.items()}
        act = dict(self.weight_bits if act_bits is None else act_bits)
        if set(act) != set(self.weight_bits):
            raise QuantError("activation bits must cover the same layers as weight bits")
        self.act_bits = {k: int(act[k]) for k in self.weight_bits}

    @classmethod
    def uniform(cls, layer_ids: Iterable[str], bits: int) -> "QuantConfig":
        return cls({k: bits for k in layer_ids})

    def with_bits(self, layer_ids: Iterable[str], bits: int) -> "QuantConfig":
        wb, ab = dict(self.weight_bits), dict(self.act_bits)
        for k in layer_ids:
            if k not in wb:
                raise QuantError(f"layer {k!r} not in config")
            wb[k] = ab[k] = bits
        return QuantConfig(wb, ab)

    def __getitem__(self, layer_id: str) -> int:
        return self.weight_bits[layer_id]

    def __iter__(self):
        return iter(self.weight_bits)

    def __len__(self):
        return len(self.weight_bits)

    def key(self) -> tuple:
        return tuple((k, self.weight_bits[k], self.act_bits[k]) for k in self.weight_bits)

    def __eq__(self, other):
        return isinstance(other, QuantConfig) and sorted(self.key()) == sorted(other.key())

    def __hash__(self):
        return hash(tuple(sorted(self.key())))

    def __repr__(self):
        return f"QuantConfig({self.weight_bits})"

    def to_json(self) -> dict:
        return {k: {"weight_bits": self.weight_bits[k], "act_bits": self.act_bits[k]} for k in self}

    @classmethod
    def from_json(cls, obj: Mapping) -> "QuantConfig":
        return cls({k: v["weight_bits"] for k, v in obj.items()}, {k: v["act_bits"] for k, v in obj.items()})

    def validate(self, model: ModelGraph, palette: Iterable[int] = DEFAULT_PALETTE) -> None:
        ids = model.weighted_ids()
        missing = [k for k in ids if k not in self.weight_bits]
        if missing:
            raise QuantError(f"config is missing weighted layers {missing}")
        extra = [k for k in self.weight_bits if k not in ids]
        if extra:
            raise QuantError(f"config names unknown or weightless layers {extra}")
        allowed = set(palette)
        bad = {k: b for k, b in self.weight_bits.items() if b not in allowed}
        bad.update({k: b for k, b in self.act_bits.items() if b not in allowed})
        if bad:
            raise QuantError(f"bit-widths outside palette {sorted(allowed)}: {bad}")


@dataclass
class LayerScales:
    weight_scales: np.ndarray
    act_scale: float
    bits_used_for_calibration: int


class ScaleSet(dict):
    """``layer_id -> LayerScales``; serialises to ``scales.json``."""

    def to_json(self) -> dict:
        return {
            k: {
                "weight_scales": [float(a) for a in v.weight_scales],
                "act_scale": float(v.act_scale),
                "bits_used_for_calibration": int(v.bits_used_for_calibration),
            }
            for k, v in self.items()
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "ScaleSet":
        return cls(
            {
                k: LayerScales(
                    np.asarray(v["weight_scales"], dtype=np.float64),
                    float(v["act_scale"]),
                    int(v["bits_used_for_calibration"]),
                )
                for k, v in obj.items()
            }
        )


def _act_quant(x, bits, scale, mode):
    return quantize_tensor(x, QuantParams(bits, scale, "nearest", mode))


def calibrate_activation_scale(
    model: ModelGraph, calib: Iterable[Batch] | Batch, percentile: float = 99.999
) -> dict[str, float]:
    """Per-layer activation scale from the pooled ``|input|`` of each matmul.

    ``model`` should already carry the quantized weights of the working
    configuration. Returns ``1/q`` where ``q`` is the requested percentile
    (``1.0`` if every observed activation is zero).
    """
    batches = [calib] if isinstance(calib, Batch) else list(calib)
    if not batches:
        raise QuantError("empty calibration set")
    dense = [i for i, layer in enumerate(model.layers) if layer.kind == DENSE]
    pooled: dict[int, list[np.ndarray]] = {i: [] for i in dense}
    for batch in batches:
        acts = _forward_cache(model, batch.inputs, np.float32)
        for i in dense:
            pooled[i].append(np.abs(acts[i]).ravel())
    out = {}
    for i in dense:
        q = percentile_abs(np.concatenate(pooled[i]), percentile)
        out[model.layers[i].id] = 1.0 / q if q > 0 else 1.0
    return out


class Quantizer:
    """Builds quantized views of one model, caching per-layer weight tensors."""

    def __init__(
        self,
        model: ModelGraph,
        scales: ScaleSet,
        rounding: str = "case",
        mode: str = "symmetric",
        quantize_activations: bool = True,
    ):
        self.model = model
        self.scales = scales
        self.rounding = rounding
        self.mode = mode
        self.quantize_activations = quantize_activations
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def weights(self, layer_id: str, bits: int) -> np.ndarray:
        key = (layer_id, bits)
        if key not in self._cache:
            if layer_id not in self.scales:
                raise QuantError(f"no scales for quantized layer {layer_id!r}")
            p = QuantParams(bits, self.scales[layer_id].weight_scales, self.rounding, self.mode)
            w = quantize_weights(self.model.layer(layer_id).weights, p)
            w.setflags(write=False)
            self._cache[key] = w
        return self._cache[key]

    def apply(self, config: QuantConfig, activations: bool | None = None) -> ModelGraph:
        quant_acts = self.quantize_activations if activations is None else activations
        updates = {}
        for layer_id, bits in config.weight_bits.items():
            layer = self.model.layer(layer_id)
            if layer.kind != DENSE:
                raise QuantError(f"layer {layer_id!r} has no weights")
            act_bits = config.act_bits[layer_id]
            changes = {}
            if bits < BASELINE_BITS:
                changes["weights"] = self.weights(layer_id, bits)
            if quant_acts and act_bits < BASELINE_BITS:
                if layer_id not in self.scales:
                    raise QuantError(f"no scales for quantized layer {layer_id!r}")
                changes["input_transform"] = functools.partial(
                    _act_quant, bits=act_bits, scale=self.scales[layer_id].act_scale, mode=self.mode
                )
            if changes:
                updates[layer_id] = replace(layer, **changes)
        return self.model.with_layers(updates) if updates else self.model


def apply_config(
    model: ModelGraph,
    config: QuantConfig,
    scales: ScaleSet,
    rounding: str = "case",
    mode: str = "symmetric",
    quantize_activations: bool = True,
) -> ModelGraph:
    """Quantized view of ``model`` under ``config``; the input is not modified."""
    return Quantizer(model, scales, rounding, mode, quantize_activations).apply(config)


def compute_scales(
    model: ModelGraph,
    calib: Iterable[Batch] | Batch,
    percentile: float = 99.999,
    calibration_bits: int = 8,
    granularity: str = "per-channel",
    rounding: str = "case",
    mode: str = "symmetric",
) -> ScaleSet:
    """Weight scales, then activation scales observed with quantized weights.

    Activation scales are calibrated once, with every weighted layer at
    ``calibration_bits``, and reused for every candidate configuration.
    """
    wscales = {layer.id: weight_scales(layer.weights, granularity) for layer in model.weighted_layers()}
    provisional = ScaleSet({k: LayerScales(v, 1.0, calibration_bits) for k, v in wscales.items()})
    quantizer = Quantizer(model, provisional, rounding, mode, quantize_activations=False)
    qmodel = quantizer.apply(QuantConfig.uniform(wscales, calibration_bits))
    act = calibrate_activation_scale(qmodel, calib, percentile)
    return ScaleSet({k: LayerScales(wscales[k], act[k], calibration_bits) for k in wscales})
