"""Uniform min/max fake quantization of weight sub-groups with straight-through gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tensor, custom_grad_node
from .errors import ConfigError, ContractError, DimensionError, InvariantError

DEGENERATE_RANGE = 1e-12
# bit-widths at or above this are treated as full-precision passthrough
PASSTHROUGH_BITS = 32
WARMUP_BITS = 8


@dataclass(frozen=True)
class GroupSpec:
    layer_id: int
    group_id: int
    col_start: int
    col_stop: int
    rows: int

    @property
    def param_count(self) -> int:
        return self.rows * (self.col_stop - self.col_start)


@dataclass(frozen=True)
class QuantParams:
    bits: int
    min_a: float
    max_a: float
    scale: float | None  # None marks a degenerate (constant) slice

    @property
    def degenerate(self) -> bool:
        return self.scale is None

    @property
    def levels(self) -> int:
        return 2 ** self.bits - 1


def compute_scale(a, bits: int) -> QuantParams:
    a = np.asarray(a, dtype=np.float64)
    if a.size == 0:
        raise ContractError("compute_scale on an empty slice")
    if bits <= 0:
        raise ContractError(f"compute_scale needs bits >= 1, got {bits}; 0-bit groups have no scale")
    lo, hi = float(a.min()), float(a.max())
    if hi - lo < DEGENERATE_RANGE:
        return QuantParams(bits, lo, hi, None)
    return QuantParams(bits, lo, hi, (2 ** bits - 1) / (hi - lo))


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_code(a, params: QuantParams) -> np.ndarray:
    """Integer code(s) for ``a``; values outside the stored range are clamped first."""
    if params.degenerate or params.bits < 1:
        raise ContractError("quantize_code needs non-degenerate params with bits >= 1")
    a = np.clip(np.asarray(a, dtype=np.float64), params.min_a, params.max_a)
    code = _round_half_away(params.scale * (a - params.min_a))
    return np.clip(code, 0, params.levels).astype(np.int64)


def dequantize(code, params: QuantParams) -> np.ndarray:
    code = np.asarray(code)
    if params.degenerate:
        return np.full(code.shape, params.min_a)
    if np.any(code < 0) or np.any(code > params.levels):
        raise ContractError(f"code outside [0, {params.levels}]")
    return code / params.scale + params.min_a


def check_bits(bits: int, allowed: Iterable[int] | None = None) -> None:
    if allowed is not None:
        ok = bits in set(allowed) or bits >= PASSTHROUGH_BITS or bits == WARMUP_BITS
    else:
        ok = 0 <= bits <= 16 or bits >= PASSTHROUGH_BITS
    if not ok:
        raise ConfigError(f"bit-width {bits} not in candidate set {sorted(allowed) if allowed else '0..16'}")


def fake_quantize_group(w: Tensor, bits: int, params: QuantParams | None = None,
                        allowed: Iterable[int] | None = None) -> Tensor:
    """Quantize-dequantize ``w`` in the forward pass; identity gradient in the backward pass.

    ``bits == 0`` prunes the slice: the output is a constant zero tensor, so no
    gradient reaches ``w`` through this branch.
    """
    check_bits(bits, allowed)
    if bits == 0:
        return Tensor(np.zeros(w.shape))
    if bits >= PASSTHROUGH_BITS:
        return custom_grad_node(w.data, w)
    if params is None:
        params = compute_scale(w.data, bits)
    elif params.bits != bits:
        raise InvariantError(f"scale computed for {params.bits} bits used at {bits} bits")
    if params.degenerate:
        return custom_grad_node(np.full(w.shape, params.min_a), w)
    return custom_grad_node(dequantize(quantize_code(w.data, params), params), w)


def group_size_bits(spec: GroupSpec, bits: int) -> int:
    return spec.param_count * bits


def fake_quantize_columns(w: np.ndarray, bits: int, mins: np.ndarray, maxs: np.ndarray) -> np.ndarray:
    """Vectorized fake quantization of ``G`` equal column groups of ``w`` (forward values only).

    ``mins``/``maxs`` hold the (possibly stale) per-group ranges; weights are
    clamped into them before coding. Degenerate groups dequantize to their min.
    """
    rows, cols = w.shape
    G = len(mins)
    if cols % G:
        raise DimensionError(f"{cols} columns do not split into {G} groups")
    if bits == 0:
        return np.zeros_like(w)
    if bits >= PASSTHROUGH_BITS:
        return w.copy()
    blocks = w.reshape(rows, G, cols // G)
    lo = mins[None, :, None]
    hi = maxs[None, :, None]
    span = hi - lo
    degenerate = span < DEGENERATE_RANGE
    scale = np.where(degenerate, 1.0, (2 ** bits - 1) / np.where(degenerate, 1.0, span))
    x = scale * (np.clip(blocks, lo, hi) - lo)
    code = np.clip(np.floor(x + 0.5), 0, 2 ** bits - 1)  # x >= 0, so this rounds half away from zero
    out = np.where(degenerate, lo, code / scale + lo)
    return out.reshape(rows, cols)


def column_group_ranges(w: np.ndarray, groups: int) -> tuple[np.ndarray, np.ndarray]:
    rows, cols = w.shape
    blocks = w.reshape(rows, groups, cols // groups)
    return blocks.min(axis=(0, 2)), blocks.max(axis=(0, 2))


class QuantCache:
    """Per-layer group ranges, refreshed every ``refresh_steps`` steps.

    Between refreshes the stored ranges go stale and weights that drift
    outside them are clamped.
    """

    def __init__(self, refresh_steps: int = 100):
        self.refresh_steps = refresh_steps
        self.ranges: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.last_refresh: int | None = None

    def maybe_refresh(self, step: int, weights: Sequence[np.ndarray], groups: Sequence[int]) -> bool:
        due = (self.last_refresh is None or self.refresh_steps <= 0
               or step - self.last_refresh >= self.refresh_steps)
        if due:
            self.refresh(weights, groups)
            self.last_refresh = step
        return due

    def refresh(self, weights: Sequence[np.ndarray], groups: Sequence[int]) -> None:
        self.ranges = {i: column_group_ranges(w, g) for i, (w, g) in enumerate(zip(weights, groups))}

    def get(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        try:
            return self.ranges[layer]
        except KeyError:
            raise InvariantError(f"no quantization ranges cached for layer {layer}") from None

    def params(self, layer: int, group: int, bits: int) -> QuantParams:
        lo, hi = self.get(layer)
        span = hi[group] - lo[group]
        scale = None if span < DEGENERATE_RANGE else (2 ** bits - 1) / span
        return QuantParams(bits, float(lo[group]), float(hi[group]), scale)


def fake_quantize_layer(w: Tensor, bits: int, groups: int, cache: QuantCache | None = None,
                        layer: int = 0) -> Tensor:
    """STE fake quantization of a whole grouped weight matrix at a single bit-width."""
    if bits == 0:
        return Tensor(np.zeros(w.shape))
    if bits >= PASSTHROUGH_BITS:
        return custom_grad_node(w.data, w)
    lo, hi = cache.get(layer) if cache is not None else column_group_ranges(w.data, groups)
    return custom_grad_node(fake_quantize_columns(w.data, bits, lo, hi), w)


def fake_quantize_activation(x: Tensor, bits: int = WARMUP_BITS) -> Tensor:
    """Per-tensor dynamic-range fake quantization of activations (STE backward)."""
    lo, hi = float(x.data.min()), float(x.data.max())
    q = fake_quantize_columns(x.data.reshape(-1, 1), bits, np.array([lo]), np.array([hi]))
    return custom_grad_node(q.reshape(x.shape), x)
