"""Size accounting and the training / validation losses."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import BITS_PER_MB, SizeObjectiveConfig
from .quantization import WARMUP_BITS, GroupSpec
from .supernet import BitAssignmentState, RelaxedSelection

BELOW, INSIDE, ABOVE = "below", "inside", "above"


@dataclass
class SizeReport:
    actual_C: float
    expected_C: float
    band: str
    loss_value: float


def layer_param_counts(groups: Sequence[GroupSpec]) -> list[np.ndarray]:
    n_layers = max(g.layer_id for g in groups) + 1
    counts: list[list[int]] = [[] for _ in range(n_layers)]
    for g in sorted(groups, key=lambda s: (s.layer_id, s.group_id)):
        counts[g.layer_id].append(g.param_count)
    return [np.asarray(c, dtype=np.float64) for c in counts]


def actual_size(selection: RelaxedSelection | dict, groups: Sequence[GroupSpec],
                candidate_bits: Sequence[int] | None = None) -> float:
    """Size in bits of a relaxed selection (mixture over candidates) or a discrete assignment.

    Frozen groups of a relaxed selection count at the warm-up precision.
    """
    if isinstance(selection, dict):
        return float(sum(g.param_count * selection[(g.layer_id, g.group_id)] for g in groups))
    bits = np.asarray(candidate_bits, dtype=np.float64)
    total = 0.0
    for layer, counts in enumerate(layer_param_counts(groups)):
        per_group = selection.O[layer].data @ bits
        frozen = selection.frozen_mask[layer]
        per_group = np.where(frozen, WARMUP_BITS, per_group)
        total += float(counts @ per_group)
    return total


def expected_size(state: BitAssignmentState, groups: Sequence[GroupSpec]) -> Tensor:
    """Sum over groups of param_count * E_p[bits], p = softmax(beta); differentiable in beta."""
    bits = np.asarray(state.candidate_bits, dtype=np.float64)
    total: Tensor | None = None
    const = 0.0
    for layer, counts in enumerate(layer_param_counts(groups)):
        frozen = state.frozen_mask[layer]
        const += float(counts[frozen].sum() * WARMUP_BITS)
        if frozen.all():
            continue
        cost = np.outer(np.where(frozen, 0.0, counts), bits)
        term = ad.sum(ad.row_softmax(state.beta[layer]) * Tensor(cost))
        total = term if total is None else total + term
    if total is None:
        return Tensor(const)
    return total + const if const else total


def size_band(actual_C: float, target: float, epsilon: float) -> str:
    if actual_C > (1 + epsilon) * target:
        return ABOVE
    if actual_C < (1 - epsilon) * target:
        return BELOW
    return INSIDE


def size_loss(actual_C: float, expected_C: Tensor, target: float, config: SizeObjectiveConfig) -> tuple[Tensor, str]:
    """Piecewise size penalty: band chosen by the actual size, magnitude from log of the expected size."""
    band = size_band(actual_C, target, config.epsilon)
    if band == INSIDE:
        return Tensor(0.0), band
    # all mass on 0-bit: fall back to log(E + 1), which is 0 at E = 0
    logged = ad.log(expected_C) if expected_C.item() > 0 else ad.log(expected_C + 1.0)
    return (logged if band == ABOVE else -logged), band


def training_loss(logits: Tensor, labels) -> Tensor:
    return ad.softmax_cross_entropy(logits, labels)


@dataclass
class ValidationTerms:
    loss: Tensor
    ce: Tensor
    size_term: Tensor  # already multiplied by lambda
    report: SizeReport


def validation_terms(logits: Tensor, labels, state: BitAssignmentState, selection: RelaxedSelection,
                     groups: Sequence[GroupSpec], config: SizeObjectiveConfig, target: float) -> ValidationTerms:
    ce = ad.softmax_cross_entropy(logits, labels)
    c_actual = actual_size(selection, groups, state.candidate_bits)
    c_expected = expected_size(state, groups)
    penalty, band = size_loss(c_actual, c_expected, target, config)
    size_term = penalty * config.penalty_weight
    loss = ce + size_term if config.penalty_weight else ce
    report = SizeReport(c_actual, c_expected.item(), band, penalty.item())
    return ValidationTerms(loss, ce, size_term, report)


def validation_loss(logits: Tensor, labels, state: BitAssignmentState, selection: RelaxedSelection,
                    groups: Sequence[GroupSpec], config: SizeObjectiveConfig, target: float) -> Tensor:
    return validation_terms(logits, labels, state, selection, groups, config, target).loss


def mb(bits: float) -> float:
    return bits / BITS_PER_MB
