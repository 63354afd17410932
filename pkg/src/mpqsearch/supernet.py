"""Bit-assignment logits, Gumbel-softmax relaxation and the mixed-precision weight."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import SearchSchedule
from .errors import ContractError, DimensionError
from .quantization import WARMUP_BITS, GroupSpec, QuantCache, fake_quantize_layer

BETA_INIT_SCALE = 0.01
_U_EPS = np.finfo(np.float64).tiny


@dataclass
class BitAssignmentState:
    candidate_bits: list[int]
    beta: list[Tensor]  # one (groups, K) logit matrix per searched layer
    frozen_mask: np.ndarray  # (layers, groups) bool, True until the layer is unfrozen

    def __post_init__(self):
        if len(self.candidate_bits) < 2:
            raise ContractError("need at least two candidate bit-widths")
        for b in self.beta:
            if b.shape[-1] != len(self.candidate_bits):
                raise DimensionError(f"beta width {b.shape[-1]} != {len(self.candidate_bits)} candidates")

    @property
    def K(self) -> int:
        return len(self.candidate_bits)

    @property
    def n_layers(self) -> int:
        return len(self.beta)

    def probabilities(self, layer: int) -> np.ndarray:
        return ad._softmax_np(self.beta[layer].data)

    def layer_frozen(self, layer: int) -> bool:
        return bool(self.frozen_mask[layer].all())

    def any_unfrozen(self) -> bool:
        return not bool(self.frozen_mask.all())

    def reinit_layer(self, layer: int, rng: np.random.Generator) -> None:
        shape = self.beta[layer].shape
        self.beta[layer].data = BETA_INIT_SCALE * rng.standard_normal(shape)

    def unfreeze(self, layer: int, rng: np.random.Generator) -> None:
        self.reinit_layer(layer, rng)
        self.frozen_mask[layer] = False


def init_beta(layers: int, groups: int, K: int, seed: int | np.random.Generator,
              candidate_bits: Sequence[int] | None = None) -> BitAssignmentState:
    if layers < 1 or groups < 1 or K < 2:
        raise ContractError(f"init_beta: invalid dimensions layers={layers} groups={groups} K={K}")
    bits = list(candidate_bits) if candidate_bits is not None else list(range(K))
    if len(bits) != K:
        raise DimensionError(f"{len(bits)} candidate bits for K={K}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    beta = [Tensor(BETA_INIT_SCALE * rng.standard_normal((groups, K)), requires_grad=True)
            for _ in range(layers)]
    return BitAssignmentState(bits, beta, np.ones((layers, groups), dtype=bool))


def sample_gumbel(shape, rng: np.random.Generator) -> np.ndarray:
    u = np.clip(rng.random(shape), _U_EPS, 1.0 - 1e-16)
    return -np.log(-np.log(u))


def gumbel_softmax(beta, t: float, rng: np.random.Generator | None = None,
                   gumbel: np.ndarray | None = None) -> Tensor:
    """Relaxed one-hot sample ``softmax((beta + g) / t)`` along the last axis.

    ``beta`` are unnormalised log-probabilities. Pass ``gumbel`` to fix the
    noise (zeros give the deterministic tempered softmax).
    """
    if not t > 0:
        raise ContractError(f"temperature must be positive, got {t}")
    beta = beta if isinstance(beta, Tensor) else Tensor(beta)
    if gumbel is None:
        if rng is None:
            raise ContractError("gumbel_softmax needs an rng or explicit gumbel noise")
        gumbel = sample_gumbel(beta.shape, rng)
    return ad.row_softmax((beta + Tensor(gumbel)) * (1.0 / t))


@dataclass
class RelaxedSelection:
    O: list[Tensor]  # (groups, K) per layer; frozen rows are ignored downstream
    temperature: float
    gumbel: list[np.ndarray]
    frozen_mask: np.ndarray = field(default=None)


def sample_selection(state: BitAssignmentState, t: float, rng: np.random.Generator | None,
                     differentiable: bool = True, zero_noise: bool = False) -> RelaxedSelection:
    """One Gumbel-softmax draw per (layer, group), independent across groups."""
    O, draws = [], []
    for beta in state.beta:
        g = np.zeros(beta.shape) if zero_noise else sample_gumbel(beta.shape, rng)
        src = beta if differentiable else Tensor(beta.data)
        O.append(gumbel_softmax(src, t, gumbel=g))
        draws.append(g)
    return RelaxedSelection(O, t, draws, state.frozen_mask.copy())


def fixed_selection(one_hot: Sequence[np.ndarray], frozen_mask: np.ndarray | None = None) -> RelaxedSelection:
    """Selection with given (constant) mixture rows; a test hook for degenerate mixtures."""
    O = [Tensor(np.asarray(o, dtype=np.float64)) for o in one_hot]
    mask = np.zeros((len(O), O[0].shape[0]), dtype=bool) if frozen_mask is None else frozen_mask
    return RelaxedSelection(O, 1.0, [np.zeros(o.shape) for o in O], mask)


def temperature(epoch: int, schedule: SearchSchedule) -> float:
    if epoch <= schedule.n0:
        return schedule.t0
    return schedule.t0 * math.exp(-schedule.eta * (epoch - schedule.n0))


def mixed_forward(weight: Tensor, layer: int, groups: int, state: BitAssignmentState,
                  selection: RelaxedSelection, cache: QuantCache) -> Tensor:
    """Effective weight of one grouped layer under the relaxed bit assignment."""
    frozen = selection.frozen_mask[layer]
    if frozen.all():
        return fake_quantize_layer(weight, WARMUP_BITS, groups, cache, layer)
    candidates = [fake_quantize_layer(weight, b, groups, cache, layer) for b in state.candidate_bits]
    frozen_value = fake_quantize_layer(weight, WARMUP_BITS, groups, cache, layer) if frozen.any() else None
    return ad.group_mix(selection.O[layer], candidates, weight.shape[1] // groups, frozen, frozen_value)


def derive_assignment(state: BitAssignmentState) -> dict[tuple[int, int], int]:
    """Most probable bit-width per group; exact ties go to the smaller bit-width."""
    bits = np.asarray(state.candidate_bits)
    out = {}
    for layer, beta in enumerate(state.beta):
        logits = beta.data
        for g in range(logits.shape[0]):
            best = np.flatnonzero(logits[g] == logits[g].max())
            out[(layer, g)] = int(bits[best].min())
    return out


def assignment_size_bits(assignment: dict[tuple[int, int], int], groups: Sequence[GroupSpec]) -> int:
    return sum(g.param_count * assignment[(g.layer_id, g.group_id)] for g in groups)


def export_assignment(assignment: dict[tuple[int, int], int], groups: Sequence[GroupSpec]) -> str:
    entries = [{"layer_id": l, "group_id": g, "bits": int(assignment[(l, g)])}
               for l, g in sorted(assignment)]
    payload = {"groups": entries, "total_size_bits": assignment_size_bits(assignment, groups)}
    return json.dumps(payload, indent=2) + "\n"


def import_assignment(text: str) -> dict[tuple[int, int], int]:
    payload = json.loads(text)
    return {(int(e["layer_id"]), int(e["group_id"])): int(e["bits"]) for e in payload["groups"]}
