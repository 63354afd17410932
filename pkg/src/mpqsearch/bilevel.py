"""Alternating weight / architecture optimisation of the supernet."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import OptimConfig, SearchSchedule, SizeObjectiveConfig
from .models import GroupedModel
from .objectives import actual_size, expected_size, size_loss, training_loss, validation_terms
from .quantization import QuantCache
from .supernet import BitAssignmentState, RelaxedSelection, mixed_forward, sample_selection

log = logging.getLogger(__name__)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            m *= b1
            m += (1 - b1) * p.grad
            v *= b2
            v += (1 - b2) * p.grad ** 2
            if self.lr == 0:
                continue
            p.data = p.data * (1 - self.lr * self.weight_decay) - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adamw.t": np.array([self.t], dtype=np.float64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adamw.m.{i}"] = m
            out[f"adamw.v.{i}"] = v
        return out


class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float = 0.1):
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data = p.data - self.lr * p.grad


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float((g ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None


class Action(NamedTuple):
    kind: str  # "weight" | "arch" | "unfreeze"
    layer: int | None = None


def alternation_schedule(step: int, n_layers: int, schedule: SearchSchedule) -> Action:
    """Step-level schedule: weight-only warm-up, then one block per layer unfreeze.

    The first step of each of the first ``n_layers`` blocks unfreezes the next
    layer; the remaining block steps cycle ``weight_steps`` weight updates then
    ``arch_steps`` architecture updates, counted from the block start.
    """
    if step < schedule.warmup_steps:
        return Action("weight")
    offset = step - schedule.warmup_steps
    block, pos = divmod(offset, schedule.block_steps)
    if pos == 0 and block < n_layers:
        return Action("unfreeze", block)
    cycle = schedule.weight_steps + schedule.arch_steps
    return Action("weight") if pos % cycle < schedule.weight_steps else Action("arch")


@dataclass
class StepRecord:
    phase: str
    loss_train: float | None
    loss_val: float | None
    ce: float
    size_term: float
    c_actual: float
    c_expected: float
    temperature: float
    selection: RelaxedSelection | None = None
    finite: bool = True


class BilevelSearch:
    """Owns the model weights, the bit-assignment state and both optimisers."""

    def __init__(self, model: GroupedModel, state: BitAssignmentState, objective: SizeObjectiveConfig,
                 target_bits: float, optim: OptimConfig, gumbel_rng: np.random.Generator,
                 cache: QuantCache | None = None):
        self.model = model
        self.state = state
        self.objective = objective
        self.target = target_bits
        self.optim_cfg = optim
        self.rng = gumbel_rng
        self.cache = cache if cache is not None else QuantCache(0)
        self.groups = model.group_specs()
        self.weights = model.parameters()
        self.weight_opt = AdamW(self.weights, lr=optim.weight_lr, eps=optim.adam_eps,
                                weight_decay=optim.weight_decay)
        self.arch_opt = SGD(state.beta, lr=optim.arch_lr)

    # -- helpers ----------------------------------------------------------
    def refresh_scales(self, step: int) -> None:
        self.cache.maybe_refresh(step, [l.weight.data for l in self.model.layers],
                                 [l.groups for l in self.model.layers])

    def weight_fn(self, selection: RelaxedSelection):
        groups = self.model.groups_per_layer

        def fn(layer: int, w: Tensor) -> Tensor:
            return mixed_forward(w, layer, groups, self.state, selection, self.cache)

        return fn

    def sample(self, t: float, differentiable: bool) -> RelaxedSelection:
        return sample_selection(self.state, t, self.rng, differentiable=differentiable)

    def _size_numbers(self, selection: RelaxedSelection) -> tuple[float, float, float]:
        c_actual = actual_size(selection, self.groups, self.state.candidate_bits)
        c_exp = expected_size(self.state, self.groups)
        penalty, _ = size_loss(c_actual, Tensor(c_exp.data), self.target, self.objective)
        return c_actual, c_exp.item(), self.objective.penalty_weight * penalty.item()

    def _diagnostics(self) -> str:
        norms = ", ".join(f"L{i}={np.linalg.norm(l.weight.data):.3g}" for i, l in enumerate(self.model.layers))
        return f"weight norms: {norms}"

    # -- lower level --------------------------------------------------------
    def weight_step(self, x: np.ndarray, y: np.ndarray, t: float, phase: str = "weight") -> StepRecord:
        selection = self.sample(t, differentiable=False)
        logits = self.model.forward(x, self.weight_fn(selection))
        loss = training_loss(logits, y)
        c_actual, c_exp, size_term = self._size_numbers(selection)
        value = loss.item()
        if not math.isfinite(value):
            log.warning("non-finite training loss %s; step skipped (%s)", value, self._diagnostics())
            return StepRecord(phase, value, None, value, size_term, c_actual, c_exp, t, selection, finite=False)
        ad.backward(loss)
        clip_grad_norm(self.weights, self.optim_cfg.clip_norm)
        self.weight_opt.step()
        zero_grads(self.weights)
        return StepRecord(phase, value, None, value, size_term, c_actual, c_exp, t, selection)

    # -- upper level --------------------------------------------------------
    def arch_gradients(self, x_val: np.ndarray, y_val: np.ndarray, t: float, mode: str | None = None,
                       train_batch: tuple[np.ndarray, np.ndarray] | None = None,
                       selection: RelaxedSelection | None = None):
        """Populate ``beta.grad`` with the validation-loss hypergradient; weights end unchanged.

        ``unrolled`` evaluates the validation gradient at ``w - xi * dL_train/dw``
        (one look-ahead step, no second-order correction) and then restores ``w``.
        """
        mode = mode or self.optim_cfg.mode
        if selection is None:
            selection = self.sample(t, differentiable=True)
        saved = None
        if mode == "unrolled":
            if train_batch is None:
                raise ValueError("unrolled mode needs a training batch")
            frozen_sel = RelaxedSelection([Tensor(o.data) for o in selection.O], selection.temperature,
                                          selection.gumbel, selection.frozen_mask)
            xt, yt = train_batch
            lt = training_loss(self.model.forward(xt, self.weight_fn(frozen_sel)), yt)
            ad.backward(lt)
            saved = [w.data for w in self.weights]
            xi = self.optim_cfg.unroll_rate
            for w in self.weights:
                if w.grad is not None:
                    w.data = w.data - xi * w.grad
            zero_grads(self.weights)
        elif mode != "first_order":
            raise ValueError(f"unknown arch mode {mode!r}")
        try:
            logits = self.model.forward(x_val, self.weight_fn(selection))
            terms = validation_terms(logits, y_val, self.state, selection, self.groups, self.objective, self.target)
            if math.isfinite(terms.loss.item()):
                ad.backward(terms.loss)
        finally:
            if saved is not None:
                for w, data in zip(self.weights, saved):
                    w.data = data
            zero_grads(self.weights)
        return terms, selection

    def arch_step(self, x_val: np.ndarray, y_val: np.ndarray, t: float, mode: str | None = None,
                  train_batch: tuple[np.ndarray, np.ndarray] | None = None) -> StepRecord | None:
        if not self.state.any_unfrozen():
            log.warning("arch_step with every group frozen; nothing to update")
            return None
        zero_grads(self.state.beta)
        terms, selection = self.arch_gradients(x_val, y_val, t, mode, train_batch)
        value = terms.loss.item()
        rep = terms.report
        record = StepRecord("arch", None, value, terms.ce.item(), terms.size_term.item(), rep.actual_C,
                            rep.expected_C, t, selection, finite=math.isfinite(value))
        if not record.finite:
            log.warning("non-finite validation loss %s; arch step skipped (%s)", value, self._diagnostics())
            zero_grads(self.state.beta)
            return record
        clip_grad_norm(self.state.beta, self.optim_cfg.clip_norm)
        self.arch_opt.step()
        zero_grads(self.state.beta)
        return record
