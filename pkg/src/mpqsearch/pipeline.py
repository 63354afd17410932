"""End-to-end search: warm-up, alternating search, derive, retrain from scratch, evaluate."""
from __future__ import annotations

import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .artifacts import TraceWriter, save_checkpoint, write_json
from .autodiff import Tensor
from .bilevel import AdamW, BilevelSearch, alternation_schedule, clip_grad_norm, zero_grads
from .config import RunConfig
from .data import DatasetSplit, batches, load_or_generate
from .errors import ConfigError, DivergenceError
from .models import GroupedModel, accuracy, build_from_spec, full_precision
from .objectives import mb, size_band, training_loss
from .quantization import PASSTHROUGH_BITS, QuantCache, fake_quantize_layer
from .supernet import (RelaxedSelection, assignment_size_bits, derive_assignment, export_assignment,
                       init_beta, temperature)

log = logging.getLogger(__name__)

MAX_NONFINITE = 3


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named purpose (init, data, gumbel, ...) of a run."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


def _derive_int(seed: int, name: str) -> int:
    return int(rng_stream(seed, name).integers(0, 2 ** 31 - 1))


def load_data(config: RunConfig) -> DatasetSplit:
    d = config.data
    return load_or_generate(d.cache, d.n, d.input_dim, d.classes, d.difficulty,
                            _derive_int(config.schedule.seed, "data"))


def model_spec(config: RunConfig, data: DatasetSplit) -> dict[str, Any]:
    m = config.model
    if m.kind == "mlp":
        return dict(kind="mlp", input_dim=data.input_dim, hidden_dims=list(m.hidden_dims), classes=data.classes,
                    groups=m.groups, act_bits=m.act_bits)
    return dict(kind="transformer", input_dim=data.input_dim, seq_len=m.seq_len, d_model=m.d_model,
                heads=m.heads, ff_dim=m.ff_dim, classes=data.classes, groups=m.groups, act_bits=m.act_bits)


def steps_per_epoch(config: RunConfig, data: DatasetSplit) -> int:
    s = config.schedule
    return s.steps_per_epoch or max(1, len(data.train[1]) // s.batch_size)


def search_steps(config: RunConfig, data: DatasetSplit) -> int:
    s = config.schedule
    return s.search_steps if s.search_steps is not None else s.epochs * steps_per_epoch(config, data)


def fixed_weight_fn(model: GroupedModel, assignment: dict[tuple[int, int], int], cache: QuantCache | None):
    """Weight hook quantizing every group at its assigned bit-width (STE backward)."""
    per_layer = []
    for i, layer in enumerate(model.layers):
        bits = np.array([assignment[(i, g)] for g in range(layer.groups)])
        choices = sorted(set(bits.tolist()))
        one_hot = (bits[:, None] == np.array(choices)[None, :]).astype(np.float64)
        per_layer.append((choices, one_hot))

    def fn(layer_idx: int, w: Tensor) -> Tensor:
        choices, one_hot = per_layer[layer_idx]
        layer = model.layers[layer_idx]
        if len(choices) == 1:
            return fake_quantize_layer(w, choices[0], layer.groups, cache, layer_idx)
        cands = [fake_quantize_layer(w, b, layer.groups, cache, layer_idx) for b in choices]
        return ad.group_mix(Tensor(one_hot), cands, layer.group_size)

    return fn


def _check_assignment(model: GroupedModel, assignment: dict[tuple[int, int], int]) -> None:
    want = {(g.layer_id, g.group_id) for g in model.group_specs()}
    if set(assignment) != want:
        missing, extra = sorted(want - set(assignment)), sorted(set(assignment) - want)
        raise ConfigError(f"assignment does not match model groups (missing {missing[:5]}, extra {extra[:5]})")


@dataclass
class RetrainResult:
    model: GroupedModel
    test_accuracy: float
    size_bits: int
    losses: list[float] = field(default_factory=list)


def retrain(assignment: dict[tuple[int, int], int], config: RunConfig, data: DatasetSplit | None = None,
            trace: TraceWriter | None = None, first_step: int = 0, act_bits: int | None | str = "config",
            init_name: str = "retrain-init") -> RetrainResult:
    """Fresh weights trained at fixed per-group bits on train+val, evaluated on test."""
    data = data if data is not None else load_data(config)
    spec = model_spec(config, data)
    if act_bits != "config":
        spec["act_bits"] = act_bits
    seed = config.schedule.seed
    model = build_from_spec(spec, _derive_int(seed, init_name))
    _check_assignment(model, assignment)
    cache = QuantCache(config.schedule.scale_refresh_steps)
    weight_fn = fixed_weight_fn(model, assignment, cache)
    params = model.parameters()
    opt = AdamW(params, lr=config.optim.weight_lr, eps=config.optim.adam_eps,
                weight_decay=config.optim.weight_decay)
    x_pool, y_pool = data.pool()
    stream = batches(x_pool, y_pool, config.schedule.batch_size, rng_stream(seed, "retrain-data"))
    size = assignment_size_bits(assignment, model.group_specs())
    losses = []
    for i in range(config.schedule.retrain_steps):
        cache.maybe_refresh(i, [l.weight.data for l in model.layers], [l.groups for l in model.layers])
        xb, yb = next(stream)
        loss = training_loss(model.forward(xb, weight_fn), yb)
        value = loss.item()
        losses.append(value)
        if trace is not None:
            trace.add(first_step + i, "retrain", value, None, value, 0.0, float(size), float(size), None)
        if not math.isfinite(value):
            continue
        ad.backward(loss)
        clip_grad_norm(params, config.optim.clip_norm)
        opt.step()
        zero_grads(params)
    cache.refresh([l.weight.data for l in model.layers], [l.groups for l in model.layers])
    acc = accuracy(model, *data.test, weight_fn=weight_fn)
    return RetrainResult(model, acc, size, losses)


def passthrough_assignment(model_or_groups) -> dict[tuple[int, int], int]:
    groups = model_or_groups.group_specs() if isinstance(model_or_groups, GroupedModel) else model_or_groups
    return {(g.layer_id, g.group_id): PASSTHROUGH_BITS for g in groups}


def train_baseline(config: RunConfig, data: DatasetSplit | None = None) -> float:
    """Full-precision reference: same recipe as ``retrain`` with every group unquantized."""
    data = data if data is not None else load_data(config)
    probe = build_from_spec(model_spec(config, data), 0)
    return retrain(passthrough_assignment(probe), config, data, act_bits=None).test_accuracy


@dataclass
class RunArtifacts:
    trace: TraceWriter
    assignment: dict[tuple[int, int], int]
    report: dict[str, Any]
    search: BilevelSearch
    last_selection: RelaxedSelection | None = None
    paths: dict[str, Path] = field(default_factory=dict)


def _checkpoint_arrays(search: BilevelSearch, selection: RelaxedSelection | None,
                       beta_at_record: list[np.ndarray] | None) -> dict[str, np.ndarray]:
    arrays = {name: t.data for name, t in search.model.named_parameters().items()}
    for i, b in enumerate(search.state.beta):
        arrays[f"beta.{i}"] = b.data
    arrays["frozen_mask"] = search.state.frozen_mask.astype(np.float64)
    if selection is not None:
        for i, o in enumerate(selection.O):
            arrays[f"record.O.{i}"] = o.data
        arrays["record.frozen_mask"] = selection.frozen_mask.astype(np.float64)
    if beta_at_record is not None:
        for i, b in enumerate(beta_at_record):
            arrays[f"record.beta.{i}"] = b
    return arrays


def run_search(config: RunConfig, out_dir: str | Path | None = None) -> RunArtifacts:
    config.validate()
    s = config.schedule
    seed = s.seed
    data = load_data(config)
    spec = model_spec(config, data)
    model = build_from_spec(spec, _derive_int(seed, "init"))
    groups = model.group_specs()
    state = init_beta(len(model.layers), model.groups_per_layer, len(config.candidate_bits),
                      rng_stream(seed, "beta-init"), config.candidate_bits)
    target = config.objective.resolve_target(model.searched_param_count())
    search = BilevelSearch(model, state, config.objective, target, config.optim, rng_stream(seed, "gumbel"),
                           QuantCache(s.scale_refresh_steps))
    unfreeze_rng = rng_stream(seed, "beta-unfreeze")
    train_stream = batches(*data.train, s.batch_size, rng_stream(seed, "train-batches"))
    val_stream = batches(*data.val, s.batch_size, rng_stream(seed, "val-batches"))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    trace = TraceWriter()
    total = search_steps(config, data)
    per_epoch = steps_per_epoch(config, data)
    last_sel: RelaxedSelection | None = None
    beta_at_record: list[np.ndarray] | None = None
    bad = 0
    meta = dict(config=config.to_dict(), model=spec, target_bits=target, candidate_bits=config.candidate_bits)

    def dump_checkpoint(step: int, name: str = "search.mqck") -> None:
        if out is not None:
            save_checkpoint(out / name, _checkpoint_arrays(search, last_sel, beta_at_record),
                            dict(meta, step=step))

    for step in range(total):
        epoch = step // per_epoch
        t = temperature(epoch, s)
        action = alternation_schedule(step, len(model.layers), s)
        if action.kind == "unfreeze":
            state.unfreeze(action.layer, unfreeze_rng)
            log.info("step %d: unfroze layer %d", step, action.layer)
            continue
        search.refresh_scales(step)
        snapshot = [b.data.copy() for b in state.beta]
        if action.kind == "arch" and epoch >= s.n1 and state.any_unfrozen():
            xv, yv = next(val_stream)
            tb = next(train_stream) if config.optim.mode == "unrolled" else None
            rec = search.arch_step(xv, yv, t, train_batch=tb)
        else:
            xb, yb = next(train_stream)
            rec = search.weight_step(xb, yb, t, phase="warmup" if step < s.warmup_steps else "weight")
        last_sel, beta_at_record = rec.selection, snapshot
        trace.add(step, rec.phase, rec.loss_train, rec.loss_val, rec.ce, rec.size_term, rec.c_actual,
                  rec.c_expected, t)
        bad = 0 if rec.finite else bad + 1
        if bad >= MAX_NONFINITE:
            if out is not None:
                trace.write(out / "trace.csv")
                dump_checkpoint(step)
            raise DivergenceError(f"non-finite loss for {bad} consecutive steps (last step {step})")

    assignment = derive_assignment(state)
    size = assignment_size_bits(assignment, groups)
    dump_checkpoint(total - 1)
    result = retrain(assignment, config, data, trace=trace, first_step=total)
    report = {
        "seed": seed,
        "search_steps": total,
        "target_bits": target,
        "epsilon": config.objective.epsilon,
        "size_bits": size,
        "size_mb": mb(size),
        "full_precision_bits": 32 * model.searched_param_count(),
        "band": size_band(size, target, config.objective.epsilon),
        "test_accuracy": result.test_accuracy,
        "pruned_groups": sum(1 for b in assignment.values() if b == 0),
        "bits_histogram": {str(b): sum(1 for v in assignment.values() if v == b) for b in config.candidate_bits},
    }
    if config.baseline:
        report["baseline_accuracy"] = train_baseline(config, data)
    artifacts = RunArtifacts(trace, assignment, report, search, last_sel)
    if out is not None:
        trace.write(out / "trace.csv")
        (out / "assignment.json").write_text(export_assignment(assignment, groups))
        write_json(out / "report.json", report)
        arrays = {name: t.data for name, t in result.model.named_parameters().items()}
        save_checkpoint(out / "final.mqck", arrays,
                        dict(meta, assignment=[[l, g, b] for (l, g), b in sorted(assignment.items())],
                             init="retrain"))
        artifacts.paths = {k: out / v for k, v in (("trace", "trace.csv"), ("assignment", "assignment.json"),
                                                   ("report", "report.json"), ("checkpoint", "search.mqck"),
                                                   ("final", "final.mqck"))}
    return artifacts
