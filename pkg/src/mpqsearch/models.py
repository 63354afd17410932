"""Desk-scale models whose dense layers are split into column groups for bit search.

A model's forward pass takes a ``weight_fn(layer_index, W) -> W_effective``
hook. The hook decides the precision regime: identity for full precision,
the relaxed mixture during search, or fixed per-group bits during retraining.
Only the grouped layers go through the hook; input projections, biases,
layer norms and the classifier head always stay full precision.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError
from .quantization import GroupSpec, fake_quantize_activation

WeightFn = Callable[[int, Tensor], Tensor]


def full_precision(_layer: int, w: Tensor) -> Tensor:
    return w


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class GroupedLinear:
    weight: Tensor
    bias: Tensor
    groups: int
    activation: str = "none"  # "relu" | "none"

    def __post_init__(self):
        if self.weight.shape[1] % self.groups:
            raise ConfigError(f"{self.weight.shape[1]} output columns not divisible by {self.groups} groups")

    @property
    def group_size(self) -> int:
        return self.weight.shape[1] // self.groups


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_rowvec(x @ w, b)


class GroupedModel:
    """Base class: named parameters, grouped layers, group specs."""

    kind = "base"

    def __init__(self):
        self.layers: list[GroupedLinear] = []
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.act_bits: int | None = None
        self.spec: dict = {}

    def _register(self, name: str, data: np.ndarray) -> Tensor:
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def _grouped(self, name: str, rng, fan_in: int, fan_out: int, groups: int, activation: str) -> GroupedLinear:
        if fan_out % groups:
            raise ConfigError(f"layer {name!r}: {fan_out} columns not divisible by G={groups}")
        w = self._register(f"{name}.weight", _he_uniform(rng, fan_in, fan_out))
        b = self._register(f"{name}.bias", np.zeros(fan_out))
        layer = GroupedLinear(w, b, groups, activation)
        self.layers.append(layer)
        return layer

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return self._params

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise DimensionError(f"missing parameter {name!r}")
            if arrays[name].shape != t.shape:
                raise DimensionError(f"parameter {name!r}: shape {arrays[name].shape} != {t.shape}")
            t.data = np.array(arrays[name], dtype=np.float64)

    def group_specs(self) -> list[GroupSpec]:
        specs = []
        for i, layer in enumerate(self.layers):
            rows, _ = layer.weight.shape
            s = layer.group_size
            specs += [GroupSpec(i, g, g * s, (g + 1) * s, rows) for g in range(layer.groups)]
        return specs

    @property
    def groups_per_layer(self) -> int:
        return self.layers[0].groups

    def searched_param_count(self) -> int:
        return int(sum(l.weight.size for l in self.layers))

    def param_count(self) -> int:
        return int(sum(t.size for t in self._params.values()))

    def _act(self, x: Tensor) -> Tensor:
        return fake_quantize_activation(x, self.act_bits) if self.act_bits else x

    def forward(self, x: np.ndarray, weight_fn: WeightFn = full_precision) -> Tensor:
        raise NotImplementedError


class MLP(GroupedModel):
    kind = "mlp"

    def __init__(self, input_dim: int, hidden_dims: list[int], classes: int, groups: int, seed: int,
                 act_bits: int | None = None):
        super().__init__()
        self.spec = dict(kind="mlp", input_dim=input_dim, hidden_dims=list(hidden_dims), classes=classes,
                         groups=groups, act_bits=act_bits)
        self.act_bits = act_bits
        rng = np.random.default_rng(seed)
        fan_in = input_dim
        for i, h in enumerate(hidden_dims):
            self._grouped(f"hidden{i}", rng, fan_in, h, groups, "relu")
            fan_in = h
        self.head_w = self._register("head.weight", _he_uniform(rng, fan_in, classes))
        self.head_b = self._register("head.bias", np.zeros(classes))

    def forward(self, x: np.ndarray, weight_fn: WeightFn = full_precision) -> Tensor:
        h = Tensor(x)
        for i, layer in enumerate(self.layers):
            h = ad.relu(_linear(h, weight_fn(i, layer.weight), layer.bias))
            h = self._act(h)
        return _linear(h, self.head_w, self.head_b)


def build_mlp(input_dim: int, hidden_dims: list[int], classes: int, G: int, seed: int,
              act_bits: int | None = None) -> MLP:
    for i, h in enumerate(hidden_dims):
        if h % G:
            raise ConfigError(f"hidden layer {i} width {h} is not divisible by G={G}")
    return MLP(input_dim, hidden_dims, classes, G, seed, act_bits)


class TinyTransformer(GroupedModel):
    """One post-norm self-attention encoder block over ``seq_len`` tokens, mean-pooled.

    Input rows of width ``seq_len * token_dim`` are read as token sequences.
    Tokens of the whole batch are stacked into one matrix; a block-diagonal
    additive mask keeps attention within each sequence.
    """

    kind = "transformer"

    def __init__(self, input_dim: int, seq_len: int, d_model: int, heads: int, ff_dim: int, classes: int,
                 groups: int, seed: int, act_bits: int | None = None):
        super().__init__()
        self.spec = dict(kind="transformer", input_dim=input_dim, seq_len=seq_len, d_model=d_model, heads=heads,
                         ff_dim=ff_dim, classes=classes, groups=groups, act_bits=act_bits)
        self.act_bits = act_bits
        self.seq_len = seq_len
        self.token_dim = input_dim // seq_len
        self.heads = heads
        self.d_model = d_model
        rng = np.random.default_rng(seed)
        self.in_w = self._register("embed.weight", _he_uniform(rng, self.token_dim, d_model))
        self.in_b = self._register("embed.bias", np.zeros(d_model))
        self.q = self._grouped("attn.q", rng, d_model, d_model, groups, "none")
        self.k = self._grouped("attn.k", rng, d_model, d_model, groups, "none")
        self.v = self._grouped("attn.v", rng, d_model, d_model, groups, "none")
        self.o = self._grouped("attn.o", rng, d_model, d_model, groups, "none")
        self.ln1_g = self._register("ln1.gain", np.ones(d_model))
        self.ln1_b = self._register("ln1.bias", np.zeros(d_model))
        self.ff1 = self._grouped("ff1", rng, d_model, ff_dim, groups, "relu")
        self.ff2 = self._grouped("ff2", rng, ff_dim, d_model, groups, "none")
        self.ln2_g = self._register("ln2.gain", np.ones(d_model))
        self.ln2_b = self._register("ln2.bias", np.zeros(d_model))
        self.head_w = self._register("head.weight", _he_uniform(rng, d_model, classes))
        self.head_b = self._register("head.bias", np.zeros(classes))
        self.last_attention: list[np.ndarray] = []

    def _masks(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        seq = np.repeat(np.arange(batch), self.seq_len)
        mask = np.where(seq[:, None] == seq[None, :], 0.0, -1e30)
        pool = (seq[None, :] == np.arange(batch)[:, None]) / self.seq_len
        return mask, pool

    def forward(self, x: np.ndarray, weight_fn: WeightFn = full_precision) -> Tensor:
        batch = x.shape[0]
        tokens = Tensor(x.reshape(batch * self.seq_len, self.token_dim))
        mask, pool = self._masks(batch)
        h = _linear(tokens, self.in_w, self.in_b)

        def dense(idx: int, inp: Tensor) -> Tensor:
            layer = self.layers[idx]
            return _linear(inp, weight_fn(idx, layer.weight), layer.bias)

        q, k, v = dense(0, h), dense(1, h), dense(2, h)
        dh = self.d_model // self.heads
        scale = 1.0 / math.sqrt(dh)
        heads, self.last_attention = [], []
        for i in range(self.heads):
            qs, ks, vs = (ad.slice_cols(t, i * dh, (i + 1) * dh) for t in (q, k, v))
            scores = (qs @ ad.transpose(ks)) * scale + Tensor(mask)
            attn = ad.row_softmax(scores)
            self.last_attention.append(attn.data)
            heads.append(attn @ vs)
        attn_out = self._act(dense(3, ad.concat_cols(heads)))
        h1 = ad.layer_norm(h + attn_out, self.ln1_g, self.ln1_b)
        ff = self._act(ad.relu(dense(4, h1)))
        h2 = ad.layer_norm(h1 + dense(5, ff), self.ln2_g, self.ln2_b)
        pooled = Tensor(pool) @ h2
        return _linear(pooled, self.head_w, self.head_b)


def build_tiny_transformer_block(d_model: int, heads: int, ff_dim: int, classes: int, G: int, seed: int,
                                 input_dim: int = 16, seq_len: int = 4,
                                 act_bits: int | None = None) -> TinyTransformer:
    if d_model % heads:
        raise ConfigError(f"d_model={d_model} not divisible by heads={heads}")
    if d_model % G or ff_dim % G:
        raise ConfigError(f"d_model={d_model} and ff_dim={ff_dim} must both be divisible by G={G}")
    if input_dim % seq_len:
        raise ConfigError(f"input_dim={input_dim} not divisible by seq_len={seq_len}")
    return TinyTransformer(input_dim, seq_len, d_model, heads, ff_dim, classes, G, seed, act_bits)


def build_from_spec(spec: dict, seed: int) -> GroupedModel:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "mlp":
        return build_mlp(spec["input_dim"], spec["hidden_dims"], spec["classes"], spec["groups"], seed,
                         spec.get("act_bits"))
    if kind == "transformer":
        return build_tiny_transformer_block(spec["d_model"], spec["heads"], spec["ff_dim"], spec["classes"],
                                            spec["groups"], seed, spec["input_dim"], spec["seq_len"],
                                            spec.get("act_bits"))
    raise ConfigError(f"unknown model kind {kind!r}")


def accuracy(model: GroupedModel, x: np.ndarray, y: np.ndarray, weight_fn: WeightFn = full_precision,
             batch: int = 512) -> float:
    correct = 0
    for start in range(0, len(x), batch):
        logits = model.forward(x[start:start + batch], weight_fn).data
        correct += int((logits.argmax(axis=1) == y[start:start + batch]).sum())
    return correct / len(x)
