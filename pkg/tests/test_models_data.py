from pathlib import Path

import numpy as np
import pytest

from mpqsearch import autodiff as ad
from mpqsearch.bilevel import AdamW, zero_grads
from mpqsearch.data import (batches, gen_synthetic_classification, load_dataset, load_or_generate, read_header,
                            save_dataset, split_sizes)
from mpqsearch.errors import ConfigError
from mpqsearch.models import accuracy, build_from_spec, build_mlp, build_tiny_transformer_block

GOLDEN = Path(__file__).parent / "data" / "golden_forward.npz"


def test_mlp_group_layout():
    model = build_mlp(16, [64, 64], 2, 8, seed=0)
    specs = model.group_specs()
    assert len(specs) == 16
    assert all(s.col_stop - s.col_start == 8 for s in specs)
    assert [s.rows for s in specs[:8]] == [16] * 8 and [s.rows for s in specs[8:]] == [64] * 8


def test_same_seed_same_weights():
    a, b = build_mlp(16, [32], 2, 4, seed=3), build_mlp(16, [32], 2, 4, seed=3)
    c = build_mlp(16, [32], 2, 4, seed=4)
    for (n, p), q, r in zip(a.named_parameters().items(), b.parameters(), c.parameters()):
        assert np.array_equal(p.data, q.data)
    assert not np.array_equal(a.layers[0].weight.data, c.layers[0].weight.data)


def test_mlp_param_count_oracle():
    model = build_mlp(16, [64, 64], 2, 8, seed=0)
    assert model.param_count() == (16 * 64 + 64) + (64 * 64 + 64) + (64 * 2 + 2)
    assert model.searched_param_count() == 16 * 64 + 64 * 64


def test_transformer_searchable_matrices():
    model = build_tiny_transformer_block(32, 4, 64, 2, 8, seed=0)
    shapes = [l.weight.shape for l in model.layers]
    assert shapes == [(32, 32)] * 4 + [(32, 64), (64, 32)]
    assert model.searched_param_count() == 4 * 32 * 32 + 2 * 32 * 64
    assert len(model.group_specs()) == 6 * 8


@pytest.mark.parametrize("kind", ["mlp", "transformer"])
def test_forward_matches_golden(kind):
    gold = np.load(GOLDEN)
    if kind == "mlp":
        model = build_mlp(16, [32, 16], 3, 8, seed=0)
    else:
        model = build_tiny_transformer_block(32, 4, 64, 3, 8, seed=0)
    assert np.max(np.abs(model.forward(gold["x"]).data - gold[kind])) <= 1e-10


def test_attention_rows_are_distributions_within_sequence(rng):
    model = build_tiny_transformer_block(32, 4, 64, 2, 8, seed=1)
    model.forward(rng.normal(size=(3, 16)))
    for attn in model.last_attention:
        assert attn.shape == (12, 12)
        assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-12)
        # no attention across different sequences of the batch
        seq = np.repeat(np.arange(3), 4)
        assert np.all(attn[seq[:, None] != seq[None, :]] == 0)


@pytest.mark.parametrize("builder", [
    lambda: build_mlp(16, [60], 2, 8, seed=0),
    lambda: build_tiny_transformer_block(30, 3, 64, 2, 8, seed=0),
    lambda: build_tiny_transformer_block(32, 4, 60, 2, 8, seed=0),
    lambda: build_tiny_transformer_block(32, 5, 64, 2, 8, seed=0),
])
def test_divisibility_errors(builder):
    with pytest.raises(ConfigError):
        builder()


def test_build_from_spec_round_trip():
    model = build_tiny_transformer_block(16, 2, 32, 2, 4, seed=0)
    clone = build_from_spec(model.spec, 0)
    assert [p.shape for p in clone.parameters()] == [p.shape for p in model.parameters()]


@pytest.mark.parametrize("seed", range(5))
def test_easy_task_is_linearly_separable(seed):
    data = gen_synthetic_classification(1000, 16, 2, 0.0, seed)
    x, y = data.pool()
    design = np.hstack([x, np.ones((len(x), 1))])
    w, *_ = np.linalg.lstsq(design, np.eye(2)[y], rcond=None)
    xt, yt = data.test
    pred = (np.hstack([xt, np.ones((len(xt), 1))]) @ w).argmax(axis=1)
    assert np.mean(pred == yt) >= 0.99


def test_split_sizes():
    assert split_sizes(1000) == (810, 90, 100)
    data = gen_synthetic_classification(1000, 16, 2, 0.0, 0)
    assert (len(data.train[1]), len(data.val[1]), len(data.test[1])) == (810, 90, 100)
    assert data.pool()[0].shape == (900, 16)


def test_generation_is_bitwise_deterministic():
    a = gen_synthetic_classification(500, 8, 3, 0.5, 11)
    b = gen_synthetic_classification(500, 8, 3, 0.5, 11)
    for (xa, ya), (xb, yb) in zip((a.train, a.val, a.test), (b.train, b.val, b.test)):
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)


def test_rejects_tiny_datasets():
    with pytest.raises(ConfigError):
        gen_synthetic_classification(50, 8, 2, 0.0, 0)


def test_cache_round_trip_and_regeneration(tmp_path):
    path = tmp_path / "d.mqds"
    data = gen_synthetic_classification(300, 8, 2, 0.0, 5)
    save_dataset(path, data)
    assert read_header(path)[0] == b"MQDS1"
    loaded = load_dataset(path)
    assert np.array_equal(loaded.train[0], data.train[0]) and np.array_equal(loaded.test[1], data.test[1])
    # a request with a different seed rewrites the cache
    other = load_or_generate(path, 300, 8, 2, 0.0, 6)
    assert read_header(path)[6] == 6
    assert not np.array_equal(other.train[0], data.train[0])
    assert np.array_equal(load_or_generate(path, 300, 8, 2, 0.0, 6).train[0], other.train[0])


def test_bad_cache_is_a_config_error(tmp_path):
    path = tmp_path / "junk.mqds"
    path.write_bytes(b"not a dataset")
    with pytest.raises(ConfigError):
        load_dataset(path)


def test_batches_cover_epoch_without_repeats(rng):
    x, y = np.arange(20.0).reshape(10, 2), np.arange(10)
    it = batches(x, y, 5, rng)
    seen = np.concatenate([next(it)[1], next(it)[1]])
    assert sorted(seen.tolist()) == list(range(10))


def _fit(model, data, steps=500, lr=5e-3, seed=0):
    opt = AdamW(model.parameters(), lr=lr)
    it = batches(*data.train, 32, np.random.default_rng(seed))
    for _ in range(steps):
        x, y = next(it)
        ad.softmax_cross_entropy(model.forward(x), y).backward()
        opt.step()
        zero_grads(model.parameters())
    return accuracy(model, *data.test)


@pytest.mark.parametrize("kind", ["mlp", "transformer"])
def test_full_precision_training_reaches_high_accuracy(kind):
    data = gen_synthetic_classification(2000, 16, 2, 0.0, 1)
    model = (build_mlp(16, [64, 64], 2, 8, seed=0) if kind == "mlp"
             else build_tiny_transformer_block(32, 4, 64, 2, 8, seed=0))
    assert _fit(model, data) >= 0.95
