import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpqsearch import autodiff as ad
from mpqsearch.autodiff import Tensor
from mpqsearch.errors import ContractError, DimensionError, DomainError

from conftest import numeric_grad, rel_err


def test_matmul_identity_and_hand_value():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(np.eye(2)), x).data, x.data)
    assert ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_fd(rng):
    a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)
    ad.sum(a @ b).backward()
    fd = numeric_grad(lambda: float((a.data @ b.data).sum()), a.data)
    assert rel_err(a.grad, fd) < 1e-6


def test_relu_values_and_mask():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    y = ad.relu(x)
    assert y.data.tolist() == [0.0, 2.0]
    ad.sum(y).backward()
    assert x.grad.tolist() == [0.0, 1.0]


def test_exp_zero_and_gradient(rng):
    assert ad.exp(Tensor(0.0)).item() == 1.0
    x = Tensor(rng.uniform(-2, 2, 6), requires_grad=True)
    ad.sum(ad.exp(x)).backward()
    fd = numeric_grad(lambda: float(np.exp(x.data).sum()), x.data)
    assert rel_err(x.grad, fd) < 1e-6


def test_log_rejects_non_positive():
    with pytest.raises(DomainError):
        ad.log(Tensor([1.0, 0.0]))


def test_broadcast_only_scalar_or_equal():
    ad.add(Tensor(np.ones((2, 3))), Tensor(2.0))
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_scalar_broadcast_gradient_sums():
    s = Tensor(3.0, requires_grad=True)
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.sum(x * s).backward()
    assert s.grad == pytest.approx(15.0)
    assert np.all(x.grad == 3.0)


@pytest.mark.parametrize("logits,label,expected", [
    ([[0.0, 0.0]], 0, math.log(2)),
    ([[1000.0, 0.0]], 0, 0.0),
])
def test_cross_entropy_values(logits, label, expected):
    loss = ad.softmax_cross_entropy(Tensor(logits), [label])
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot(rng):
    z = Tensor(rng.uniform(-2, 2, (4, 3)), requires_grad=True)
    y = np.array([0, 2, 1, 2])
    ad.softmax_cross_entropy(z, y).backward()

    def f():
        e = np.exp(z.data - z.data.max(1, keepdims=True))
        p = e / e.sum(1, keepdims=True)
        return float(-np.log(p[np.arange(4), y]).mean())

    assert rel_err(z.grad, numeric_grad(f, z.data)) < 1e-5


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(Tensor([[0.0, 1.0]]), [2])


def test_custom_grad_node_forwards_value_and_passes_gradient(rng):
    w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    q = np.round(w.data * 2) / 2
    out = ad.custom_grad_node(q, w)
    assert np.array_equal(out.data, q)
    upstream = rng.normal(size=(3, 2))
    ad.sum(out * Tensor(upstream)).backward()
    assert np.array_equal(w.grad, upstream)


def test_custom_grad_node_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.custom_grad_node(np.zeros((2, 2)), Tensor(np.zeros((2, 3))))


def test_ste_composed_with_matmul_equals_direct_graph(rng):
    x = rng.normal(size=(5, 3))
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    q = np.round(w.data * 4) / 4
    ad.sum(ad.relu(Tensor(x) @ ad.custom_grad_node(q, w))).backward()
    w_hat = Tensor(q, requires_grad=True)
    ad.sum(ad.relu(Tensor(x) @ w_hat)).backward()
    assert np.array_equal(w.grad, w_hat.grad)


def test_backward_add_and_disconnected():
    a = Tensor(1.0, requires_grad=True)
    b = Tensor(2.0, requires_grad=True)
    lonely = Tensor(5.0, requires_grad=True)
    (a + b).backward()
    assert a.grad == 1.0 and b.grad == 1.0
    assert lonely.grad is None


def test_backward_needs_scalar():
    with pytest.raises(ContractError):
        ad.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_backward_accumulates_without_reset():
    a = Tensor(2.0, requires_grad=True)
    (a * 3.0).backward()
    (a * 3.0).backward()
    assert a.grad == 6.0


def test_no_grad_tensor_never_accumulates():
    c = Tensor(np.ones(2))
    x = Tensor(np.ones(2), requires_grad=True)
    ad.sum(x * c).backward()
    assert c.grad is None


def _mlp_params(rng):
    return [Tensor(rng.uniform(-1, 1, s), requires_grad=True) for s in [(5, 8), (8,), (8, 3), (3,)]]


def _mlp_loss(params, x, y):
    w1, b1, w2, b2 = params
    h = ad.relu(ad.add_rowvec(Tensor(x) @ w1, b1))
    return ad.softmax_cross_entropy(ad.add_rowvec(h @ w2, b2), y)


def test_two_layer_mlp_gradients_match_fd(rng):
    params = _mlp_params(rng)
    x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, 6)
    _mlp_loss(params, x, y).backward()
    assert sum(p.size for p in params) <= 200
    for p in params:
        fd = numeric_grad(lambda: _mlp_loss(params, x, y).item(), p.data)
        assert rel_err(p.grad, fd) < 1e-4


def test_backward_is_deterministic(rng):
    x, y = rng.normal(size=(6, 5)), rng.integers(0, 3, 6)
    grads = []
    for _ in range(2):
        params = _mlp_params(np.random.default_rng(0))
        _mlp_loss(params, x, y).backward()
        grads.append([p.grad.copy() for p in params])
    for g1, g2 in zip(*grads):
        assert np.array_equal(g1, g2)


@settings(max_examples=30, deadline=None)
@given(power=st.integers(-4, 4), seed=st.integers(0, 2 ** 16))
def test_backward_linear_in_loss_scale(power, seed):
    alpha = 2.0 ** power  # exact in binary floating point
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=(4, 5)), rng.integers(0, 3, 4)
    base = _mlp_params(np.random.default_rng(seed))
    _mlp_loss(base, x, y).backward()
    scaled = _mlp_params(np.random.default_rng(seed))
    (_mlp_loss(scaled, x, y) * alpha).backward()
    for p, q in zip(base, scaled):
        assert np.array_equal(q.grad, alpha * p.grad)


def test_group_mix_frozen_rows_take_frozen_value(rng):
    w = Tensor(rng.uniform(size=(2, 2)), requires_grad=True)
    cands = [Tensor(rng.normal(size=(3, 4)), requires_grad=True) for _ in range(2)]
    frozen_value = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    out = ad.group_mix(w, cands, 2, frozen=np.array([True, False]), frozen_value=frozen_value)
    assert np.array_equal(out.data[:, :2], frozen_value.data[:, :2])
    ad.sum(out).backward()
    assert np.all(w.grad[0] == 0)
