import math

import numpy as np
import pytest

from mpqsearch import autodiff as ad
from mpqsearch.autodiff import Tensor
from mpqsearch.config import SizeObjectiveConfig
from mpqsearch.objectives import (ABOVE, BELOW, INSIDE, actual_size, expected_size, size_band, size_loss,
                                  validation_terms)
from mpqsearch.quantization import GroupSpec
from mpqsearch.supernet import BitAssignmentState, fixed_selection, gumbel_softmax

from conftest import numeric_grad, rel_err

BITS = [0, 1, 2, 3, 4]


def _groups(counts_per_layer):
    """One row per group so param_count equals the column width."""
    specs = []
    for layer, counts in enumerate(counts_per_layer):
        start = 0
        for g, n in enumerate(counts):
            specs.append(GroupSpec(layer, g, start, start + n, 1))
            start += n
    return specs


def _state(beta_layers, frozen=None):
    beta = [Tensor(np.asarray(b, dtype=float), requires_grad=True) for b in beta_layers]
    mask = np.zeros((len(beta), beta[0].shape[0]), dtype=bool) if frozen is None else np.asarray(frozen)
    return BitAssignmentState(list(BITS), beta, mask)


def test_discrete_size_example():
    groups = _groups([[50, 50]])
    assert actual_size({(0, 0): 2, (0, 1): 4}, groups) == 300


def test_uniform_relaxed_size_is_mean_bits():
    groups = _groups([[10]])
    sel = fixed_selection([np.full((1, 5), 0.2)])
    assert actual_size(sel, groups, BITS) == pytest.approx(20.0)


def test_one_hot_relaxed_size_equals_discrete(rng):
    groups = _groups([[8, 8, 8], [4, 4, 4]])
    choice = rng.integers(0, 5, size=(2, 3))
    sel = fixed_selection([np.eye(5)[choice[i]] for i in range(2)])
    discrete = {(l, g): BITS[choice[l, g]] for l in range(2) for g in range(3)}
    assert actual_size(sel, groups, BITS) == actual_size(discrete, groups)


def test_frozen_groups_count_at_eight_bits():
    groups = _groups([[10, 10]])
    state = _state([np.zeros((2, 5))], frozen=[[True, False]])
    sel = fixed_selection([np.tile(np.eye(5)[1], (2, 1))], state.frozen_mask)
    assert actual_size(sel, groups, BITS) == 80 + 10
    assert expected_size(state, groups).item() == pytest.approx(80 + 20)


def test_expected_size_gradient_matches_fd(rng):
    groups = _groups([[3, 5], [7, 2]])
    state = _state([rng.normal(size=(2, 5)), rng.normal(size=(2, 5))])
    expected_size(state, groups).backward()
    for b in state.beta:
        fd = numeric_grad(lambda: expected_size(state, groups).item(), b.data)
        assert rel_err(b.grad, fd, floor=1e-4) < 1e-6


@pytest.mark.parametrize("c,band", [(89.0, BELOW), (90.0, INSIDE), (100.0, INSIDE), (110.0, INSIDE),
                                    (111.0, ABOVE)])
def test_size_band_edges(c, band):
    assert size_band(c, 100.0, 0.1) == band


def test_inside_band_loss_and_gradient_are_zero():
    state = _state([np.ones((1, 5))])
    e = expected_size(state, _groups([[10]]))
    loss, band = size_loss(100.0, e, 100.0, SizeObjectiveConfig(epsilon=0.1))
    assert band == INSIDE and loss.item() == 0.0
    loss.backward()
    assert state.beta[0].grad is None or np.all(state.beta[0].grad == 0)


def test_penalty_sign_and_log_magnitude():
    cfg = SizeObjectiveConfig(epsilon=0.1)
    above, _ = size_loss(200.0, Tensor(math.e), 100.0, cfg)
    below, _ = size_loss(10.0, Tensor(math.e), 100.0, cfg)
    assert above.item() == pytest.approx(1.0)
    assert below.item() == pytest.approx(-1.0)


def test_zero_expected_size_falls_back_to_finite_value():
    loss, band = size_loss(0.0, Tensor(0.0), 100.0, SizeObjectiveConfig())
    assert band == BELOW and loss.item() == 0.0


@pytest.mark.parametrize("actual,direction", [(1000.0, -1), (1.0, +1)])
def test_one_gradient_step_moves_expected_size_toward_band(actual, direction, rng):
    groups = _groups([[16, 16]])
    state = _state([rng.normal(scale=0.1, size=(2, 5))])
    before = expected_size(state, groups)
    loss, _ = size_loss(actual, before, 100.0, SizeObjectiveConfig())
    loss.backward()
    state.beta[0].data -= 0.1 * state.beta[0].grad
    after = expected_size(state, groups).item()
    assert np.sign(after - before.item()) == direction


def test_validation_loss_is_ce_plus_weighted_penalty(monkeypatch):
    import mpqsearch.objectives as obj
    monkeypatch.setattr(obj.ad, "softmax_cross_entropy", lambda logits, labels: Tensor(0.5))
    monkeypatch.setattr(obj, "size_loss", lambda a, e, t, c: (Tensor(0.6), ABOVE))
    state = _state([np.zeros((1, 5))])
    sel = fixed_selection([np.full((1, 5), 0.2)])
    terms = validation_terms(Tensor(np.zeros((1, 2))), [0], state, sel, _groups([[4]]),
                             SizeObjectiveConfig(penalty_weight=2.0), 100.0)
    assert terms.loss.item() == pytest.approx(1.7)
    assert terms.size_term.item() == pytest.approx(1.2)


def test_lambda_zero_removes_architecture_dependence(rng):
    groups = _groups([[4, 4]])
    state = _state([rng.normal(size=(2, 5))])
    o = gumbel_softmax(state.beta[0], 1.0, gumbel=np.zeros((2, 5)))
    sel = fixed_selection([o.data])
    sel.O = [o]
    logits = Tensor(rng.normal(size=(3, 2)))
    terms = validation_terms(logits, [0, 1, 1], state, sel, groups,
                             SizeObjectiveConfig(penalty_weight=0.0, target_bits=1.0), 1.0)
    assert terms.loss.item() == terms.ce.item()
    terms.loss.backward()
    assert state.beta[0].grad is None or np.all(state.beta[0].grad == 0)


def test_cross_entropy_three_sample_oracle():
    z = np.array([[2.0, 0.0, -1.0], [0.0, 0.0, 0.0], [-3.0, 1.0, 4.0]])
    y = [0, 1, 2]
    expected = -np.mean([z[i, y[i]] - math.log(np.exp(z[i]).sum()) for i in range(3)])
    assert ad.softmax_cross_entropy(Tensor(z), y).item() == pytest.approx(expected, abs=1e-12)
