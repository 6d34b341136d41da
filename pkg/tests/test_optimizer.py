import numpy as np
import pytest

from errors import DimensionMismatch, UsageError
from models import TrainConfig
from services.encoder_service import TENSOR_NAMES, init_params
from services.optimizer_service import (
    OptimizerHyper,
    OptimizerState,
    init_optimizer_state,
    optimizer_step,
)


def ones_grads(params, value=1.0):
    grads = params.zeros_like()
    for name in TENSOR_NAMES:
        setattr(grads, name, np.full_like(getattr(params, name), value))
    return grads


@pytest.mark.parametrize("name", ["adam", "sgd_momentum"])
def test_zero_learning_rate_leaves_params_unchanged(name):
    params = init_params(5, 3, 4, 2, seed=0)
    hyper = OptimizerHyper(name=name, lr=0.0)
    new_params, new_state = optimizer_step(params, ones_grads(params), init_optimizer_state(hyper, params), hyper)
    assert new_params.digest() == params.digest()
    assert new_state.t == 1


def test_sgd_first_step_moves_against_gradient():
    params = init_params(5, 3, 4, 2, seed=0)
    hyper = OptimizerHyper(name="sgd_momentum", lr=0.1, momentum=0.9)
    new_params, _ = optimizer_step(params, ones_grads(params), init_optimizer_state(hyper, params), hyper)
    for name in TENSOR_NAMES:
        np.testing.assert_allclose(getattr(new_params, name) - getattr(params, name), -0.1, atol=1e-12)


def test_sgd_momentum_accumulates():
    params = init_params(5, 3, 4, 2, seed=0)
    hyper = OptimizerHyper(name="sgd_momentum", lr=0.1, momentum=0.5)
    state = init_optimizer_state(hyper, params)
    once, state = optimizer_step(params, ones_grads(params), state, hyper)
    twice, _ = optimizer_step(once, ones_grads(params), state, hyper)
    np.testing.assert_allclose(twice.E - once.E, -0.15, atol=1e-12)


def test_adam_first_step_magnitude_is_learning_rate():
    params = init_params(5, 3, 4, 2, seed=0)
    hyper = OptimizerHyper(name="adam", lr=1e-3)
    grads = ones_grads(params, value=-3.7)
    new_params, state = optimizer_step(params, grads, init_optimizer_state(hyper, params), hyper)
    np.testing.assert_allclose(new_params.W_i - params.W_i, 1e-3, rtol=1e-6)
    assert state.t == 1


def test_step_does_not_modify_inputs():
    params = init_params(5, 3, 4, 2, seed=0)
    hyper = OptimizerHyper(name="adam", lr=1e-2)
    state = init_optimizer_state(hyper, params)
    before = params.digest()
    optimizer_step(params, ones_grads(params), state, hyper)
    assert params.digest() == before
    assert state.t == 0
    assert not np.any(state.slots["m"]["E"])


def test_gradient_shape_mismatch():
    params = init_params(5, 3, 4, 2, seed=0)
    hyper = OptimizerHyper()
    grads = ones_grads(params)
    grads.W_t = np.ones((2, 2))
    with pytest.raises(DimensionMismatch):
        optimizer_step(params, grads, init_optimizer_state(hyper, params), hyper)


def test_state_for_other_optimizer_is_rejected():
    params = init_params(5, 3, 4, 2, seed=0)
    state = init_optimizer_state(OptimizerHyper(name="sgd_momentum"), params)
    with pytest.raises(UsageError):
        optimizer_step(params, ones_grads(params), state, OptimizerHyper(name="adam"))


def test_state_file_restores_slots():
    params = init_params(5, 3, 4, 2, seed=0)
    hyper = OptimizerHyper.from_config(TrainConfig(lr=0.01))
    _, state = optimizer_step(params, ones_grads(params, 0.3), init_optimizer_state(hyper, params), hyper)
    restored = OptimizerState.from_file(state.to_file(), params)
    assert restored.t == state.t
    for slot in ("m", "v"):
        for name in TENSOR_NAMES:
            np.testing.assert_array_equal(restored.slots[slot][name], state.slots[slot][name])
