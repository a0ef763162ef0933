import json

import numpy as np
import pytest

from gfss.errors import ConfigError, FrozenModelError, TrainingError
from gfss.synthgen import sample_episode
from gfss.training import (
    FrozenModel, TrainConfig, TrainState, config_from_dict, cross_entropy_loss, forward_backward,
    freeze, iou_loss, load_checkpoint, save_checkpoint, sgd_update, total_loss, train, train_step,
)

from gradcheck import max_relative_error, tiny_problem, update_gradient_error


def test_cross_entropy_perfect_and_uniform():
    truth = np.array([0, 1])
    perfect = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert cross_entropy_loss(perfect, truth) == pytest.approx(0.0)
    uniform = np.full((2, 2), 0.5)
    assert cross_entropy_loss(uniform, truth) == pytest.approx(np.log(2))


def test_cross_entropy_floor_keeps_loss_finite():
    out = cross_entropy_loss(np.array([1.0, 0.0]).reshape(1, 2, 1, 1), np.array([[[1]]]))
    assert np.isfinite(out) and out == pytest.approx(-np.log(1e-12))


def test_iou_loss_values():
    y = np.array([[1.0, 0.0]])
    assert iou_loss(y, y) == pytest.approx(0.0)
    assert iou_loss(1 - y, y) == pytest.approx(1.0)
    assert iou_loss(np.zeros((1, 2)), np.zeros((1, 2))) == 0.0


def test_total_loss_mix():
    assert total_loss([1.0, 2.0], 0.5, 0.6) == pytest.approx(0.6 * 3 + 0.4 * 0.5)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lambda_mix=1.5).validate()
    with pytest.raises(ConfigError):
        config_from_dict({"learning_rate": 1})
    assert config_from_dict({"lr": 0.1}).lr == 0.1


@pytest.mark.parametrize("seed", [0, 1])
def test_backprop_matches_finite_differences(seed):
    k, fcp, ep = tiny_problem(seed)
    worst = max_relative_error(k, fcp, ep, TrainConfig(step_scale=0.3))
    assert max(worst.values()) < 1e-3, worst


def test_update_gradient_closed_form():
    assert update_gradient_error() < 1e-6


def test_correlation_projections_get_no_loss_gradient():
    k, fcp, ep = tiny_problem()
    _, g, _ = forward_backward(k, fcp, ep, TrainConfig())
    for name in ("phi.weight", "phi.bias", "theta.weight", "theta.bias"):
        assert not g[name].any()


def test_sgd_momentum_and_weight_decay():
    state = TrainState.init(2, 8, seed=0, dtype=np.float64)
    p0 = state.kernels.copy()
    grads = {n: np.zeros_like(v) for n, v in state.params().items()}
    grads["kernels"] = np.ones_like(p0)
    cfg = TrainConfig(lr=0.1, momentum=0.5, weight_decay=0.0)
    sgd_update(state, grads, cfg)
    np.testing.assert_allclose(state.kernels, p0 - 0.1)
    sgd_update(state, grads, cfg)
    np.testing.assert_allclose(state.kernels, p0 - 0.1 - 0.1 * 1.5)
    assert state.step == 2


def test_zero_steps_is_initialisation(small_world):
    cfg = TrainConfig(steps=0)
    state, reps = train(small_world, cfg)
    init = TrainState.init(small_world.spec.n_base, small_world.spec.channels, cfg.seed)
    assert reps == []
    np.testing.assert_array_equal(state.kernels, init.kernels)


def test_training_reduces_loss_and_logs(small_world, tmp_path):
    log = tmp_path / "log.jsonl"
    cfg = TrainConfig(steps=40, lr=0.05, step_scale=1 / 8, batch=2, classes_per_image=1)
    state, reps = train(small_world, cfg, log_path=log)
    lines = [json.loads(x) for x in log.read_text().splitlines()]
    assert len(lines) == 40 and lines[0]["step"] == 0
    assert np.mean([r["total"] for r in reps[-5:]]) < np.mean([r["total"] for r in reps[:5]])
    state2, _ = train(small_world, cfg)
    np.testing.assert_array_equal(state.kernels, state2.kernels)


def test_nonfinite_loss_raises_with_diagnostics(small_world):
    state = TrainState.init(small_world.spec.n_base, small_world.spec.channels)
    state.kernels[0, 0] = np.nan
    ep = sample_episode(small_world, 1, 1)
    with pytest.raises(TrainingError) as err:
        train_step(state, ep, TrainConfig())
    assert err.value.diagnostics


def test_frozen_model_is_immutable(small_model, small_world):
    assert freeze(small_model) is small_model
    with pytest.raises(ValueError):
        small_model.bank.kernels[0, 0] = 1
    with pytest.raises(ValueError):
        small_model.fcp["dec0.weight"][0] = 1
    with pytest.raises(FrozenModelError):
        train_step(small_model, sample_episode(small_world, 1, 1), TrainConfig())


def test_checkpoint_roundtrip(small_model, tmp_path):
    save_checkpoint(tmp_path / "m", small_model)
    m = load_checkpoint(tmp_path / "m")
    assert isinstance(m, FrozenModel)
    assert m.bank.kernels.tobytes() == small_model.bank.kernels.tobytes()
    for n in m.fcp.names():
        assert m.fcp[n].tobytes() == small_model.fcp[n].tobytes()
    assert (m.step_scale, m.trained_steps) == (small_model.step_scale, small_model.trained_steps)


def test_state_checkpoint_resumes_exactly(small_world, tmp_path):
    cfg = TrainConfig(steps=6, lr=0.05, batch=1, classes_per_image=1)
    full, _ = train(small_world, cfg)
    half, _ = train(small_world, TrainConfig(steps=3, lr=0.05, batch=1, classes_per_image=1))
    save_checkpoint(tmp_path / "s", half)
    resumed, _ = train(small_world, TrainConfig(steps=3, lr=0.05, batch=1, classes_per_image=1),
                       state=load_checkpoint(tmp_path / "s"))
    assert resumed.kernels.tobytes() == full.kernels.tobytes()
