import numpy as np
import pytest

from app.envs import env_factory
from app.errors import ContractViolation, EmptyBufferError
from app.neural import Mlp
from app.ppo import init_policy, init_value
from app.safety import (
    OsseDataset,
    OsseModel,
    OsseTrainConfig,
    ProtectRewardWeights,
    SeedStateBuffer,
    build_osse_dataset,
    collect_seed_states,
    default_noise_scale,
    osse_label,
    protect_reward,
    train_osse,
    train_protect,
    value_normalizer,
)

from .conftest import ChainEnv, constant_policy

DOUBLE = Mlp(weights=[np.array([[2.0]])], biases=[np.zeros(1)])


# ---------------------------
# protect reward
# ---------------------------

@pytest.mark.parametrize(
    "action, task_reward, expected",
    [
        ([0.0, 0.0], 5.0, 4.0),
        ([1.0, 0.0], 5.0, 3.7),
        ([1.0, 0.0], -0.5, 3.6),
        ([0.0, 0.0], 100.0, 4.0),
    ],
)
def test_protect_reward(action, task_reward, expected):
    assert protect_reward(None, action, task_reward, ProtectRewardWeights()) == pytest.approx(expected)


def test_protect_weights_validated():
    with pytest.raises(ValueError):
        ProtectRewardWeights(w_alive=0.0)


def test_value_normalizer():
    w = ProtectRewardWeights()
    assert value_normalizer(w, 1.0, 10) == pytest.approx(40.0)
    assert value_normalizer(w, 0.5, 2) == pytest.approx(4.0 * 1.5)


# ---------------------------
# seed states
# ---------------------------

def test_seed_buffer_holds_every_safe_state(nav_config):
    config = nav_config.model_copy(update={"horizon": 30})
    buf = collect_seed_states(constant_policy([0.0, 0.0], 2, 6), env_factory(config), 0.0, 3,
                              np.random.default_rng(0), deterministic=True)
    assert len(buf) == 90
    env = env_factory(config)()
    for state in buf.states:
        env.set_state(state)
        assert env.is_safe()


def test_seed_buffer_with_noise_stays_safe(nav_config):
    config = nav_config.model_copy(update={"horizon": 60})
    buf = collect_seed_states(constant_policy([0.0, 0.6], 2, 6), env_factory(config), 0.5, 4, np.random.default_rng(2))
    env = env_factory(config)()
    for state in buf.states:
        env.set_state(state)
        assert env.is_safe()
    assert buf.noise_scale == 0.5


def test_seed_buffer_empty_when_first_step_is_unsafe():
    with pytest.raises(EmptyBufferError):
        collect_seed_states(constant_policy(-1.0), lambda: ChainEnv(start=0.5), 0.0, 3,
                            np.random.default_rng(0), deterministic=True)


def test_train_protect_starts_from_buffer_states(tmp_path, nav_config, tiny_ppo):
    config = nav_config.model_copy(update={"horizon": 30})
    buf = collect_seed_states(constant_policy([0.0, 0.0], 2, 6), env_factory(config), 0.0, 2,
                              np.random.default_rng(0), deterministic=True)
    result = train_protect(env_factory(config), buf, ProtectRewardWeights(), tiny_ppo,
                           np.random.default_rng(1), out_dir=tmp_path)
    assert len(result.history) == 1
    assert result.policy.mean_net.weights[0].shape[0] == 6
    assert (tmp_path / "protect_policy_metrics.csv").exists()


def test_train_protect_rejects_empty_buffer(nav_config, tiny_ppo):
    with pytest.raises(EmptyBufferError):
        train_protect(env_factory(nav_config), SeedStateBuffer(states=np.zeros((0, 4))), ProtectRewardWeights(),
                      tiny_ppo, np.random.default_rng(0))


def test_default_noise_scale():
    policy = init_policy(2, 2, np.random.default_rng(0), log_std=0.0)
    assert default_noise_scale(policy) == pytest.approx(0.3)


def test_seed_buffer_checkpoint(tmp_path):
    buf = SeedStateBuffer(states=np.arange(12, dtype=float).reshape(2, 6), noise_scale=0.1)
    buf.save(tmp_path / "seeds")
    loaded = SeedStateBuffer.load(tmp_path / "seeds")
    assert np.array_equal(loaded.states, buf.states)
    assert loaded.noise_scale == 0.1


# ---------------------------
# OSSE labels
# ---------------------------

def test_label_is_scaled_protect_value_after_one_task_step():
    obs, label = osse_label(ChainEnv(), np.array([1.0]), constant_policy(0.5), DOUBLE, v_max=10.0)
    assert obs.tolist() == [1.0]
    assert label == pytest.approx(2.0 * 1.5 / 10.0)


def test_label_is_zero_when_task_step_is_unsafe():
    _, label = osse_label(ChainEnv(), np.array([0.2]), constant_policy(-0.5), DOUBLE, v_max=10.0)
    assert label == 0.0


def test_label_is_clipped_to_unit_interval():
    _, high = osse_label(ChainEnv(), np.array([9.0]), constant_policy(0.5), DOUBLE, v_max=1.0)
    negative = Mlp(weights=[np.array([[-1.0]])], biases=[np.zeros(1)])
    _, low = osse_label(ChainEnv(), np.array([1.0]), constant_policy(0.5), negative, v_max=1.0)
    assert (high, low) == (1.0, 0.0)


def test_dataset_labels_match_hand_computed_values():
    buf = SeedStateBuffer(states=np.array([[1.0], [2.0], [3.0]]))
    pi_protect = constant_policy(0.1, log_std=-1.0)
    ds = build_osse_dataset(constant_policy(0.5), pi_protect, DOUBLE, ChainEnv, buf, 4,
                            np.random.default_rng(0), v_max=10.0, horizon=3)
    assert len(ds) >= 4
    for state, obs, label in zip(ds.states, ds.inputs, ds.labels):
        assert obs.tolist() == state.tolist()
        assert label == pytest.approx(min(1.0, max(0.0, 2.0 * (state[0] + 0.5) / 10.0)))


def test_dataset_labels_replay_exactly(nav_config):
    rng = np.random.default_rng(0)
    config = nav_config.model_copy(update={"horizon": 20})
    pi_task = init_policy(6, 2, rng, hidden=(8,))
    pi_protect = init_policy(6, 2, rng, hidden=(8,))
    v_protect = init_value(6, rng, hidden=(8,))
    factory = env_factory(config)
    buf = collect_seed_states(pi_task, factory, 0.1, 2, rng)
    ds = build_osse_dataset(pi_task, pi_protect, v_protect, factory, buf, 3, rng, v_max=1.0)
    env = factory()
    for state, obs, label in zip(ds.states, ds.inputs, ds.labels):
        replay_obs, replay_label = osse_label(env, state, pi_task, v_protect, 1.0)
        assert np.array_equal(replay_obs, obs)
        assert replay_label == label
        assert 0.0 <= label <= 1.0


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(ContractViolation):
        OsseDataset(inputs=np.zeros((1, 2)), labels=np.array([1.5]), v_max=1.0)


def test_dataset_csv_is_lossless(tmp_path):
    rng = np.random.default_rng(0)
    ds = OsseDataset(inputs=rng.standard_normal((5, 3)), labels=rng.uniform(size=5), v_max=396.6, states=rng.standard_normal((5, 4)))
    loaded = OsseDataset.from_csv(ds.to_csv(tmp_path / "osse.csv"))
    assert np.array_equal(loaded.inputs, ds.inputs)
    assert np.array_equal(loaded.labels, ds.labels)
    assert np.array_equal(loaded.states, ds.states)
    assert loaded.v_max == ds.v_max


# ---------------------------
# OSSE model
# ---------------------------

def test_constant_labels_are_learned():
    rng = np.random.default_rng(0)
    ds = OsseDataset(inputs=rng.uniform(-1, 1, (50, 2)), labels=np.full(50, 0.5), v_max=1.0)
    model = train_osse(ds, rng, OsseTrainConfig(hidden=(16, 16), steps=1500, lr=3e-3))
    pred = model.predict(ds.inputs)
    assert np.mean(np.abs(pred - 0.5)) < 1e-2


def test_linear_labels_generalize():
    rng = np.random.default_rng(1)
    x = rng.uniform(0, 1, (250, 1))
    y = 0.2 + 0.6 * x[:, 0]
    ds = OsseDataset(inputs=x[:200], labels=y[:200], v_max=1.0)
    model = train_osse(ds, rng, OsseTrainConfig(hidden=(32, 32), steps=1500, lr=3e-3))
    rmse = float(np.sqrt(np.mean((model.predict(x[200:]) - y[200:]) ** 2)))
    assert rmse < 0.05


def test_predictions_are_clipped(rng):
    ds = OsseDataset(inputs=np.array([[0.0], [1.0]]), labels=np.array([0.0, 1.0]), v_max=1.0)
    model = train_osse(ds, rng, OsseTrainConfig(hidden=(8,), steps=50))
    pred = model.predict(np.array([[-100.0], [100.0], [0.5]]))
    assert np.all((pred >= 0.0) & (pred <= 1.0))
    assert isinstance(model(np.array([0.5])), float)


def test_empty_dataset_rejected(rng):
    with pytest.raises(EmptyBufferError):
        train_osse(OsseDataset(inputs=np.zeros((0, 2)), labels=np.zeros(0), v_max=1.0), rng)


def test_osse_checkpoint_round_trip(tmp_path, rng):
    ds = OsseDataset(inputs=rng.standard_normal((10, 3)), labels=rng.uniform(size=10), v_max=3.0)
    model = train_osse(ds, rng, OsseTrainConfig(hidden=(4,), steps=5))
    model.save(tmp_path / "osse")
    loaded = OsseModel.load(tmp_path / "osse")
    assert loaded.v_max == 3.0
    assert loaded(np.ones(3)) == model(np.ones(3))
