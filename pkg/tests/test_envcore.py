import numpy as np
import pytest

from app.env_config import EnvParams, HopperConstants, RandomizationRanges
from app.envcore import (
    ActionRateLimiter,
    LatencyBuffer,
    apply_latency,
    check_safe,
    clamp_actuation,
    sample_params,
)
from app.envs import make_env
from app.errors import ConfigurationError, ContractViolation, EmptyBufferError
from app.hopper import HOPPER_SAFETY, HopperState, standing_pose
from app.safety import SeedStateBuffer


def _hopper_state(height, contacts=frozenset({"foot"}), pitch=0.0):
    q = np.array([0.0, height, pitch, 0.0, 0.9])
    return HopperState(q=q, qd=np.zeros(5), contacts=frozenset(contacts))


# ---------------------------
# check_safe
# ---------------------------

@pytest.mark.parametrize(
    "height, contacts, pitch, safe",
    [
        (0.76, {"foot"}, 0.0, True),
        (0.50, {"foot"}, 0.0, False),
        (0.90, {"foot", "torso"}, 0.0, False),
        (0.90, {"foot"}, 0.81, False),
        (0.90, {"foot"}, -0.8, True),
        (0.90, set(), 0.0, True),
    ],
)
def test_hopper_safety_predicate(height, contacts, pitch, safe):
    assert check_safe(_hopper_state(height, contacts, pitch), HOPPER_SAFETY) is safe


def test_wrong_state_dimension_is_a_contract_violation():
    bad = HopperState(q=np.zeros(4), qd=np.zeros(5))
    with pytest.raises(ContractViolation):
        check_safe(bad, HOPPER_SAFETY)


# ---------------------------
# sample_params
# ---------------------------

def test_point_interval_yields_that_value(rng):
    params = sample_params(RandomizationRanges(ranges={"friction": (0.5, 0.5)}), rng)
    assert params.friction == 0.5


def test_empty_ranges_return_defaults(rng):
    assert sample_params(RandomizationRanges(), rng) == EnvParams()


def test_samples_stay_inside_ranges(rng):
    ranges = RandomizationRanges(ranges={"friction": (0.2, 1.0), "mass_scale": (0.8, 1.2), "latency_steps": (0, 2)})
    for _ in range(200):
        p = sample_params(ranges, rng)
        assert ranges.contains(p)
        assert isinstance(p.latency_steps, int)


def test_sampling_is_reproducible_for_a_seed():
    ranges = RandomizationRanges(ranges={"friction": (0.2, 1.0), "restitution": (0.0, 0.3)})
    a = [sample_params(ranges, np.random.default_rng(7)) for _ in range(3)]
    b = [sample_params(ranges, np.random.default_rng(7)) for _ in range(3)]
    assert a == b


def test_inverted_range_is_rejected():
    with pytest.raises(ValueError):
        RandomizationRanges(ranges={"friction": (1.0, 0.5)})


# ---------------------------
# latency
# ---------------------------

def test_zero_latency_passes_action_through():
    buf = LatencyBuffer(0, [0.0])
    assert apply_latency(buf, [0.7]).tolist() == [0.7]


def test_two_step_latency_is_fifo_after_default_actions():
    buf = LatencyBuffer(2, [0.0])
    out = [apply_latency(buf, [a]).tolist() for a in (1.0, 2.0, 3.0, 4.0)]
    assert out == [[0.0], [0.0], [1.0], [2.0]]
    assert len(buf) == 2


@pytest.mark.parametrize("latency", [0, 1, 3, 7])
def test_latency_is_a_pure_fifo_over_random_sequences(latency):
    rng = np.random.default_rng(latency)
    for _ in range(50):
        actions = rng.uniform(-1, 1, size=(int(rng.integers(1, 30)), 2))
        buf = LatencyBuffer(latency, [0.0, 0.0])
        out = np.array([apply_latency(buf, a) for a in actions])
        expected = np.vstack([np.zeros((latency, 2)), actions])[: len(actions)]
        assert np.array_equal(out, expected)
        assert len(buf) == latency


def test_negative_latency_rejected():
    with pytest.raises(ContractViolation):
        LatencyBuffer(-1, [0.0])


def test_latency_shape_mismatch_rejected():
    with pytest.raises(ContractViolation):
        apply_latency(LatencyBuffer(1, [0.0, 0.0]), [1.0])


# ---------------------------
# actuation limits
# ---------------------------

def test_power_limit_caps_torque():
    out = clamp_actuation([10.0], [5.0], EnvParams(motor_power_limit=20.0))
    assert out.tolist() == pytest.approx([4.0])


def test_torque_limit_clips():
    out = clamp_actuation([10.0], [0.0], EnvParams(torque_limit=8.0))
    assert out.tolist() == [8.0]


def test_power_limit_keeps_sign():
    out = clamp_actuation([-10.0, 1.0], [5.0, 5.0], EnvParams(motor_power_limit=20.0))
    assert out.tolist() == pytest.approx([-4.0, 1.0])


def test_clamped_actuation_respects_both_caps():
    rng = np.random.default_rng(5)
    for _ in range(500):
        torque_limit, power_limit = rng.uniform(0.5, 50.0, size=2)
        params = EnvParams(torque_limit=torque_limit, motor_power_limit=power_limit)
        tau = rng.uniform(-100, 100, size=3)
        qd = rng.uniform(-20, 20, size=3) * (rng.random(3) > 0.2)
        out = clamp_actuation(tau, qd, params)
        assert np.all(np.abs(out) <= torque_limit)
        assert np.all(np.abs(out * qd) <= power_limit * (1 + 1e-12))
        assert np.all(np.sign(out) == np.sign(tau))
        assert np.all(np.abs(out) <= np.abs(tau))


def test_actuation_dimension_mismatch():
    with pytest.raises(ContractViolation):
        clamp_actuation([1.0, 2.0], [0.0], EnvParams())


def test_rate_limiter_caps_change_between_actions():
    lim = ActionRateLimiter(0.1)
    assert lim(np.array([1.0])).tolist() == [1.0]
    assert lim(np.array([0.0])).tolist() == pytest.approx([0.9])
    lim.reset()
    assert lim(np.array([-1.0])).tolist() == [-1.0]


# ---------------------------
# reset
# ---------------------------

def test_reset_without_noise_gives_canonical_pose(hopper_config):
    config = hopper_config.model_copy(update={"hopper": HopperConstants(init_noise=0.0)})
    env = make_env(config)
    env.reset(seed=3)
    expected = standing_pose(env.constants, env.params)
    assert np.array_equal(env.state.q, expected)
    assert np.array_equal(env.state.qd, np.zeros(5))


def test_reset_is_deterministic_for_a_seed(hopper_config):
    a, _ = make_env(hopper_config).reset(seed=11)
    b, _ = make_env(hopper_config).reset(seed=11)
    assert np.array_equal(a, b)


def test_reset_from_singleton_buffer_restores_that_state(nav_config):
    state = np.array([1.0, 0.1, 0.2, 0.0, 5.0, 0.0])
    env = make_env(nav_config)
    env.reset(seed=0, options={"seed_buffer": SeedStateBuffer(states=state[None, :])})
    assert np.array_equal(env.get_state(), state)


def test_reset_from_empty_buffer_fails(nav_config):
    env = make_env(nav_config)
    with pytest.raises(EmptyBufferError):
        env.reset(seed=0, options={"seed_buffer": SeedStateBuffer(states=np.zeros((0, 6)))})
    assert issubclass(EmptyBufferError, ConfigurationError)


def test_set_state_clears_latency_history(nav_config):
    env = make_env(nav_config, EnvParams(latency_steps=2))
    env.reset(seed=0)
    env.step(np.array([1.0, 0.0]))
    env.set_state(env.get_state())
    assert all(np.array_equal(a, np.zeros(2)) for a in env.latency.queue)


def test_step_rejects_wrong_action_shape(nav_config):
    env = make_env(nav_config)
    env.reset(seed=0)
    with pytest.raises(ContractViolation):
        env.step(np.zeros(3))


@pytest.mark.parametrize("config_name", ["hopper_config", "nav_config"])
def test_default_resets_are_always_safe(config_name, request):
    config = request.getfixturevalue(config_name)
    env = make_env(config)
    rng = np.random.default_rng(13)
    for seed in range(200):
        env.set_params(sample_params(config.randomization, rng))
        env.reset(seed=seed)
        assert env.is_safe(), seed
