import numpy as np
import pytest

from app.env_config import RandomizationRanges
from app.envs import env_factory
from app.errors import ContractViolation
from app.neural import Mlp, forward
from app.ppo import (
    PpoConfig,
    Trajectory,
    collect_rollouts,
    compute_gae,
    evaluate_policy,
    init_policy,
    init_value,
    load_policy,
    normalize_advantages,
    ppo_update,
    random_policy,
    save_policy,
    train_policy,
)

from .conftest import constant_policy


def _traj(rewards, values=None, bootstrap=0.0, terminal=True):
    n = len(rewards)
    return Trajectory(
        observations=np.zeros((n, 1)), actions=np.zeros((n, 1)),
        rewards=np.array(rewards, float), values=np.zeros(n) if values is None else np.array(values, float),
        log_probs=np.zeros(n), terminal=terminal, bootstrap_value=bootstrap,
    )


# ---------------------------
# GAE
# ---------------------------

def test_gae_undiscounted_returns_to_go():
    adv, ret = compute_gae(_traj([1.0, 1.0, 1.0]), gamma=1.0, lam=1.0)
    assert adv.tolist() == [3.0, 2.0, 1.0]
    assert ret.tolist() == [3.0, 2.0, 1.0]


def test_gae_single_terminal_step():
    adv, _ = compute_gae(_traj([2.0], values=[0.5]), gamma=0.9, lam=0.8)
    assert adv.tolist() == pytest.approx([1.5])


def test_gae_matches_direct_sum():
    rng = np.random.default_rng(3)
    for n in [n for n in range(1, 9) for _ in range(10)]:
        r, v = rng.standard_normal(n), rng.standard_normal(n)
        boot = float(rng.standard_normal())
        gamma, lam = float(rng.uniform(0.5, 1.0)), float(rng.uniform(0.0, 1.0))
        adv, _ = compute_gae(_traj(r, v, bootstrap=boot, terminal=False), gamma, lam)
        nv = np.append(v[1:], boot)
        delta = r + gamma * nv - v
        expected = [sum((gamma * lam) ** (k - t) * delta[k] for k in range(t, n)) for t in range(n)]
        assert adv == pytest.approx(expected, rel=0, abs=1e-10)


def test_normalize_advantages():
    out = normalize_advantages(np.array([1.0, 2.0, 3.0]))
    assert out.mean() == pytest.approx(0.0)
    assert out.std() == pytest.approx(1.0)
    assert normalize_advantages(np.array([2.0, 2.0])).tolist() == [0.0, 0.0]


def test_trajectory_length_mismatch():
    with pytest.raises(ContractViolation):
        Trajectory(observations=np.zeros((2, 1)), actions=np.zeros((1, 1)), rewards=np.zeros(2),
                   values=np.zeros(2), log_probs=np.zeros(2))


# ---------------------------
# rollouts
# ---------------------------

def test_rollout_of_a_safe_policy_fills_the_horizon(nav_config):
    config = nav_config.model_copy(update={"horizon": 50})
    trajs = collect_rollouts(constant_policy([0.0, 0.0], 2, 6), env_factory(config), RandomizationRanges(), 50,
                             np.random.default_rng(0), deterministic=True)
    assert len(trajs) == 1
    assert len(trajs[0]) == 50
    assert not trajs[0].terminal


def test_rollout_into_a_hazard_ends_unsafe(nav_config):
    trajs = collect_rollouts(constant_policy([0.0, 1.0], 2, 6), env_factory(nav_config), RandomizationRanges(), 200,
                             np.random.default_rng(0), deterministic=True)
    assert trajs[0].unsafe
    assert trajs[0].terminal
    assert sum(len(t) for t in trajs) == 200


def test_rollouts_are_deterministic_for_a_seed(nav_config):
    policy = init_policy(6, 2, np.random.default_rng(5), hidden=(8,))
    ranges = nav_config.randomization
    a = collect_rollouts(policy, env_factory(nav_config), ranges, 120, np.random.default_rng(9))
    b = collect_rollouts(policy, env_factory(nav_config), ranges, 120, np.random.default_rng(9))
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert np.array_equal(x.actions, y.actions)
        assert np.array_equal(x.rewards, y.rewards)
        assert x.params == y.params


def test_rollout_reward_override(nav_config):
    trajs = collect_rollouts(constant_policy([0.0, 0.0], 2, 6), env_factory(nav_config), RandomizationRanges(), 10,
                             np.random.default_rng(0), reward_fn=lambda o, a, res: 7.0)
    assert trajs[0].rewards.tolist() == [7.0] * 10


# ---------------------------
# update
# ---------------------------

def test_zero_advantage_batch_leaves_policy_unchanged():
    rng = np.random.default_rng(0)
    policy = init_policy(1, 1, rng, hidden=(4,))
    value_net = init_value(1, rng, hidden=(4,))
    batch = [_traj([0.0, 0.0, 0.0])]
    batch[0].log_probs[:] = policy.log_prob(batch[0].observations, batch[0].actions)
    new_policy, _, diag = ppo_update(policy, value_net, batch, PpoConfig(epochs=2, minibatch_size=2), rng)
    for p, q in zip(policy.params, new_policy.params):
        assert np.array_equal(p, q)
    assert diag["initial_ratio_max_dev"] == pytest.approx(0.0)


def test_unclipped_update_moves_mean_toward_rewarded_action():
    rng = np.random.default_rng(0)
    policy = init_policy(1, 1, rng, hidden=(4,))
    value_net = Mlp(weights=[np.zeros((1, 1))], biases=[np.zeros(1)])
    obs = np.ones((1, 1))
    batch = []
    for action, reward in ((0.5, 1.0), (-0.5, 0.0)):
        a = np.array([[action]])
        batch.append(Trajectory(observations=obs, actions=a, rewards=np.array([reward]), values=np.zeros(1),
                                log_probs=policy.log_prob(obs, a), terminal=True))
    config = PpoConfig(clip_ratio=float("inf"), epochs=1, minibatch_size=2, lr=1e-3)
    before = float(policy.mean_action(obs[0])[0])
    new_policy, _, _ = ppo_update(policy, value_net, batch, config, rng)
    assert float(new_policy.mean_action(obs[0])[0]) > before


def test_value_net_fits_returns():
    rng = np.random.default_rng(0)
    policy = init_policy(1, 1, rng, hidden=(4,))
    value_net = init_value(1, rng, hidden=(4,))
    batch = [_traj([1.0])]
    batch[0].log_probs[:] = policy.log_prob(batch[0].observations, batch[0].actions)
    config = PpoConfig(epochs=200, minibatch_size=1, value_lr=1e-2)
    _, value_net, _ = ppo_update(policy, value_net, batch, config, rng)
    assert float(forward(value_net, np.zeros(1))[0]) == pytest.approx(1.0, abs=0.05)


def test_empty_batch_rejected():
    rng = np.random.default_rng(0)
    with pytest.raises(ContractViolation):
        ppo_update(init_policy(1, 1, rng), init_value(1, rng), [], PpoConfig(), rng)


# ---------------------------
# training loop
# ---------------------------

def test_zero_iterations_returns_initial_policy(nav_config):
    config = PpoConfig(iterations=0, hidden=(8,), value_hidden=(8,))
    result = train_policy(env_factory(nav_config), config, np.random.default_rng(4))
    expected = init_policy(6, 2, np.random.default_rng(4), hidden=(8,), log_std=config.init_log_std)
    for p, q in zip(result.policy.params, expected.params):
        assert np.array_equal(p, q)
    assert result.history == []


def test_training_is_deterministic_and_writes_artifacts(tmp_path, nav_config, tiny_ppo):
    config = nav_config.model_copy(update={"horizon": 40})
    a = train_policy(env_factory(config), tiny_ppo, np.random.default_rng(1), out_dir=tmp_path, name="task_policy")
    b = train_policy(env_factory(config), tiny_ppo, np.random.default_rng(1))
    for p, q in zip(a.policy.params, b.policy.params):
        assert np.array_equal(p, q)
    assert a.history[0]["mean_return"] == b.history[0]["mean_return"]
    assert (tmp_path / "task_policy_metrics.csv").exists()
    loaded = load_policy(tmp_path / "task_policy")
    assert np.array_equal(loaded.log_std, a.policy.log_std)


def test_policy_checkpoint_round_trip(tmp_path):
    policy = init_policy(6, 2, np.random.default_rng(2), hidden=(5,))
    save_policy(policy, tmp_path / "pi")
    loaded = load_policy(tmp_path / "pi")
    obs = np.linspace(-1, 1, 6)
    assert np.array_equal(loaded.mean_action(obs), policy.mean_action(obs))


def test_evaluate_policy_counts_episodes(nav_config):
    config = nav_config.model_copy(update={"horizon": 20})
    stats = evaluate_policy(lambda o: np.zeros(2), env_factory(config), 3, np.random.default_rng(0))
    assert len(stats) == 3
    assert all(s.length == 20 and not s.unsafe for s in stats)
    assert stats[0].total_reward == pytest.approx(20.0)


@pytest.mark.slow
def test_ppo_learns_pointnav(nav_config):
    config = PpoConfig(iterations=50, steps_per_batch=4096)
    result = train_policy(env_factory(nav_config), config, np.random.default_rng(0), randomization=nav_config.randomization)
    trained = evaluate_policy(result.policy.mean_action, env_factory(nav_config), 10, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    baseline = evaluate_policy(random_policy(2, rng), env_factory(nav_config), 10, rng)
    assert np.mean([s.total_reward for s in trained]) >= 5 * np.mean([s.total_reward for s in baseline])
