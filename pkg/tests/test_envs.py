import json
import math
import os

import numpy as np
import pytest

from dataset import load_corpus
from envs import (EPISODE_LENGTH, ScriptedPolicy, collect_corpus, env_spec, generate_dataset, make_env,
                  normalized_return, random_rollouts, rollout)
from errors import ContractViolation, NumericError


@pytest.mark.parametrize("name", ["point-mass", "pendulum"])
def test_reset_is_seeded(name):
    env = make_env(name)
    a, b, c = env.reset(3), env.reset(3), env.reset(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.shape == (env.spec.obs_dim,)


def test_point_mass_goal_is_a_fixed_point():
    env = make_env("point-mass")
    env.set_state([0.0, 0.0, 0.0, 0.0])
    obs, reward, done = env.step([0.0, 0.0])
    assert reward == 1.0
    assert np.array_equal(obs, np.zeros(4))
    assert not done


def test_point_mass_hand_integrated_step():
    env = make_env("point-mass")
    env.set_state([0.5, -0.2, 0.0, 0.0])
    obs, reward, _ = env.step([1.0, 0.0])
    dt = 0.05
    np.testing.assert_allclose(obs, [0.5 + 0.5 * dt * dt, -0.2, dt, 0.0], rtol=0, atol=1e-15)
    assert reward == pytest.approx(math.exp(-(obs[0] ** 2 + obs[1] ** 2)))


def test_point_mass_action_is_recoverable_from_velocities():
    env = make_env("point-mass")
    obs = env.reset(0)
    rng = np.random.default_rng(0)
    for _ in range(50):
        action = rng.uniform(-2, 2, size=2)
        nxt, _, _ = env.step(action)
        np.testing.assert_allclose((nxt[2:] - obs[2:]) / env.spec.dt, action, atol=1e-9)
        obs = nxt


def test_pendulum_hanging_down_has_zero_reward():
    env = make_env("pendulum")
    env.set_state([math.pi, 0.0])
    assert env.reward() == 0.0
    _, reward, _ = env.step([0.0])
    assert reward == pytest.approx(0.0, abs=1e-12)


def test_pendulum_upright_has_full_reward():
    env = make_env("pendulum")
    obs = env.set_state([0.0, 0.0])
    assert env.reward() == 1.0
    np.testing.assert_allclose(obs, [1.0, 0.0, 0.0])


@pytest.mark.parametrize("name", ["point-mass", "pendulum"])
def test_dynamics_are_bitwise_deterministic(name):
    env = make_env(name)
    env.reset(1)
    state = env.state.copy()
    action = np.full(env.spec.act_dim, 0.7)
    assert np.array_equal(env.dynamics(state, action), env.dynamics(state.copy(), action.copy()))


def test_step_validation_and_clipping():
    env = make_env("point-mass")
    env.reset(0)
    with pytest.raises(NumericError):
        env.step([float("nan"), 0.0])
    env.step([5.0, -5.0])
    assert env.clip_count == 1
    assert env.last_action.tolist() == [2.0, -2.0]


def test_episode_has_exactly_500_steps():
    env = make_env("pendulum")
    env.reset(0)
    steps, done = 0, False
    while not done:
        _, reward, done = env.step([0.5])
        assert 0.0 <= reward <= 1.0
        steps += 1
    assert steps == EPISODE_LENGTH
    with pytest.raises(ContractViolation):
        env.step([0.0])


def test_step_before_reset():
    with pytest.raises(ContractViolation):
        make_env("point-mass").step([0.0, 0.0])


def test_unknown_environment():
    with pytest.raises(ContractViolation):
        make_env("cartpole")


def test_normalized_return_scale():
    spec = env_spec("point-mass")
    assert normalized_return(500.0, spec) == 100.0
    assert normalized_return(0.0, spec) == 0.0


@pytest.mark.parametrize("kind", ["expert", "medium", "replay-mixture", "explore"])
def test_scripted_actions_within_bounds(kind):
    for name in ("point-mass", "pendulum"):
        spec = env_spec(name)
        policy = ScriptedPolicy.for_trajectory(spec, kind, 0, 4, np.random.default_rng(0))
        traj = rollout(make_env(name), policy, seed=0)
        assert traj.length == EPISODE_LENGTH
        assert (np.abs(traj.actions) <= np.asarray(spec.action_bound, dtype=np.float32)).all()
        assert ((traj.rewards >= 0) & (traj.rewards <= 1)).all()


def mean_score(kind, n=12):
    corpus = collect_corpus("point-mass", kind, n, seed=0, workers=2)
    spec = env_spec("point-mass")
    return float(np.mean([normalized_return(t.total_return(), spec) for t in corpus.trajectories]))


def test_point_mass_dataset_quality_ordering():
    expert, medium = mean_score("expert"), mean_score("medium")
    replay, explore = mean_score("replay-mixture"), mean_score("explore")
    assert expert >= 90.0
    assert expert > medium > replay
    assert explore < medium


def test_collection_is_reproducible_and_parallel_safe():
    a = collect_corpus("pendulum", "medium", 4, seed=7, workers=1)
    b = collect_corpus("pendulum", "medium", 4, seed=7, workers=4)
    for x, y in zip(a.trajectories, b.trajectories):
        assert np.array_equal(x.obs, y.obs) and np.array_equal(x.actions, y.actions)


def test_collection_seed_shares():
    corpus = collect_corpus("point-mass", "explore", 5, seed=0, collection_seeds=[1, 2], workers=2)
    assert len(corpus) == 5
    assert corpus.meta["per_seed_counts"] == [3, 2]
    assert corpus.meta["collection_seeds"] == [1, 2]


def test_generate_dataset_layout(tmp_path):
    directory = generate_dataset("point-mass", "expert", 3, seed=0, out_root=str(tmp_path), workers=2)
    assert directory == os.path.join(str(tmp_path), "point-mass", "expert")
    assert sorted(os.listdir(directory)) == ["meta.json", "traj_000000.lawm", "traj_000001.lawm", "traj_000002.lawm"]
    with open(os.path.join(directory, "meta.json")) as f:
        meta = json.load(f)
    assert meta["policy_kind"] == "expert" and meta["seed"] == 0
    assert meta["env"]["name"] == "point-mass" and "generator" in meta
    assert meta["model_spec"] == {"obs_dim": 4, "act_dim": 2, "action_bound": [2.0, 2.0]}
    assert load_corpus(directory).labeled_count == 3


def test_random_rollouts_truncate():
    trajs = random_rollouts("point-mass", 2, seed=0, length=10)
    assert [t.length for t in trajs] == [10, 10]
    assert all(t.has_actions for t in trajs)


def test_random_policy_scores_near_zero():
    spec = env_spec("point-mass")
    scores = [normalized_return(t.total_return(), spec) for t in random_rollouts("point-mass", 20, seed=0)]
    assert 0.0 <= float(np.mean(scores)) < 25.0
