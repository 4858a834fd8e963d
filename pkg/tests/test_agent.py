import numpy as np
import pytest
import torch

from agent import Agent, LatentActionPolicy, evaluate_policy, frozen, lambda_returns
from envs import make_env
from errors import ContractViolation
from conftest import tiny_agent_config


def n_step_lambda_return(rewards, values, discount, lam):
    """Weighted mixture of n-step returns written out term by term."""
    H = len(rewards)
    out = []
    for t in range(H):
        def n_step(n):
            ret = sum(discount ** k * rewards[t + k] for k in range(n))
            return ret + discount ** n * values[t + n]
        remaining = H - t
        mix = sum((1 - lam) * lam ** (n - 1) * n_step(n) for n in range(1, remaining))
        out.append(mix + lam ** (remaining - 1) * n_step(remaining))
    return out


def test_lambda_returns_match_n_step_expansion():
    rng = np.random.default_rng(0)
    for i in range(1000):
        H = int(rng.integers(1, 11))
        rewards, values = rng.normal(size=H), rng.normal(size=H + 1)
        discount = float(rng.uniform(0.5, 1.0))
        lam = [0.0, 1.0][i % 2] if i < 100 else float(rng.uniform())
        got = lambda_returns(torch.tensor(rewards), torch.tensor(values), discount, lam)
        np.testing.assert_allclose(got.numpy(), n_step_lambda_return(rewards, values, discount, lam), atol=1e-6)


def test_lambda_returns_small_example():
    got = lambda_returns(torch.ones(3), torch.zeros(4), discount=1.0, lam=1.0)
    assert got.tolist() == [3.0, 2.0, 1.0]
    got = lambda_returns(torch.ones(3), torch.full((4,), 10.0), discount=0.5, lam=0.0)
    assert got.tolist() == [6.0, 6.0, 6.0]


def test_lambda_returns_batched_shape():
    got = lambda_returns(torch.zeros(5, 7), torch.zeros(6, 7), 0.99, 0.95)
    assert got.shape == (5, 7)


def test_lambda_returns_preconditions():
    with pytest.raises(ContractViolation):
        lambda_returns(torch.zeros(3), torch.zeros(3), 0.99, 0.95)
    with pytest.raises(ContractViolation):
        lambda_returns(torch.zeros(0), torch.zeros(1), 0.99, 0.95)
    with pytest.raises(ContractViolation):
        lambda_returns(torch.zeros(2), torch.zeros(3), 1.5, 0.95)


def test_frozen_restores_requires_grad():
    net = torch.nn.Linear(2, 2)
    net.bias.requires_grad_(False)
    with frozen(net):
        assert not any(p.requires_grad for p in net.parameters())
    assert net.weight.requires_grad and not net.bias.requires_grad


def make_agent(make_world_model, prior_mode="lawm", **overrides):
    wm = make_world_model(prior_mode=prior_mode)
    return Agent(wm, tiny_agent_config(**overrides), generator=torch.Generator().manual_seed(0))


def start_states(agent, n=6):
    wm = agent.world_model
    with torch.no_grad():
        s = wm.init_state(n)
        return wm.prior_step(s, torch.zeros(n, wm.act_dim, dtype=torch.float64))


def test_policy_samples_stay_in_latent_bound(make_world_model):
    agent = make_agent(make_world_model, latent_bound=2.0)
    u, log_prob = agent.sample_latent(start_states(agent, 200))
    assert (u.abs() < 2.0).all()
    assert torch.isfinite(log_prob).all()


def test_clap_policy_maps_into_prior_support(make_world_model):
    agent = make_agent(make_world_model, prior_mode="clap", latent_bound=1.0)
    s = start_states(agent, 50)
    u = agent.policy_act(s)
    prior = agent.world_model.latent_action_prior(s)
    assert ((u - prior.mean).abs() <= prior.stddev + 1e-12).all()


def test_agent_update_leaves_world_model_unchanged(make_world_model):
    agent = make_agent(make_world_model)
    before = {k: v.clone() for k, v in agent.world_model.state_dict().items()}
    policy_before = [p.clone() for p in agent.policy.parameters()]
    values_before = [p.clone() for p in agent.values.parameters()]
    metrics = agent.agent_update(start_states(agent))
    for k, v in agent.world_model.state_dict().items():
        assert torch.equal(before[k], v), k
    assert any(not torch.equal(a, b) for a, b in zip(policy_before, agent.policy.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(values_before, agent.values.parameters()))
    assert all(p.grad is None for p in agent.world_model.parameters())
    assert set(metrics) >= {"actor_loss", "critic_loss", "return_mean", "policy_entropy"}


def test_agent_update_rejects_attached_start_states(make_world_model):
    agent = make_agent(make_world_model)
    s = start_states(agent)
    s.deter.requires_grad_(True)
    with pytest.raises(ContractViolation):
        agent.agent_update(s)


def directional_check(params, loss_fn, eps=1e-6):
    gen = torch.Generator().manual_seed(1)
    for p in params:
        p.grad = None
    loss_fn().backward()
    for p in params:
        v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
        analytic = float((p.grad * v).sum())
        with torch.no_grad():
            p.add_(eps * v)
            plus = float(loss_fn())
            p.sub_(2 * eps * v)
            minus = float(loss_fn())
            p.add_(eps * v)
        numeric = (plus - minus) / (2 * eps)
        assert abs(analytic - numeric) <= 1e-3 * max(abs(numeric), abs(analytic)) + 1e-7


def test_actor_loss_gradients(make_world_model):
    agent = make_agent(make_world_model)
    agent.world_model.eval()
    s = start_states(agent)

    def loss():
        agent.generator.manual_seed(3)
        return agent.actor_loss(s)[0]

    directional_check(list(agent.policy.parameters()), loss)


def test_critic_loss_gradients(make_world_model):
    agent = make_agent(make_world_model)
    agent.world_model.eval()
    agent.generator.manual_seed(3)
    _, aux = agent.actor_loss(start_states(agent))
    states, targets = aux["rollout"].states.detach(), aux["returns"].detach()
    directional_check(list(agent.values.parameters()), lambda: agent.critic_loss(states, targets))


def test_state_dict_roundtrip(make_world_model):
    agent = make_agent(make_world_model)
    agent.agent_update(start_states(agent))
    other = make_agent(make_world_model)
    other.load_state_dict(agent.state_dict())
    for a, b in zip(agent.policy.parameters(), other.policy.parameters()):
        assert torch.equal(a, b)


def test_evaluate_policy_is_deterministic(make_world_model):
    wm = make_world_model(obs_dim=4, act_dim=2)
    agent = Agent(wm, tiny_agent_config())
    first = evaluate_policy(wm, agent, make_env("point-mass"), episodes=2, seed=5)
    second = evaluate_policy(wm, agent, make_env("point-mass"), episodes=2, seed=5)
    assert first == second
    assert 0.0 <= first[0] <= 100.0
    assert wm.training
    with pytest.raises(ContractViolation):
        evaluate_policy(wm, agent, make_env("point-mass"), episodes=0)


def test_policy_module_shapes():
    policy = LatentActionPolicy(12, 3, tiny_agent_config())
    assert policy.bound.shape == (3,)


def test_critic_converges_to_constant_targets(make_world_model):
    agent = make_agent(make_world_model)
    agent.world_model.eval()
    _, aux = agent.actor_loss(start_states(agent))
    states = aux["rollout"].states.detach()
    targets = torch.full_like(aux["returns"], 0.4).detach()
    opt = torch.optim.Adam(agent.values.parameters(), lr=1e-2)
    history = []
    for _ in range(500):
        loss = agent.critic_loss(states, targets)
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss))
    assert history[-1] < history[0]
    assert np.mean(history[-50:]) < np.mean(history[:50])
    with torch.no_grad():
        pred = agent.values(states.feat()[:-1])
    assert float((pred - 0.4).abs().max()) < 0.05


@pytest.mark.parametrize("weight", [0.0, 0.01])
def test_entropy_weight_enters_actor_loss_linearly(make_world_model, weight):
    agent = make_agent(make_world_model, entropy_weight=weight)
    agent.world_model.eval()
    agent.generator.manual_seed(3)
    loss, aux = agent.actor_loss(start_states(agent))
    expected = -aux["returns"].mean() - weight * aux["entropy"]
    assert float(loss) == pytest.approx(float(expected), abs=1e-12)
    if weight == 0.0:
        assert float(loss) == float(-aux["returns"].mean())
