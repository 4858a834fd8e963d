"""
Offline actor-critic trained on imagined rollouts of the world model.

The policy acts in latent-action space. With the standard-normal latent
action prior its TanhGaussian output is bounded by `latent_bound`; with the
state-conditioned prior the squashed output is mapped through the prior's
mean and stddev, so in both cases the policy stays inside the prior's support.
"""
import contextlib
import logging
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from config import AgentConfig
from distributions import TanhGaussian, gaussian_from_raw
from envs import normalized_return
from errors import ContractViolation
from networks import mlp
from world_model import ModelState, WorldModel

logger = logging.getLogger("agent")


@contextlib.contextmanager
def frozen(*modules: nn.Module) -> Iterator[None]:
    """Temporarily stop parameters from requiring gradients (gradients still flow through)."""
    saved = []
    for module in modules:
        for p in module.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


class LatentActionPolicy(nn.Module):
    def __init__(self, feat_dim: int, latent_size: int, cfg: AgentConfig, min_std: float = 0.01):
        super().__init__()
        self.net = mlp(feat_dim, 2 * latent_size, cfg.units, cfg.layers)
        self.min_std = min_std
        self.register_buffer("bound", torch.full((latent_size,), float(cfg.latent_bound)))

    def forward(self, s: ModelState) -> TanhGaussian:
        base = gaussian_from_raw(self.net(s.feat()), self.min_std)
        return TanhGaussian(base, self.bound.to(base.mean.dtype))


class TwinValue(nn.Module):
    """Two independent value networks; bootstrapping uses their elementwise minimum."""

    def __init__(self, feat_dim: int, cfg: AgentConfig):
        super().__init__()
        self.nets = nn.ModuleList([mlp(feat_dim, 1, cfg.units, cfg.layers) for _ in range(2)])

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        return torch.stack([net(feat).squeeze(-1) for net in self.nets], dim=0)

    def min_value(self, feat: torch.Tensor) -> torch.Tensor:
        return self(feat).min(dim=0).values


def lambda_returns(rewards: torch.Tensor, values: torch.Tensor, discount: float, lam: float) -> torch.Tensor:
    """G_t = r_t + discount * ((1 - lam) * V_{t+1} + lam * G_{t+1}), with G_H = V_H.

    `rewards` has H entries along axis 0, `values` has H + 1.
    """
    horizon = rewards.shape[0]
    if horizon < 1:
        raise ContractViolation("lambda_returns needs at least one reward")
    if values.shape[0] != horizon + 1:
        raise ContractViolation(f"lambda_returns: {horizon} rewards need {horizon + 1} values, got {values.shape[0]}")
    if not (0.0 <= discount <= 1.0 and 0.0 <= lam <= 1.0):
        raise ContractViolation(f"discount and lambda must lie in [0, 1], got {discount}, {lam}")
    targets = []
    last = values[-1]
    for t in reversed(range(horizon)):
        last = rewards[t] + discount * ((1.0 - lam) * values[t + 1] + lam * last)
        targets.append(last)
    return torch.stack(targets[::-1], dim=0)


class Agent:
    """Policy, twin critics and their optimizers; the world model is only read."""

    def __init__(self, world_model: WorldModel, cfg: AgentConfig, generator: Optional[torch.Generator] = None):
        mcfg = world_model.cfg
        feat_dim = mcfg.deter_size + mcfg.stoch_size
        self.cfg = cfg
        self.prior_mode = mcfg.prior_mode
        self.world_model = world_model
        self.generator = generator
        dtype = next(world_model.parameters()).dtype
        self.policy = LatentActionPolicy(feat_dim, mcfg.latent_action_size, cfg, mcfg.min_std).to(dtype)
        self.values = TwinValue(feat_dim, cfg).to(dtype)
        self.actor_opt = torch.optim.Adam(self.policy.parameters(), lr=cfg.lr)
        self.critic_opt = torch.optim.Adam(self.values.parameters(), lr=cfg.lr)

    # -- acting ----------------------------------------------------------------

    def _to_prior_support(self, y: torch.Tensor, log_prob: torch.Tensor, s: ModelState) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.prior_mode != "clap":
            return y, log_prob
        prior = self.world_model.latent_action_prior(s)
        return prior.mean + prior.stddev * y, log_prob - torch.log(prior.stddev).sum(-1)

    def sample_latent(self, s: ModelState) -> Tuple[torch.Tensor, torch.Tensor]:
        """Reparameterized latent action and its log-density (imagination policy)."""
        dist = self.policy(s)
        y, pre = dist.rsample(self.generator)
        return self._to_prior_support(y, dist.log_prob_pre(pre), s)

    def policy_act(self, s: ModelState, deterministic: bool = False) -> torch.Tensor:
        dist = self.policy(s)
        if deterministic:
            y = dist.mode()
        else:
            y, _ = dist.rsample(self.generator)
        u, _ = self._to_prior_support(y, torch.zeros(y.shape[:-1], dtype=y.dtype), s)
        return u

    # -- learning ----------------------------------------------------------------

    def actor_loss(self, start: ModelState) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
        """Actor objective on an imagined rollout; critics and world model are frozen."""
        cfg = self.cfg
        with frozen(self.world_model, self.values):
            rollout = self.world_model.imagine(start, self.sample_latent, cfg.horizon)
            values = self.values.min_value(rollout.states.feat())
            returns = lambda_returns(rollout.rewards, values, cfg.discount, cfg.lam)
            entropy = -rollout.log_probs.mean()
            loss = -returns.mean() - cfg.entropy_weight * entropy
        return loss, {"rollout": rollout, "returns": returns, "entropy": entropy}

    def critic_loss(self, states: ModelState, targets: torch.Tensor) -> torch.Tensor:
        """Both critics regress the lambda-return targets of states[:-1]."""
        pred = self.values(states.feat()[:-1].detach())
        return 0.5 * (pred - targets.detach().unsqueeze(0)).pow(2).mean(dim=(1, 2)).sum()

    def agent_update(self, start: ModelState) -> Dict[str, float]:
        if start.deter.requires_grad or start.stoch.requires_grad:
            raise ContractViolation("agent_update needs start states detached from the world model graph")
        actor_loss, aux = self.actor_loss(start)
        self.actor_opt.zero_grad(set_to_none=True)
        actor_loss.backward()
        actor_norm = nn.utils.clip_grad_norm_(self.policy.parameters(), self.cfg.grad_clip)
        self.actor_opt.step()

        critic_loss = self.critic_loss(aux["rollout"].states, aux["returns"])
        self.critic_opt.zero_grad(set_to_none=True)
        critic_loss.backward()
        critic_norm = nn.utils.clip_grad_norm_(self.values.parameters(), self.cfg.grad_clip)
        self.critic_opt.step()
        return {
            "actor_loss": float(actor_loss.detach()),
            "critic_loss": float(critic_loss.detach()),
            "return_mean": float(aux["returns"].detach().mean()),
            "imagined_reward": float(aux["rollout"].rewards.detach().mean()),
            "policy_entropy": float(aux["entropy"].detach()),
            "actor_grad_norm": float(actor_norm),
            "critic_grad_norm": float(critic_norm),
        }

    def state_dict(self) -> Dict[str, object]:
        return {
            "policy": self.policy.state_dict(),
            "values": self.values.state_dict(),
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
        }

    def load_state_dict(self, state: Dict[str, object]) -> None:
        self.policy.load_state_dict(state["policy"])
        self.values.load_state_dict(state["values"])
        self.actor_opt.load_state_dict(state["actor_opt"])
        self.critic_opt.load_state_dict(state["critic_opt"])


def evaluate_policy(world_model: WorldModel, agent: Agent, env, episodes: int, seed: int = 0) -> Tuple[float, float]:
    """Mean and std of normalized returns in the real environment (deterministic path)."""
    if episodes < 1:
        raise ContractViolation(f"episodes must be >= 1, got {episodes}")
    was_training = world_model.training
    world_model.eval()
    dtype = next(world_model.parameters()).dtype
    scores = []
    try:
        with torch.no_grad():
            for episode in range(episodes):
                obs = env.reset(seed + episode)
                state = world_model.init_state(1)
                prev_action = world_model.initial_action(1)
                total, done = 0.0, False
                while not done:
                    embed = world_model.encode_obs(torch.as_tensor(obs, dtype=dtype).unsqueeze(0))
                    state = world_model.posterior_step(state, prev_action, embed)
                    u = agent.policy_act(state, deterministic=True)
                    action = world_model.decode_action(state, u).mean
                    obs, reward, done = env.step(action.squeeze(0).cpu().numpy().astype(np.float64))
                    prev_action = torch.as_tensor(env.last_action, dtype=dtype).unsqueeze(0)
                    total += reward
                scores.append(normalized_return(total, env.spec))
    finally:
        world_model.train(was_training)
    mean, std = float(np.mean(scores)), float(np.std(scores))
    logger.info(f"Evaluated {episodes} episodes on {env.spec.name}: {mean:.1f} +- {std:.1f}")
    return mean, std
