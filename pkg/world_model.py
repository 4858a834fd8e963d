"""
Latent action world model.

A recurrent state-space model whose transitions are driven by environment
actions, with a latent action u_t between the state and the action:

    prior      p(s_t | s_{t-1}, a_{t-1})        posterior  q(s_t | s_{t-1}, a_{t-1}, o_t)
    u prior    p(u_t | s_t)                     u posterior q(u_t | s_t, a_t)      (labeled)
                                                            q(u_t | s_t, o_{t+1})  (action-free)
    decoders   p(a_t | s_t, u_t), p(o_t | s_t), p(r_t | s_t)

The action decoder serves as both p(a_t | s_t, u_t) and q(a_t | s_t, u_t).
"""
import logging
import os
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import CHECKPOINT_MAGIC, ModelConfig
from dataset import TrajectoryBatch
from distributions import DiagGaussian, gaussian_from_raw, standard_normal
from errors import ContractViolation, DataFormatError, NumericError
from networks import mlp

logger = logging.getLogger("world_model")

LABELED = "labeled"
ACTION_FREE = "action-free"


@dataclass
class ModelState:
    deter: torch.Tensor
    stoch: torch.Tensor
    stoch_dist: DiagGaussian

    def feat(self) -> torch.Tensor:
        return torch.cat([self.deter, self.stoch], dim=-1)

    @property
    def batch_shape(self) -> torch.Size:
        return self.deter.shape[:-1]

    def detach(self) -> "ModelState":
        return ModelState(self.deter.detach(), self.stoch.detach(), self.stoch_dist.detach())

    def flatten(self) -> "ModelState":
        """Merge every leading axis into one batch axis."""
        def flat(t):
            return t.reshape(-1, t.shape[-1])
        return ModelState(
            flat(self.deter), flat(self.stoch),
            DiagGaussian(flat(self.stoch_dist.mean), flat(self.stoch_dist.stddev)),
        )

    def __getitem__(self, index) -> "ModelState":
        return ModelState(self.deter[index], self.stoch[index], self.stoch_dist[index])

    @staticmethod
    def stack(states: Sequence["ModelState"], dim: int = 1) -> "ModelState":
        return ModelState(
            torch.stack([s.deter for s in states], dim=dim),
            torch.stack([s.stoch for s in states], dim=dim),
            DiagGaussian.stack([s.stoch_dist for s in states], dim=dim),
        )


@dataclass
class LatentAction:
    sample: torch.Tensor
    dist: DiagGaussian


@dataclass
class FilterResult:
    """Output of a filtering pass over a (B, T) batch.

    `states` and `prior` cover all T steps. The latent-action fields cover
    T steps in labeled mode and T-1 (or T, when the batch carries o_{T+1})
    steps in action-free mode; `action_mask` marks the valid entries.
    """

    mode: str
    states: ModelState
    prior: DiagGaussian
    action_post: DiagGaussian
    action_prior: DiagGaussian
    latent_actions: torch.Tensor
    action_dec: DiagGaussian
    action_mask: torch.Tensor


@dataclass
class ImaginedRollout:
    """`states` has horizon+1 entries (the start first); the rest have horizon entries."""

    states: ModelState
    latent_actions: torch.Tensor
    log_probs: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor


# Policy interface used by imagination: state -> (latent action, log-prob of it).
LatentPolicy = Callable[[ModelState], Tuple[torch.Tensor, torch.Tensor]]


class WorldModel(nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, action_bound: Sequence[float], cfg: ModelConfig):
        super().__init__()
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.cfg = cfg
        self.prior_mode = cfg.prior_mode
        # Noise source for every reparameterized sample; None means the global torch RNG.
        self.generator: Optional[torch.Generator] = None

        bound = torch.as_tensor(action_bound, dtype=torch.float32).reshape(-1)
        if bound.numel() == 1:
            bound = bound.expand(act_dim).clone()
        if bound.numel() != act_dim or (bound <= 0).any():
            raise ContractViolation(f"action_bound must hold {act_dim} positive values")
        self.register_buffer("action_bound", bound)

        feat = cfg.deter_size + cfg.stoch_size
        u = cfg.latent_action_size
        self.encoder = mlp(obs_dim, cfg.embed_size, cfg.mlp_units, cfg.mlp_layers)
        self.img_in = nn.Sequential(
            nn.Linear(cfg.stoch_size + act_dim, cfg.hidden_units),
            nn.LayerNorm(cfg.hidden_units),
            nn.SiLU(),
        )
        self.cell = nn.GRUCell(cfg.hidden_units, cfg.deter_size)
        self.prior_head = mlp(cfg.deter_size, 2 * cfg.stoch_size, cfg.hidden_units, 1)
        self.posterior_head = mlp(cfg.deter_size + cfg.embed_size, 2 * cfg.stoch_size, cfg.hidden_units, 1)
        if cfg.prior_mode == "clap":
            self.action_prior_head = mlp(feat, 2 * u, cfg.prior_units, cfg.prior_layers)
        else:
            self.action_prior_head = None
        self.action_posterior = mlp(feat + act_dim, 2 * u, cfg.mlp_units, cfg.mlp_layers)
        self.action_posterior_free = mlp(feat + cfg.embed_size, 2 * u, cfg.idm_units, cfg.idm_layers)
        self.action_decoder = mlp(feat + u, 2 * act_dim, cfg.mlp_units, cfg.mlp_layers)
        self.obs_decoder = mlp(feat, obs_dim, cfg.mlp_units, cfg.mlp_layers)
        self.reward_head = mlp(feat, 1, cfg.mlp_units, cfg.mlp_layers)

    # -- sampling ---------------------------------------------------------

    def _draw(self, dist: DiagGaussian) -> torch.Tensor:
        """Reparameterized sample while training, distribution mean in eval mode."""
        if not self.training:
            return dist.mean
        return dist.sample(self.generator)

    # -- single-step operations -------------------------------------------

    def init_state(self, batch: int) -> ModelState:
        if batch < 1:
            raise ContractViolation(f"init_state: batch must be >= 1, got {batch}")
        ref = self.action_bound
        deter = torch.zeros(batch, self.cfg.deter_size, dtype=self._dtype(), device=ref.device)
        stoch = torch.zeros(batch, self.cfg.stoch_size, dtype=self._dtype(), device=ref.device)
        return ModelState(deter, stoch, standard_normal(stoch.shape, stoch))

    def initial_action(self, batch: int) -> torch.Tensor:
        return torch.zeros(batch, self.act_dim, dtype=self._dtype(), device=self.action_bound.device)

    def encode_obs(self, obs: torch.Tensor) -> torch.Tensor:
        if obs.shape[-1] != self.obs_dim:
            raise ContractViolation(f"encode_obs: expected obs_dim {self.obs_dim}, got {obs.shape[-1]}")
        if not torch.isfinite(obs).all():
            raise NumericError("encode_obs: non-finite observation")
        return self.encoder(obs)

    def _deter_step(self, prev: ModelState, prev_action: torch.Tensor) -> torch.Tensor:
        if prev_action.shape[-1] != self.act_dim:
            raise ContractViolation(f"expected action dim {self.act_dim}, got {prev_action.shape[-1]}")
        x = self.img_in(torch.cat([prev.stoch, prev_action], dim=-1))
        return self.cell(x, prev.deter)

    def prior_step(self, prev: ModelState, prev_action: torch.Tensor) -> ModelState:
        deter = self._deter_step(prev, prev_action)
        dist = gaussian_from_raw(self.prior_head(deter), self.cfg.min_std)
        return ModelState(deter, self._draw(dist), dist)

    def posterior_step(self, prev: ModelState, prev_action: torch.Tensor, obs_embed: torch.Tensor) -> ModelState:
        deter = self._deter_step(prev, prev_action)
        if obs_embed.shape[-1] != self.cfg.embed_size:
            raise ContractViolation(f"expected embedding size {self.cfg.embed_size}, got {obs_embed.shape[-1]}")
        dist = gaussian_from_raw(self.posterior_head(torch.cat([deter, obs_embed], dim=-1)), self.cfg.min_std)
        return ModelState(deter, self._draw(dist), dist)

    def latent_action_prior(self, s: ModelState) -> DiagGaussian:
        if self.action_prior_head is None:
            return standard_normal((*s.batch_shape, self.cfg.latent_action_size), s.deter)
        return gaussian_from_raw(self.action_prior_head(s.feat()), self.cfg.min_std)

    def action_posterior_labeled(self, s: ModelState, action: torch.Tensor) -> LatentAction:
        if action.shape[-1] != self.act_dim:
            raise ContractViolation(f"expected action dim {self.act_dim}, got {action.shape[-1]}")
        dist = gaussian_from_raw(self.action_posterior(torch.cat([s.feat(), action], dim=-1)), self.cfg.min_std)
        return LatentAction(self._draw(dist), dist)

    def action_posterior_unlabeled(self, s: ModelState, next_obs_embed: torch.Tensor) -> LatentAction:
        if next_obs_embed.shape[-1] != self.cfg.embed_size:
            raise ContractViolation(f"expected embedding size {self.cfg.embed_size}, got {next_obs_embed.shape[-1]}")
        raw = self.action_posterior_free(torch.cat([s.feat(), next_obs_embed], dim=-1))
        dist = gaussian_from_raw(raw, self.cfg.min_std)
        return LatentAction(self._draw(dist), dist)

    def decode_action(self, s: ModelState, u: torch.Tensor) -> DiagGaussian:
        if u.shape[-1] != self.cfg.latent_action_size:
            raise ContractViolation(f"expected latent action size {self.cfg.latent_action_size}, got {u.shape[-1]}")
        raw_mean, raw_std = torch.chunk(self.action_decoder(torch.cat([s.feat(), u], dim=-1)), 2, dim=-1)
        mean = self.action_bound.to(raw_mean.dtype) * torch.tanh(raw_mean)
        return DiagGaussian(mean, F.softplus(raw_std) + self.cfg.min_std)

    def decode_obs(self, s: ModelState) -> DiagGaussian:
        mean = self.obs_decoder(s.feat())
        return DiagGaussian(mean, torch.ones_like(mean))

    def predict_reward(self, s: ModelState) -> DiagGaussian:
        mean = self.reward_head(s.feat())
        return DiagGaussian(mean, torch.ones_like(mean))

    # -- sequences ----------------------------------------------------------

    def observe_trajectory(self, batch: TrajectoryBatch, mode: str) -> FilterResult:
        """Left-to-right filtering pass over a homogeneous batch."""
        if mode not in (LABELED, ACTION_FREE):
            raise ContractViolation(f"unknown filtering mode '{mode}'")
        B, T = batch.obs.shape[:2]
        if T < 2 and mode == ACTION_FREE:
            raise ContractViolation("action-free filtering needs at least 2 steps")
        if mode == LABELED and batch.actions is None:
            raise ContractViolation("labeled filtering on a batch without actions")

        embeds = self.encode_obs(batch.obs)
        state = self.init_state(B)
        prev_action = self.initial_action(B)
        states, priors = [], []
        posts, u_priors, samples, decoded, masks = [], [], [], [], []

        tail_embed = None
        if mode == ACTION_FREE and batch.next_obs is not None:
            tail_embed = self.encode_obs(batch.next_obs)

        for t in range(T):
            state = self.posterior_step(state, prev_action, embeds[:, t])
            deter = state.deter
            prior = gaussian_from_raw(self.prior_head(deter), self.cfg.min_std)
            states.append(state)
            priors.append(prior)

            if mode == LABELED:
                latent = self.action_posterior_labeled(state, batch.actions[:, t])
                mask = torch.ones(B, dtype=deter.dtype, device=deter.device)
            else:
                if t + 1 < T:
                    next_embed = embeds[:, t + 1]
                    mask = torch.ones(B, dtype=deter.dtype, device=deter.device)
                elif tail_embed is not None:
                    next_embed = tail_embed
                    mask = batch.next_obs_mask.to(deter.dtype)
                else:
                    break
                latent = self.action_posterior_unlabeled(state, next_embed)

            dec = self.decode_action(state, latent.sample)
            posts.append(latent.dist)
            u_priors.append(self.latent_action_prior(state))
            samples.append(latent.sample)
            decoded.append(dec)
            masks.append(mask)

            if mode == LABELED:
                prev_action = batch.actions[:, t]
            else:
                prev_action = self._draw(dec)

        return FilterResult(
            mode=mode,
            states=ModelState.stack(states, dim=1),
            prior=DiagGaussian.stack(priors, dim=1),
            action_post=DiagGaussian.stack(posts, dim=1),
            action_prior=DiagGaussian.stack(u_priors, dim=1),
            latent_actions=torch.stack(samples, dim=1),
            action_dec=DiagGaussian.stack(decoded, dim=1),
            action_mask=torch.stack(masks, dim=1),
        )

    def imagine(self, start: ModelState, policy: LatentPolicy, horizon: int) -> ImaginedRollout:
        """Roll the prior forward under a latent-action policy."""
        if horizon < 1:
            raise ContractViolation(f"imagine: horizon must be >= 1, got {horizon}")
        if start.deter.requires_grad or start.stoch.requires_grad:
            raise ContractViolation("imagine: start states must be detached from the filtering graph")
        state = start
        states, us, log_probs, actions, rewards = [start], [], [], [], []
        for _ in range(horizon):
            u, log_prob = policy(state)
            dec = self.decode_action(state, u)
            action = dec.mean if self.cfg.imagine_with_mean else self._draw(dec)
            state = self.prior_step(state, action)
            states.append(state)
            us.append(u)
            log_probs.append(log_prob)
            actions.append(action)
            rewards.append(self.predict_reward(state).mean.squeeze(-1))
        return ImaginedRollout(
            states=ModelState.stack(states, dim=0),
            latent_actions=torch.stack(us, dim=0),
            log_probs=torch.stack(log_probs, dim=0),
            actions=torch.stack(actions, dim=0),
            rewards=torch.stack(rewards, dim=0),
        )

    def _dtype(self) -> torch.dtype:
        return self.cell.weight_hh.dtype


def save_checkpoint(path: str, payload: Dict[str, Any]) -> str:
    """Write a checkpoint file tagged with the format magic; atomic via rename."""
    tmp_path = f"{path}.tmp"
    torch.save({"magic": CHECKPOINT_MAGIC, **payload}, tmp_path)
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint {path}")
    return path


def load_checkpoint(path: str) -> Dict[str, Any]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("magic") != CHECKPOINT_MAGIC:
        raise DataFormatError("not a LAWM checkpoint", offset=0, section="magic", path=path)
    return payload


def build_world_model(spec: Dict[str, Any], cfg: ModelConfig) -> WorldModel:
    """Build from the `model_spec` block stored in checkpoints and corpus metadata."""
    return WorldModel(spec["obs_dim"], spec["act_dim"], spec["action_bound"], cfg)

