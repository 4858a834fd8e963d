"""
Training losses of the latent action world model.

All losses are negative ELBOs (minimized), averaged over time within a
trajectory and then over trajectories. `LossBreakdown.total` is

    obs_recon + action_recon + state_kl + action_kl + reward_nll

where `reward_nll` is zero for the pure model losses and filled in by
`model_loss`, the objective the trainer optimizes.
"""
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple, Union

import torch

from dataset import Trajectory, TrajectoryBatch, collate
from distributions import DiagGaussian, free_nats_clip, kl_diag_gaussian
from errors import ContractViolation, DataError
from world_model import ACTION_FREE, LABELED, FilterResult, ModelState, WorldModel

TERMS = ("obs_recon", "action_recon", "state_kl", "action_kl", "reward_nll")

BatchLike = Union[TrajectoryBatch, Trajectory, Sequence[Trajectory]]


@dataclass
class LossBreakdown:
    obs_recon: torch.Tensor
    action_recon: torch.Tensor
    state_kl: torch.Tensor
    action_kl: torch.Tensor
    reward_nll: torch.Tensor
    total: torch.Tensor
    mask_fraction: float

    def metrics(self) -> Dict[str, float]:
        out = {name: float(getattr(self, name).detach()) for name in TERMS + ("total",)}
        out["mask_fraction"] = float(self.mask_fraction)
        return out


def _as_batch(data: BatchLike, labeled: bool, dtype: torch.dtype) -> TrajectoryBatch:
    if isinstance(data, TrajectoryBatch):
        return data
    trajs = [data] if isinstance(data, Trajectory) else list(data)
    return collate(trajs, labeled=labeled, dtype=dtype)


def _model_dtype(wm: WorldModel) -> torch.dtype:
    return next(wm.parameters()).dtype


def _per_trajectory_terms(
    wm: WorldModel, batch: TrajectoryBatch, mode: str, free_nats: float, free_nats_action: bool,
) -> Tuple[Dict[str, torch.Tensor], FilterResult]:
    """Each term as a (B,) tensor, time-averaged per trajectory."""
    res = wm.observe_trajectory(batch, mode)
    obs_nll = -wm.decode_obs(res.states).log_prob(batch.obs)
    state_kl = free_nats_clip(kl_diag_gaussian(res.states.stoch_dist, res.prior), free_nats)
    action_kl = kl_diag_gaussian(res.action_post, res.action_prior)
    if free_nats_action:
        action_kl = free_nats_clip(action_kl, free_nats)
    mask = res.action_mask
    terms = {
        "obs_recon": obs_nll.mean(1),
        "state_kl": state_kl.mean(1),
        "action_kl": (action_kl * mask).sum(1) / mask.sum(1).clamp(min=1.0),
    }
    if mode == LABELED:
        terms["action_recon"] = (-res.action_dec.log_prob(batch.actions)).mean(1)
    else:
        terms["action_recon"] = torch.zeros_like(terms["obs_recon"])
    terms["reward_nll"] = torch.zeros_like(terms["obs_recon"])
    return terms, res


def _reward_nll(wm: WorldModel, states: ModelState, rewards: torch.Tensor) -> torch.Tensor:
    if rewards is None:
        raise DataError("reward loss needs rewards")
    return (-wm.predict_reward(states).log_prob(rewards.unsqueeze(-1))).mean(1)


def _reduce(terms: Dict[str, torch.Tensor], mask_fraction: float) -> LossBreakdown:
    means = {name: terms[name].mean() for name in TERMS}
    total = sum(means[name] for name in TERMS)
    return LossBreakdown(total=total, mask_fraction=mask_fraction, **means)


def loss_action_conditioned(
    wm: WorldModel, data: BatchLike, free_nats: float = 0.0, free_nats_action: bool = True,
) -> LossBreakdown:
    """Negative action-conditioned ELBO."""
    batch = _as_batch(data, labeled=True, dtype=_model_dtype(wm))
    if batch.actions is None:
        raise ContractViolation("loss_action_conditioned needs action-labeled trajectories")
    terms, _ = _per_trajectory_terms(wm, batch, LABELED, free_nats, free_nats_action)
    return _reduce(terms, 1.0)


def loss_action_free(
    wm: WorldModel, data: BatchLike, free_nats: float = 0.0, free_nats_action: bool = True,
) -> LossBreakdown:
    """Negative action-free ELBO; stored actions are never read."""
    batch = _as_batch(data, labeled=False, dtype=_model_dtype(wm))
    if batch.obs.shape[1] < 2:
        raise ContractViolation("loss_action_free needs trajectories of at least 2 steps")
    terms, _ = _per_trajectory_terms(wm, batch, ACTION_FREE, free_nats, free_nats_action)
    return _reduce(terms, 0.0)


def _route(trajs: Sequence[Trajectory]) -> Tuple[List[Trajectory], List[Trajectory]]:
    if not trajs:
        raise ContractViolation("unified_loss needs a non-empty batch")
    labeled, unlabeled = [], []
    for traj in trajs:
        if traj.partially_labeled:
            raise ContractViolation("trajectory has actions at some but not all steps")
        (labeled if traj.has_actions else unlabeled).append(traj)
    return labeled, unlabeled


def _unified_terms(
    wm: WorldModel, trajs: Sequence[Trajectory], free_nats: float, free_nats_action: bool, with_reward: bool,
) -> Tuple[Dict[str, torch.Tensor], List[FilterResult], float]:
    labeled, unlabeled = _route(trajs)
    dtype = _model_dtype(wm)
    parts, results = [], []
    for group, mode in ((labeled, LABELED), (unlabeled, ACTION_FREE)):
        if not group:
            continue
        batch = collate(group, labeled=mode == LABELED, dtype=dtype)
        terms, res = _per_trajectory_terms(wm, batch, mode, free_nats, free_nats_action)
        if with_reward:
            terms["reward_nll"] = _reward_nll(wm, res.states, batch.rewards)
        parts.append(terms)
        results.append(res)
    merged = {name: torch.cat([p[name] for p in parts]) for name in TERMS}
    return merged, results, len(labeled) / len(trajs)


def unified_loss(
    wm: WorldModel, trajs: Sequence[Trajectory], free_nats: float = 0.0, free_nats_action: bool = True,
) -> LossBreakdown:
    """m(tau) * L_action-conditioned + (1 - m(tau)) * L_action-free, averaged over trajectories."""
    terms, _, fraction = _unified_terms(wm, trajs, free_nats, free_nats_action, with_reward=False)
    return _reduce(terms, fraction)


def reward_loss(wm: WorldModel, data: BatchLike) -> torch.Tensor:
    """Reward negative log-likelihood at posterior states; actions only steer the filter."""
    labeled = isinstance(data, TrajectoryBatch) and data.actions is not None
    if not isinstance(data, TrajectoryBatch):
        trajs = [data] if isinstance(data, Trajectory) else list(data)
        labeled = all(t.has_actions for t in trajs)
    batch = _as_batch(data, labeled=labeled, dtype=_model_dtype(wm))
    res = wm.observe_trajectory(batch, LABELED if labeled else ACTION_FREE)
    return _reward_nll(wm, res.states, batch.rewards).mean()


def model_loss(
    wm: WorldModel, trajs: Sequence[Trajectory], free_nats: float = 0.0, free_nats_action: bool = True,
) -> Tuple[LossBreakdown, ModelState]:
    """The trainer's objective (unified loss plus reward loss) and the detached posterior states."""
    terms, results, fraction = _unified_terms(wm, trajs, free_nats, free_nats_action, with_reward=True)
    flat = [r.states.detach().flatten() for r in results]
    states = flat[0] if len(flat) == 1 else _concat_states(flat)
    return _reduce(terms, fraction), states


def _concat_states(states: List[ModelState]) -> ModelState:
    return ModelState(
        torch.cat([s.deter for s in states]),
        torch.cat([s.stoch for s in states]),
        DiagGaussian(
            torch.cat([s.stoch_dist.mean for s in states]),
            torch.cat([s.stoch_dist.stddev for s in states]),
        ),
    )
