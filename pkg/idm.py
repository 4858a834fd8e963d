"""
Standalone inverse dynamics model for the IDM-assisted baseline.

A window of observations o_{t-2..t+2} (edges replicated) predicts a_t. The
model is trained on the labeled trajectories only and then used to write a
new, fully labeled corpus. Rewards are never read.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from config import IdmConfig
from dataset import Corpus, Trajectory
from errors import ContractViolation, DataFormatError
from networks import mlp
from world_model import load_checkpoint, save_checkpoint

logger = logging.getLogger("idm")

LOG_EVERY = 1000


def observation_windows(obs: np.ndarray, window: int) -> np.ndarray:
    """(T, obs_dim) -> (T, window * obs_dim), centered and edge-padded."""
    half = window // 2
    padded = np.concatenate([np.repeat(obs[:1], half, axis=0), obs, np.repeat(obs[-1:], half, axis=0)])
    views = np.lib.stride_tricks.sliding_window_view(padded, window, axis=0)  # (T, obs_dim, window)
    return np.ascontiguousarray(views.transpose(0, 2, 1)).reshape(obs.shape[0], -1)


class InverseDynamicsModel(nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, action_bound: Sequence[float], cfg: IdmConfig):
        super().__init__()
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.cfg = cfg
        in_dim = cfg.window * obs_dim
        self.net = mlp(in_dim, act_dim, cfg.units, cfg.layers, dropout=cfg.dropout)
        self.register_buffer("action_bound", torch.as_tensor(list(action_bound), dtype=torch.float32))
        self.register_buffer("in_mean", torch.zeros(in_dim))
        self.register_buffer("in_std", torch.ones(in_dim))

    def set_normalizer(self, inputs: torch.Tensor) -> None:
        self.in_mean.copy_(inputs.mean(0))
        self.in_std.copy_(inputs.std(0).clamp(min=1e-6))

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        x = (windows - self.in_mean) / self.in_std
        return torch.tanh(self.net(x)) * self.action_bound


@dataclass
class IdmResult:
    model: InverseDynamicsModel
    final_mse: float
    history: List[float] = field(default_factory=list)


def _training_pairs(corpus: Corpus, window: int):
    inputs, targets = [], []
    for traj in corpus.trajectories:
        if not traj.has_actions:
            continue
        # Only observations and actions; rewards stay untouched.
        inputs.append(observation_windows(np.asarray(traj.obs, dtype=np.float32), window))
        targets.append(np.asarray(traj.actions, dtype=np.float32))
    if not inputs:
        raise ContractViolation("train_idm needs at least one action-labeled trajectory")
    return torch.from_numpy(np.concatenate(inputs)), torch.from_numpy(np.concatenate(targets))


def train_idm(labeled_corpus: Corpus, cfg: IdmConfig, seed: int = 0,
              model_spec: Optional[Dict[str, Any]] = None, progress: bool = False) -> IdmResult:
    """
    Regress actions from observation windows with squared error.

    Every labeled transition gives one (window of observations, center action)
    pair. Inputs are normalised with statistics of the training pairs, and the
    returned MSE is measured on all pairs in eval mode.
    """
    # Build training pairs and check them against the model spec
    inputs, targets = _training_pairs(labeled_corpus, cfg.window)
    spec = model_spec or labeled_corpus.meta.get("model_spec")
    if spec is None:
        raise ContractViolation("train_idm needs the environment's model_spec (obs_dim, act_dim, action_bound)")
    if inputs.shape[1] != cfg.window * spec["obs_dim"] or targets.shape[1] != spec["act_dim"]:
        raise ContractViolation("corpus dimensions do not match model_spec")

    # Set up model and optimizer
    torch.manual_seed(seed)
    model = InverseDynamicsModel(spec["obs_dim"], spec["act_dim"], spec["action_bound"], cfg)
    model.set_normalizer(inputs)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    generator = torch.Generator().manual_seed(seed)
    n = inputs.shape[0]
    logger.info(f"Training IDM on {n} labeled transitions for {cfg.steps} steps")

    # Minibatch regression
    model.train()
    history: List[float] = []
    for step in tqdm(range(cfg.steps), desc="idm", disable=not progress):
        index = torch.randint(0, n, (min(cfg.batch_size, n),), generator=generator)
        loss = (model(inputs[index]) - targets[index]).pow(2).mean()
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        history.append(float(loss.detach()))
        if (step + 1) % LOG_EVERY == 0:
            logger.info(f"IDM step {step + 1}: mse {np.mean(history[-LOG_EVERY:]):.6f}")

    # Final MSE over the whole labeled set
    model.eval()
    with torch.no_grad():
        final_mse = float((model(inputs) - targets).pow(2).mean())
    logger.info(f"IDM training MSE {final_mse:.6f}")
    return IdmResult(model, final_mse, history)


def idm_predict(model: InverseDynamicsModel, obs_window: np.ndarray) -> np.ndarray:
    """Action for the center transition of a (window, obs_dim) block."""
    obs_window = np.asarray(obs_window, dtype=np.float32)
    expected = (model.cfg.window, model.obs_dim)
    if obs_window.shape != expected:
        raise ContractViolation(f"idm_predict expects a window of shape {expected}, got {obs_window.shape}")
    model.eval()
    with torch.no_grad():
        return model(torch.from_numpy(obs_window.reshape(1, -1)))[0].numpy()


def idm_predict_trajectory(model: InverseDynamicsModel, obs: np.ndarray) -> np.ndarray:
    """Actions for every step of a trajectory, with edge-replicated windows at both ends."""
    obs = np.asarray(obs, dtype=np.float32)
    if obs.ndim != 2 or obs.shape[1] != model.obs_dim:
        raise ContractViolation(f"idm_predict_trajectory expects (T, {model.obs_dim}) observations")
    model.eval()
    with torch.no_grad():
        return model(torch.from_numpy(observation_windows(obs, model.cfg.window))).numpy()


def pseudo_label_corpus(model: InverseDynamicsModel, corpus: Corpus) -> Corpus:
    """A new corpus where every action-free trajectory carries predicted actions."""
    trajectories = []
    labeled = 0
    for traj in corpus.trajectories:
        if traj.has_actions:
            trajectories.append(traj)
            continue
        actions = idm_predict_trajectory(model, traj.obs)
        trajectories.append(Trajectory(traj.obs, traj.rewards, actions=actions.astype(np.float32)))
        labeled += 1
    meta = dict(corpus.meta)
    meta["provenance"] = "idm"
    meta["idm_labeled"] = labeled
    logger.info(f"Pseudo-labeled {labeled} of {len(corpus)} trajectories")
    return Corpus(trajectories, meta)


def save_idm(path: str, model: InverseDynamicsModel, final_mse: float) -> str:
    return save_checkpoint(path, {
        "kind": "idm",
        "state_dict": model.state_dict(),
        "model_spec": {"obs_dim": model.obs_dim, "act_dim": model.act_dim,
                       "action_bound": model.action_bound.tolist()},
        "idm_config": asdict(model.cfg),
        "final_mse": final_mse,
    })


def load_idm(path: str) -> InverseDynamicsModel:
    payload = load_checkpoint(path)
    if payload.get("kind") != "idm":
        raise DataFormatError("checkpoint does not hold an inverse dynamics model", offset=0, section="kind", path=path)
    spec = payload["model_spec"]
    model = InverseDynamicsModel(spec["obs_dim"], spec["act_dim"], spec["action_bound"], IdmConfig(**payload["idm_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model
