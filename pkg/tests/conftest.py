import numpy as np
import pytest
import torch

from config import AgentConfig, ModelConfig
from dataset import Trajectory
from world_model import WorldModel

TINY_MODEL = dict(
    stoch_size=4, deter_size=8, embed_size=8, latent_action_size=3, hidden_units=8,
    mlp_units=8, mlp_layers=1, prior_units=8, prior_layers=1, idm_units=8, idm_layers=1,
    batch_size=4, window=3,
)
TINY_AGENT = dict(units=8, layers=1, horizon=3)


def tiny_model_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**TINY_MODEL, **overrides})


def tiny_agent_config(**overrides) -> AgentConfig:
    return AgentConfig(**{**TINY_AGENT, **overrides})


@pytest.fixture
def make_world_model():
    def build(obs_dim=3, act_dim=2, prior_mode="lawm", dtype=torch.float64, seed=0, **overrides):
        torch.manual_seed(seed)
        cfg = tiny_model_config(prior_mode=prior_mode, **overrides)
        wm = WorldModel(obs_dim, act_dim, [1.0] * act_dim, cfg).to(dtype)
        wm.generator = torch.Generator().manual_seed(seed)
        return wm
    return build


@pytest.fixture
def make_trajectory():
    def build(T=5, obs_dim=3, act_dim=2, labeled=True, seed=0):
        rng = np.random.default_rng(seed)
        obs = rng.normal(size=(T, obs_dim)).astype(np.float32)
        rewards = rng.uniform(0.0, 1.0, size=T).astype(np.float32)
        actions = rng.uniform(-0.9, 0.9, size=(T, act_dim)).astype(np.float32) if labeled else None
        return Trajectory(obs, rewards, actions=actions)
    return build
