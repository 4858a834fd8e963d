"""
Small continuous-control environments with closed-form dynamics and the
scripted controllers that collect offline datasets from them.

Two environments are provided:

    point-mass  2-D double integrator, obs = (pos, vel), reward exp(-|pos - goal|^2)
    pendulum    swing-up, obs = (cos th, sin th, th_dot), th = 0 upright,
                reward (1 + cos th) / 2

Trajectories store the reward of the observation at the same index, so
`rewards[t]` is the reward of `obs[t]`.
"""
import logging
import math
import os
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from dataset import Corpus, Trajectory, save_corpus
from errors import ContractViolation, DataError, NumericError

logger = logging.getLogger("envs")

EPISODE_LENGTH = 500
DT = 0.05
POLICY_KINDS = ("expert", "medium", "replay-mixture", "explore")

# Point-mass controller
PM_KP = 4.0
PM_KD = 4.0
PM_MEDIUM_GAIN = 0.25
PM_MEDIUM_OFFSET = 0.5
PM_REPLAY_OFFSET = 1.5

# Pendulum controller (th_ddot = 15 sin th + 3 u)
PEND_GRAVITY = 15.0
PEND_TORQUE_GAIN = 3.0
PEND_MAX_SPEED = 8.0
PEND_KP = 10.0
PEND_KD = 2.0
PEND_KE = 0.2
PEND_CATCH_COS = 0.85
PEND_MEDIUM_GAIN = 0.5
PEND_MEDIUM_OFFSET = 0.3
PEND_REPLAY_OFFSET = 1.0

MEDIUM_NOISE = 0.3
REPLAY_NOISE = 0.3
OU_THETA = 0.15
OU_SIGMA = 0.3


@dataclass(frozen=True)
class EnvSpec:
    name: str
    obs_dim: int
    act_dim: int
    action_bound: Tuple[float, ...]
    episode_length: int = EPISODE_LENGTH
    max_reward: float = 1.0
    dt: float = DT

    def model_spec(self) -> Dict[str, object]:
        """The fields `build_world_model` needs."""
        return {"obs_dim": self.obs_dim, "act_dim": self.act_dim, "action_bound": list(self.action_bound)}


class _Env:
    spec: EnvSpec

    def __init__(self):
        self.state: Optional[np.ndarray] = None
        self.t = 0
        self.clip_count = 0
        self.last_action = np.zeros(self.spec.act_dim)
        self._bound = np.asarray(self.spec.action_bound, dtype=np.float64)

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.state = self._initial_state(rng)
        self.t = 0
        self.last_action = np.zeros(self.spec.act_dim)
        return self.observation()

    def set_state(self, state: Sequence[float]) -> np.ndarray:
        self.state = np.array(state, dtype=np.float64)
        self.t = 0
        return self.observation()

    def step(self, action) -> Tuple[np.ndarray, float, bool]:
        if self.state is None:
            raise ContractViolation(f"{self.spec.name}: step called before reset")
        if self.t >= self.spec.episode_length:
            raise ContractViolation(f"{self.spec.name}: episode already finished")
        action = np.asarray(action, dtype=np.float64).reshape(self.spec.act_dim)
        if not np.isfinite(action).all():
            raise NumericError(f"{self.spec.name}: non-finite action {action}")
        clipped = np.clip(action, -self._bound, self._bound)
        if not np.array_equal(clipped, action):
            self.clip_count += 1
        self.last_action = clipped
        self.state = self.dynamics(self.state, clipped)
        self.t += 1
        return self.observation(), self.reward(), self.t >= self.spec.episode_length

    def observation(self) -> np.ndarray:
        raise NotImplementedError

    def reward(self) -> float:
        raise NotImplementedError

    def dynamics(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _initial_state(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class PointMass(_Env):
    spec = EnvSpec("point-mass", obs_dim=4, act_dim=2, action_bound=(2.0, 2.0))
    goal = np.zeros(2)

    def _initial_state(self, rng):
        return np.concatenate([rng.uniform(-1.0, 1.0, size=2), np.zeros(2)])

    def dynamics(self, state, action):
        pos, vel = state[:2], state[2:]
        dt = self.spec.dt
        new_pos = pos + dt * vel + 0.5 * dt * dt * action
        new_vel = vel + dt * action
        return np.concatenate([new_pos, new_vel])

    def observation(self):
        return self.state.copy()

    def reward(self):
        return float(np.exp(-np.sum((self.state[:2] - self.goal) ** 2)))


class Pendulum(_Env):
    spec = EnvSpec("pendulum", obs_dim=3, act_dim=1, action_bound=(2.0,))

    def _initial_state(self, rng):
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def dynamics(self, state, action):
        theta, speed = state
        dt = self.spec.dt
        speed = speed + (PEND_GRAVITY * math.sin(theta) + PEND_TORQUE_GAIN * float(action[0])) * dt
        speed = float(np.clip(speed, -PEND_MAX_SPEED, PEND_MAX_SPEED))
        return np.array([theta + speed * dt, speed])

    def observation(self):
        theta, speed = self.state
        return np.array([math.cos(theta), math.sin(theta), speed])

    def reward(self):
        return float((1.0 + math.cos(self.state[0])) / 2.0)


ENVS = {"point-mass": PointMass, "pendulum": Pendulum}


def make_env(name: str) -> _Env:
    if name not in ENVS:
        raise ContractViolation(f"unknown environment '{name}' (choose from {sorted(ENVS)})")
    return ENVS[name]()


def env_spec(name: str) -> EnvSpec:
    if name not in ENVS:
        raise ContractViolation(f"unknown environment '{name}' (choose from {sorted(ENVS)})")
    return ENVS[name].spec


def normalized_return(total: float, spec: EnvSpec) -> float:
    """Episode return scaled to [0, 100] by the maximum attainable return."""
    return 100.0 * total / (spec.episode_length * spec.max_reward)


# -- scripted data-collection policies -------------------------------------------

def _wrap(angle: float) -> float:
    return (angle + math.pi) % (2.0 * math.pi) - math.pi


def _point_mass_control(obs: np.ndarray, gain: float, offset: float) -> np.ndarray:
    target = PointMass.goal + offset
    return -gain * PM_KP * (obs[:2] - target) - gain * PM_KD * obs[2:]


def _pendulum_control(obs: np.ndarray, gain: float, offset: float) -> np.ndarray:
    cos_th, sin_th, speed = obs
    theta = math.atan2(sin_th, cos_th)
    if cos_th > PEND_CATCH_COS:
        u = -gain * PEND_KP * _wrap(theta - offset) - gain * PEND_KD * speed
    else:
        energy = 0.5 * speed ** 2 + PEND_GRAVITY * cos_th
        direction = 1.0 if speed >= 0 else -1.0
        u = gain * PEND_KE * (PEND_GRAVITY - energy) * direction
    return np.array([u])


CONTROLLERS: Dict[str, Callable[[np.ndarray, float, float], np.ndarray]] = {
    "point-mass": _point_mass_control,
    "pendulum": _pendulum_control,
}


class ScriptedPolicy:
    """A (possibly detuned, noisy) PD controller, or OU noise for `explore`."""

    def __init__(self, spec: EnvSpec, kind: str, rng: np.random.Generator,
                 gain: float = 1.0, offset: float = 0.0, noise: float = 0.0):
        if kind not in POLICY_KINDS:
            raise ContractViolation(f"unknown policy kind '{kind}' (choose from {POLICY_KINDS})")
        self.spec = spec
        self.kind = kind
        self.rng = rng
        self.gain = gain
        self.offset = offset
        self.noise = noise
        self.bound = np.asarray(spec.action_bound, dtype=np.float64)
        self._ou = np.zeros(spec.act_dim)

    @classmethod
    def for_trajectory(cls, spec: EnvSpec, kind: str, index: int, count: int,
                       rng: np.random.Generator) -> "ScriptedPolicy":
        """Controller settings of trajectory `index` out of `count` for a dataset kind."""
        medium_gain, medium_offset, replay_offset = {
            "point-mass": (PM_MEDIUM_GAIN, PM_MEDIUM_OFFSET, PM_REPLAY_OFFSET),
            "pendulum": (PEND_MEDIUM_GAIN, PEND_MEDIUM_OFFSET, PEND_REPLAY_OFFSET),
        }[spec.name]
        if kind == "expert":
            return cls(spec, kind, rng)
        if kind == "medium":
            return cls(spec, kind, rng, gain=medium_gain, offset=medium_offset, noise=MEDIUM_NOISE)
        if kind == "replay-mixture":
            # Quadratic schedule: most of a replay buffer comes from early, poor controllers.
            alpha = (index / (count - 1)) ** 2 if count > 1 else 1.0
            return cls(spec, kind, rng, gain=alpha, offset=(1.0 - alpha) * replay_offset,
                       noise=REPLAY_NOISE * (1.0 - alpha))
        return cls(spec, kind, rng)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        if self.kind == "explore":
            self._ou = self._ou - OU_THETA * self._ou + OU_SIGMA * self.rng.standard_normal(self.spec.act_dim)
            return self.bound * np.clip(self._ou, -1.0, 1.0)
        action = CONTROLLERS[self.spec.name](obs, self.gain, self.offset)
        if self.noise > 0:
            action = action + self.noise * self.rng.standard_normal(self.spec.act_dim)
        return np.clip(action, -self.bound, self.bound)


def rollout(env: _Env, policy: Callable[[np.ndarray], np.ndarray], seed: int) -> Trajectory:
    """One full episode; rewards[t] is the reward of obs[t]."""
    obs = env.reset(seed)
    observations, actions, rewards = [], [], []
    done = False
    while not done:
        observations.append(obs)
        rewards.append(env.reward())
        obs, _, done = env.step(policy(obs))
        actions.append(env.last_action)
    return Trajectory(
        obs=np.asarray(observations, dtype=np.float32),
        rewards=np.asarray(rewards, dtype=np.float32),
        actions=np.asarray(actions, dtype=np.float32),
    )


def _collect_one(env_name: str, kind: str, seed: int, index: int, count: int) -> Tuple[Trajectory, int]:
    # One environment instance per call; nothing is shared between workers.
    env = make_env(env_name)
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    policy = ScriptedPolicy.for_trajectory(env.spec, kind, index, count, rng)
    traj = rollout(env, policy, int(rng.integers(2 ** 31)))
    return traj, env.clip_count


def generator_version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"], cwd=os.path.dirname(os.path.abspath(__file__)),
            capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def collect_corpus(env_name: str, kind: str, n_trajectories: int, seed: int,
                   collection_seeds: Sequence[int] = (), workers: int = 4, progress: bool = False) -> Corpus:
    """
    Roll scripted policies of one kind and gather the episodes into a corpus.

    With several collection seeds each contributes an equal share (the first
    ones take the remainder). Episode `i` of seed `s` is reproducible on its own,
    so the result does not depend on `workers`.
    """
    # Check arguments
    if n_trajectories < 1:
        raise ContractViolation(f"n_trajectories must be >= 1, got {n_trajectories}")
    if kind not in POLICY_KINDS:
        raise ContractViolation(f"unknown policy kind '{kind}' (choose from {POLICY_KINDS})")
    # Split the episodes over the collection seeds
    spec = env_spec(env_name)
    seeds = list(collection_seeds) or [seed]
    share, extra = divmod(n_trajectories, len(seeds))
    jobs, counts = [], []
    for j, s in enumerate(seeds):
        count = share + (1 if j < extra else 0)
        counts.append(count)
        jobs.extend((env_name, kind, s, i, count) for i in range(count))

    # Roll out in parallel
    logger.info(f"Collecting {n_trajectories} {kind} trajectories on {env_name} with {workers} workers")
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(tqdm(executor.map(lambda job: _collect_one(*job), jobs), total=len(jobs),
                            desc=f"{env_name}/{kind}", disable=not progress))

    # Assemble the corpus with its provenance
    trajectories = [traj for traj, _ in results]
    clipped = sum(c for _, c in results)
    if clipped:
        logger.warning(f"{clipped} actions were clipped to the action bound while collecting {env_name}/{kind}")
    meta = {
        "env": asdict(spec),
        "model_spec": spec.model_spec(),
        "policy_kind": kind,
        "seed": seed,
        "collection_seeds": seeds,
        "per_seed_counts": counts,
        "clipped_steps": clipped,
        "generator": generator_version(),
    }
    corpus = Corpus(trajectories, meta)
    returns = np.array([normalized_return(t.total_return(), spec) for t in trajectories])
    logger.info(f"{env_name}/{kind}: normalized return {returns.mean():.1f} +- {returns.std():.1f}, "
                f"{clipped} clipped steps")
    return corpus


def generate_dataset(env_name: str, kind: str, n_trajectories: int, seed: int, out_root: str,
                     collection_seeds: Sequence[int] = (), workers: int = 4, progress: bool = False) -> str:
    """Collect and write `<out_root>/<env>/<kind>/traj_%06d.lawm` plus meta.json."""
    corpus = collect_corpus(env_name, kind, n_trajectories, seed, collection_seeds, workers, progress)
    directory = os.path.join(out_root, env_name, kind)
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create dataset directory {directory}: {e}") from e
    return save_corpus(corpus, directory)


def random_rollouts(env_name: str, n: int, seed: int, length: Optional[int] = None) -> List[Trajectory]:
    """Uniform-random-action trajectories, optionally truncated; the random-policy baseline."""
    env = make_env(env_name)
    rng = np.random.default_rng(seed)
    bound = np.asarray(env.spec.action_bound)
    trajs = []
    for i in range(n):
        traj = rollout(env, lambda obs: rng.uniform(-bound, bound), seed + i)
        if length is not None:
            traj = Trajectory(traj.obs[:length], traj.rewards[:length], actions=traj.actions[:length])
        trajs.append(traj)
    return trajs
