"""
Trajectory container, the `.lawm` binary format, corpus directories,
action-label splitting, training-window sampling and return statistics.

File layout (little endian):
    magic "LAWM" | u32 version=1 | u32 T | u32 obs_dim | u32 act_dim |
    u8 flags (bit0 = has_actions) | 3 zero bytes |
    f32 obs[T*obs_dim] | f32 actions[T*act_dim] (iff bit0) | f32 rewards[T]
"""
import csv
import glob
import json
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from errors import ContractViolation, DataError, DataFormatError

logger = logging.getLogger("dataset")

MAGIC = b"LAWM"
VERSION = 1
HEADER = struct.Struct("<4sIIIIB3x")
HEADER_SIZE = HEADER.size
FLAG_HAS_ACTIONS = 0x01
TRAJ_PATTERN = "traj_%06d.lawm"
META_FILE = "meta.json"
STATS_COLUMNS = ("mean", "std", "min", "p25", "median", "p75", "max")


@dataclass
class Trajectory:
    obs: np.ndarray
    rewards: np.ndarray
    actions: Optional[np.ndarray] = None
    # Observation after the last step, carried by action-free training windows.
    next_obs: Optional[np.ndarray] = None

    @property
    def length(self) -> int:
        return self.obs.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.obs.shape[1]

    @property
    def act_dim(self) -> int:
        return 0 if self.actions is None else self.actions.shape[1]

    @property
    def has_actions(self) -> bool:
        """m(tau): actions observed at every step."""
        return self.actions is not None and bool(np.isfinite(self.actions).all())

    @property
    def partially_labeled(self) -> bool:
        if self.actions is None:
            return False
        present = np.isfinite(self.actions).all(axis=1)
        return bool(present.any() and not present.all())

    def total_return(self) -> float:
        return float(np.sum(self.rewards, dtype=np.float64))

    def strip_actions(self) -> "Trajectory":
        return replace(self, actions=None)


@dataclass
class TrajectoryBatch:
    """Homogeneous (all labeled or all action-free) batch as tensors of shape (B, T, ...)."""

    obs: torch.Tensor
    rewards: torch.Tensor
    actions: Optional[torch.Tensor] = None
    next_obs: Optional[torch.Tensor] = None
    next_obs_mask: Optional[torch.Tensor] = None

    @property
    def size(self) -> int:
        return self.obs.shape[0]


def collate(trajs: Sequence[Trajectory], labeled: bool, dtype: torch.dtype = torch.float32) -> TrajectoryBatch:
    """Stack equal-length trajectories; labeled batches keep actions, action-free batches drop them."""
    if not trajs:
        raise DataError("collate: empty trajectory list")
    lengths = {t.length for t in trajs}
    if len(lengths) != 1:
        raise ContractViolation(f"collate: trajectories of different lengths {sorted(lengths)}")
    obs = torch.as_tensor(np.stack([t.obs for t in trajs]), dtype=dtype)
    rewards = torch.as_tensor(np.stack([t.rewards for t in trajs]), dtype=dtype)
    if labeled:
        if not all(t.has_actions for t in trajs):
            raise ContractViolation("collate: labeled batch contains a trajectory without actions")
        actions = torch.as_tensor(np.stack([t.actions for t in trajs]), dtype=dtype)
        return TrajectoryBatch(obs, rewards, actions=actions)
    if any(t.next_obs is not None for t in trajs):
        tail = np.stack([t.next_obs if t.next_obs is not None else np.zeros(t.obs_dim, t.obs.dtype) for t in trajs])
        mask = torch.as_tensor([t.next_obs is not None for t in trajs])
        return TrajectoryBatch(obs, rewards, next_obs=torch.as_tensor(tail, dtype=dtype), next_obs_mask=mask)
    return TrajectoryBatch(obs, rewards)


# -- .lawm files ------------------------------------------------------------

def write_trajectory(traj: Trajectory, path: str) -> None:
    if traj.partially_labeled:
        raise ContractViolation(f"{path}: cannot store a partially labeled trajectory")
    if traj.rewards is None or traj.rewards.shape != (traj.length,):
        raise DataError(f"{path}: rewards must have shape ({traj.length},)")
    flags = FLAG_HAS_ACTIONS if traj.has_actions else 0
    header = HEADER.pack(MAGIC, VERSION, traj.length, traj.obs_dim, traj.act_dim if flags else 0, flags)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(traj.obs, dtype="<f4").tobytes())
        if flags:
            f.write(np.ascontiguousarray(traj.actions, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(traj.rewards, dtype="<f4").tobytes())


def read_trajectory(path: str) -> Trajectory:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < HEADER_SIZE:
        raise DataFormatError(f"truncated header ({len(data)} bytes)", offset=len(data), section="header", path=path)
    magic, version, T, obs_dim, act_dim, flags = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DataFormatError(f"bad magic {magic!r}", offset=0, section="magic", path=path)
    if version != VERSION:
        raise DataFormatError(f"unsupported version {version}", offset=4, section="version", path=path)

    offset = HEADER_SIZE
    sections = [("obs", T * obs_dim)]
    if flags & FLAG_HAS_ACTIONS:
        sections.append(("actions", T * act_dim))
    sections.append(("rewards", T))
    arrays = {}
    for name, count in sections:
        end = offset + 4 * count
        if end > len(data):
            raise DataFormatError(
                f"file ends inside the {name} section ({len(data) - offset} of {4 * count} bytes)",
                offset=len(data), section=name, path=path,
            )
        arrays[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32)
        offset = end
    if offset != len(data):
        raise DataFormatError(f"{len(data) - offset} trailing bytes", offset=offset, section="trailer", path=path)
    actions = arrays["actions"].reshape(T, act_dim) if "actions" in arrays else None
    return Trajectory(obs=arrays["obs"].reshape(T, obs_dim), rewards=arrays["rewards"], actions=actions)


# -- corpora ------------------------------------------------------------------

@dataclass
class Corpus:
    trajectories: List[Trajectory]
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def labeled_count(self) -> int:
        return sum(t.has_actions for t in self.trajectories)

    def returns(self) -> np.ndarray:
        return np.array([t.total_return() for t in self.trajectories], dtype=np.float64)


def save_corpus(corpus: Corpus, directory: str) -> str:
    try:
        os.makedirs(directory, exist_ok=True)
        for i, traj in enumerate(corpus.trajectories):
            write_trajectory(traj, os.path.join(directory, TRAJ_PATTERN % i))
        meta = dict(corpus.meta)
        meta["n_trajectories"] = len(corpus)
        meta["n_labeled"] = corpus.labeled_count
        with open(os.path.join(directory, META_FILE), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
    except OSError as e:
        raise DataError(f"cannot write corpus to {directory}: {e}") from e
    logger.info(f"Wrote {len(corpus)} trajectories ({corpus.labeled_count} labeled) to {directory}")
    return directory


def load_corpus(directory: str) -> Corpus:
    if not os.path.isdir(directory):
        raise DataError(f"corpus directory '{directory}' does not exist")
    paths = sorted(glob.glob(os.path.join(directory, "traj_*.lawm")))
    if not paths:
        raise DataError(f"no .lawm files found in '{directory}'")
    meta = {}
    meta_path = os.path.join(directory, META_FILE)
    if os.path.exists(meta_path):
        with open(meta_path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    corpus = Corpus([read_trajectory(p) for p in paths], meta)
    logger.info(f"Loaded {len(corpus)} trajectories ({corpus.labeled_count} labeled) from {directory}")
    return corpus


def split_action_labels(corpus: Corpus, labeled_fraction: float, seed: int) -> Corpus:
    """Keep actions on floor(fraction * N) trajectories chosen by a seeded shuffle; strip the rest."""
    if not 0.0 < labeled_fraction <= 1.0:
        raise ContractViolation(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    if not all(t.has_actions for t in corpus.trajectories):
        raise ContractViolation("split_action_labels expects a fully labeled corpus")
    n = len(corpus)
    n_labeled = int(np.floor(labeled_fraction * n + 1e-9))
    keep = set(np.random.default_rng(seed).permutation(n)[:n_labeled].tolist())
    trajectories = [t if i in keep else t.strip_actions() for i, t in enumerate(corpus.trajectories)]
    meta = dict(corpus.meta)
    meta.update({"labeled_fraction": labeled_fraction, "split_seed": seed})
    return Corpus(trajectories, meta)


def labeled_subset(corpus: Corpus) -> Corpus:
    return Corpus([t for t in corpus.trajectories if t.has_actions], dict(corpus.meta))


class WindowSampler:
    """Uniform sampling over (trajectory, start offset) pairs with a seeded generator."""

    def __init__(self, corpus: Corpus, batch_size: int = 64, window: int = 50, seed: int = 0):
        if len(corpus) == 0:
            raise DataError("cannot sample windows from an empty corpus")
        too_short = [i for i, t in enumerate(corpus.trajectories) if t.length < window]
        if too_short:
            raise ContractViolation(f"window {window} longer than trajectory {too_short[0]}")
        self.corpus = corpus
        self.batch_size = batch_size
        self.window = window
        self.rng = np.random.default_rng(seed)
        counts = np.array([t.length - window + 1 for t in corpus.trajectories], dtype=np.int64)
        self._cumulative = np.cumsum(counts)

    def sample(self) -> List[Trajectory]:
        flat = self.rng.integers(0, self._cumulative[-1], size=self.batch_size)
        windows = []
        for index in flat:
            traj_index = int(np.searchsorted(self._cumulative, index, side="right"))
            start = int(index - (self._cumulative[traj_index - 1] if traj_index else 0))
            windows.append(self._cut(self.corpus.trajectories[traj_index], start))
        return windows

    def _cut(self, traj: Trajectory, start: int) -> Trajectory:
        end = start + self.window
        if traj.has_actions:
            return Trajectory(traj.obs[start:end], traj.rewards[start:end], actions=traj.actions[start:end])
        next_obs = traj.obs[end] if end < traj.length else None
        return Trajectory(traj.obs[start:end], traj.rewards[start:end], next_obs=next_obs)

    def state_dict(self) -> Dict[str, Any]:
        return {"bit_generator": self.rng.bit_generator.state}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.rng.bit_generator.state = state["bit_generator"]


def sample_windows(corpus: Corpus, batch: int = 64, window: int = 50, seed: int = 0) -> List[Trajectory]:
    return WindowSampler(corpus, batch, window, seed).sample()


# -- statistics ----------------------------------------------------------------

@dataclass
class CorpusStats:
    mean: float
    std: float
    min: float
    p25: float
    median: float
    p75: float
    max: float

    def row(self) -> List[float]:
        return [getattr(self, c) for c in STATS_COLUMNS]


def compute_stats(corpus: Corpus) -> CorpusStats:
    """Statistics of per-trajectory returns; percentiles use linear interpolation."""
    if len(corpus) == 0:
        raise DataError("compute_stats: empty corpus")
    returns = corpus.returns()
    p25, median, p75 = np.percentile(returns, [25, 50, 75], method="linear")
    return CorpusStats(
        mean=float(returns.mean()), std=float(returns.std()),
        min=float(returns.min()), p25=float(p25), median=float(median),
        p75=float(p75), max=float(returns.max()),
    )


def emit_histogram(corpus: Corpus, bins: int, path: str) -> List[Tuple[float, float, int]]:
    """CSV of (bin_left, bin_right, count) with uniform edges over [min, max] of the returns."""
    if bins < 1:
        raise ContractViolation(f"bins must be >= 1, got {bins}")
    returns = corpus.returns()
    if len(returns) == 0:
        raise DataError("cannot build a histogram of an empty corpus")
    lo, hi = float(returns.min()), float(returns.max())
    if hi == lo:
        counts, edges = np.array([len(returns)] + [0] * (bins - 1)), np.full(bins + 1, lo)
    else:
        counts, edges = np.histogram(returns, bins=bins, range=(lo, hi))
    rows = [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins)]
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["bin_left", "bin_right", "count"])
            writer.writerows(rows)
    except OSError as e:
        raise DataError(f"cannot write histogram to {path}: {e}") from e
    return rows
