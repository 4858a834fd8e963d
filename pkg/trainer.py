"""
Joint world-model / agent training over an offline corpus.

Each step samples a batch of training windows, takes one gradient step on the
model loss (unified ELBO plus reward likelihood) and, once the warm-up is
over, one agent update started from the detached posterior states of the same
batch. Every `eval_interval` steps the policy is evaluated in the real
environment and a checkpoint is written.
"""
import csv
import glob
import json
import logging
import math
import os
import time
from typing import Any, Dict, List, Optional

import numpy as np
import torch
import torch.nn as nn
from tqdm import tqdm

from agent import Agent, evaluate_policy
from config import METRICS_FILE, RESULTS_FILE, ExperimentConfig
from dataset import Corpus, WindowSampler, labeled_subset, load_corpus, split_action_labels
from envs import env_spec, make_env
from errors import ContractViolation, DataError, TrainingAborted
from objectives import model_loss
from world_model import build_world_model, load_checkpoint, save_checkpoint

logger = logging.getLogger("trainer")

RESULTS_COLUMNS = ("env", "dataset", "method", "labeled_fraction", "seed", "mean", "std", "wall_time")
CHECKPOINT_PATTERN = "ckpt_%08d.pt"
BEST_CHECKPOINT = "best.pt"
# Named random substreams, all spawned from the run seed.
STREAMS = ("data", "model_init", "noise", "agent", "eval")


def _stream_seeds(seed: int) -> Dict[str, int]:
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: int(child.generate_state(1)[0]) for name, child in zip(STREAMS, children)}


def _all_finite(metrics: Dict[str, float]) -> bool:
    return all(math.isfinite(v) for v in metrics.values() if isinstance(v, float))


class Trainer:
    def __init__(self, cfg: ExperimentConfig, corpus: Corpus, run_dir: str):
        self.cfg = cfg
        self.corpus = corpus
        self.run_dir = run_dir
        os.makedirs(run_dir, exist_ok=True)
        if cfg.run.deterministic:
            torch.set_num_threads(1)
            torch.use_deterministic_algorithms(True)

        spec = corpus.meta.get("model_spec")
        env_name = corpus.meta.get("env", {}).get("name", cfg.env.name)
        if spec is None:
            spec = env_spec(env_name).model_spec()
        self.env_name = env_name
        self.dataset_kind = corpus.meta.get("policy_kind", cfg.env.kind)
        self.free_nats = cfg.resolve_free_nats(self.dataset_kind)

        self.seeds = _stream_seeds(cfg.data.seed)
        torch.manual_seed(self.seeds["model_init"])
        self.world_model = build_world_model(spec, cfg.model)
        self.world_model.generator = torch.Generator().manual_seed(self.seeds["noise"])
        torch.manual_seed(self.seeds["agent"])
        self.agent = Agent(self.world_model, cfg.agent, generator=torch.Generator().manual_seed(self.seeds["agent"]))
        self.model_opt = torch.optim.Adam(self.world_model.parameters(), lr=cfg.model.lr)
        self.sampler = WindowSampler(corpus, cfg.model.batch_size, cfg.model.window, seed=self.seeds["data"])
        self.env = make_env(env_name)

        self.step = 0
        self.best_eval = -math.inf
        self.last_eval: Optional[Dict[str, float]] = None
        self.checkpoints: List[str] = []
        self.metrics_path = os.path.join(run_dir, METRICS_FILE)
        self._started = time.time()
        logger.info(f"Trainer on {env_name}/{self.dataset_kind}: {len(corpus)} trajectories "
                    f"({corpus.labeled_count} labeled), free nats {self.free_nats}")

    @property
    def agent_active(self) -> bool:
        run = self.cfg.run
        return self.step >= max(run.model_warmup, run.pretrain_model_steps)

    def train_step(self) -> Dict[str, Any]:
        """
        One optimisation step of the joint system.

        The world model always takes a gradient step on the model loss. Once the
        warm-up is over the agent takes `agent_updates_per_step` updates, started
        from the detached posterior states of the same batch. A non-finite loss
        aborts the run with the newest checkpoint attached.
        """
        # Model update on a fresh batch of windows
        windows = self.sampler.sample()
        self.world_model.train()
        losses, states = model_loss(self.world_model, windows, self.free_nats, self.cfg.model.free_nats_action)
        if not torch.isfinite(losses.total):
            raise TrainingAborted(f"non-finite model loss at step {self.step + 1}", self._last_checkpoint())
        self.model_opt.zero_grad(set_to_none=True)
        losses.total.backward()
        grad_norm = nn.utils.clip_grad_norm_(self.world_model.parameters(), self.cfg.model.grad_clip)
        self.model_opt.step()

        # Agent updates reuse the posterior states the model loss produced
        metrics: Dict[str, Any] = {"step": self.step + 1, **losses.metrics(), "model_grad_norm": float(grad_norm)}
        if self.agent_active:
            for _ in range(self.cfg.run.agent_updates_per_step):
                agent_metrics = self.agent.agent_update(states)
            if not _all_finite(agent_metrics):
                raise TrainingAborted(f"non-finite agent loss at step {self.step + 1}", self._last_checkpoint())
            metrics.update(agent_metrics)
        self.step += 1
        return metrics

    def evaluate(self) -> Dict[str, float]:
        mean, std = evaluate_policy(self.world_model, self.agent, self.env, self.cfg.run.eval_episodes,
                                    seed=self.seeds["eval"] % (2 ** 31))
        self.last_eval = {"eval_mean": mean, "eval_std": std}
        return self.last_eval

    # -- checkpoints ------------------------------------------------------------

    def _last_checkpoint(self) -> Optional[str]:
        return self.checkpoints[-1] if self.checkpoints else None

    def state_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "config": self.cfg.to_dict(),
            "model_spec": {"obs_dim": self.world_model.obs_dim, "act_dim": self.world_model.act_dim,
                           "action_bound": self.world_model.action_bound.tolist()},
            "env": self.env_name,
            "dataset": self.dataset_kind,
            "method": method_for(self.cfg, self.corpus),
            "world_model": self.world_model.state_dict(),
            "model_opt": self.model_opt.state_dict(),
            "agent": self.agent.state_dict(),
            "sampler": self.sampler.state_dict(),
            "noise_generator": self.world_model.generator.get_state(),
            "agent_generator": self.agent.generator.get_state(),
            "torch_rng": torch.get_rng_state(),
            "best_eval": self.best_eval,
            "last_eval": self.last_eval,
        }

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.step = state["step"]
        self.world_model.load_state_dict(state["world_model"])
        self.model_opt.load_state_dict(state["model_opt"])
        self.agent.load_state_dict(state["agent"])
        self.sampler.load_state_dict(state["sampler"])
        self.world_model.generator.set_state(state["noise_generator"])
        self.agent.generator.set_state(state["agent_generator"])
        torch.set_rng_state(state["torch_rng"])
        self.best_eval = state["best_eval"]
        self.last_eval = state["last_eval"]

    def save(self) -> str:
        improved = self.last_eval is not None and self.last_eval["eval_mean"] > self.best_eval
        if improved:
            self.best_eval = self.last_eval["eval_mean"]
        state = self.state_dict()
        path = save_checkpoint(os.path.join(self.run_dir, CHECKPOINT_PATTERN % self.step), state)
        self.checkpoints.append(path)
        while len(self.checkpoints) > self.cfg.run.keep_checkpoints:
            old = self.checkpoints.pop(0)
            if os.path.exists(old):
                os.remove(old)
        if improved:
            save_checkpoint(os.path.join(self.run_dir, BEST_CHECKPOINT), state)
        return path

    def resume(self, path: Optional[str] = None) -> int:
        """
        Restore from `path` (default: newest checkpoint in the run dir).

        Metric lines past the restored step are dropped, and the rotation list is
        rebuilt from the checkpoints on disk so `keep_checkpoints` still holds.
        """
        found = sorted(glob.glob(os.path.join(self.run_dir, "ckpt_*.pt")))
        if path is None:
            if not found:
                raise DataError(f"no checkpoint to resume from in {self.run_dir}")
            path = found[-1]
        self.load_state_dict(load_checkpoint(path))

        # Only checkpoints at or before the restored step take part in rotation
        current = os.path.join(self.run_dir, CHECKPOINT_PATTERN % self.step)
        found = [p for p in found if os.path.basename(p) <= os.path.basename(current)]
        self.checkpoints = found[-self.cfg.run.keep_checkpoints:]

        if os.path.exists(self.metrics_path):
            with open(self.metrics_path, "r", encoding="utf-8") as f:
                kept = [line for line in f if line.strip() and json.loads(line)["step"] <= self.step]
            with open(self.metrics_path, "w", encoding="utf-8") as f:
                f.writelines(kept)
        logger.info(f"Resumed from {path} at step {self.step}")
        return self.step

    # -- main loop ----------------------------------------------------------------

    def run(self, total_steps: Optional[int] = None) -> Dict[str, Any]:
        """
        Train until `total_steps` (default `run.total_steps`).

        Every `eval_interval` steps, and at the last step, the policy is scored
        in the real environment and a checkpoint is rotated in. Each step appends
        one line to metrics.jsonl. Returns the final evaluation summary.
        """
        total = self.cfg.run.total_steps if total_steps is None else total_steps
        interval = self.cfg.run.eval_interval
        with open(self.metrics_path, "a", encoding="utf-8") as log, \
                tqdm(total=total, initial=self.step, desc="train", disable=not self.cfg.run.progress) as bar:
            while self.step < total:
                metrics = self.train_step()
                # Evaluate and checkpoint on the interval and at the end
                if self.step % interval == 0 or self.step == total:
                    metrics.update(self.evaluate())
                    self.save()
                    logger.info(f"Step {self.step}: loss {metrics['total']:.3f}, "
                                f"eval {metrics['eval_mean']:.1f} +- {metrics['eval_std']:.1f}")
                metrics["wall_time"] = time.time() - self._started
                log.write(json.dumps(metrics) + "\n")
                log.flush()
                bar.update(1)
        # No step ran, so nothing has been scored yet
        if self.last_eval is None:
            self.evaluate()
        return {"step": self.step, **self.last_eval, "best_eval": self.best_eval,
                "wall_time": time.time() - self._started}


# -- experiment entry point ----------------------------------------------------------

def prepare_corpus(cfg: ExperimentConfig, corpus: Corpus) -> Corpus:
    """Apply the label split (unless already split or pseudo-labeled) and the labeled-only ablation."""
    already_split = "labeled_fraction" in corpus.meta or corpus.meta.get("provenance") == "idm"
    if not already_split and all(t.has_actions for t in corpus.trajectories):
        corpus = split_action_labels(corpus, cfg.data.labeled_fraction, cfg.data.seed)
    if not cfg.data.use_unlabeled:
        corpus = labeled_subset(corpus)
    if len(corpus) == 0:
        raise DataError("no trajectories left to train on")
    return corpus


def method_for(cfg: ExperimentConfig, corpus: Corpus) -> str:
    if not cfg.data.method and corpus.meta.get("provenance") == "idm":
        return f"{cfg.model.prior_mode}-idm"
    return cfg.method_name()


def append_result(path: str, row: Dict[str, Any]) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=RESULTS_COLUMNS)
        if new:
            writer.writeheader()
        writer.writerow({k: row[k] for k in RESULTS_COLUMNS})


def run_experiment(cfg: ExperimentConfig, run_dir: str, corpus: Optional[Corpus] = None,
                   results_path: Optional[str] = None, resume: bool = False) -> Dict[str, Any]:
    """Train, evaluate and append one results row. Returns the row."""
    if corpus is None:
        if not cfg.data.corpus:
            raise ContractViolation("data.corpus is not set")
        corpus = load_corpus(cfg.data.corpus)
    corpus = prepare_corpus(cfg, corpus)
    trainer = Trainer(cfg, corpus, run_dir)
    if resume:
        trainer.resume()
    report = trainer.run()
    row = {
        "env": trainer.env_name,
        "dataset": trainer.dataset_kind,
        "method": method_for(cfg, corpus),
        "labeled_fraction": cfg.data.labeled_fraction,
        "seed": cfg.data.seed,
        "mean": report["eval_mean"],
        "std": report["eval_std"],
        "wall_time": round(report["wall_time"], 3),
    }
    results_path = results_path or os.path.join(os.path.dirname(os.path.abspath(run_dir)), RESULTS_FILE)
    append_result(results_path, row)
    logger.info(f"{row['env']}/{row['dataset']} {row['method']}: {row['mean']:.1f} +- {row['std']:.1f}")
    return row


def read_results(paths) -> List[Dict[str, str]]:
    rows: List[Dict[str, str]] = []
    for path in paths:
        if not os.path.exists(path):
            raise DataError(f"results file {path} does not exist")
        with open(path, "r", newline="", encoding="utf-8") as f:
            rows.extend(csv.DictReader(f))
    return rows


def aggregate_results(rows: List[Dict[str, str]]) -> List[List[str]]:
    """Comparison table: one row per (env, dataset), one "mean ± std" column per method, plus an average row.

    The spread is the standard deviation of the per-seed mean scores.
    """
    if not rows:
        raise DataError("no result rows to aggregate")
    methods = sorted({r["method"] for r in rows})
    cells: Dict[tuple, Dict[str, List[float]]] = {}
    for r in rows:
        cells.setdefault((r["env"], r["dataset"]), {}).setdefault(r["method"], []).append(float(r["mean"]))
    table = [["env", "dataset"] + methods]
    per_method: Dict[str, List[float]] = {m: [] for m in methods}
    for (env, dataset), by_method in sorted(cells.items()):
        line = [env, dataset]
        for m in methods:
            scores = by_method.get(m)
            if scores:
                line.append(f"{np.mean(scores):.1f} ± {np.std(scores):.1f}")
                per_method[m].append(float(np.mean(scores)))
            else:
                line.append("")
        table.append(line)
    table.append(["average", ""] + [f"{np.mean(per_method[m]):.1f}" if per_method[m] else "" for m in methods])
    return table


def evaluate_checkpoint(path: str, episodes: Optional[int] = None, seed: Optional[int] = None) -> Dict[str, Any]:
    """Rebuild world model and agent from a trainer checkpoint and score them in the real environment."""
    state = load_checkpoint(path)
    if "world_model" not in state or "agent" not in state:
        raise DataError(f"{path} is not a trainer checkpoint")
    cfg = ExperimentConfig.from_dict(state["config"])
    world_model = build_world_model(state["model_spec"], cfg.model)
    world_model.load_state_dict(state["world_model"])
    agent = Agent(world_model, cfg.agent)
    agent.load_state_dict(state["agent"])
    episodes = episodes or cfg.run.eval_episodes
    eval_seed = _stream_seeds(cfg.data.seed)["eval"] % (2 ** 31) if seed is None else seed
    mean, std = evaluate_policy(world_model, agent, make_env(state["env"]), episodes, seed=eval_seed)
    return {"config": cfg, "env": state["env"], "dataset": state["dataset"], "method": state["method"],
            "step": state["step"], "mean": mean, "std": std}
