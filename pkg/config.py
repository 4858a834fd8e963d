"""
Experiment configuration: nested dataclasses with the model / agent / IDM
defaults, JSON loading with strict key checking, dotted overrides and the
config hash that names run directories.
"""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

from errors import ConfigError

logger = logging.getLogger("config")

SCHEMA_VERSION = 1
CHECKPOINT_MAGIC = "LAWM-CKPT-1"
METRICS_FILE = "metrics.jsonl"
RESULTS_FILE = "results.csv"
PRIOR_MODES = ("lawm", "clap")
# Dataset kinds trained with free nats 1.0; all others use 0.
FREE_NATS_KINDS = ("replay-mixture", "explore")


@dataclass
class ModelConfig:
    stoch_size: int = 64
    deter_size: int = 512
    embed_size: int = 512
    latent_action_size: int = 12
    hidden_units: int = 640
    mlp_units: int = 512
    mlp_layers: int = 2
    prior_mode: str = "lawm"
    prior_units: int = 512
    prior_layers: int = 2
    idm_units: int = 512
    idm_layers: int = 3
    min_std: float = 0.01
    lr: float = 3e-4
    batch_size: int = 64
    window: int = 50
    free_nats: Optional[float] = None
    free_nats_action: bool = True
    imagine_with_mean: bool = True
    grad_clip: float = 100.0


@dataclass
class AgentConfig:
    units: int = 256
    layers: int = 3
    lr: float = 8e-5
    entropy_weight: float = 0.01
    horizon: int = 5
    discount: float = 0.99
    lam: float = 0.95
    latent_bound: float = 3.0
    grad_clip: float = 100.0


@dataclass
class DataConfig:
    corpus: str = ""
    labeled_fraction: float = 0.05
    seed: int = 0
    use_unlabeled: bool = True
    method: str = ""


@dataclass
class EnvConfig:
    name: str = "point-mass"
    kind: str = "medium"
    n_trajectories: int = 2000
    collection_seeds: List[int] = field(default_factory=list)
    workers: int = 4


@dataclass
class IdmConfig:
    units: int = 1024
    layers: int = 3
    dropout: float = 0.1
    window: int = 5
    batch_size: int = 1024
    steps: int = 100000
    lr: float = 1e-4


@dataclass
class RunConfig:
    total_steps: int = 100000
    eval_interval: int = 5000
    eval_episodes: int = 10
    model_warmup: int = 1000
    pretrain_model_steps: int = 0
    agent_updates_per_step: int = 1
    keep_checkpoints: int = 3
    deterministic: bool = True
    progress: bool = True


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    model: ModelConfig = field(default_factory=ModelConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    data: DataConfig = field(default_factory=DataConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    idm: IdmConfig = field(default_factory=IdmConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, raw, "")

    def resolve_free_nats(self, dataset_kind: str) -> float:
        if self.model.free_nats is not None:
            return float(self.model.free_nats)
        return 1.0 if dataset_kind in FREE_NATS_KINDS else 0.0

    def method_name(self) -> str:
        """Name written to results.csv, e.g. `lawm`, `clap-oracle`, `lawm-labeled-only`."""
        if self.data.method:
            return self.data.method
        name = self.model.prior_mode
        if self.data.labeled_fraction >= 1.0:
            return f"{name}-oracle"
        if not self.data.use_unlabeled:
            return f"{name}-labeled-only"
        return name


def _build(cls, raw: Any, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section '{prefix or '<root>'}' must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = value
    return cls(**kwargs)


def apply_override(raw: Dict[str, Any], override: str) -> None:
    """Apply one `section.key=value` override in place; the key must already exist."""
    if "=" not in override:
        raise ConfigError(f"override '{override}' is not of the form key=value")
    key, text = override.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"override addresses unknown key '{key}'")
        node = node[part]
    if not isinstance(node, dict) or parts[-1] not in node:
        raise ConfigError(f"override addresses unknown key '{key}'")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node[parts[-1]] = value


def config_hash(raw_bytes: bytes, overrides: Sequence[str] = ()) -> str:
    digest = hashlib.sha256(raw_bytes)
    for override in overrides:
        digest.update(b"\0" + override.encode("utf-8"))
    return digest.hexdigest()[:12]


def _type_problems(cfg: ExperimentConfig) -> List[str]:
    """Each field must have the type of its default; overrides fall back to strings."""
    problems = []
    if not isinstance(cfg.schema_version, int) or isinstance(cfg.schema_version, bool):
        problems.append(f"schema_version must be an integer, got {cfg.schema_version!r}")
    for section in dataclasses.fields(cfg):
        block = getattr(cfg, section.name)
        if not dataclasses.is_dataclass(block):
            continue
        defaults = type(block)()
        for f in dataclasses.fields(block):
            value, default = getattr(block, f.name), getattr(defaults, f.name)
            if isinstance(default, bool):
                ok = isinstance(value, bool)
            elif isinstance(default, int):
                ok = isinstance(value, int) and not isinstance(value, bool)
            elif default is None or isinstance(default, float):
                # free_nats is the only optional number
                ok = (value is None and default is None) or (
                    isinstance(value, (int, float)) and not isinstance(value, bool))
            elif isinstance(default, str):
                ok = isinstance(value, str)
            elif isinstance(default, list):
                ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
            else:
                ok = True
            if not ok:
                problems.append(f"{section.name}.{f.name} has the wrong type: {value!r}")
    return problems


def validate(cfg: ExperimentConfig) -> ExperimentConfig:
    """Type and range checks run before any compute."""
    problems = _type_problems(cfg)
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    if cfg.schema_version != SCHEMA_VERSION:
        problems.append(f"schema_version {cfg.schema_version} (expected {SCHEMA_VERSION})")
    m, a, d, r, i = cfg.model, cfg.agent, cfg.data, cfg.run, cfg.idm
    for name, value in [
        ("model.stoch_size", m.stoch_size), ("model.deter_size", m.deter_size),
        ("model.embed_size", m.embed_size), ("model.latent_action_size", m.latent_action_size),
        ("model.hidden_units", m.hidden_units), ("model.mlp_units", m.mlp_units),
        ("model.mlp_layers", m.mlp_layers), ("model.prior_units", m.prior_units),
        ("model.prior_layers", m.prior_layers), ("model.idm_units", m.idm_units),
        ("model.idm_layers", m.idm_layers), ("model.batch_size", m.batch_size),
        ("agent.units", a.units), ("agent.layers", a.layers), ("agent.horizon", a.horizon),
        ("idm.units", i.units), ("idm.layers", i.layers), ("idm.batch_size", i.batch_size),
        ("env.n_trajectories", cfg.env.n_trajectories), ("run.eval_episodes", r.eval_episodes),
        ("run.eval_interval", r.eval_interval), ("run.keep_checkpoints", r.keep_checkpoints),
        ("run.agent_updates_per_step", r.agent_updates_per_step),
    ]:
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            problems.append(f"{name} must be a positive integer, got {value!r}")
    if not isinstance(m.window, int) or m.window < 2:
        problems.append(f"model.window must be an integer >= 2, got {m.window!r}")
    if m.prior_mode not in PRIOR_MODES:
        problems.append(f"model.prior_mode must be one of {PRIOR_MODES}, got {m.prior_mode!r}")
    if m.free_nats is not None and m.free_nats < 0:
        problems.append(f"model.free_nats must be >= 0, got {m.free_nats}")
    if m.min_std <= 0:
        problems.append("model.min_std must be > 0")
    if not 0.0 < d.labeled_fraction <= 1.0:
        problems.append(f"data.labeled_fraction must be in (0, 1], got {d.labeled_fraction}")
    for name, value in [("agent.discount", a.discount), ("agent.lam", a.lam)]:
        if not 0.0 <= value <= 1.0:
            problems.append(f"{name} must be in [0, 1], got {value}")
    for name, value in [("model.lr", m.lr), ("agent.lr", a.lr), ("idm.lr", i.lr),
                        ("agent.latent_bound", a.latent_bound), ("model.grad_clip", m.grad_clip),
                        ("agent.grad_clip", a.grad_clip)]:
        if value <= 0:
            problems.append(f"{name} must be > 0, got {value}")
    if a.entropy_weight < 0:
        problems.append("agent.entropy_weight must be >= 0")
    if not 0.0 <= i.dropout < 1.0:
        problems.append("idm.dropout must be in [0, 1)")
    if i.window < 1 or i.window % 2 == 0:
        problems.append(f"idm.window must be a positive odd integer, got {i.window}")
    for name, value in [("run.total_steps", r.total_steps), ("run.model_warmup", r.model_warmup),
                        ("run.pretrain_model_steps", r.pretrain_model_steps), ("idm.steps", i.steps)]:
        if not isinstance(value, int) or value < 0:
            problems.append(f"{name} must be a non-negative integer, got {value!r}")
    if problems:
        raise ConfigError("invalid config: " + "; ".join(problems))
    return cfg


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> Tuple[ExperimentConfig, str]:
    """Load (or default), apply overrides, validate. Returns (config, hash)."""
    if path:
        try:
            with open(path, "rb") as f:
                raw_bytes = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            raw = json.loads(raw_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        # Fill defaults first so overrides can address keys the file omits.
        raw = _merge(ExperimentConfig().to_dict(), raw)
    else:
        raw = ExperimentConfig().to_dict()
        raw_bytes = json.dumps(raw, sort_keys=True).encode("utf-8")
    for override in overrides:
        apply_override(raw, override)
    cfg = validate(ExperimentConfig.from_dict(raw))
    logger.debug(f"Loaded config from {path or '<defaults>'} with {len(overrides)} overrides")
    return cfg, config_hash(raw_bytes, overrides)


def _merge(defaults: Dict[str, Any], raw: Dict[str, Any]) -> Dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    merged = dict(defaults)
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key: {key}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be an object")
            unknown = sorted(set(value) - set(defaults[key]))
            if unknown:
                raise ConfigError(f"unknown config keys: {', '.join(key + '.' + k for k in unknown)}")
            merged[key] = {**defaults[key], **value}
        else:
            merged[key] = value
    return merged
