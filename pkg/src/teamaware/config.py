"""Plain-text run configuration: dotted keys, one `key = value` per line.

Unknown keys are rejected; every value is type-checked and validated at
parse time so a bad run dies before it starts.  Command-line overrides
(`--set key=value`) beat file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .env import EnvConfig
from .errors import ConfigurationError
from .mixer import MIXER_KINDS


@dataclass
class TrainingConfig:
    gamma: float = 0.99
    kl_weight: float = 1e-3          # config key: train.lambda
    buffer_capacity: int = 5000
    batch_size: int = 32
    target_update_interval: int = 200   # episodes between hard target copies
    epsilon_start: float = 1.0
    epsilon_finish: float = 0.05
    epsilon_anneal_steps: int = 50_000
    total_env_steps: int = 500_000
    eval_interval: int = 10_000      # env steps between greedy evaluations
    eval_episodes: int = 20
    seed: int = 1
    learning_rate: float = 5e-4
    optimizer_decay: float = 0.99
    optimizer_epsilon: float = 1e-5
    grad_norm_clip: float = 10.0
    use_double_q: bool = False
    checkpoint_interval: int = 0     # env steps; 0 = final checkpoint only

    def validate(self) -> "TrainingConfig":
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("train.gamma must be in [0, 1)")
        if self.kl_weight < 0:
            raise ConfigurationError("train.lambda must be >= 0")
        if self.buffer_capacity < self.batch_size:
            raise ConfigurationError("buffer capacity must be >= batch size")
        if self.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if self.total_env_steps < 1:
            raise ConfigurationError("train.total_env_steps must be >= 1")
        if self.eval_interval < 1 or self.eval_episodes < 1:
            raise ConfigurationError("eval interval/episodes must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("train.learning_rate must be > 0")
        if not 0.0 <= self.epsilon_finish <= self.epsilon_start <= 1.0:
            raise ConfigurationError("epsilon schedule must satisfy 0 <= finish <= start <= 1")
        return self

    def epsilon_at(self, env_steps: int) -> float:
        frac = min(1.0, env_steps / max(1, self.epsilon_anneal_steps))
        return self.epsilon_start + frac * (self.epsilon_finish - self.epsilon_start)


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    mixer: str = "vdn"
    agent_hidden_dim: int = 64
    aware_dim: int = 3
    use_awareness: bool = True
    share_params: bool = True

    def validate(self) -> "RunConfig":
        self.env.validate()
        self.train.validate()
        if self.mixer not in MIXER_KINDS:
            raise ConfigurationError(
                f"mixer must be one of {MIXER_KINDS}, got {self.mixer!r}")
        if self.agent_hidden_dim < 1 or self.aware_dim < 1:
            raise ConfigurationError("hidden/awareness dims must be >= 1")
        return self

    def to_flat_dict(self) -> dict:
        out = {}
        for key, (section, attr, typ) in _KEYS.items():
            obj = {"env": self.env, "train": self.train, "": self}[section]
            out[key] = getattr(obj, attr)
        return out


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (section, attribute, parser)
_KEYS = {
    "env.grid_height": ("env", "grid_height", int),
    "env.grid_width": ("env", "grid_width", int),
    "env.n_agents": ("env", "n_agents", int),
    "env.n_foods": ("env", "n_foods", int),
    "env.max_agent_level": ("env", "max_agent_level", int),
    "env.visibility_radius": ("env", "visibility_radius", int),
    "env.episode_limit": ("env", "episode_limit", int),
    "env.seed": ("env", "seed", int),
    "train.gamma": ("train", "gamma", float),
    "train.lambda": ("train", "kl_weight", float),
    "train.buffer_capacity": ("train", "buffer_capacity", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.target_update_interval": ("train", "target_update_interval", int),
    "train.epsilon_start": ("train", "epsilon_start", float),
    "train.epsilon_finish": ("train", "epsilon_finish", float),
    "train.epsilon_anneal_steps": ("train", "epsilon_anneal_steps", int),
    "train.total_env_steps": ("train", "total_env_steps", int),
    "train.eval_interval": ("train", "eval_interval", int),
    "train.eval_episodes": ("train", "eval_episodes", int),
    "train.seed": ("train", "seed", int),
    "train.learning_rate": ("train", "learning_rate", float),
    "train.optimizer_decay": ("train", "optimizer_decay", float),
    "train.optimizer_epsilon": ("train", "optimizer_epsilon", float),
    "train.grad_norm_clip": ("train", "grad_norm_clip", float),
    "train.use_double_q": ("train", "use_double_q", _bool),
    "train.checkpoint_interval": ("train", "checkpoint_interval", int),
    "mixer": ("", "mixer", str),
    "agent.hidden_dim": ("", "agent_hidden_dim", int),
    "agent.use_awareness": ("", "use_awareness", _bool),
    "agent.share_params": ("", "share_params", _bool),
    "awareness.dim": ("", "aware_dim", int),
}


def _parse_lines(lines, source: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


def parse_config(path: str | Path | None = None,
                 overrides: list[str] | None = None) -> RunConfig:
    """Build a validated RunConfig from an optional file plus overrides.

    `overrides` are `key=value` strings (e.g. from repeated --set flags) and
    take precedence over file values.
    """
    assignments: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        assignments.update(_parse_lines(path.read_text().splitlines(), str(path)))
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override must look like key=value: {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        assignments[key] = value

    env_kwargs, train_kwargs, top_kwargs = {}, {}, {}
    for key, text in assignments.items():
        if key not in _KEYS:
            raise ConfigurationError(f"unknown config key: {key!r}")
        section, attr, parse = _KEYS[key]
        try:
            value = parse(text)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}") from None
        {"env": env_kwargs, "train": train_kwargs, "": top_kwargs}[section][attr] = value

    cfg = RunConfig(env=EnvConfig(**env_kwargs),
                    train=TrainingConfig(**train_kwargs), **top_kwargs)
    return cfg.validate()


def config_keys() -> list[str]:
    """Every documented key, for help output."""
    return sorted(_KEYS)
