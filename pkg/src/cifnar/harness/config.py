"""Training configuration: one JSON file with ``model``, ``task`` and ``train`` sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from ..model import ModelConfig, ModelError
from ..synth import TaskSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskSpec = field(default_factory=TaskSpec)
    batch_size: int = 16
    max_steps: int = 5000
    learning_rate: float = 1e-3  # peak, reached at the end of warmup
    warmup_steps: int = 500
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    grad_clip: float = 5.0  # global L2 norm; 0 disables clipping
    seed: int = 0
    dev_size: int = 500
    dev_seed: int = 1_000_003
    eval_every: int = 500
    bucket_pool: int = 8  # batches drawn together and grouped by length
    divergence_limit: float = 1e6
    out_dir: str = "runs/default"
    disable_ali: bool = False
    disable_ctx: bool = False

    def __post_init__(self):
        if self.max_steps < 1:
            raise ConfigError("max_steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0 or self.warmup_steps < 0:
            raise ConfigError("learning_rate must be > 0 and warmup_steps >= 0")
        if self.dev_size < 1 or self.eval_every < 1 or self.bucket_pool < 1:
            raise ConfigError("dev_size, eval_every and bucket_pool must be >= 1")
        if self.model.feature_dim != self.task.feature_dim or self.model.vocab_size != self.task.vocab_size:
            raise ConfigError("model feature_dim/vocab_size must match the task spec")

    def effective_model(self) -> ModelConfig:
        """Model config with the ablation flags folded in."""
        m = self.model
        if self.disable_ali:
            m = replace(m, lambda1=0.0)
        if self.disable_ctx:
            m = replace(m, contextual=False)
        return m

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return {"model": d.pop("model"), "task": d.pop("task"), "train": d}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {"model", "task", "train"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            model = ModelConfig(**_checked(ModelConfig, d.get("model", {})))
            task = TaskSpec(**_checked(TaskSpec, d.get("task", {})))
            train = dict(_checked(cls, d.get("train", {})))
            train.pop("model", None)
            train.pop("task", None)
            if "adam_betas" in train:
                train["adam_betas"] = tuple(train["adam_betas"])
            return cls(model=model, task=task, **train)
        except (TypeError, ValueError, ModelError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from None


def _checked(kind, section: dict) -> dict:
    if not isinstance(section, dict):
        raise ConfigError(f"{kind.__name__} section must be an object")
    names = {f.name for f in fields(kind)}
    bad = set(section) - names
    if bad:
        raise ConfigError(f"unknown {kind.__name__} fields: {sorted(bad)}")
    return section


def load_config(path) -> TrainConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return TrainConfig.from_dict(raw)


def save_config(cfg: TrainConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def apply_overrides(cfg: TrainConfig, *, seed=None, steps=None, out=None, disable_ali=False,
                    disable_ctx=False, decoder_mode=None, theta=None, residual_threshold=None) -> TrainConfig:
    """Fold CLI flags into a config. Flags left at their defaults change nothing."""
    model_kw = {}
    if decoder_mode is not None:
        model_kw["decoder_input_mode"] = decoder_mode
    if theta is not None:
        model_kw["theta"] = theta
    if residual_threshold is not None:
        model_kw["residual_threshold"] = residual_threshold
    try:
        model = replace(cfg.model, **model_kw) if model_kw else cfg.model
        kw = {"model": model}
        if seed is not None:
            kw["seed"] = seed
        if steps is not None:
            kw["max_steps"] = steps
        if out is not None:
            kw["out_dir"] = str(out)
        if disable_ali:
            kw["disable_ali"] = True
        if disable_ctx:
            kw["disable_ctx"] = True
        return replace(cfg, **kw)
    except ModelError as e:
        raise ConfigError(str(e)) from None
