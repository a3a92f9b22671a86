"""Run configuration: one nested structure covering corpus, model, loss,
optimizer, inference thresholds, and ablation switches, with a lossless JSON
round-trip. `default_config()` carries every stock value."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .model import FeatureFlags, LossWeights, ModelDims
from .scenes import CorpusConfig
from .supervision import MatchWeights


class ConfigError(ValueError):
    pass


@dataclass
class OptimConfig:
    # AdamW at 1e-3 reaches the desk-scale operating point within the epoch
    # budget; lower rates stall in the early all-background phase.
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 50
    batch_size: int = 8


@dataclass
class DenoiseConfig:
    box_jitter: float = 0.2
    label_flip: float = 0.2


@dataclass
class RunConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelDims = field(default_factory=ModelDims)
    flags: FeatureFlags = field(default_factory=FeatureFlags)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    tau: float = 0.8
    kappa: float = 0.4
    theta_aff: float = 0.5
    theta_score: float = 0.25
    clip_temperature: float = 0.07
    seed: int = 0

    def validate(self) -> None:
        try:
            self.corpus.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.model.embed_dim != self.corpus.embed_dim:
            raise ConfigError("model embed_dim must match the corpus embedding width")
        if self.model.dim % self.model.heads:
            raise ConfigError("model dim must divide evenly into heads")
        if self.model.dim % 4:
            raise ConfigError("model dim must be a multiple of 4 for position features")
        if not 0.0 <= self.kappa <= 1.0:
            raise ConfigError("kappa must lie in [0, 1]")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0, 1)")
        for name in ("theta_aff", "theta_score"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")
        if self.optim.epochs < 1 or self.optim.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.optim.lr <= 0:
            raise ConfigError("learning rate must be positive")


def default_config() -> RunConfig:
    return RunConfig()


# --- JSON round-trip ------------------------------------------------------------

def _to_jsonable(obj):
    if is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, tuple):
        return [_to_jsonable(x) for x in obj]
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    return obj


def config_to_json(cfg: RunConfig) -> str:
    return json.dumps(_to_jsonable(cfg), indent=2, sort_keys=True) + "\n"


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in data:
            continue
        raw = data[name]
        current = getattr(defaults, name)
        if is_dataclass(current):
            kwargs[name] = _build(type(current), raw, f"{path}.{name}")
        elif isinstance(current, tuple):
            if not isinstance(raw, list):
                raise ConfigError(f"{path}.{name}: expected a list")
            kwargs[name] = tuple(raw)
        elif isinstance(current, dict):
            if not isinstance(raw, dict):
                raise ConfigError(f"{path}.{name}: expected an object")
            kwargs[name] = {int(k): v for k, v in raw.items()}
        elif isinstance(current, bool):
            if not isinstance(raw, bool):
                raise ConfigError(f"{path}.{name}: expected a boolean")
            kwargs[name] = raw
        elif isinstance(current, int) and not isinstance(current, bool):
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                raise ConfigError(f"{path}.{name}: expected a number")
            if isinstance(raw, float) and not raw.is_integer():
                raise ConfigError(f"{path}.{name}: expected an integer")
            kwargs[name] = int(raw)
        elif isinstance(current, float):
            if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                raise ConfigError(f"{path}.{name}: expected a number")
            kwargs[name] = float(raw)
        elif isinstance(current, str):
            if not isinstance(raw, str):
                raise ConfigError(f"{path}.{name}: expected a string")
            kwargs[name] = raw
        else:
            kwargs[name] = raw
    return cls(**kwargs)


def config_from_json(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    cfg = _build(RunConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return config_from_json(f.read())
