"""One JSON config file for a whole run, with dotted flag overrides.

Sections map onto the module dataclasses::

    {"seed": 0,
     "phantom": {...}, "model": {...}, "schema": {...}, "weights": {...},
     "train": {...}, "localization": {...}, "finetune": {...}, "classifier": {...}}

The top-level seed (overridable by the EXACT_SEED environment variable)
is pushed into every section that has one.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .network import ModelConfig
from .objectives import LossWeights, TaskSchema
from .phantoms import PhantomSpec
from .pipelines import ClassifierConfig, FinetuneConfig, LocalizationConfig, TrainConfig

SEED_ENV = "EXACT_SEED"


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


SECTIONS = {
    "phantom": PhantomSpec,
    "model": ModelConfig,
    "schema": TaskSchema,
    "weights": LossWeights,
    "train": TrainConfig,
    "localization": LocalizationConfig,
    "finetune": FinetuneConfig,
    "classifier": ClassifierConfig,
}

# desk-scale training defaults (the library-level TrainConfig keeps the reference values)
DESK_TRAIN = dict(epochs=30, lr_init=2e-3, eta_min=1e-5, batch_size=2)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    schema: TaskSchema = field(default_factory=TaskSchema)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**DESK_TRAIN))
    localization: LocalizationConfig = field(default_factory=LocalizationConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    n_train: int = 300
    n_test: int = 50

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    def check(self):
        """Cross-section consistency."""
        if self.model.in_shape != self.phantom.shape:
            raise ConfigError("model.in_shape", f"{self.model.in_shape} != phantom.shape {self.phantom.shape}")
        if self.model.n_diseases != self.schema.n_diseases:
            raise ConfigError("model.n_diseases", f"{self.model.n_diseases} != schema size {self.schema.n_diseases}")
        if self.model.n_organ_channels != self.schema.n_organ_channels:
            raise ConfigError("model.n_organ_channels", "must equal schema.n_organ_channels")
        if self.phantom.n_diseases != self.schema.n_diseases:
            raise ConfigError("phantom.n_diseases", "must equal the schema's disease count")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train", "n_train and n_test must be >= 1")
        return self


def _build(section, cls, values, base):
    if not isinstance(values, dict):
        raise ConfigError(section, "expected an object")
    known = {f.name for f in fields(cls)}
    for k in values:
        if k not in known:
            raise ConfigError(f"{section}.{k}", "unknown field")
    merged = dataclasses.asdict(base)
    if cls is TaskSchema and "k_high" not in values and ({"k_low", "scale_ratio"} & set(values)):
        merged["k_high"] = None  # re-derived from k_low
    merged.update(values)
    merged = {k: tuple(v) if isinstance(v, list) else v for k, v in merged.items()}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        name = msg.split(":", 1)[0] if ":" in msg and "." in msg.split(":", 1)[0] else section
        raise ConfigError(name, msg) from exc


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def from_dict(d, overrides=(), env=None):
    """Build a RunConfig from a dict plus ``section.field=value`` overrides."""
    d = json.loads(json.dumps(d))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.field=value")
        key, text = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) == 1:
            d[parts[0]] = _parse_value(text)
        elif len(parts) == 2:
            d.setdefault(parts[0], {})[parts[1]] = _parse_value(text)
        else:
            raise ConfigError(key, "nested deeper than section.field")
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            d["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(SEED_ENV, f"not an integer: {env[SEED_ENV]!r}") from exc
    base = RunConfig()
    unknown = set(d) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown section")
    seed = d.get("seed", base.seed)
    if not isinstance(seed, int):
        raise ConfigError("seed", "must be an integer")
    kw = {"seed": seed}
    for name in ("n_train", "n_test"):
        if name in d:
            if not isinstance(d[name], int):
                raise ConfigError(name, "must be an integer")
            kw[name] = d[name]
    for section, cls in SECTIONS.items():
        values = dict(d.get(section, {}))
        if "seed" in {f.name for f in fields(cls)}:
            values.setdefault("seed", seed)
        kw[section] = _build(section, cls, values, getattr(base, section))
    return RunConfig(**kw).check()


def load(path=None, overrides=(), env=None):
    if path is None:
        return from_dict({}, overrides, env)
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError("config", f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError("config", "top level must be an object")
    return from_dict(d, overrides, env)
