"""Run configuration and its flat ``key = value`` file format.

Grammar, one setting per line::

    # comment
    lambda1 = 2.5
    models = lenet1, lenet4, lenet5     # lists are comma separated
    lambda1_grid = 0.5, 1, 2.5

Keys are RunConfig field names (``-`` and ``_`` are interchangeable).
Blank lines and text after ``#`` are ignored. Command-line flags override
values read from the file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .exceptions import UsageError
from .generator import GenerationConfig
from .model_zoo import VARIANTS, TrainConfig


@dataclass
class RunConfig:
    dataset: str = "digits"
    format: str = "builtin_synthetic"
    data_seed: int = 0
    models: tuple = VARIANTS
    model_dir: str | None = None
    epochs: int = 12
    learning_rate: float = 0.01
    lambda1: float = 2.5
    lambda2: float = 2.0
    step: float | None = None
    threshold: float = 0.0
    max_iters: int = 200
    constraint: str = "occl_rect"
    deviating_policy: str = "least_confident"
    neuron_model: int = 0
    dots: int = 4
    dot_color: str = "black"
    seeds: int = 100
    workers: int = 1
    rng_seed: int = 0
    out: str = "runs/latest"
    lambda1_grid: tuple = (0.5, 1.0, 2.5)
    lambda2_grid: tuple = (0.5, 1.0, 2.0)
    threshold_grid: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    seed_grid: tuple = (10, 50, 100)
    repetitions: int = 10
    corpus: str | None = None
    control: str = "both"
    retrain_epochs: int = 12
    retrain_lr: float = 0.005

    def generation(self) -> GenerationConfig:
        return GenerationConfig(
            lambda1=self.lambda1, lambda2=self.lambda2, step=self.step, threshold=self.threshold,
            max_iters=self.max_iters, constraint=self.constraint,
            deviating_policy=self.deviating_policy, neuron_model=self.neuron_model,
            dots=self.dots, dot_color=self.dot_color, rng_seed=self.rng_seed,
        ).validate()

    def training(self) -> TrainConfig:
        return TrainConfig(
            variants=tuple(self.models), epochs=self.epochs,
            learning_rate=self.learning_rate, rng_seed=self.rng_seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        return cls().updated(values)

    def updated(self, values: dict) -> "RunConfig":
        out = RunConfig(**asdict(self))
        for key, value in values.items():
            name = key.replace("-", "_")
            if name not in _TYPES:
                raise UsageError(f"unknown setting {key!r}")
            setattr(out, name, coerce(name, value))
        return out


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_OPTIONAL = {name for name, t in _TYPES.items() if "None" in t}


def coerce(name: str, value):
    """Convert a raw string (or JSON value) to the type of field ``name``."""
    kind = _TYPES[name]
    blank = value is None or (isinstance(value, str) and value.strip().lower() in ("none", "null", ""))
    if blank and name in _OPTIONAL:
        return None
    if blank and not (kind == "str" and value is not None and value.strip()):
        raise UsageError(f"{name} needs a value")
    try:
        if kind == "tuple":
            items = value.split(",") if isinstance(value, str) else list(value)
            items = [i.strip() if isinstance(i, str) else i for i in items]
            items = [i for i in items if i != ""]
            if name == "models":
                return tuple(str(i) for i in items)
            if name == "seed_grid":
                return tuple(int(i) for i in items)
            return tuple(float(i) for i in items)
        base = kind.split("|")[0].strip()
        if base == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if base == "float":
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError):
        raise UsageError(f"bad value {value!r} for {name}") from None


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def load_config_file(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {p} not found")
    return parse_config_text(p.read_text())


def dump_config_text(config: RunConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"
