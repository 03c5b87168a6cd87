"""Run configuration: defaults, a flat ``key = value`` file, CLI overrides.

Config file schema (all keys optional; ``#`` starts a comment)::

    dataset = data/synth
    out = runs/exp1
    backend = selective_mahalanobis        # mse | selective_mahalanobis
    seeds = 13711, 13591, 13267
    epochs = 100
    batch_size = 256
    learning_rate = 0.001
    frame_length = 1024
    hop = 512
    n_mels = 128
    f_min = 0
    f_max = 8000
    log_floor = 1e-12
    context = 5
    shrinkage = ledoit-wolf                # or a fixed lambda such as 0.001
    threshold_percentile = 0.9
    p = 0.1

There is deliberately no per-machine-type override: one setting applies to
every machine type and section.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .dsp import MelConfig, StftConfig
from .errors import InvalidInput
from .model import TrainConfig
from .scoring import BACKENDS

DEFAULT_SEEDS = (13711, 13591, 13267)
# paths and seeds are run identity, not hyperparameters
_NOT_DIGESTED = {"dataset", "out", "seeds", "backend"}


@dataclass(frozen=True)
class RunConfig:
    dataset: Path | None = None
    out: Path | None = None
    backend: str = "mse"
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    epochs: int = 100
    batch_size: int = 256
    learning_rate: float = 1e-3
    frame_length: int = 1024
    hop: int = 512
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-12
    context: int = 5
    shrinkage: str | float = "ledoit-wolf"
    threshold_percentile: float = 0.9
    p: float = 0.1

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise InvalidInput(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.shrinkage != "ledoit-wolf" and not (
                isinstance(self.shrinkage, float) and 0 < self.shrinkage <= 1):
            raise InvalidInput("shrinkage must be 'ledoit-wolf' or a number in (0, 1]")
        if not self.seeds:
            raise InvalidInput("at least one seed is required")
        if self.dataset is not None and self.out is not None:
            if Path(self.dataset).resolve() == Path(self.out).resolve():
                raise InvalidInput("dataset and output directories must differ")
        try:
            self.train_config(self.seeds[0])
            self.stft_config()
            self.mel_config()
        except ValueError as exc:
            raise InvalidInput(str(exc)) from exc

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=int(seed))

    def stft_config(self) -> StftConfig:
        return StftConfig(frame_length=self.frame_length, hop=self.hop)

    def mel_config(self) -> MelConfig:
        return MelConfig(n_mels=self.n_mels, f_min=self.f_min, f_max=self.f_max,
                         log_floor=self.log_floor)

    def digest(self) -> str:
        items = [f"{f.name}={getattr(self, f.name)!r}" for f in dataclasses.fields(self)
                 if f.name not in _NOT_DIGESTED]
        return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


def _coerce(name, raw):
    kind = {f.name: f.type for f in dataclasses.fields(RunConfig)}[name]
    try:
        if name in ("dataset", "out"):
            return Path(raw) if raw not in (None, "") else None
        if name == "shrinkage":
            if raw == "ledoit-wolf":
                return raw
            return float(raw)
        if name == "seeds":
            if isinstance(raw, str):
                raw = [s for s in raw.replace(",", " ").split() if s]
            return tuple(int(s) for s in raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise InvalidInput(f"config key {name!r}: cannot parse {raw!r}") from exc


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        text = Path(path).read_text()
        parser.read_string("[run]\n" + text, source=str(path))
    except (OSError, configparser.Error) as exc:
        raise InvalidInput(f"cannot read config {path}: {exc}") from exc
    known = {f.name for f in dataclasses.fields(RunConfig)}
    values = {}
    for key, raw in parser["run"].items():
        if key not in known:
            raise InvalidInput(f"{path}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve(config_file=None, **overrides) -> RunConfig:
    """Defaults, then the config file, then non-None overrides."""
    values = read_config_file(config_file) if config_file else {}
    for key, raw in overrides.items():
        if raw is not None:
            values[key] = _coerce(key, raw)
    return RunConfig(**values)
