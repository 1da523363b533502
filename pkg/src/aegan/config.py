"""Training configuration, mutable training state and config-file I/O."""

from __future__ import annotations

import csv
import dataclasses
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import DataError, format_config, parse_config_text
from .networks import NetworkConfig
from .optim import Adam

STAGES = ("AE", "GAN", "FINETUNE")
STAGE_PREFIX = {"AE": "ae", "GAN": "gan", "FINETUNE": "finetune"}
STAGE_DEFAULTS = {
    "AE": dict(learning_rate=1e-5, epochs=100),
    "GAN": dict(learning_rate=2e-4, epochs=200),
    "FINETUNE": dict(learning_rate=1e-7, epochs=100),
}


class NumericalAbort(RuntimeError):
    """A loss became NaN or infinite."""

    def __init__(self, step: int, name: str, value: float):
        super().__init__(f"non-finite loss {name}={value} at step {step}")
        self.step, self.name, self.value = step, name, value


@dataclass
class TrainConfig:
    stage: str = "AE"
    learning_rate: float = 1e-5
    epochs: int = 100
    batch_size: int = 16
    lambda_pixel: float = 100.0
    seed: int = 0
    checkpoint_every: int = 10
    # Literal log(1 - D(G(z))) generator objective instead of the non-saturating one.
    saturating: bool = False
    # Weight on the denoiser's adversarial term; 0 isolates the pixel term.
    adversarial_weight: float = 1.0
    # Discriminator learning rate; None means learning_rate.
    discriminator_lr: float | None = None
    # Step 2 runs the denoiser update on every n-th iteration; 1 pairs it with every GAN update.
    denoiser_every: int = 1
    max_steps: int | None = None
    log_every: int = 50

    def __post_init__(self) -> None:
        self.stage = self.stage.upper()
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if min(self.epochs, self.batch_size, self.checkpoint_every, self.denoiser_every) < 1:
            raise ValueError("epochs, batch_size, checkpoint_every and denoiser_every must be positive")
        if self.lambda_pixel < 0:
            raise ValueError("lambda_pixel must be non-negative")

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        stage = stage.upper()
        values = dict(STAGE_DEFAULTS[stage])
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(stage=stage, **values)

    @property
    def d_lr(self) -> float:
        return self.learning_rate if self.discriminator_lr is None else self.discriminator_lr

    def as_dict(self) -> dict[str, object]:
        return dataclasses.asdict(self)


@dataclass
class TrainState:
    stage: str = "AE"
    epoch: int = 0
    global_step: int = 0
    optimizers: dict[str, Adam] = field(default_factory=dict)
    history: list[tuple[int, str, float]] = field(default_factory=list)

    def record(self, name: str, value: float, step: int | None = None) -> float:
        step = self.global_step if step is None else step
        value = float(value)
        if not math.isfinite(value):
            raise NumericalAbort(step, name, value)
        self.history.append((step, name, value))
        return value

    def series(self, name: str) -> list[float]:
        return [v for _, n, v in self.history if n == name]

    def last(self, name: str) -> float:
        values = self.series(name)
        if not values:
            raise KeyError(name)
        return values[-1]

    def write_history(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "name", "value"])
            for step, name, value in self.history:
                writer.writerow([step, name, repr(value)])


def read_history(path: str | os.PathLike) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), r["name"], float(r["value"])) for r in rows]


def load_config_file(path: str | os.PathLike) -> tuple[NetworkConfig, dict[str, TrainConfig]]:
    """Read a ``key = value`` file into a network config and one TrainConfig per stage.

    Train keys may be bare (applied to every stage) or stage-prefixed
    (``ae.``, ``gan.``, ``finetune.``); prefixed keys win.
    """
    text = Path(path).read_text(encoding="utf-8")
    sections = {"": NetworkConfig, **{p: TrainConfig for p in STAGE_PREFIX.values()}}
    parsed = parse_config_text(text, sections)
    stray = [k for k in ("stage",) for p in STAGE_PREFIX.values() if k in parsed[p]]
    if stray:
        raise DataError("'stage' is implied by the section and cannot be set in a config file")
    try:
        net = NetworkConfig(**parsed[""])
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid network config: {exc}") from exc
    train = {}
    for stage, prefix in STAGE_PREFIX.items():
        try:
            train[stage] = TrainConfig.for_stage(stage, **parsed[prefix])
        except (TypeError, ValueError) as exc:
            raise DataError(f"invalid {prefix} config: {exc}") from exc
    return net, train


def dump_config(net: NetworkConfig, train: dict[str, TrainConfig] | None = None) -> str:
    """Fully resolved configuration in the config-file syntax."""
    parts = [format_config(dataclasses.asdict(net))]
    for stage, cfg in (train or {}).items():
        values = {k: v for k, v in cfg.as_dict().items() if k != "stage"}
        parts.append(format_config(values, STAGE_PREFIX[stage]))
    return "\n".join(parts) + "\n"
