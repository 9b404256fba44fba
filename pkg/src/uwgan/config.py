"""Experiment configuration: one JSON document, one section per module."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from uwgan.losses import LossWeights
from uwgan.models import DiscriminatorSpec, GeneratorSpec
from uwgan.patching import ConfigMode
from uwgan.phantom import PhantomSpec, SubjectSpec
from uwgan.training import TrainConfig

STAGES = ("simulate", "corrupt", "train", "denoise", "evaluate", "phantom", "glm", "report")

Stage = Literal["simulate", "corrupt", "train", "denoise", "evaluate", "phantom", "glm", "report"]


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class DataSection(_Section):
    n_subjects: int = Field(10, ge=2)
    subject: SubjectSpec = SubjectSpec()
    seed: int = 0
    folds: int = Field(5, ge=2)
    run_folds: tuple[int, ...] | None = None  # None runs every fold
    split_seed: int = 0


class NoiseSection(_Section):
    delta: float = Field(0.09, gt=0, le=1)
    seed: int = 1000


class ModelSection(_Section):
    generator: GeneratorSpec = GeneratorSpec()
    discriminator: DiscriminatorSpec = DiscriminatorSpec()


class TrainSection(_Section):
    learning_rate: float = Field(1e-4, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(1, ge=1)
    d_steps_per_g_step: int = Field(1, ge=1)
    seed: int = 0
    mode: ConfigMode = ConfigMode.TIME_BASED
    patch_size: int = Field(32, ge=1)
    stride: int | None = None
    renoise_per_epoch: bool = False


class MetricsSection(_Section):
    window: int | None = None
    per_frame: bool = False


class GlmSection(_Section):
    alpha: float = Field(0.05, gt=0, lt=1)
    denoise_phantom: bool = True


class EvaluateSection(_Section):
    """Precomputed volumes for an evaluate-only run; matched by file name."""

    clean_dir: Path | None = None
    test_dir: Path | None = None

    @model_validator(mode="after")
    def _both_or_neither(self):
        if (self.clean_dir is None) != (self.test_dir is None):
            raise ValueError("evaluate needs both clean_dir and test_dir")
        return self


class ExperimentConfig(_Section):
    data: DataSection = DataSection()
    noise: NoiseSection = NoiseSection()
    model: ModelSection = ModelSection()
    losses: LossWeights = LossWeights()
    train: TrainSection = TrainSection()
    metrics: MetricsSection = MetricsSection()
    phantom: PhantomSpec = PhantomSpec()
    glm: GlmSection = GlmSection()
    evaluate: EvaluateSection = EvaluateSection()
    stages: tuple[Stage, ...] = STAGES

    @model_validator(mode="after")
    def _folds_in_range(self):
        for k in self.data.run_folds or ():
            if not 0 <= k < self.data.folds:
                raise ValueError(f"run_folds entry {k} outside 0..{self.data.folds - 1}")
        return self

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            learning_rate=t.learning_rate, batch_size=t.batch_size, epochs=t.epochs,
            d_steps_per_g_step=t.d_steps_per_g_step, seed=t.seed, weights=self.losses, mode=t.mode,
            patch_size=t.patch_size, generator=self.model.generator, discriminator=self.model.discriminator,
            renoise_per_epoch=t.renoise_per_epoch,
        )

    @property
    def folds_to_run(self) -> tuple[int, ...]:
        return self.data.run_folds if self.data.run_folds is not None else tuple(range(self.data.folds))

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def _describe(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        where = ".".join(str(p) for p in e["loc"])
        if e["type"] == "extra_forbidden":
            parts.append(f"unknown key '{where}'")
        else:
            parts.append(f"{where}: {e['msg']}")
    return "; ".join(parts)


def parse_config(payload: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as err:
        raise ConfigError(_describe(err)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    if not isinstance(payload, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return parse_config(payload)
