"""Experiment configuration: a TOML file with typed, validated sections.

Unknown keys anywhere are rejected.  See ``configs/`` for examples and the
README for the full key list.
"""

from __future__ import annotations

import hashlib
from pathlib import Path
from typing import Literal, Optional

import tomli
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .attacks import AttackConfig
from .flatness import FlatnessConfig
from .geometry import BallSpec
from .training import Schedule, TrainConfig


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NetworkSection(_Section):
    hidden: list[int] = [128]
    activation: Literal["relu", "silu", "gelu", "mish"] = "relu"
    batchnorm: Literal["none", "hidden", "all"] = "none"
    whiten: bool = True


class DataSection(_Section):
    kind: Literal["gaussians", "spirals", "idx"] = "gaussians"
    n_train: int = Field(64, ge=1)
    n_test: int = Field(600, ge=1)
    holdout: int = Field(100, ge=0)
    dim: int = Field(20, ge=1)
    classes: int = Field(2, ge=1)
    margin: float = 5.0
    noise: float = 1.0
    seed: Optional[int] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        if self.holdout > self.n_test:
            raise ValueError("holdout cannot exceed n_test")
        if self.kind == "idx" and not (self.train_images and self.train_labels and self.test_images and self.test_labels):
            raise ValueError("idx data needs train_images, train_labels, test_images and test_labels")
        return self


class AttackSection(_Section):
    epsilon: float = Field(0.1, ge=0)
    steps: int = Field(7, ge=0)
    step_size: float = Field(0.025, ge=0)
    restarts: int = Field(1, ge=1)
    signed_gradient: bool = True
    random_init: bool = True

    def build(self) -> AttackConfig:
        return AttackConfig(**self.model_dump())


class TrainSection(_Section):
    epochs: int = Field(200, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(0.05, ge=0)
    schedule: Literal["multi_step", "constant", "cyclic", "late"] = "multi_step"
    milestones: list[int] = [80, 120, 160]
    lr_factor: float = 0.1
    cycle_length: int = Field(30, ge=1)
    cycle_peak: Optional[float] = None
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(0.0005, ge=0)
    variant: Literal["plain_at", "trades", "awp"] = "plain_at"
    trades_lambda: float = Field(6.0, ge=0)
    awp_xi: float = Field(0.01, ge=0)
    awp_iters: int = Field(1, ge=1)
    label_smoothing: float = Field(0.0, ge=0, lt=1)
    label_noise: float = Field(0.0, ge=0, lt=1)
    weight_clip: Optional[float] = Field(None, gt=0)
    weight_average: Optional[float] = Field(None, ge=0, lt=1)
    pgd_tau: Optional[int] = Field(None, ge=0)
    early_stop_every: int = Field(5, ge=1)
    early_stop_restarts: int = Field(5, ge=1)
    eval_examples: int = Field(500, ge=1)
    augment: bool = False


class FlatnessSection(_Section):
    xi_average: float = Field(0.5, ge=0)
    xi_worst: float = Field(0.003, ge=0)
    granularity: Literal["per_layer", "per_filter"] = "per_layer"
    samples: int = Field(10, ge=1)
    restarts: int = Field(10, ge=1)
    joint_steps: int = Field(20, ge=1)
    nu_step_size: float = Field(0.001, ge=0)
    batch_size: int = Field(128, ge=1)
    examples: int = Field(500, ge=1)
    radial: Literal["ball", "sphere"] = "ball"
    hessian_examples: int = Field(256, ge=1)
    hessian_tol: float = Field(1e-3, gt=0)
    hessian_max_iters: int = Field(3000, ge=1)


class ExperimentConfig(_Section):
    seed: int = 0
    out_dir: str = "runs/default"
    network: NetworkSection = NetworkSection()
    data: DataSection = DataSection()
    attack: AttackSection = AttackSection()
    eval_attack: AttackSection = AttackSection(steps=20, step_size=0.01, restarts=10)
    train: TrainSection = TrainSection()
    flatness: FlatnessSection = FlatnessSection()

    # ---- builders

    def train_config(self) -> TrainConfig:
        t = self.train
        schedule = Schedule(
            kind=t.schedule,
            milestones=tuple(t.milestones),
            factor=t.lr_factor,
            cycle_length=t.cycle_length,
            peak=t.cycle_peak,
        )
        return TrainConfig(
            epochs=t.epochs,
            batch_size=t.batch_size,
            base_lr=t.lr,
            schedule=schedule,
            momentum=t.momentum,
            weight_decay=t.weight_decay,
            attack=self.attack.build(),
            variant=t.variant,
            trades_lambda=t.trades_lambda,
            awp_xi=t.awp_xi,
            awp_iters=t.awp_iters,
            label_smoothing=t.label_smoothing,
            label_noise=t.label_noise,
            weight_clip=t.weight_clip,
            weight_average=t.weight_average,
            pgd_tau=t.pgd_tau,
            early_stop_every=t.early_stop_every,
            early_stop_restarts=t.early_stop_restarts,
            eval_examples=t.eval_examples,
            augment=t.augment,
            seed=self.seed,
        )

    def flatness_config(self, mode: str = "average", loss_kind: str = "robust", xi: float | None = None) -> FlatnessConfig:
        f = self.flatness
        if xi is None:
            xi = f.xi_average if mode == "average" else f.xi_worst
        return FlatnessConfig(
            ball=BallSpec(xi, f.granularity),
            mode=mode,
            loss_kind=loss_kind,
            n_samples=f.samples if mode == "average" else f.restarts,
            joint_steps=f.joint_steps,
            nu_step_size=f.nu_step_size,
            attack=self.eval_attack.build(),
            batch_size=f.batch_size,
            radial=f.radial,
            seed=self.seed,
        )


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.model_dump(exclude_none=True))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()
