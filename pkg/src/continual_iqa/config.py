"""Experiment configuration: a validated YAML document resolved into stream, method and seeds."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import losses as L
from .tasks import (
    SampleSet,
    TaskStream,
    build_dataset_shift_stream,
    build_distortion_shift_stream,
    chunk_novel_ids,
    generate_synthetic_stream,
    load_manifest,
    make_family_specs,
)
from .trainer import MethodConfig, TrainSchedule

DATA_ROOT_ENV = "LIQA_DATA_ROOT"


class ConfigError(ValueError):
    """Invalid experiment configuration; the message lists every offending field."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class StreamConfig(_Strict):
    kind: Literal["synthetic", "distortion_shift", "dataset_shift"] = "synthetic"
    delta: int = Field(1, ge=1)
    permutation_seed: Optional[int] = None
    split_seed: int = 0
    # synthetic families
    n_families: int = Field(10, ge=2)
    base_count: int = Field(7, ge=1)
    d_in: int = Field(16, ge=1)
    spread: float = Field(1.0, gt=0)
    separation: float = Field(4.0, gt=0)
    intensity_scale: float = Field(3.0, gt=0)
    samples_per_family: int = Field(150, ge=10)
    quality_map: Literal["identity", "cubic", "reversed"] = "cubic"
    family_seed: Optional[int] = None
    # manifest-backed streams; paths are relative to the data root
    manifest: Optional[str] = None
    manifests: list[str] = Field(default_factory=list)
    base_labels: list[str] = Field(default_factory=list)
    by_reference: bool = True

    @model_validator(mode="after")
    def _check(self) -> StreamConfig:
        if self.kind == "synthetic":
            novel = self.n_families - self.base_count
            if novel < 1:
                raise ValueError("n_families must exceed base_count")
            if novel % self.delta:
                raise ValueError(f"delta={self.delta} does not divide the {novel} novel families")
        elif self.kind == "distortion_shift":
            if not self.manifest:
                raise ValueError("distortion_shift streams need 'manifest'")
            if not self.base_labels:
                raise ValueError("distortion_shift streams need 'base_labels'")
        elif len(self.manifests) < 2:
            raise ValueError("dataset_shift streams need at least two 'manifests'")
        return self


class ScheduleConfig(_Strict):
    epochs_single: int = 70
    epochs_gan: int = 500
    epochs_multi: int = 70
    batch_regression: int = 48
    batch_gan: int = 128
    lr_base: float = 1e-4
    lr_extractor_novel: float = 1e-6
    lr_gan: float = 1e-4
    early_stop_min_epoch: int = 15
    gan_augmentation_factor: int = 10
    augmentation_jitter: float = 0.05
    gan_lr_decay: Literal["none", "linear"] = "none"
    gan_ema: float = Field(0.0, ge=0.0, lt=1.0)
    gan_r1: float = Field(0.0, ge=0.0)
    gan_beta1: float = Field(0.5, ge=0.0, lt=1.0)


class WeightsConfig(_Strict):
    lambda_FD: float = 0.001
    lambda_PR: float = 10.0
    lambda_MSE: float = 1.0
    lambda_qua: float = 1.0
    lambda_align: float = 3.0


class ExperimentConfig(_Strict):
    method: Literal["ft", "ewc", "online_ewc", "si", "liqa", "jt", "jt_pr"] = "liqa"
    ablation: Optional[Literal["no_split_merge", "no_fd", "no_pr"]] = None
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    out: str = "out"
    stream: StreamConfig = StreamConfig()
    schedule: ScheduleConfig = ScheduleConfig()
    weights: WeightsConfig = WeightsConfig()
    replay_strategy: Literal["random", "qua", "dist", "qua_and_dist"] = "qua_and_dist"
    buffer_size: int = Field(1400, ge=1)
    quality_assignment: Literal["text", "printed"] = "text"
    adversarial_sign: Literal["standard", "printed"] = "standard"
    validation: Literal["current", "pooled_seen"] = "current"
    backbone: Literal["mlp", "resnet18"] = "mlp"
    pretrained: bool = False
    lambda_ewc: float = 5000.0
    lambda_online_ewc: float = 5000.0
    gamma: float = 1.0
    lambda_si: float = 100.0
    xi: float = 0.1

    @field_validator("seeds")
    @classmethod
    def _seeds(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("at least one seed is required")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @model_validator(mode="after")
    def _ablation(self) -> ExperimentConfig:
        if self.ablation is not None and self.method != "liqa":
            raise ValueError("ablation applies to method 'liqa' only")
        return self

    # -- conversion ----------------------------------------------------------
    def method_config(self) -> MethodConfig:
        try:
            schedule = TrainSchedule(**self.schedule.model_dump())
            weights = L.LossWeights(**self.weights.model_dump())
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return MethodConfig(schedule=schedule, weights=weights, replay_strategy=self.replay_strategy,
                            buffer_size=self.buffer_size, quality_assignment=self.quality_assignment,
                            adversarial_sign=self.adversarial_sign, validation=self.validation,
                            backbone=self.backbone, d_in=self.stream.d_in, pretrained=self.pretrained,
                            lambda_ewc=self.lambda_ewc, lambda_online_ewc=self.lambda_online_ewc, gamma=self.gamma,
                            lambda_si=self.lambda_si, xi=self.xi)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        where = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{where}: {err['msg']}")
    return "invalid configuration:\n  " + "\n  ".join(lines)


def parse_config(data: dict | None, **overrides) -> ExperimentConfig:
    data = dict(data or {})
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data, **overrides)


def data_root() -> Path | None:
    root = os.environ.get(DATA_ROOT_ENV)
    return Path(root) if root else None


def _resolve(path: str) -> Path:
    p = Path(path)
    if p.is_absolute():
        return p
    root = data_root()
    return (root / p) if root else p


def build_stream(cfg: StreamConfig, seed: int) -> TaskStream:
    """Materialize the task stream for one seed.

    Synthetic families are drawn from ``family_seed`` when given, else from
    the run seed, so each seed sees its own clusters.
    """
    if cfg.kind == "synthetic":
        fam_seed = seed if cfg.family_seed is None else cfg.family_seed
        specs = make_family_specs(cfg.n_families, d_in=cfg.d_in, spread=cfg.spread, separation=cfg.separation,
                                  intensity_scale=cfg.intensity_scale, samples_per_family=cfg.samples_per_family,
                                  quality_map=cfg.quality_map, seed=fam_seed)
        return generate_synthetic_stream(specs, cfg.base_count, cfg.delta, fam_seed, cfg.permutation_seed)
    if cfg.kind == "distortion_shift":
        path = _resolve(cfg.manifest)
        if not path.exists():
            raise FileNotFoundError(f"manifest {path} does not exist (data root from ${DATA_ROOT_ENV})")
        manifest = load_manifest(path)
        labels = sorted(set(manifest.distortion_labels))
        unknown = sorted(set(cfg.base_labels) - set(labels))
        if unknown:
            raise ConfigError(f"base_labels {unknown} do not occur in {path}")
        native = {lab: i for i, lab in enumerate(labels)}
        samples = manifest.to_samples(path.parent)
        samples = SampleSet(samples.inputs, samples.scores,
                            np.array([native[lab] for lab in manifest.distortion_labels]),
                            samples.reference_ids, samples.source_range)
        base = [native[lab] for lab in cfg.base_labels]
        novel = [native[lab] for lab in labels if lab not in cfg.base_labels]
        chunk_novel_ids(novel, cfg.delta)  # raises on a non-dividing delta
        return build_distortion_shift_stream(samples, labels, base, novel, cfg.delta, cfg.permutation_seed,
                                             cfg.split_seed, cfg.by_reference)
    paths = [_resolve(p) for p in cfg.manifests]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise FileNotFoundError(f"manifests not found: {missing} (data root from ${DATA_ROOT_ENV})")
    manifests = [load_manifest(p) for p in paths]
    return build_dataset_shift_stream(manifests, cfg.split_seed, paths[0].parent, cfg.by_reference)
