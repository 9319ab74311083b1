"""Run configuration: a YAML file validated by pydantic before any compute.

Top-level keys: ``method``, ``seed``, ``output_dir``, ``dataset``, ``model``,
``plan`` and ``kernels``. Unknown keys are rejected. See README for the
documented schema.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import Dataset, load_cifar_bin, load_idx, synth_dataset
from .model import MethodConfig, TinyConv
from .trainer import TrainPlan

Method = Literal["exact", "sc", "approx-mult", "analog"]


class ConfigError(ValueError):
    """Raised for unreadable or invalid configuration files."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DatasetSection(_Strict):
    kind: Literal["synth", "idx", "cifar"] = "synth"
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    classes: int = Field(10, ge=2)
    train_size: int = Field(2000, ge=1)
    test_size: int = Field(1000, ge=1)
    image_size: int = Field(12, ge=4)
    noise: float = Field(0.5, ge=0, le=1)
    data_seed: int = 0
    limit: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _paths(self):
        if self.kind != "synth" and not self.train_images:
            raise ValueError(f"dataset kind {self.kind!r} needs train_images")
        if self.kind == "synth":
            for n in (self.train_size, self.test_size):
                if n % self.classes:
                    raise ValueError(f"synth sizes must be multiples of classes={self.classes}")
        return self


class ModelSection(_Strict):
    channels: list[int] = Field(default_factory=lambda: [8, 8, 16])
    logit_scale: float = Field(4.0, gt=0)

    @field_validator("channels")
    @classmethod
    def _three(cls, v):
        if len(v) != 3 or min(v) < 1:
            raise ValueError("channels must be three positive conv widths")
        return v


class PlanSection(_Strict):
    injection_epochs: float = Field(0.0, ge=0)
    finetune_epochs: float = Field(1.0, ge=0)
    use_proxy: bool = True
    lr: float = Field(0.05, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    weight_decay: float = Field(0.0, ge=0)
    batch_size: int = Field(64, ge=1)
    finetune_lr_scale: float = Field(0.1, gt=0)
    type1_per_epoch: int = Field(5, ge=1)
    type2_every: int = Field(10, ge=1)
    eval_every: int = Field(1, ge=0)
    eval_limit: Optional[int] = Field(None, ge=1)
    checkpointing: bool = True
    pretrained: Optional[str] = None

    @model_validator(mode="after")
    def _positive_budget(self):
        if self.injection_epochs + self.finetune_epochs <= 0:
            raise ValueError("injection_epochs + finetune_epochs must be positive")
        return self


class KernelSection(_Strict):
    stream_length: int = Field(32, ge=1, le=4096)
    sc_seed: int = Field(1, ge=1)
    sc_weight_scale: Union[Literal["max"], float] = 1.0
    sc_input_scale: Union[Literal["max"], float] = 1.0
    sc_headroom: float = Field(1.0, gt=0)
    multiplier: str = "default"
    adc_bits: int = Field(4, ge=2, le=8)
    adc_group_size: int = Field(9, ge=1)
    clip_percentile: float = Field(99.9, gt=0, le=100)
    poly_degree: int = Field(3, ge=0, le=8)
    bins: int = Field(32, ge=2)

    @field_validator("sc_weight_scale", "sc_input_scale")
    @classmethod
    def _scale(cls, v):
        if v != "max" and not v > 0:
            raise ValueError("scale must be 'max' or a positive number")
        return v


class RunConfig(_Strict):
    method: Method = "sc"
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    model: ModelSection = Field(default_factory=ModelSection)
    plan: PlanSection = Field(default_factory=PlanSection)
    kernels: KernelSection = Field(default_factory=KernelSection)

    # ----- conversions ------------------------------------------------------------
    def method_config(self) -> MethodConfig:
        return MethodConfig(**self.kernels.model_dump())

    def train_plan(self) -> TrainPlan:
        return TrainPlan(method=self.method, seed=self.seed, method_config=self.method_config(),
                         **self.plan.model_dump())

    def datasets(self, base: Path | None = None) -> tuple[Dataset, Dataset]:
        d = self.dataset

        def path(p):
            return None if p is None else (Path(p) if base is None or Path(p).is_absolute() else base / p)

        if d.kind == "synth":
            tr = synth_dataset(d.classes, d.train_size, d.data_seed, d.image_size, 1, d.noise, "train")
            te = synth_dataset(d.classes, d.test_size, d.data_seed, d.image_size, 1, d.noise, "test")
        elif d.kind == "idx":
            tr = load_idx(path(d.train_images), path(d.train_labels), d.classes, "train")
            te = load_idx(path(d.test_images), path(d.test_labels), d.classes, "test") if d.test_images else tr
        else:
            tr = load_cifar_bin(path(d.train_images), "train")
            te = load_cifar_bin(path(d.test_images), "test") if d.test_images else tr
        if d.limit:
            tr, te = tr.subset(d.limit), te.subset(d.limit)
        return tr, te

    def build_model(self, data: Dataset) -> TinyConv:
        _, c, h, w = data.images.shape
        if h != w or h % 4:
            raise ConfigError(f"TinyConv needs square images with side divisible by 4, got {h}x{w}")
        return TinyConv(c, h, data.classes, tuple(self.model.channels), seed=self.seed,
                        logit_scale=self.model.logit_scale)

    # ----- text form --------------------------------------------------------------
    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text, str(p))
