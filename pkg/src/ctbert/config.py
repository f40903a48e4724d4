"""Run configuration: schema-validated YAML loaded into pydantic models."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .exceptions import ConfigurationError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    root: Optional[Path] = None
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"


class PreprocessConfig(_Section):
    min_keep: int = Field(8, ge=1)
    set_length: int = Field(32, ge=1)


class UNetConfig(_Section):
    corpus_dir: Optional[Path] = None
    depth: int = Field(4, ge=1)
    base_width: int = Field(32, ge=1)
    input_size: int = 512
    work_size: int = 512
    lr: float = Field(1e-5, ge=0)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(2, ge=1)
    val_fraction: float = Field(0.2, ge=0, lt=1)
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    early_stopping: int = 10
    seed: int = 0

    @model_validator(mode="after")
    def _work_size_divisible(self):
        if self.work_size % (2**self.depth):
            raise ValueError(f"work_size must be divisible by 2**depth = {2**self.depth}")
        return self


class AugmentConfig(_Section):
    rotation_deg: float = 10.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    translate_frac: float = 0.1
    shear_deg: float = 10.0
    brightness: float = 0.5
    contrast: float = 0.3
    enlarge_frac: float = 0.25
    hflip_prob: float = Field(0.5, ge=0, le=1)
    use_affine: bool = False
    use_msc: bool = True
    msc_scales: tuple[float, ...] = (1.0, 0.875, 0.75, 0.66)
    msc_max_distort: int = 1


class ComposeConfig(_Section):
    channels: str = "RML"
    crop_bbox: bool = False
    crop_size: int = Field(224, ge=8)
    augment: AugmentConfig = AugmentConfig()

    @field_validator("channels")
    @classmethod
    def _channels(cls, v):
        v = v.upper()
        if len(v) != 3 or set(v) - set("RML"):
            raise ValueError("channels must be 3 letters over {R, M, L}, e.g. RML")
        return v


class ClassifierConfig(_Section):
    use_bert: bool = True
    layers: tuple[int, int, int, int] = (3, 4, 6, 3)
    widths: tuple[int, int, int, int] = (64, 128, 256, 512)
    bert_heads: int = 8
    bert_layers: int = 1
    dropout: float = 0.1
    lr: float = Field(1e-5, ge=0)
    max_epochs: int = Field(200, ge=1)
    early_stopping: int = 15
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    batch_size: int = Field(4, ge=1)
    pretrained_path: Optional[Path] = None


class FeatureConfig(_Section):
    augment: bool = False


class MLPConfig(_Section):
    pooling: Literal["max", "avg", "both"] = "both"
    activation: Literal["relu", "sigmoid", "tanh"] = "sigmoid"
    fc1: Literal[128] = 128
    fc2: Literal[32] = 32
    dropout: float = 0.5
    lr: Optional[float] = None
    max_epochs: int = Field(100, ge=1)
    early_stopping: int = 15
    plateau_factor: float = 0.1
    plateau_patience: int = 5
    batch_size: int = Field(16, ge=1)

    @property
    def learning_rate(self):
        """Sigmoid heads converge slowly, so they default to the larger rate."""
        if self.lr is not None:
            return self.lr
        return 1e-4 if self.activation == "sigmoid" else 1e-5


class RunConfig(_Section):
    data: DataConfig = DataConfig()
    output_dir: Path = Path("runs/default")
    seed: int = 0
    workers: int = Field(0, ge=0)
    preprocess: PreprocessConfig = PreprocessConfig()
    unet: UNetConfig = UNetConfig()
    compose: ComposeConfig = ComposeConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    features: FeatureConfig = FeatureConfig()
    mlp: MLPConfig = MLPConfig()

    def fingerprint(self):
        """Stable hash of the experiment-defining fields."""
        payload = self.model_dump(mode="json", exclude={"output_dir", "workers"})
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path=None, **overrides):
    """Load a YAML config (or defaults) and apply dotted-key overrides."""
    raw = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    for key, value in overrides.items():
        if value is None:
            continue
        node = raw
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc


def dump_config(config, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False))
