"""Experiment configuration. Unknown keys are rejected so typo'd ablations fail loudly."""

from __future__ import annotations

import json
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

__all__ = ["DataConfig", "ModelConfig", "TrainConfig", "ExperimentConfig", "ValidationError", "load_config"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class DataConfig(_Strict):
    seed: int = 0
    episodes: int = Field(1000, ge=1)
    grid: int = Field(8, ge=2)
    patch_px: int = Field(4, ge=1)
    n_views: int = Field(2, ge=1, le=4)
    n_objects: int = Field(4, ge=2)
    n_shapes: int = Field(4, ge=2, le=6)
    n_colors: int = Field(4, ge=2, le=6)
    horizon: int = Field(8, ge=2)
    window: int = Field(2, ge=0)
    gaze_sigma: float = Field(0.75, gt=0, description="gaze blob std in patch widths")
    gaze_floor: float = Field(0.01, ge=0)

    @property
    def image_size(self) -> int:
        return self.grid * self.patch_px

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @model_validator(mode="after")
    def _fits(self):
        if self.n_objects > self.grid * self.grid:
            raise ValueError(f"n_objects={self.n_objects} exceeds grid capacity {self.grid * self.grid}")
        if self.n_objects > self.n_shapes * self.n_colors:
            raise ValueError("n_objects exceeds the number of distinct shape/color combinations")
        return self


class ModelConfig(_Strict):
    dim: int = Field(96, ge=1)
    hidden: int = Field(64, ge=1)
    layers: int = Field(1, ge=1, le=2)
    heads: int = Field(8, ge=1)
    vocab: int = Field(32, ge=1)
    # append the mean of the surrounding patches to each patch's pixels
    patch_context: bool = True
    init_seed: int | None = None

    @model_validator(mode="after")
    def _heads_divide(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} is not divisible by heads={self.heads}")
        return self


class TrainConfig(_Strict):
    lam: float = Field(0.001, ge=0, alias="lambda")
    window: int = Field(2, ge=0)
    sigma: float = Field(1.0, gt=0)
    variant: Literal["structured", "uniform", "shuffled", "single_frame"] = "structured"
    batch: int = Field(32, ge=1)
    steps: int = Field(5000, ge=0)
    eval_interval: int = Field(250, ge=1)
    eval_episodes: int = Field(200, ge=1)
    lr: float = Field(1e-3, gt=0)
    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    seed: int = 0
    attention_source: Literal["final_layer", "all_layers_mean"] = "final_layer"
    gaze_path: bool = True


class ExperimentConfig(_Strict):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()

    def snapshot(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def replace(self, **sections) -> "ExperimentConfig":
        """Return a copy with per-section field overrides, e.g. replace(train={"lambda": 0})."""
        merged = self.snapshot()
        for name, fields in sections.items():
            merged[name].update(fields)
        return ExperimentConfig.model_validate(merged)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return ExperimentConfig.model_validate(raw)
