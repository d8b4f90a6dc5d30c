"""Stage-specific stochastic augmentation pipelines and the paired-view sampler.

Pretraining uses the aggressive pipeline (rescale, random crop-with-resize at
scale 0.5-1.0, per-axis random flips, random affine up to +-90 deg rotation and
+-8 voxel translation); distillation and fine-tuning share the mild pipeline
(rescale plus +-8 deg / +-8 voxel random affine). Every transform preserves the
volume shape and the [0, 1] intensity range established by the rescale step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigurationError, NumericError
from .resample import apply_affine, resize_to

STAGES = ("ssl", "distill", "finetune")


class RescaleIntensity:
    """Min-max rescale to [0, 1]; a constant volume maps to all zeros."""

    def __call__(self, volume: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        lo = float(volume.min())
        hi = float(volume.max())
        if hi - lo <= 0.0:
            return np.zeros_like(volume, dtype=np.float32)
        return ((volume - lo) / (hi - lo)).astype(np.float32)


@dataclass
class RandomCropResize:
    """Crop a random cube of side scale*N (scale ~ U[scale_range]) and resize it
    back to ``out_shape`` with trilinear interpolation."""

    scale_range: tuple[float, float] = (0.5, 1.0)
    out_shape: tuple[int, int, int] = (55, 55, 55)
    random_center: bool = True

    def __call__(self, volume: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        scale = float(rng.uniform(*self.scale_range))
        sides = [min(n, max(1, int(round(scale * n)))) for n in volume.shape]
        starts = []
        for n, side in zip(volume.shape, sides):
            if self.random_center:
                starts.append(int(rng.integers(0, n - side + 1)))
            else:
                starts.append((n - side) // 2)
        crop = volume[starts[0]:starts[0] + sides[0],
                      starts[1]:starts[1] + sides[1],
                      starts[2]:starts[2] + sides[2]]
        return resize_to(crop, self.out_shape)


@dataclass
class RandomFlip:
    """Independent flip of each listed axis with probability ``p``; exact (no resampling)."""

    axes: tuple[int, ...] = (0, 1, 2)
    p: float = 0.5

    def __call__(self, volume: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        out = volume
        for axis in self.axes:
            if rng.uniform() < self.p:
                out = np.flip(out, axis=axis)
        return np.ascontiguousarray(out)


@dataclass
class RandomAffine:
    """With probability ``p``: rotate by per-axis angles ~ U[-rotation, +rotation]
    degrees about the center, then translate by per-axis ~ U[-translation,
    +translation] voxels. Trilinear by default, zero padding outside."""

    rotation: float = 8.0
    translation: float = 8.0
    p: float = 0.5
    order: int = 1

    def __call__(self, volume: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        apply_it = rng.uniform() < self.p
        angles = rng.uniform(-self.rotation, self.rotation, size=3)
        shifts = rng.uniform(-self.translation, self.translation, size=3)
        if not apply_it:
            return volume
        return apply_affine(volume, angles, shifts, order=self.order)


@dataclass
class AugmentationPipeline:
    transforms: list
    stage: str
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def __call__(self, volume: np.ndarray) -> np.ndarray:
        return apply(self, volume)


def build_pipeline(stage: str, config: ExperimentConfig, rng: np.random.Generator) -> AugmentationPipeline:
    stage = str(stage).lower()
    if stage not in STAGES:
        raise ConfigurationError(f"unknown augmentation stage {stage!r}; expected one of {STAGES}")
    if stage == "ssl":
        transforms = [
            RescaleIntensity(),
            RandomCropResize(scale_range=(0.5, 1.0), out_shape=tuple(config.input_shape), random_center=True),
            RandomFlip(axes=(0, 1, 2), p=0.5),
            RandomAffine(rotation=90.0, translation=8.0, p=0.5),
        ]
    else:
        transforms = [
            RescaleIntensity(),
            RandomAffine(rotation=8.0, translation=8.0, p=0.5),
        ]
    return AugmentationPipeline(transforms=transforms, stage=stage, rng=rng)


def apply(pipeline: AugmentationPipeline, volume: np.ndarray) -> np.ndarray:
    """One stochastic draw of the pipeline. Shape-preserving; output in [0, 1]."""
    volume = np.asarray(volume, dtype=np.float32)
    if not np.isfinite(volume).all():
        raise NumericError("augmentation input contains non-finite values")
    out = volume
    for transform in pipeline.transforms:
        out = transform(out, pipeline.rng)
    return out


def paired_views(pipeline: AugmentationPipeline, volume: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Two independent stochastic draws of the same pipeline on the same input."""
    if pipeline.stage != "ssl":
        raise ConfigurationError(f"paired views are drawn from the ssl pipeline, got stage {pipeline.stage!r}")
    return apply(pipeline, volume), apply(pipeline, volume)
