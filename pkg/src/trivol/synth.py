"""Synthetic volumetric datasets standing in for the three clinical dataset roles.

Each volume is a smooth ellipsoidal "brain" density with subject-specific
texture and noise. Class 1 attenuates a medial-posterior region, class 2 a
frontal region, class 0 neither; a global atrophy factor correlates with the
age covariate. Role-T volumes get a shifted intensity profile and a higher
noise level (a single-site domain gap, scaled by ``synth.shift``); role-U
volumes are predominantly class-0-like and carry no labels.

Same seed, same volumes, bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import ExperimentConfig
from .data import Manifest, ManifestRecord, save_manifest
from .errors import ConfigurationError
from .seeding import spawn_rng
from .volio import save_volume

# class-conditional attenuation regions, in normalized [0,1] coordinates.
# The two regions sit at distinct distances from the volume center (0.14 vs
# 0.30) so no axis flip maps one onto the other: features invariant to the
# pretraining flips can still separate the classes.
REGION_SPECS = {
    1: {"center": (0.50, 0.36, 0.48), "radius": 0.16, "depth_scale": 1.0},   # medial-posterior
    2: {"center": (0.54, 0.76, 0.60), "radius": 0.14, "depth_scale": 1.2},   # frontal
}

SEXES = ("F", "M")


@dataclass
class SynthResult:
    manifests: dict[str, Manifest]
    manifest_paths: dict[str, Path]
    volume_dir: Path


def _normalized_grid(shape: tuple[int, int, int]) -> list[np.ndarray]:
    axes = [np.linspace(0.0, 1.0, n, dtype=np.float64) for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def region_mask(shape: tuple[int, int, int], class_idx: int) -> np.ndarray:
    """Boolean mask of the attenuation region for class 1 or 2 at the given shape."""
    spec = REGION_SPECS[class_idx]
    grid = _normalized_grid(shape)
    dist = sum((g - c) ** 2 for g, c in zip(grid, spec["center"]))
    return dist < spec["radius"] ** 2


def _region_falloff(grid: list[np.ndarray], class_idx: int,
                    jitter: np.ndarray | None = None) -> np.ndarray:
    spec = REGION_SPECS[class_idx]
    center = np.asarray(spec["center"], dtype=np.float64)
    if jitter is not None:
        center = center + jitter
    dist2 = sum((g - c) ** 2 for g, c in zip(grid, center))
    return np.exp(-dist2 / (2.0 * (spec["radius"] / 1.6) ** 2))


def make_volume(shape: tuple[int, int, int], label: int, rng: np.random.Generator,
                atrophy: float, sex: str, signal_strength: float = 1.0,
                shift: float = 0.0, mild: bool = False) -> np.ndarray:
    grid = _normalized_grid(shape)
    radii = np.array([0.42, 0.40, 0.44]) + rng.uniform(-0.02, 0.02, size=3)
    if sex == "M":
        radii = radii * 1.02
    dist = np.sqrt(sum(((g - 0.5) / r) ** 2 for g, r in zip(grid, radii)))
    shell = 1.0 / (1.0 + np.exp((dist - 1.0) / 0.08))
    profile = 1.0 - 0.30 * np.clip(dist, 0.0, 1.0) ** 2

    texture = rng.standard_normal(shape)
    texture = ndimage.gaussian_filter(texture, sigma=max(1.0, min(shape) / 8.0))
    texture = 0.08 * texture / max(1e-8, float(np.abs(texture).max()))

    volume = shell * (profile + texture) * (1.0 - 0.18 * atrophy)

    if label in REGION_SPECS:
        # per-subject depth and position jitter: the class boundary is spatially
        # variable, so position-robust features generalize better than memorized
        # voxel locations
        depth = (signal_strength * REGION_SPECS[label]["depth_scale"]
                 * rng.uniform(0.24, 0.36) * (0.75 if mild else 1.0))
        jitter = rng.uniform(-0.05, 0.05, size=3)
        volume = volume * (1.0 - depth * _region_falloff(grid, label, jitter))

    noise_sigma = 0.045 * (1.0 + 2.0 * shift)
    smooth_noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=max(1.0, min(shape) / 6.0))
    smooth_amp = 0.075 * (1.0 + 0.8 * shift)
    volume = volume + smooth_amp * smooth_noise / max(1e-8, float(np.abs(smooth_noise).max()))
    volume = volume + noise_sigma * rng.standard_normal(shape)
    volume = np.clip(volume, 0.0, None)

    if shift > 0.0:
        # single-site intensity profile: gamma-compress and rescale
        peak = max(1e-8, float(volume.max()))
        gamma = 1.0 / (1.0 + 0.35 * shift)
        volume = (volume / peak) ** gamma * peak * (1.0 + 0.10 * shift)
    return volume.astype(np.float32)


def _draw_labels(n: int, proportions: tuple[float, ...], rng: np.random.Generator) -> np.ndarray:
    """Deterministic largest-remainder class counts, then a shuffled assignment."""
    raw = np.array(proportions, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    rem = n - counts.sum()
    order = np.argsort(-(raw - counts))
    counts[order[:rem]] += 1
    labels = np.repeat(np.arange(len(proportions)), counts)
    rng.shuffle(labels)
    return labels


def generate_synthetic(config: ExperimentConfig, out_dir: str | Path,
                       seed: int | None = None, folds: int = 5) -> SynthResult:
    """Write the three datasets (volumes plus manifest CSVs) under ``out_dir``.

    Layout: ``out_dir/volumes/{u,d,t}/<subject>.raw`` (+ sidecars) and
    ``out_dir/{u,d,t}_manifest.csv``.
    """
    spec = config.synth
    shape = tuple(config.input_shape)
    master = config.seed if seed is None else seed
    if spec.n_target < folds * config.num_classes:
        raise ConfigurationError(
            f"synth.n_target={spec.n_target} is too small for {folds}-fold CV over "
            f"{config.num_classes} classes (need >= {folds * config.num_classes})"
        )
    out_dir = Path(out_dir)
    volume_dir = out_dir / "volumes"
    manifests: dict[str, Manifest] = {}
    manifest_paths: dict[str, Path] = {}

    plans = {
        "U": spec.n_unrelated,
        "D": spec.n_related,
        "T": spec.n_target,
    }
    for role, count in plans.items():
        records = []
        role_rng = spawn_rng(master, "synth", role, "meta")
        if role == "U":
            labels = np.zeros(count, dtype=int)
            n_abnormal = int(round(spec.unrelated_abnormal_fraction * count))
            abnormal_rows = role_rng.choice(count, size=n_abnormal, replace=False) if n_abnormal else []
            for i in abnormal_rows:
                labels[i] = int(role_rng.integers(1, config.num_classes))
        else:
            labels = _draw_labels(count, spec.class_proportions, role_rng)
        shift = spec.shift if role == "T" else 0.0
        for i in range(count):
            subject = f"{role.lower()}{i:05d}"
            rng = spawn_rng(master, "synth", role, i)
            atrophy = float(rng.uniform(0.0, 1.0))
            sex = SEXES[int(rng.integers(0, 2))]
            age = float(55.0 + 28.0 * atrophy + rng.normal(0.0, 3.0))
            volume = make_volume(shape, int(labels[i]), rng, atrophy=atrophy, sex=sex,
                                 signal_strength=spec.signal_strength, shift=shift,
                                 mild=(role == "U"))
            ext = ".raw" if spec.volume_format == "raw" else ".nii"
            path = volume_dir / role.lower() / f"{subject}{ext}"
            save_volume(path, volume, fmt=spec.volume_format)
            records.append(ManifestRecord(
                subject_id=subject, path=str(path), role=role,
                label=None if role == "U" else int(labels[i]),
                age=None if role == "U" else age,
                sex=None if role == "U" else sex,
            ))
        manifest = Manifest(records=records, source=f"synthetic:{role}")
        manifest_path = save_manifest(manifest, out_dir / f"{role.lower()}_manifest.csv")
        manifests[role] = manifest
        manifest_paths[role] = manifest_path
    return SynthResult(manifests=manifests, manifest_paths=manifest_paths, volume_dir=volume_dir)


def threshold_classifier(volume: np.ndarray, lower: float = 1.14, upper: float = 1.32) -> int:
    """Two-region mean-intensity threshold rule on a normalized volume.

    Classifies on the ratio of the two regional means (robust to global
    intensity shifts): below ``lower`` the posterior region is attenuated
    (class 1), above ``upper`` the frontal one is (class 2), otherwise class 0.
    Cutoffs were fitted once from the generator's design at the desk scale.
    """
    shape = tuple(volume.shape)
    mask1 = region_mask(shape, 1)
    mask2 = region_mask(shape, 2)
    s1 = float(volume[mask1].mean())
    s2 = float(volume[mask2].mean())
    if s2 <= 0:
        return 0
    ratio = s1 / s2
    if ratio < lower:
        return 1
    if ratio > upper:
        return 2
    return 0
