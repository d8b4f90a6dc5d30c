"""Shared fixtures: a tiny fast config, tiny synthetic datasets, manifest builders."""

from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from trivol.config import desk_config
from trivol.data import Manifest, ManifestRecord, VolumeStore
from trivol.synth import generate_synthetic


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion at the end of the run."""
    lines = []
    for status in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(status, []):
            name = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion" in name:
                label = name.split("::")[-1]
                lines.append((label, "PASS" if status == "passed" else "FAIL"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for label, verdict in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {label}")


@pytest.fixture(scope="session")
def tiny_config():
    """Small everything: 16^3 volumes, narrow net, a handful of iterations."""
    cfg = desk_config()
    return dataclasses.replace(
        cfg,
        input_shape=(16, 16, 16),
        latent_dim=16,
        projection_dim=32,
        base_channels=2,
        eval_every=2,
        ssl=dataclasses.replace(cfg.ssl, iterations=6, batch_size=8),
        distill=dataclasses.replace(cfg.distill, iterations=6, batch_size=8),
        finetune=dataclasses.replace(cfg.finetune, iterations=8, batch_size=8),
        synth=dataclasses.replace(cfg.synth, n_unrelated=20, n_related=36, n_target=30),
    )


@pytest.fixture(scope="session")
def tiny_data(tiny_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_data")
    return generate_synthetic(tiny_config, out)


@pytest.fixture(scope="session")
def tiny_store(tiny_config):
    return VolumeStore(tiny_config.input_shape)


def make_labeled_manifest(n: int, rng: np.random.Generator, role: str = "T",
                          n_classes: int = 3, proportions=None) -> Manifest:
    """Metadata-only manifest (paths never read) for splitter tests."""
    if proportions is None:
        labels = rng.integers(0, n_classes, size=n)
    else:
        counts = np.floor(np.asarray(proportions) * n).astype(int)
        counts[0] += n - counts.sum()
        labels = np.repeat(np.arange(n_classes), counts)
        rng.shuffle(labels)
    records = [
        ManifestRecord(
            subject_id=f"s{i:05d}", path=f"/nonexistent/s{i:05d}.raw", role=role,
            label=int(labels[i]), age=float(rng.uniform(50, 90)),
            sex="M" if rng.uniform() < 0.5 else "F",
        )
        for i in range(n)
    ]
    return Manifest(records=records, source="fixture")
