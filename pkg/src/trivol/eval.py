"""Classification metrics, split evaluation, latent extraction, 2-D embedding plots.

Conventions (stated because tiny synthetic folds can be degenerate):
* balanced accuracy = mean of per-class TPRs; a class with zero true samples is
  excluded from the mean, with a warning;
* macro-F1 = unweighted mean of per-class F1; a class with precision+recall = 0
  contributes 0;
* reported per-class TPRs are pooled across folds, while BAcc/F1 are computed
  fold-wise and then averaged.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import FeatureExtractor, ProjectionHead, forward_features, init_model
from .checkpoint import ModelWeights
from .config import ExperimentConfig
from .data import Manifest, VolumeStore
from .errors import EvaluationError, LabelError
from .seeding import spawn_rng

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # K x K int64, rows = true, columns = predicted
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class MetricReport:
    balanced_accuracy: float
    tpr: tuple[float, ...]
    macro_f1: float
    fold_id: int | None = None
    dataset_tag: str = "T"
    n_samples: int = 0
    class_names: tuple[str, ...] = ("CN", "AD", "FTD")
    confusion: list | None = None  # raw counts, kept so folds can be pooled

    def to_dict(self) -> dict:
        return {
            "balanced_accuracy": self.balanced_accuracy,
            "tpr": {name: t for name, t in zip(self.class_names, self.tpr)},
            "macro_f1": self.macro_f1,
            "fold_id": self.fold_id,
            "dataset_tag": self.dataset_tag,
            "n_samples": self.n_samples,
            "confusion": self.confusion,
        }


def confusion(y_true, y_pred, num_classes: int,
              class_names: tuple[str, ...] | None = None) -> ConfusionMatrix:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise EvaluationError(f"label arrays differ in length: {y_true.shape} vs {y_pred.shape}")
    for name, arr in (("true", y_true), ("predicted", y_pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelError(f"{name} labels must lie in 0..{num_classes - 1}")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (y_true, y_pred), 1)
    if class_names is None:
        class_names = tuple(f"C{i}" for i in range(num_classes))
    return ConfusionMatrix(counts=counts, class_names=tuple(class_names))


def per_class_tpr(cm: ConfusionMatrix) -> np.ndarray:
    """TPR_k = cm[k,k] / row_sum_k; NaN for classes with zero true samples."""
    row = cm.counts.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(row > 0, np.diag(cm.counts) / row, np.nan)


def balanced_accuracy(cm: ConfusionMatrix) -> float:
    tpr = per_class_tpr(cm)
    present = ~np.isnan(tpr)
    if not present.any():
        raise EvaluationError("balanced accuracy undefined: no class has a true sample")
    if not present.all():
        missing = [cm.class_names[i] for i in np.nonzero(~present)[0]]
        warnings.warn(f"classes with zero true samples excluded from balanced accuracy: {missing}",
                      stacklevel=2)
    return float(tpr[present].mean())


def macro_f1(cm: ConfusionMatrix) -> float:
    f1s = []
    for k in range(cm.counts.shape[0]):
        tp = float(cm.counts[k, k])
        col = float(cm.counts[:, k].sum())
        row = float(cm.counts[k, :].sum())
        precision = tp / col if col > 0 else 0.0
        recall = tp / row if row > 0 else 0.0
        f1s.append(2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0)
    return float(np.mean(f1s))


def predict_logits(extractor: FeatureExtractor, head: ProjectionHead, volumes: np.ndarray,
                   batch_size: int = 64) -> np.ndarray:
    """Deterministic eval-mode forward over a stack of volumes."""
    was_ext, was_head = extractor.training, head.training
    extractor.eval()
    head.eval()
    out = []
    try:
        with torch.inference_mode():
            for lo in range(0, len(volumes), batch_size):
                batch = torch.as_tensor(volumes[lo:lo + batch_size], dtype=torch.float32)
                out.append(head(forward_features(extractor, batch)).cpu().numpy())
    finally:
        extractor.train(was_ext)
        head.train(was_head)
    return np.concatenate(out, axis=0)


def evaluate(extractor: FeatureExtractor, head: ProjectionHead, manifest: Manifest,
             store: VolumeStore, indices=None, fold_id: int | None = None,
             dataset_tag: str = "T", num_classes: int = 3,
             class_names: tuple[str, ...] = ("CN", "AD", "FTD")) -> MetricReport:
    """Argmax-over-logits evaluation on a manifest subset. No stochastic
    augmentation: volumes pass through the deterministic rescale path only."""
    rows = np.arange(len(manifest)) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(rows) == 0:
        raise EvaluationError("cannot evaluate an empty split")
    if any(manifest[int(i)].label is None for i in rows):
        raise EvaluationError("cannot evaluate unlabeled samples")
    volumes = np.stack([store.get(manifest[int(i)]) for i in rows])
    labels = np.array([manifest[int(i)].label for i in rows], dtype=np.int64)
    logits = predict_logits(extractor, head, volumes)
    preds = logits.argmax(axis=1)
    cm = confusion(labels, preds, num_classes, class_names)
    tpr = per_class_tpr(cm)
    return MetricReport(
        balanced_accuracy=balanced_accuracy(cm),
        tpr=tuple(float(t) if not np.isnan(t) else float("nan") for t in tpr),
        macro_f1=macro_f1(cm),
        fold_id=fold_id,
        dataset_tag=dataset_tag,
        n_samples=int(len(rows)),
        class_names=tuple(class_names),
        confusion=cm.counts.tolist(),
    )


# ---------------------------------------------------------------------------
# latent extraction and 2-D embedding
# ---------------------------------------------------------------------------


@dataclass
class LatentTable:
    ids: list[str]
    roles: list[str]
    labels: list[int | None]
    latents: np.ndarray  # (N, Z)
    stage: str = ""


def extract_latents(weights: ModelWeights, config: ExperimentConfig,
                    manifests: dict[str, Manifest], store: VolumeStore,
                    max_unlabeled: int = 1000, seed: int = 0,
                    batch_size: int = 64) -> LatentTable:
    """Latent vectors for every sample of D and T plus a seeded subsample of U,
    under the extractor stored in ``weights``. Deterministic."""
    from .config import architecture_fingerprint
    from .errors import IncompatibilityError

    if weights.fingerprint != architecture_fingerprint(config):
        raise IncompatibilityError(
            f"checkpoint fingerprint {weights.fingerprint} does not match the configured architecture"
        )
    extractor, head = init_model(config, weights.head_kind or "cls", seed=0)
    weights.apply_to(extractor, head=None)
    extractor.eval()
    ids: list[str] = []
    roles: list[str] = []
    labels: list[int | None] = []
    chunks: list[np.ndarray] = []
    for role in ("U", "D", "T"):
        manifest = manifests.get(role)
        if manifest is None or len(manifest) == 0:
            continue
        rows = np.arange(len(manifest))
        if role == "U" and len(rows) > max_unlabeled:
            rng = spawn_rng(seed, "latents", "subsample")
            rows = np.sort(rng.choice(rows, size=max_unlabeled, replace=False))
        volumes = np.stack([store.get(manifest[int(i)]) for i in rows])
        with torch.inference_mode():
            for lo in range(0, len(volumes), batch_size):
                batch = torch.as_tensor(volumes[lo:lo + batch_size], dtype=torch.float32)
                chunks.append(forward_features(extractor, batch).cpu().numpy())
        for i in rows:
            record = manifest[int(i)]
            ids.append(record.subject_id)
            roles.append(role)
            labels.append(record.label)
    return LatentTable(ids=ids, roles=roles, labels=labels,
                       latents=np.concatenate(chunks, axis=0), stage=weights.stage)


# Fig-style color scheme: unlabeled purple; task-related dark blue/red/dark grey;
# target light blue/orange/light grey.
ROLE_LABEL_COLORS = {
    ("U", None): "#7b4fa6",
    ("D", 0): "#1f3b73", ("D", 1): "#c23b22", ("D", 2): "#4a4a4a",
    ("T", 0): "#7fb3d5", ("T", 1): "#f5a042", ("T", 2): "#bdbdbd",
}


def _reduce_pca(latents: np.ndarray, seed: int) -> np.ndarray:
    centered = latents - latents.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    # sign convention: largest-magnitude loading positive, for determinism
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return centered @ comps.T


def _reduce_tsne(latents: np.ndarray, seed: int) -> np.ndarray:
    from sklearn.manifold import TSNE

    perplexity = float(min(30.0, max(2.0, (len(latents) - 1) / 3.0)))
    tsne = TSNE(n_components=2, random_state=seed, init="pca", perplexity=perplexity)
    return tsne.fit_transform(latents.astype(np.float64))


REDUCERS = {"pca": _reduce_pca, "tsne": _reduce_tsne}
try:  # pragma: no cover - optional dependency
    import umap as _umap

    def _reduce_umap(latents: np.ndarray, seed: int) -> np.ndarray:
        return _umap.UMAP(n_components=2, random_state=seed).fit_transform(latents)

    REDUCERS["umap"] = _reduce_umap
    DEFAULT_REDUCER = "umap"
except ImportError:
    # neighborhood-preserving default without the optional dependency
    DEFAULT_REDUCER = "tsne"


def embed_latents_2d(table: LatentTable, out_png: str | Path | None = None,
                     out_csv: str | Path | None = None, method: str | None = None,
                     seed: int = 0) -> np.ndarray:
    """2-D embedding of a latent table; writes a scatter PNG and a coordinate CSV
    when paths are given. Deterministic for a fixed seed."""
    if len(table.ids) < 10:
        raise EvaluationError(f"need at least 10 rows to embed, got {len(table.ids)}")
    method = method or DEFAULT_REDUCER
    if method not in REDUCERS:
        raise EvaluationError(f"unknown reducer {method!r}; available: {sorted(REDUCERS)}")
    coords = np.asarray(REDUCERS[method](table.latents, seed), dtype=np.float64)

    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "role", "label", "x", "y"])
            for i in range(len(table.ids)):
                label = table.labels[i]
                writer.writerow([table.ids[i], table.roles[i],
                                 "" if label is None else label,
                                 f"{coords[i, 0]:.6f}", f"{coords[i, 1]:.6f}"])
    if out_png is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out_png = Path(out_png)
        out_png.parent.mkdir(parents=True, exist_ok=True)
        fig, ax = plt.subplots(figsize=(6, 6))
        keys = sorted(set(zip(table.roles, table.labels)), key=str)
        for key in keys:
            sel = [i for i in range(len(table.ids)) if (table.roles[i], table.labels[i]) == key]
            color = ROLE_LABEL_COLORS.get((key[0], None if key[0] == "U" else key[1]), "#888888")
            name = f"{key[0]}" + ("" if key[1] is None else f"/{key[1]}")
            ax.scatter(coords[sel, 0], coords[sel, 1], s=6, alpha=0.6, c=color, label=name)
        ax.legend(loc="best", fontsize=7)
        ax.set_title(f"latents after {table.stage or 'training'} ({method})")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(out_png, dpi=150)
        plt.close(fig)
    return coords
