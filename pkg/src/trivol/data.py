"""Dataset manifests, volume preprocessing, stratified 5-fold splitting, batching.

Manifest CSV columns: ``subject_id,path,role,label,age,sex`` where role is one
of U (unlabeled pretraining), D (labeled task-related), T (labeled target).
Label/age/sex are empty for role U. Labels use the fixed encoding CN=0, AD=1,
FTD=2. Splitting is subject-level: subject_ids are unique within a role, so
rows are subjects.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import MIN_INPUT_DIM
from .errors import ConfigurationError, IterationError, ManifestError, NumericError, ShapeError
from .resample import resize_to
from .volio import load_volume

logger = logging.getLogger(__name__)

LABEL_CODES = {"CN": 0, "AD": 1, "FTD": 2}
CLASS_NAMES = ("CN", "AD", "FTD")
ROLES = ("U", "D", "T")
MANIFEST_COLUMNS = ("subject_id", "path", "role", "label", "age", "sex")


@dataclass
class VolumeSample:
    """One density volume with its metadata; the unit flowing through every stage."""

    volume: np.ndarray
    subject_id: str
    dataset_role: str
    label: int | None = None
    age: float | None = None
    sex: str | None = None


@dataclass
class ManifestRecord:
    subject_id: str
    path: str
    role: str
    label: int | None = None
    age: float | None = None
    sex: str | None = None


@dataclass
class Manifest:
    records: list[ManifestRecord]
    source: str = ""
    checksum: str = ""

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> ManifestRecord:
        return self.records[i]

    def labels(self) -> np.ndarray:
        return np.array([-1 if r.label is None else r.label for r in self.records], dtype=np.int64)

    def role(self) -> str:
        roles = {r.role for r in self.records}
        return roles.pop() if len(roles) == 1 else "mixed"


@dataclass
class FoldSplit:
    """One cross-validation fold: disjoint train/validation/test index lists into
    a manifest, plus the per-split stratification tallies."""

    fold_index: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    report: dict = field(default_factory=dict)


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    text = path.read_text()
    reader = csv.DictReader(text.splitlines())
    if reader.fieldnames is None:
        raise ManifestError(f"{path}: empty file (expected header {','.join(MANIFEST_COLUMNS)})")
    missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise ManifestError(f"{path}: missing columns {missing}")
    records: list[ManifestRecord] = []
    problems: list[str] = []
    seen_ids: dict[tuple[str, str], int] = {}
    seen_paths: dict[str, int] = {}
    for lineno, row in enumerate(reader, start=2):
        role = (row["role"] or "").strip()
        if role not in ROLES:
            problems.append(f"row {lineno}: role must be one of {ROLES}, got {role!r}")
            continue
        label_raw = (row["label"] or "").strip()
        label: int | None = None
        if label_raw:
            if role == "U":
                problems.append(f"row {lineno}: role-U samples are unlabeled but a label {label_raw!r} is present")
                continue
            if label_raw in LABEL_CODES:
                label = LABEL_CODES[label_raw]
            elif label_raw.isdigit():
                label = int(label_raw)
            else:
                problems.append(f"row {lineno}: unknown label {label_raw!r}")
                continue
        elif role in ("D", "T"):
            problems.append(f"row {lineno}: role-{role} samples require a label")
            continue
        age = float(row["age"]) if (row["age"] or "").strip() else None
        sex = (row["sex"] or "").strip() or None
        sid = (row["subject_id"] or "").strip()
        vpath = (row["path"] or "").strip()
        if not sid or not vpath:
            problems.append(f"row {lineno}: subject_id and path are required")
            continue
        key = (role, sid)
        if key in seen_ids:
            problems.append(f"row {lineno}: duplicate subject_id {sid!r} within role {role} "
                            f"(first at row {seen_ids[key]})")
            continue
        if vpath in seen_paths:
            problems.append(f"row {lineno}: duplicate path {vpath!r} (first at row {seen_paths[vpath]})")
            continue
        seen_ids[key] = lineno
        seen_paths[vpath] = lineno
        records.append(ManifestRecord(subject_id=sid, path=vpath, role=role, label=label, age=age, sex=sex))
    if problems:
        raise ManifestError(f"{path}: " + "; ".join(problems))
    if not records:
        logger.warning("manifest %s has a header but no rows", path)
    import hashlib

    return Manifest(records=records, source=str(path), checksum=hashlib.sha256(text.encode()).hexdigest()[:16])


def save_manifest(manifest: Manifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    code_to_name = {v: k for k, v in LABEL_CODES.items()}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.records:
            label = "" if r.label is None else code_to_name.get(r.label, str(r.label))
            writer.writerow([r.subject_id, r.path, r.role, label,
                             "" if r.age is None else f"{r.age:.2f}", r.sex or ""])
    return path


def normalize_volume(raw: np.ndarray, out_shape: tuple[int, int, int] = (55, 55, 55)) -> np.ndarray:
    """Center-crop to the largest cube, resample to ``out_shape`` (trilinear),
    then min-max rescale to [0, 1].

    The rescale runs last (the source pipeline lists it first): interpolation is
    affine-equivariant so the order only changes the result by a final range
    tightening, and a trailing rescale makes the op exactly idempotent.
    A constant volume yields all zeros (with a warning) rather than dividing by zero.
    """
    raw = np.asarray(raw, dtype=np.float32)
    if raw.ndim != 3:
        raise ShapeError(("H", "W", "D"), raw.shape, what="raw volume")
    if any(d < MIN_INPUT_DIM for d in raw.shape):
        raise ShapeError((MIN_INPUT_DIM,) * 3, raw.shape, what="raw volume (min extent)")
    if not np.isfinite(raw).all():
        raise NumericError("raw volume contains non-finite values")
    side = min(raw.shape)
    starts = [(n - side) // 2 for n in raw.shape]
    cube = raw[starts[0]:starts[0] + side, starts[1]:starts[1] + side, starts[2]:starts[2] + side]
    resampled = resize_to(cube, tuple(out_shape))
    lo = float(resampled.min())
    hi = float(resampled.max())
    if hi - lo <= 0.0:
        logger.warning("normalize_volume: constant volume, returning zeros")
        return np.zeros(out_shape, dtype=np.float32)
    return ((resampled - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# stratified k-fold
# ---------------------------------------------------------------------------


def _age_bins(ages: np.ndarray, n_bins: int = 3) -> np.ndarray:
    edges = np.quantile(ages, [(i + 1) / n_bins for i in range(n_bins - 1)])
    return np.searchsorted(edges, ages, side="right")


def _interleave_label_group(indices: np.ndarray, age_bin: np.ndarray, sex: list,
                            k: int, rng: np.random.Generator, label: int = -1) -> np.ndarray:
    """Order a label group so any contiguous chunk is roughly balanced in
    (age-bin, sex). Cells smaller than k are greedily merged into the nearest
    age bin (then across sex) with a warning."""
    cells: dict[tuple[int, str], list[int]] = {}
    for idx in indices:
        cells.setdefault((int(age_bin[idx]), str(sex[idx])), []).append(int(idx))
    merged = True
    while merged and len(cells) > 1:
        merged = False
        for key in sorted(cells, key=lambda c: (len(cells[c]), c)):
            if len(cells[key]) >= k:
                continue
            bin_i, sex_i = key
            candidates = [c for c in cells if c != key and c[1] == sex_i]
            if not candidates:
                candidates = [c for c in cells if c != key]
            target = min(candidates, key=lambda c: (abs(c[0] - bin_i), -len(cells[c])))
            logger.warning("stratified_kfold: stratum (label=%s, age_bin=%s, sex=%s) has %d < %d "
                           "samples; merged into (age_bin=%s, sex=%s)", label, bin_i, sex_i,
                           len(cells[key]), k, target[0], target[1])
            cells[target] = cells[target] + cells.pop(key)
            merged = True
            break
    ordered_cells = []
    for key in sorted(cells):
        members = np.array(cells[key], dtype=np.int64)
        rng.shuffle(members)
        ordered_cells.append(list(members))
    out: list[int] = []
    while any(ordered_cells):
        for cell in ordered_cells:
            if cell:
                out.append(cell.pop())
    return np.array(out, dtype=np.int64)


def stratified_kfold(manifest: Manifest, k: int = 5, ratios: tuple[float, float, float] = (0.65, 0.15, 0.20),
                     rng: np.random.Generator | int = 0, n_age_bins: int = 3) -> list[FoldSplit]:
    """k splits into train/validation/test with test-shard rotation.

    Stratification is label-first (per-label test/val counts deviate from exact
    proportionality by at most ~2 samples per split), with (age-tercile x sex)
    balanced inside each label group by interleaving. Split sizes match the
    ratios within +-1 sample; the k test shards partition the manifest.
    """
    if k < 2:
        raise ConfigurationError(f"k must be >= 2, got {k}")
    n = len(manifest)
    if n < k:
        raise ConfigurationError(f"cannot build {k} folds from {n} samples")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"ratios must sum to 1, got {ratios}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    bad_rows = [i for i, r in enumerate(manifest.records)
                if r.label is None or r.age is None or r.sex is None]
    if bad_rows:
        raise ManifestError(f"stratified_kfold requires label, age, and sex on every record; "
                            f"missing on rows {bad_rows[:10]}{'...' if len(bad_rows) > 10 else ''}")

    ages = np.array([r.age for r in manifest.records], dtype=np.float64)
    sexes = [r.sex for r in manifest.records]
    labels = manifest.labels()
    age_bin = _age_bins(ages, n_age_bins)
    label_values = sorted(set(labels.tolist()))

    ordered: dict[int, np.ndarray] = {}
    for lab in label_values:
        idx = np.nonzero(labels == lab)[0]
        if len(idx) < k:
            logger.warning("stratified_kfold: label %s has only %d samples for %d folds", lab, len(idx), k)
        ordered[lab] = _interleave_label_group(idx, age_bin, sexes, k, rng, label=lab)

    # Per-label test shards; each label's "+1" remainder shards go to the folds
    # with the smallest running test totals, keeping fold test sizes within +-1.
    totals = np.zeros(k, dtype=np.int64)
    shard_sizes: dict[int, np.ndarray] = {}
    for lab in sorted(label_values, key=lambda l: (-len(ordered[l]), l)):
        n_l = len(ordered[lab])
        base, extra = divmod(n_l, k)
        sizes = np.full(k, base, dtype=np.int64)
        if extra:
            order = np.lexsort((np.arange(k), totals))
            sizes[order[:extra]] += 1
        shard_sizes[lab] = sizes
        totals += sizes

    val_frac = ratios[1]
    test_frac = ratios[2]
    folds: list[FoldSplit] = []
    for f in range(k):
        test_parts, val_parts, train_parts = [], [], []
        e_t_total = totals[f] - test_frac * n
        v_target_total = int(round(val_frac * n - e_t_total / 2.0))
        # per-label val targets, corrected by half that label's test deviation
        raw_targets = {}
        for lab in label_values:
            members = ordered[lab]
            sizes = shard_sizes[lab]
            start = int(sizes[:f].sum())
            test_l = members[start:start + int(sizes[f])]
            rest = np.concatenate([members[start + int(sizes[f]):], members[:start]])
            e_t = len(test_l) - test_frac * len(members)
            raw_targets[lab] = (test_l, rest, val_frac * len(members) - e_t / 2.0)
        rounded = {lab: int(np.clip(round(t), 0, len(rest)))
                   for lab, (_, rest, t) in raw_targets.items()}
        diff = v_target_total - sum(rounded.values())
        adjust_order = sorted(label_values,
                              key=lambda l: (rounded[l] - raw_targets[l][2]) * np.sign(diff))
        for lab in adjust_order:
            if diff == 0:
                break
            step = 1 if diff > 0 else -1
            new = rounded[lab] + step
            if 0 <= new <= len(raw_targets[lab][1]):
                rounded[lab] = new
                diff -= step
        for lab in label_values:
            test_l, rest, _ = raw_targets[lab]
            n_val = rounded[lab]
            test_parts.append(test_l)
            val_parts.append(rest[:n_val])
            train_parts.append(rest[n_val:])
        train = np.sort(np.concatenate(train_parts))
        val = np.sort(np.concatenate(val_parts))
        test = np.sort(np.concatenate(test_parts))
        report = {
            split_name: {
                "label": _tally(labels[idx]),
                "sex": _tally(np.array([sexes[i] for i in idx])),
                "age_bin": _tally(age_bin[idx]),
            }
            for split_name, idx in (("train", train), ("validation", val), ("test", test))
        }
        folds.append(FoldSplit(fold_index=f, train=train, validation=val, test=test, report=report))
    return folds


def _tally(values: np.ndarray) -> dict:
    uniq, counts = np.unique(values, return_counts=True)
    return {str(u): int(c) for u, c in zip(uniq, counts)}


def balanced_holdout(manifest: Manifest, fraction: float = 0.2,
                     rng: np.random.Generator | int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Label-balanced holdout split: returns (rest_indices, holdout_indices).
    Holdout gets round(fraction * n_label) of every label."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"holdout fraction must lie in (0, 1), got {fraction}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    labels = manifest.labels()
    if (labels < 0).any():
        raise ManifestError("balanced_holdout requires labels on every record")
    holdout_parts, rest_parts = [], []
    for lab in sorted(set(labels.tolist())):
        idx = np.nonzero(labels == lab)[0]
        rng.shuffle(idx)
        n_hold = int(round(fraction * len(idx)))
        holdout_parts.append(idx[:n_hold])
        rest_parts.append(idx[n_hold:])
    return np.sort(np.concatenate(rest_parts)), np.sort(np.concatenate(holdout_parts))


# ---------------------------------------------------------------------------
# volume loading and batch iteration
# ---------------------------------------------------------------------------


class VolumeStore:
    """Loads manifest volumes, normalizes them to the working shape, and caches
    the result (synthetic desk-scale datasets fit in memory comfortably)."""

    def __init__(self, out_shape: tuple[int, int, int], cache: bool = True, max_items: int | None = None):
        self.out_shape = tuple(out_shape)
        self.cache_enabled = cache
        self.max_items = max_items
        self._cache: dict[str, np.ndarray] = {}

    def get(self, record: ManifestRecord) -> np.ndarray:
        hit = self._cache.get(record.path)
        if hit is not None:
            return hit
        volume = normalize_volume(load_volume(record.path), self.out_shape)
        if self.cache_enabled:
            if self.max_items is not None and len(self._cache) >= self.max_items:
                self._cache.pop(next(iter(self._cache)))
            self._cache[record.path] = volume
        return volume


@dataclass
class Batch:
    volumes: np.ndarray          # (B, *shape) float32
    labels: np.ndarray | None    # (B,) int64, None for unlabeled batches
    indices: np.ndarray          # (B,) manifest row indices


def epoch_order(n: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(n)


def iterate_batches(manifest: Manifest, batch_size: int, store: VolumeStore,
                    rng: np.random.Generator | int = 0, pipeline=None,
                    drop_last: bool = True, epochs: int | None = 1,
                    indices: np.ndarray | None = None):
    """Yield batches; every epoch is a fresh seeded shuffle covering each sample
    exactly once (drop_last discards the short tail). ``pipeline`` (if given)
    augments each volume; ``indices`` restricts iteration to a subset."""
    from .augment import apply as apply_pipeline

    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    pool = np.arange(len(manifest)) if indices is None else np.asarray(indices, dtype=np.int64)
    if len(pool) == 0:
        raise IterationError("cannot iterate an empty manifest")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    epoch = 0
    while epochs is None or epoch < epochs:
        order = pool[epoch_order(len(pool), rng)]
        stop = len(order) - (len(order) % batch_size) if drop_last else len(order)
        for lo in range(0, stop, batch_size):
            rows = order[lo: lo + batch_size]
            volumes = []
            labels = []
            has_labels = True
            for i in rows:
                record = manifest[int(i)]
                vol = store.get(record)
                if pipeline is not None:
                    vol = apply_pipeline(pipeline, vol)
                volumes.append(vol)
                if record.label is None:
                    has_labels = False
                else:
                    labels.append(record.label)
            yield Batch(volumes=np.stack(volumes).astype(np.float32),
                        labels=np.array(labels, dtype=np.int64) if has_labels else None,
                        indices=rows)
        epoch += 1
