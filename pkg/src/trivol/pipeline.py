"""Stage trainers and strategy orchestration.

Stage 1 pretrains the extractor on unlabeled role-U volumes by driving the
two-view cross-correlation matrix toward the identity. Stage 2 freezes that
extractor as a teacher and trains a fresh student on labeled role-D volumes
with the latent-match + cross-entropy objective. Stage 3 fine-tunes the
student per cross-validation fold on role-T with early stopping on validation
balanced accuracy.

Every source of randomness at iteration ``i`` of a stage is derived from
(master seed, stage, i), so runs are reproducible and mid-stage resume is
exact given the periodic checkpoints (weights + optimizer state).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch

from .augment import build_pipeline, paired_views
from .backbone import (FeatureExtractor, ProjectionHead, forward_features, freeze, init_model,
                       parameter_checksum, trainable_parameters)
from .checkpoint import ModelWeights, file_sha256, load_weights, save_weights
from .config import ExperimentConfig, StageHyperParams, architecture_fingerprint
from .data import FoldSplit, Manifest, VolumeStore, balanced_holdout, stratified_kfold
from .errors import ConfigurationError, IntegrityError, NumericError
from .eval import MetricReport, evaluate
from .losses import barlow_twins_loss, cross_correlation, cross_entropy_loss, distillation_loss
from .seeding import derive_seed, spawn_rng

logger = logging.getLogger(__name__)

# global-norm gradient clip for every stage; small batches make the correlation
# and KL objectives spiky early in training
GRAD_CLIP_NORM = 5.0


class TrainingStrategy(Enum):
    """Which stages run; mirrors the comparative rows of the evaluation table."""

    SUPERVISED_T = "supervised_t"
    SUPERVISED_DT = "supervised_dt"
    SSL_BT_THEN_T = "ssl_bt_then_t"
    TRIPLET = "triplet"

    @property
    def required_roles(self) -> tuple[str, ...]:
        return {
            TrainingStrategy.SUPERVISED_T: ("T",),
            TrainingStrategy.SUPERVISED_DT: ("D", "T"),
            TrainingStrategy.SSL_BT_THEN_T: ("U", "T"),
            TrainingStrategy.TRIPLET: ("U", "D", "T"),
        }[self]


@dataclass
class StageResult:
    stage: str
    weights_path: str
    weights_sha256: str
    loss_curve: list[float]
    wall_clock_s: float
    seed: int
    fingerprint: str
    extras: dict = field(default_factory=dict)


@dataclass
class StrategyResult:
    strategy: str
    fold_reports: list[MetricReport]
    aggregate: dict
    bacc_d: float | None
    stage_results: dict[str, StageResult]
    fold_checkpoints: list[str]


class RunLog:
    """JSON-lines run log: one record per training step plus stage events."""

    def __init__(self, path: str | Path | None):
        self._fh = None
        if path is not None:
            path = Path(path)
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a", buffering=1)

    def emit(self, **record) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record) + "\n")
        logger.debug("%s", record)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def build_optimizer(params, hp: StageHyperParams, kind: str) -> torch.optim.Optimizer:
    if kind == "adamw":
        return torch.optim.AdamW(params, lr=hp.learning_rate, weight_decay=hp.weight_decay)
    if kind == "sgd":
        return torch.optim.SGD(params, lr=hp.learning_rate, momentum=0.9, weight_decay=hp.weight_decay)
    raise ConfigurationError(f"unknown optimizer {kind!r}")


def cosine_factor(step: int, total: int) -> float:
    if total <= 1:
        return 1.0
    return 0.5 * (1.0 + float(np.cos(np.pi * step / (total - 1))))


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _batch_rows(n_pool: int, batch_size: int, master: int, stage: str, iteration: int,
                pool: np.ndarray) -> np.ndarray:
    """Rows for iteration ``i``: seeded per-epoch shuffle, contiguous slices."""
    bpe = max(1, n_pool // batch_size)
    epoch, slot = divmod(iteration, bpe)
    order = spawn_rng(master, stage, "order", epoch).permutation(n_pool)
    rows = pool[order[slot * batch_size:(slot + 1) * batch_size]]
    return rows


def _nan_abort(out_dir: Path, stage: str, iteration: int, rows: np.ndarray, terms: dict) -> None:
    snapshot = {"stage": stage, "iteration": iteration, "batch_indices": rows.tolist(),
                "loss_terms": {k: float(v) for k, v in terms.items()}}
    path = Path(out_dir) / f"{stage}_nan_snapshot.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(snapshot, indent=2))
    raise NumericError(f"{stage}: non-finite loss at iteration {iteration}; snapshot at {path}")


def _optimizer_state_arrays(optimizer: torch.optim.Optimizer, params: list) -> dict[str, np.ndarray]:
    arrays = {}
    for i, p in enumerate(params):
        state = optimizer.state.get(p, {})
        for key, value in state.items():
            if torch.is_tensor(value):
                arrays[f"opt.{i}.{key}"] = value.detach().cpu().numpy().copy()
            else:
                arrays[f"opt.{i}.{key}"] = np.array([value], dtype=np.float64)
    return arrays


def _restore_optimizer_state(optimizer: torch.optim.Optimizer, params: list,
                             arrays: dict[str, np.ndarray]) -> None:
    for i, p in enumerate(params):
        state = {}
        prefix = f"opt.{i}."
        for key, value in arrays.items():
            if key.startswith(prefix):
                name = key[len(prefix):]
                if name == "step":
                    state[name] = torch.tensor(float(value[0]))
                else:
                    state[name] = torch.as_tensor(value).clone()
        if state:
            optimizer.state[p] = state


def _save_periodic(out_dir: Path, stage: str, tag: str, iteration: int, extractor, head, config,
                   seed: int, optimizer, params, loss_curve: list[float]) -> Path:
    weights = ModelWeights.from_model(extractor, head, stage=tag, config=config, seed=seed,
                                      extras={"iteration": iteration, "kind": "periodic",
                                              "loss_curve": loss_curve})
    weights.arrays.update(_optimizer_state_arrays(optimizer, params))
    return save_weights(weights, out_dir / f"{stage}_iter{iteration:07d}.ckpt")


def _find_resume(out_dir: Path, stage: str) -> Path | None:
    candidates = sorted(Path(out_dir).glob(f"{stage}_iter*.ckpt"))
    return candidates[-1] if candidates else None


def run_ssl_stage(config: ExperimentConfig, u_manifest: Manifest, out_dir: str | Path,
                  store: VolumeStore | None = None, log: RunLog | None = None,
                  resume: bool = False) -> StageResult:
    """Two-view pretraining on role-U volumes; emits the theta-prime checkpoint."""
    if len(u_manifest) == 0:
        raise ConfigurationError("pretraining requires a non-empty role-U manifest")
    hp = config.ssl
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or RunLog(None)
    store = store or VolumeStore(config.input_shape)
    master = config.seed
    extractor, head = init_model(config, "ssl", seed=derive_seed(master, "ssl"))
    params = trainable_parameters(extractor, head)
    optimizer = build_optimizer(params, hp, config.optimizer)
    loss_curve: list[float] = []
    start_iter = 0
    if resume:
        ckpt_path = _find_resume(out_dir, "ssl")
        if ckpt_path is not None:
            ckpt = load_weights(ckpt_path, config)
            ckpt_arrays = {k: v for k, v in ckpt.arrays.items() if not k.startswith("opt.")}
            ModelWeights(ckpt_arrays, ckpt.stage, ckpt.fingerprint, ckpt.seed,
                         ckpt.head_kind, ckpt.extras).apply_to(extractor, head)
            _restore_optimizer_state(optimizer, params, ckpt.arrays)
            start_iter = int(ckpt.extras["iteration"]) + 1
            loss_curve = [float(x) for x in ckpt.extras.get("loss_curve", [])]
            logger.info("ssl: resuming at iteration %d from %s", start_iter, ckpt_path)

    pool = np.arange(len(u_manifest))
    checkpoint_every = max(1, hp.iterations // 10)
    t0 = time.time()
    extractor.train(), head.train()
    for it in range(start_iter, hp.iterations):
        rows = _batch_rows(len(pool), hp.batch_size, master, "ssl", it, pool)
        pipeline = build_pipeline("ssl", config, spawn_rng(master, "ssl", "aug", it))
        view_a, view_b = [], []
        for i in rows:
            a, b = paired_views(pipeline, store.get(u_manifest[int(i)]))
            view_a.append(a)
            view_b.append(b)
        batch_a = torch.as_tensor(np.stack(view_a), dtype=torch.float32)
        batch_b = torch.as_tensor(np.stack(view_b), dtype=torch.float32)
        _set_lr(optimizer, hp.learning_rate * cosine_factor(it, hp.iterations))
        optimizer.zero_grad(set_to_none=True)
        za = head(forward_features(extractor, batch_a))
        zb = head(forward_features(extractor, batch_b))
        cc = cross_correlation(za, zb, center=config.center_embeddings)
        loss = barlow_twins_loss(cc, hp.lambd)
        if not torch.isfinite(loss):
            diag = torch.diagonal(cc.matrix.detach())
            _nan_abort(out_dir, "ssl", it, rows, {
                "loss": float(loss.detach()),
                "invariance_term": float((1.0 - diag).pow(2).sum()),
                "redundancy_term": float(cc.matrix.detach().pow(2).sum() - diag.pow(2).sum()),
            })
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
        optimizer.step()
        loss_curve.append(float(loss.detach()))
        log.emit(event="step", stage="ssl", iteration=it, loss=loss_curve[-1],
                 lr=optimizer.param_groups[0]["lr"])
        if (it + 1) % checkpoint_every == 0 and (it + 1) < hp.iterations:
            _save_periodic(out_dir, "ssl", "theta_init", it, extractor, head, config, master,
                           optimizer, params, loss_curve)
    weights = ModelWeights.from_model(extractor, head, stage="theta_prime", config=config,
                                      seed=master)
    path = save_weights(weights, out_dir / "theta_prime.ckpt")
    log.emit(event="stage_end", stage="ssl", iterations=len(loss_curve),
             final_loss=loss_curve[-1] if loss_curve else None)
    return StageResult(stage="ssl", weights_path=str(path), weights_sha256=file_sha256(path),
                       loss_curve=loss_curve, wall_clock_s=time.time() - t0, seed=master,
                       fingerprint=architecture_fingerprint(config))


def run_distillation_stage(config: ExperimentConfig, d_manifest: Manifest,
                           teacher_weights: ModelWeights | None, out_dir: str | Path,
                           store: VolumeStore | None = None, log: RunLog | None = None,
                           train_indices: np.ndarray | None = None,
                           resume: bool = False) -> StageResult:
    """Frozen-teacher stage on role-D. ``teacher_weights=None`` trains the same
    student with plain cross-entropy (supervised pre-training on D; also the
    exact lambda=0 endpoint)."""
    hp = config.distill
    if len(d_manifest) == 0:
        raise ConfigurationError("distillation requires a non-empty role-D manifest")
    if teacher_weights is None and hp.lambd > 0:
        raise ConfigurationError(
            f"distill.lambd={hp.lambd} needs a teacher checkpoint; pass one or set lambd to 0"
        )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or RunLog(None)
    store = store or VolumeStore(config.input_shape)
    master = config.seed

    teacher = None
    teacher_checksum_before = None
    if teacher_weights is not None:
        if teacher_weights.fingerprint != architecture_fingerprint(config):
            raise IntegrityError("teacher checkpoint does not match the configured architecture")
        teacher, _ = init_model(config, "cls", seed=derive_seed(master, "distill", "teacher"))
        teacher_weights.apply_to(teacher, head=None)
        freeze(teacher)
        teacher_checksum_before = parameter_checksum(teacher)

    extractor, head = init_model(config, "cls", seed=derive_seed(master, "distill"))
    params = trainable_parameters(extractor, head)
    optimizer = build_optimizer(params, hp, config.optimizer)
    pool = np.arange(len(d_manifest)) if train_indices is None else np.asarray(train_indices)
    if len(pool) == 0:
        raise ConfigurationError("distillation training split is empty")
    loss_curve: list[float] = []
    start_iter = 0
    if resume:
        ckpt_path = _find_resume(out_dir, "distill")
        if ckpt_path is not None:
            ckpt = load_weights(ckpt_path, config)
            ckpt_arrays = {k: v for k, v in ckpt.arrays.items() if not k.startswith("opt.")}
            ModelWeights(ckpt_arrays, ckpt.stage, ckpt.fingerprint, ckpt.seed,
                         ckpt.head_kind, ckpt.extras).apply_to(extractor, head)
            _restore_optimizer_state(optimizer, params, ckpt.arrays)
            start_iter = int(ckpt.extras["iteration"]) + 1
            loss_curve = [float(x) for x in ckpt.extras.get("loss_curve", [])]
            logger.info("distill: resuming at iteration %d from %s", start_iter, ckpt_path)
    checkpoint_every = max(1, hp.iterations // 10)
    t0 = time.time()
    extractor.train(), head.train()
    for it in range(start_iter, hp.iterations):
        rows = _batch_rows(len(pool), hp.batch_size, master, "distill", it, pool)
        pipeline = build_pipeline("distill", config, spawn_rng(master, "distill", "aug", it))
        volumes, labels = [], []
        for i in rows:
            record = d_manifest[int(i)]
            volumes.append(pipeline(store.get(record)))
            labels.append(record.label)
        batch = torch.as_tensor(np.stack(volumes), dtype=torch.float32)
        label_t = torch.as_tensor(labels, dtype=torch.long)
        optimizer.zero_grad(set_to_none=True)
        student_latents = forward_features(extractor, batch)
        logits = head(student_latents)
        if teacher is not None:
            with torch.inference_mode():
                teacher_latents = forward_features(teacher, batch)
            loss = distillation_loss(student_latents, teacher_latents.clone(), logits, label_t,
                                     lambd=hp.lambd, temperature=config.distill_temperature,
                                     direction=config.kl_direction)
        else:
            loss = cross_entropy_loss(logits, label_t)
        if not torch.isfinite(loss):
            terms = {"loss": float(loss.detach()),
                     "cross_entropy": float(cross_entropy_loss(logits.detach(), label_t))}
            if teacher is not None:
                from .losses import latent_match_kl

                terms["latent_kl"] = float(latent_match_kl(
                    student_latents.detach(), teacher_latents.clone(),
                    config.distill_temperature, config.kl_direction))
            _nan_abort(out_dir, "distill", it, rows, terms)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
        optimizer.step()
        loss_curve.append(float(loss.detach()))
        log.emit(event="step", stage="distill", iteration=it, loss=loss_curve[-1],
                 lr=hp.learning_rate)
        if (it + 1) % checkpoint_every == 0 and (it + 1) < hp.iterations:
            _save_periodic(out_dir, "distill", "psi_init", it, extractor, head, config, master,
                           optimizer, params, loss_curve)
    extras = {}
    if teacher is not None:
        extras["teacher_checksum_before"] = teacher_checksum_before
        extras["teacher_checksum_after"] = parameter_checksum(teacher)
        extras["teacher_grad_free"] = all(p.grad is None for p in teacher.parameters())
    weights = ModelWeights.from_model(extractor, head, stage="psi_prime", config=config, seed=master)
    path = save_weights(weights, out_dir / "psi_prime.ckpt")
    log.emit(event="stage_end", stage="distill", iterations=len(loss_curve),
             final_loss=loss_curve[-1] if loss_curve else None)
    return StageResult(stage="distill", weights_path=str(path), weights_sha256=file_sha256(path),
                       loss_curve=loss_curve, wall_clock_s=time.time() - t0, seed=master,
                       fingerprint=architecture_fingerprint(config), extras=extras)


def run_finetune_stage(config: ExperimentConfig, fold: FoldSplit, t_manifest: Manifest,
                       init_weights: ModelWeights | None, out_dir: str | Path,
                       store: VolumeStore | None = None, log: RunLog | None = None) -> StageResult:
    """Fine-tune on one fold's train split with early stopping on validation
    balanced accuracy; restores the best-validation weights."""
    hp = config.finetune
    if len(fold.train) == 0:
        raise ConfigurationError(f"fold {fold.fold_index}: empty train split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = log or RunLog(None)
    store = store or VolumeStore(config.input_shape)
    master = config.seed

    extractor, head = init_model(config, "cls", seed=derive_seed(master, "finetune"))
    if init_weights is not None:
        if init_weights.fingerprint != architecture_fingerprint(config):
            raise IntegrityError("fine-tune init checkpoint does not match the configured architecture")
        init_weights.apply_to(extractor, head=head if init_weights.head_kind == "cls" else None)
    params = trainable_parameters(extractor, head)
    optimizer = build_optimizer(params, hp, config.optimizer)
    pool = np.asarray(fold.train, dtype=np.int64)
    patience = hp.early_stopping_patience
    stage_name = f"finetune_fold{fold.fold_index}"
    class_names = config.class_names()

    best_val = -np.inf
    best_state: tuple[dict, dict] | None = None
    evals_without_improvement = 0
    val_curve: list[tuple[int, float]] = []
    loss_curve: list[float] = []
    stopped_early = False
    t0 = time.time()
    extractor.train(), head.train()
    for it in range(hp.iterations):
        rows = _batch_rows(len(pool), min(hp.batch_size, len(pool)), master, stage_name, it, pool)
        pipeline = build_pipeline("finetune", config, spawn_rng(master, stage_name, "aug", it))
        volumes = [pipeline(store.get(t_manifest[int(i)])) for i in rows]
        labels = [t_manifest[int(i)].label for i in rows]
        batch = torch.as_tensor(np.stack(volumes), dtype=torch.float32)
        optimizer.zero_grad(set_to_none=True)
        logits = head(forward_features(extractor, batch))
        loss = cross_entropy_loss(logits, torch.as_tensor(labels, dtype=torch.long))
        if not torch.isfinite(loss):
            _nan_abort(out_dir, stage_name, it, rows, {"loss": float("nan")})
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, GRAD_CLIP_NORM)
        optimizer.step()
        loss_curve.append(float(loss.detach()))
        log.emit(event="step", stage=stage_name, iteration=it, loss=loss_curve[-1],
                 lr=hp.learning_rate)
        if (it + 1) % config.eval_every == 0 or (it + 1) == hp.iterations:
            report = evaluate(extractor, head, t_manifest, store, indices=fold.validation,
                              fold_id=fold.fold_index, num_classes=config.num_classes,
                              class_names=class_names)
            val_curve.append((it, report.balanced_accuracy))
            log.emit(event="validation", stage=stage_name, iteration=it,
                     balanced_accuracy=report.balanced_accuracy)
            if report.balanced_accuracy > best_val:
                best_val = report.balanced_accuracy
                best_state = ({k: v.detach().clone() for k, v in extractor.state_dict().items()},
                              {k: v.detach().clone() for k, v in head.state_dict().items()})
                evals_without_improvement = 0
            else:
                evals_without_improvement += 1
                if patience is not None and evals_without_improvement >= patience:
                    stopped_early = True
                    log.emit(event="early_stop", stage=stage_name, iteration=it,
                             best_balanced_accuracy=best_val)
                    break
    if best_state is not None:
        extractor.load_state_dict(best_state[0])
        head.load_state_dict(best_state[1])
    weights = ModelWeights.from_model(extractor, head, stage="psi_final", config=config, seed=master)
    path = save_weights(weights, out_dir / f"psi_final_fold{fold.fold_index}.ckpt")
    return StageResult(stage=stage_name, weights_path=str(path), weights_sha256=file_sha256(path),
                       loss_curve=loss_curve, wall_clock_s=time.time() - t0, seed=master,
                       fingerprint=architecture_fingerprint(config),
                       extras={"best_val_bacc": float(best_val), "val_curve": val_curve,
                               "stopped_early": stopped_early, "fold": fold.fold_index})


def _verify_handoff(result: StageResult) -> ModelWeights:
    """Reload a stage's emitted checkpoint, asserting the recorded hash still matches."""
    actual = file_sha256(result.weights_path)
    if actual != result.weights_sha256:
        raise IntegrityError(
            f"stage handoff: checkpoint {result.weights_path} hash {actual} does not match "
            f"the hash recorded at emit time {result.weights_sha256}"
        )
    return load_weights(result.weights_path)


def aggregate_reports(reports: list[MetricReport]) -> dict:
    """BAcc and macro-F1 are computed fold-wise then averaged (mean +- sample
    std); per-class TPRs are pooled over the folds' confusion counts."""
    baccs = np.array([r.balanced_accuracy for r in reports], dtype=np.float64)
    f1s = np.array([r.macro_f1 for r in reports], dtype=np.float64)
    pooled = None
    for r in reports:
        if r.confusion is not None:
            cm = np.asarray(r.confusion, dtype=np.float64)
            pooled = cm if pooled is None else pooled + cm
    if pooled is not None:
        row = pooled.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            pooled_tpr = np.where(row > 0, np.diag(pooled) / row, np.nan)
    else:
        pooled_tpr = np.nanmean(np.array([r.tpr for r in reports], dtype=np.float64), axis=0)
    std = float(baccs.std(ddof=1)) if len(baccs) > 1 else 0.0
    f1_std = float(f1s.std(ddof=1)) if len(f1s) > 1 else 0.0
    return {
        "balanced_accuracy_mean": float(baccs.mean()),
        "balanced_accuracy_std": std,
        "macro_f1_mean": float(f1s.mean()),
        "macro_f1_std": f1_std,
        "tpr_pooled": [float(t) for t in pooled_tpr],
        "fold_balanced_accuracies": [float(b) for b in baccs],
    }


def run_strategy(strategy: TrainingStrategy | str, config: ExperimentConfig,
                 manifests: dict[str, Manifest], out_dir: str | Path,
                 stores: dict[str, VolumeStore] | None = None, jobs: int = 1,
                 resume: bool = False,
                 reuse_stages: dict[str, StageResult] | None = None) -> StrategyResult:
    """Execute a strategy's stage subset, then fine-tune and evaluate over the
    5 folds of role-T. Pretraining and distillation are shared across folds
    (they never see role-T data).

    ``reuse_stages`` short-circuits a stage with a previously emitted result
    (runs are deterministic, so e.g. the pretraining checkpoint of a seed can be
    shared between strategies); the handoff hash is still verified.
    """
    strategy = TrainingStrategy(strategy) if not isinstance(strategy, TrainingStrategy) else strategy
    for role in strategy.required_roles:
        if manifests.get(role) is None or len(manifests[role]) == 0:
            raise ConfigurationError(f"strategy {strategy.value} requires a role-{role} manifest")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log = RunLog(out_dir / "run_log.jsonl")
    stores = stores or {}
    master = config.seed
    stage_results: dict[str, StageResult] = {}

    def store_for(role: str) -> VolumeStore:
        if role not in stores:
            stores[role] = VolumeStore(config.input_shape)
        return stores[role]

    reuse_stages = reuse_stages or {}
    try:
        theta_prime: ModelWeights | None = None
        if strategy in (TrainingStrategy.SSL_BT_THEN_T, TrainingStrategy.TRIPLET):
            if "ssl" in reuse_stages:
                result = reuse_stages["ssl"]
            else:
                result = run_ssl_stage(config, manifests["U"], out_dir / "ssl", store_for("U"),
                                       log, resume=resume)
            stage_results["ssl"] = result
            theta_prime = _verify_handoff(result)

        psi_prime: ModelWeights | None = None
        bacc_d: float | None = None
        if strategy in (TrainingStrategy.SUPERVISED_DT, TrainingStrategy.TRIPLET):
            d_manifest = manifests["D"]
            d_rest, d_holdout = balanced_holdout(d_manifest, 0.2, spawn_rng(master, "d_holdout"))
            teacher = theta_prime if strategy is TrainingStrategy.TRIPLET else None
            distill_config = config
            if teacher is None and config.distill.lambd > 0:
                distill_config = dataclasses.replace(
                    config, distill=dataclasses.replace(config.distill, lambd=0.0))
            result = run_distillation_stage(distill_config, d_manifest, teacher,
                                            out_dir / "distill", store_for("D"), log,
                                            train_indices=d_rest, resume=resume)
            stage_results["distill"] = result
            psi_prime = _verify_handoff(result)
            student_ext, student_head = init_model(config, "cls", seed=0)
            psi_prime.apply_to(student_ext, student_head)
            bacc_d = evaluate(student_ext, student_head, d_manifest, store_for("D"),
                              indices=d_holdout, dataset_tag="D",
                              num_classes=config.num_classes,
                              class_names=config.class_names()).balanced_accuracy
            log.emit(event="d_holdout", strategy=strategy.value, balanced_accuracy=bacc_d)

        init_weights = psi_prime if psi_prime is not None else theta_prime
        t_manifest = manifests["T"]
        folds = stratified_kfold(t_manifest, k=5, rng=spawn_rng(master, "folds"))
        fold_args = [(config, fold, t_manifest, init_weights, out_dir / f"fold{fold.fold_index}")
                     for fold in folds]
        if jobs > 1:
            import multiprocessing
            from concurrent.futures import ProcessPoolExecutor

            # spawn: fork would inherit torch's thread pool state
            ctx = multiprocessing.get_context("spawn")
            with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
                outcomes = list(pool.map(_finetune_and_eval_worker, fold_args))
        else:
            t_store = store_for("T")
            outcomes = [_finetune_and_eval(config, fold, t_manifest, init_weights,
                                           out_dir / f"fold{fold.fold_index}", t_store, log)
                        for fold in folds]
        fold_reports = [o[0] for o in outcomes]
        fold_ckpts = [o[1].weights_path for o in outcomes]
        for fold, (_, stage_result) in zip(folds, outcomes):
            stage_results[stage_result.stage] = stage_result
        aggregate = aggregate_reports(fold_reports)
        log.emit(event="strategy_end", strategy=strategy.value, **aggregate)
        result = StrategyResult(strategy=strategy.value, fold_reports=fold_reports,
                                aggregate=aggregate, bacc_d=bacc_d, stage_results=stage_results,
                                fold_checkpoints=fold_ckpts)
        _write_strategy_json(result, out_dir / "metrics.json")
        return result
    finally:
        log.close()


def _finetune_and_eval(config, fold, t_manifest, init_weights, fold_dir, store, log):
    stage_result = run_finetune_stage(config, fold, t_manifest, init_weights, fold_dir,
                                      store, log)
    final = _verify_handoff(stage_result)
    extractor, head = init_model(config, "cls", seed=0)
    final.apply_to(extractor, head)
    report = evaluate(extractor, head, t_manifest, store, indices=fold.test,
                      fold_id=fold.fold_index, dataset_tag="T",
                      num_classes=config.num_classes, class_names=config.class_names())
    if log is not None:
        log.emit(event="fold_test", fold=fold.fold_index,
                 balanced_accuracy=report.balanced_accuracy, macro_f1=report.macro_f1)
    return report, stage_result


def _finetune_and_eval_worker(args):
    config, fold, t_manifest, init_weights, fold_dir = args
    store = VolumeStore(config.input_shape)
    return _finetune_and_eval(config, fold, t_manifest, init_weights, fold_dir, store, None)


def _write_strategy_json(result: StrategyResult, path: Path) -> None:
    payload = {
        "strategy": result.strategy,
        "aggregate": result.aggregate,
        "bacc_d": result.bacc_d,
        "folds": [r.to_dict() for r in result.fold_reports],
        "stages": {name: {"weights_path": s.weights_path, "weights_sha256": s.weights_sha256,
                          "iterations": len(s.loss_curve), "wall_clock_s": s.wall_clock_s}
                   for name, s in result.stage_results.items()},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
