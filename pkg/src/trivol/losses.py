"""The three training objectives as pure functions over batches.

* redundancy-reduction loss for the pretraining stage: drives the batch
  cross-correlation matrix between the two views' embeddings toward the
  identity — invariance on the diagonal, decorrelation off it;
* distillation loss: convex combination of a temperature-softmax KL match
  between student and frozen-teacher latents and the label cross-entropy;
* plain cross-entropy for fine-tuning.

All functions are differentiable torch ops and are gradient-checked against
central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, LabelError, NumericError, ShapeError

CORRELATION_EPS = 1e-12


@dataclass
class CrossCorrelationMatrix:
    """C x C matrix of batch correlations between embedding dimensions of two views.

    With centering (the default) each entry is a Pearson correlation in [-1, 1].
    ``zero_variance_columns`` flags dimensions whose denominator needed the
    epsilon floor (dead features).
    """

    matrix: torch.Tensor
    batch_size: int
    centered: bool
    zero_variance_columns: tuple[int, ...] = ()

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def cross_correlation(za: torch.Tensor, zb: torch.Tensor, center: bool = True) -> CrossCorrelationMatrix:
    """Normalized cross-correlation of two embedding batches (B x C each).

    ``center=False`` reproduces the uncentered textbook formula
    sum_i zA_ic zB_ij / (||zA_c|| ||zB_j||) for comparison; with centering the
    batch mean of every column is removed first, bounding entries to [-1, 1].
    """
    za = torch.as_tensor(za)
    zb = torch.as_tensor(zb)
    if za.shape != zb.shape or za.dim() != 2:
        raise ShapeError(tuple(za.shape), tuple(zb.shape), what="embedding batches must share a BxC shape")
    if za.shape[0] < 2:
        raise ConfigurationError(f"cross-correlation needs a batch of >= 2, got {za.shape[0]}")
    if not (torch.isfinite(za).all() and torch.isfinite(zb).all()):
        raise NumericError("non-finite values in embeddings")
    if center:
        za = za - za.mean(dim=0, keepdim=True)
        zb = zb - zb.mean(dim=0, keepdim=True)
    sq_a = za.pow(2).sum(dim=0)
    sq_b = zb.pow(2).sum(dim=0)
    dead = tuple(
        sorted(set(torch.nonzero(sq_a <= CORRELATION_EPS ** 2).flatten().tolist())
               | set(torch.nonzero(sq_b <= CORRELATION_EPS ** 2).flatten().tolist()))
    )
    # clamp before the sqrt: dead columns then carry zero gradient instead of NaN
    norm_a = sq_a.clamp_min(CORRELATION_EPS ** 2).sqrt()
    norm_b = sq_b.clamp_min(CORRELATION_EPS ** 2).sqrt()
    matrix = (za.T @ zb) / torch.outer(norm_a, norm_b)
    return CrossCorrelationMatrix(matrix=matrix, batch_size=za.shape[0], centered=center,
                                  zero_variance_columns=dead)


def barlow_twins_loss(cc: CrossCorrelationMatrix | torch.Tensor, lambd: float) -> torch.Tensor:
    """sum_c (1 - C_cc)^2 + lambd * sum_{j != c} C_cj^2, always >= 0."""
    matrix = cc.matrix if isinstance(cc, CrossCorrelationMatrix) else torch.as_tensor(cc)
    if matrix.dim() != 2 or matrix.shape[0] != matrix.shape[1]:
        raise ShapeError((matrix.shape[0], matrix.shape[0]), tuple(matrix.shape), what="correlation matrix")
    diag = torch.diagonal(matrix)
    on_diag = (1.0 - diag).pow(2).sum()
    off_diag = matrix.pow(2).sum() - diag.pow(2).sum()
    return on_diag + lambd * off_diag


def _check_labels(labels: torch.Tensor, num_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"labels must lie in 0..{num_classes - 1}, got range "
                         f"[{int(labels.min())}, {int(labels.max())}]")
    return labels


def cross_entropy_loss(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-softmax-probability of the true class."""
    logits = torch.as_tensor(logits)
    labels = _check_labels(labels, logits.shape[-1])
    if logits.shape[0] != labels.shape[0]:
        raise ShapeError((labels.shape[0], logits.shape[-1]), tuple(logits.shape), what="logits")
    log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)
    return -log_probs.gather(1, labels.unsqueeze(1)).mean()


def latent_match_kl(student_latents: torch.Tensor, teacher_latents: torch.Tensor,
                    temperature: float = 1.0, direction: str = "student_teacher") -> torch.Tensor:
    """KL between per-sample temperature softmaxes over the latent dimensions,
    averaged over the batch. ``student_teacher`` puts the student first
    (mode-covering toward the teacher); the teacher side never carries gradient."""
    if temperature <= 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    student_latents = torch.as_tensor(student_latents)
    teacher_latents = torch.as_tensor(teacher_latents).detach()
    if student_latents.shape != teacher_latents.shape:
        raise ShapeError(tuple(student_latents.shape), tuple(teacher_latents.shape), what="latent batches")
    log_s = F.log_softmax(student_latents / temperature, dim=-1)
    log_t = F.log_softmax(teacher_latents / temperature, dim=-1)
    if direction == "student_teacher":
        kl = (log_s.exp() * (log_s - log_t)).sum(dim=-1)
    elif direction == "teacher_student":
        kl = (log_t.exp() * (log_t - log_s)).sum(dim=-1)
    else:
        raise ConfigurationError(f"unknown KL direction {direction!r}")
    return kl.mean()


def distillation_loss(student_latents: torch.Tensor, teacher_latents: torch.Tensor,
                      student_logits: torch.Tensor, labels, lambd: float,
                      temperature: float = 1.0, direction: str = "student_teacher") -> torch.Tensor:
    """lambd * KL(latent match) + (1 - lambd) * cross-entropy.

    The endpoints are exact: lambd=0 equals ``cross_entropy_loss`` bitwise and
    lambd=1 equals the KL term bitwise. Gradient flows into the student only.
    """
    if not 0.0 <= lambd <= 1.0:
        raise ConfigurationError(f"distillation lambd must lie in [0, 1], got {lambd}")
    kl = latent_match_kl(student_latents, teacher_latents, temperature, direction)
    ce = cross_entropy_loss(student_logits, labels)
    return lambd * kl + (1.0 - lambd) * ce
