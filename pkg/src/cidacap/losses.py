"""Training objectives for both stages.

All losses are written on top of torch so gradients come from autograd. They
accept either single vectors or batches (leading batch dimension) unless noted.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

DEFAULT_TEMPERATURE = 0.07
DEFAULT_DISTILL_T = 3.0
DEFAULT_LS_EPSILON = 0.1


@dataclass(frozen=True)
class SmoothedTarget:
    probs: np.ndarray
    epsilon: float
    K: int


def _check_epsilon(epsilon):
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")


def label_smooth(target_index: int, K: int, epsilon: float) -> SmoothedTarget:
    """Smoothed one-hot vector ``T * (1 - eps) + eps / K``."""
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if not 0 <= target_index < K:
        raise ValueError(f"target_index {target_index} out of range for K={K}")
    _check_epsilon(epsilon)
    probs = np.full(K, epsilon / K, dtype=np.float64)
    probs[target_index] = (1.0 - epsilon) + epsilon / K
    return SmoothedTarget(probs=probs, epsilon=float(epsilon), K=K)


def smoothed_targets(targets: torch.Tensor, K: int, epsilon: float) -> torch.Tensor:
    """Batched version of :func:`label_smooth` returning a tensor."""
    _check_epsilon(epsilon)
    onehot = F.one_hot(targets.long(), K).to(torch.get_default_dtype())
    return onehot * (1.0 - epsilon) + epsilon / K


def ce_with_ls(logits: torch.Tensor, target, epsilon: float = 0.0,
               reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy against a label-smoothed target.

    ``logits`` is ``(K,)`` or ``(B, K)``; ``target`` an int or a ``(B,)`` tensor.
    With ``epsilon == 0`` this is plain cross-entropy.
    """
    _check_epsilon(epsilon)
    if not torch.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    single = logits.dim() == 1
    if single:
        logits = logits.unsqueeze(0)
        target = torch.as_tensor([int(target)], device=logits.device)
    target = torch.as_tensor(target, device=logits.device).long()
    K = logits.shape[-1]
    if target.min() < 0 or target.max() >= K:
        raise ValueError("target index out of range")
    logp = F.log_softmax(logits, dim=-1)
    soft = F.one_hot(target, K).to(logp.dtype) * (1.0 - epsilon) + epsilon / K
    per_row = -(soft * logp).sum(dim=-1)
    if single or reduction == "none":
        return per_row[0] if single else per_row
    if reduction == "sum":
        return per_row.sum()
    return per_row.mean()


def _reduce(values: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return values.sum()
    if reduction == "mean":
        return values.mean() if values.numel() else values.sum()
    if reduction == "none":
        return values
    raise ValueError(f"unknown reduction {reduction!r}")


def _check_unit_rows(z: torch.Tensor, tol: float = 1e-6):
    norms = z.detach().norm(dim=-1)
    if not torch.all((norms - 1.0).abs() <= tol):
        raise ValueError("embedding rows must be unit L2-norm")


def supcon_loss(embeddings: torch.Tensor, labels, temperature: float = DEFAULT_TEMPERATURE,
                reduction: str = "sum", validate: bool = True) -> torch.Tensor:
    """Supervised contrastive loss over a batch of ``2N`` unit embeddings.

    Each anchor averages ``-log softmax`` over its positives, where the softmax
    runs over every other row. Anchors without any positive are left out.
    ``reduction="sum"`` gives the plain sum over anchors; ``"mean"`` divides by
    the number of contributing anchors.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if embeddings.dim() != 2 or embeddings.shape[0] < 2:
        raise ValueError("need a (2N, d) matrix with 2N >= 2")
    labels = torch.as_tensor(labels, device=embeddings.device)
    if labels.shape[0] != embeddings.shape[0]:
        raise ValueError("labels and embeddings disagree in length")
    if validate:
        _check_unit_rows(embeddings)

    n = embeddings.shape[0]
    sim = embeddings @ embeddings.T / temperature
    self_mask = torch.eye(n, dtype=torch.bool, device=embeddings.device)
    # log-softmax over k != i
    sim = sim.masked_fill(self_mask, float("-inf"))
    log_prob = sim - torch.logsumexp(sim, dim=1, keepdim=True)

    pos = (labels[:, None] == labels[None, :]) & ~self_mask
    n_pos = pos.sum(dim=1)
    has_pos = n_pos > 0
    pos_log_prob = torch.where(pos, log_prob, torch.zeros_like(log_prob)).sum(dim=1)
    per_anchor = -pos_log_prob[has_pos] / n_pos[has_pos]
    return _reduce(per_anchor, reduction)


def logit_distill_loss(student_logits: torch.Tensor, teacher_logits: torch.Tensor,
                       T: float = DEFAULT_DISTILL_T, reduction: str = "mean") -> torch.Tensor:
    """Cross-entropy between temperature-softened teacher and student outputs."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(
            f"shape mismatch: student {tuple(student_logits.shape)} vs teacher {tuple(teacher_logits.shape)}")
    if not (np.isfinite(T) and T > 0):
        raise ValueError("distillation temperature must be finite and positive")
    p_teacher = F.softmax(teacher_logits.detach() / T, dim=-1)
    log_p_student = F.log_softmax(student_logits / T, dim=-1)
    per_row = -(p_teacher * log_p_student).sum(dim=-1)
    if per_row.dim() == 0:
        return per_row
    return _reduce(per_row, reduction)


def _alignment(teacher: torch.Tensor, student: torch.Tensor, temperature: float) -> torch.Tensor:
    # anchor: student row i; positive: teacher row i; negatives: other teacher rows
    logits = student @ teacher.T / temperature
    return -torch.diagonal(F.log_softmax(logits, dim=1))


def feature_distill_loss(student_v1, student_v2, teacher_v1, teacher_v2,
                         temperature: float = DEFAULT_TEMPERATURE, reduction: str = "sum",
                         validate: bool = True) -> torch.Tensor:
    """Teacher-to-student contrastive distillation averaged over two views."""
    shapes = {tuple(t.shape) for t in (student_v1, student_v2, teacher_v1, teacher_v2)}
    if len(shapes) != 1:
        raise ValueError(f"all four matrices must share a shape, got {sorted(shapes)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if validate:
        for m in (student_v1, student_v2, teacher_v1, teacher_v2):
            _check_unit_rows(m)
    a1 = _alignment(teacher_v1.detach(), student_v1, temperature)
    a2 = _alignment(teacher_v2.detach(), student_v2, temperature)
    return (_reduce(a1, reduction) + _reduce(a2, reduction)) / 2


def ci_total_loss(ce_term, distill_term, lambda_old: float):
    if not 0.0 <= lambda_old <= 1.0:
        raise ValueError(f"lambda_old must lie in [0, 1], got {lambda_old}")
    return (1.0 - lambda_old) * ce_term + lambda_old * distill_term


def old_class_weight(n_old: int, n_total: int) -> float:
    """Default weight of the distillation term: share of old classes among all seen."""
    if n_total <= 0:
        raise ValueError("n_total must be positive")
    return n_old / n_total
