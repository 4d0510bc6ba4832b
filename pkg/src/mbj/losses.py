"""Batch and memory objectives.

Classification uses raw inner-product logits. The metric-learning losses
normalize embeddings and prototypes, so ``delta`` is a cosine margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    eta: float = 15.0
    alpha: float = 30.0
    delta: float = 0.35

    def __post_init__(self):
        for name in ("eta", "alpha", "delta"):
            v = getattr(self, name)
            if v != v or v in (float("inf"), float("-inf")):
                raise ValueError(f"{name} must be finite")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if self.delta < 0:
            raise ValueError("delta must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")


def _check_labels(labels: torch.Tensor, num_classes: int) -> None:
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")


def cross_entropy(embeddings: torch.Tensor, labels: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of ``embeddings @ weights.T``."""
    if len(embeddings) == 0 or len(embeddings) != len(labels):
        raise ValueError("need at least one embedding and one label per embedding")
    _check_labels(labels, len(weights))
    return F.cross_entropy(embeddings @ weights.t(), labels)


def memory_loss_cls(vectors: torch.Tensor | None, labels: torch.Tensor | None, weights: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of memorized features against the live head.

    The features are detached here as well, so only ``weights`` can receive
    gradient. An empty memory contributes an exact, graph-free zero.
    """
    if vectors is None or len(vectors) == 0:
        return torch.zeros((), dtype=weights.dtype, device=weights.device)
    return cross_entropy(vectors.detach(), labels, weights)


def fuse_losses(l_memory, l_batch, eta: float):
    return eta * l_memory + l_batch


def cosine_logits(embeddings: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return F.normalize(embeddings, dim=-1) @ F.normalize(weights, dim=-1).t()


def cosface_loss(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    weights: torch.Tensor,
    alpha: float = 30.0,
    delta: float = 0.35,
) -> torch.Tensor:
    """Additive cosine margin softmax, averaged over the batch."""
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if embeddings.dim() == 1:
        embeddings, labels = embeddings[None], labels.reshape(1)
    _check_labels(labels, len(weights))
    cos = cosine_logits(embeddings, weights)
    margin = F.one_hot(labels, len(weights)).to(cos.dtype) * delta
    return F.cross_entropy(alpha * (cos - margin), labels)


def circle_memory_loss(
    embedding: torch.Tensor,
    positives: torch.Tensor,
    negatives: torch.Tensor,
    alpha: float = 30.0,
    delta: float = 0.35,
) -> torch.Tensor:
    """``log(1 + sum_j sum_i exp(alpha * (v_j.x - u_i.x + delta)))`` for one embedding.

    The double sum factorizes, so the loss is
    ``softplus(LSE_j(alpha v_j.x) + LSE_i(-alpha u_i.x) + alpha delta)``.
    Prototypes are treated as constants.
    """
    if len(positives) == 0 or len(negatives) == 0:
        return torch.zeros((), dtype=embedding.dtype, device=embedding.device)
    x = F.normalize(embedding, dim=-1)
    s_pos = F.normalize(positives.detach(), dim=-1) @ x
    s_neg = F.normalize(negatives.detach(), dim=-1) @ x
    z = torch.logsumexp(alpha * s_neg, 0) + torch.logsumexp(-alpha * s_pos, 0) + alpha * delta
    return F.softplus(z)


def circle_memory_loss_batch(
    embeddings: torch.Tensor,
    labels: torch.Tensor,
    bank_vectors: torch.Tensor | None,
    bank_labels: torch.Tensor | None,
    alpha: float = 30.0,
    delta: float = 0.35,
) -> torch.Tensor:
    """Batch mean of :func:`circle_memory_loss`, positives/negatives split by label.

    Samples with no memorized positive (or no negative) contribute zero but
    still count in the mean.
    """
    if bank_vectors is None or len(bank_vectors) == 0:
        return torch.zeros((), dtype=embeddings.dtype, device=embeddings.device)
    x = F.normalize(embeddings, dim=-1)
    sims = alpha * (x @ F.normalize(bank_vectors.detach(), dim=-1).t())
    pos = labels[:, None] == bank_labels[None, :]
    valid = pos.any(1) & (~pos).any(1)
    if not bool(valid.any()):
        return embeddings.sum() * 0.0
    sims, pos = sims[valid], pos[valid]
    neg_inf = torch.finfo(sims.dtype).min
    lse_neg = torch.logsumexp(sims.masked_fill(pos, neg_inf), 1)
    lse_pos = torch.logsumexp((-sims).masked_fill(~pos, neg_inf), 1)
    per_sample = F.softplus(lse_neg + lse_pos + alpha * delta)
    return per_sample.sum() / len(embeddings)
