"""Metric learning with a prototype memory, and retrieval evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .data import ArrayDataset
from .losses import LossConfig
from .training import ClsSchedule, PhaseResult, predict, to_tensor, train_phase1, train_phase2


@dataclass
class DmlSchedule(ClsSchedule):
    loss: LossConfig = field(default_factory=lambda: LossConfig(eta=1 / 15, alpha=30.0, delta=0.35))


def average_precision(good: np.ndarray) -> float:
    """AP of a ranked list given a boolean relevance vector."""
    hits = np.flatnonzero(good)
    if len(hits) == 0:
        raise ValueError("no relevant item in ranking")
    return float(np.mean(np.arange(1, len(hits) + 1) / (hits + 1)))


def evaluate_retrieval(
    query_emb,
    query_ids,
    gallery_emb,
    gallery_ids,
    query_cams=None,
    gallery_cams=None,
    exclude_self: bool = False,
) -> tuple[float, float]:
    """Cosine-similarity ranking; returns ``(mAP, rank1)``.

    Gallery items sharing both identity and camera with the query are dropped
    before ranking. With ``exclude_self`` the gallery is the query set itself
    and each query's own row is dropped.
    """
    q = F.normalize(torch.as_tensor(np.asarray(query_emb), dtype=torch.float64), dim=1)
    g = F.normalize(torch.as_tensor(np.asarray(gallery_emb), dtype=torch.float64), dim=1)
    sims = (q @ g.t()).numpy()
    qids, gids = np.asarray(query_ids), np.asarray(gallery_ids)
    aps, r1 = [], []
    for i in range(len(qids)):
        keep = np.ones(len(gids), dtype=bool)
        if query_cams is not None and gallery_cams is not None:
            keep &= ~((gids == qids[i]) & (np.asarray(gallery_cams) == query_cams[i]))
        if exclude_self:
            keep[i] = False
        order = np.flatnonzero(keep)[np.argsort(-sims[i, keep], kind="stable")]
        good = gids[order] == qids[i]
        if not good.any():
            raise ValueError(f"query {i} (id {qids[i]}) has no match in the gallery")
        aps.append(average_precision(good))
        r1.append(float(good[0]))
    return float(np.mean(aps)), float(np.mean(r1))


def make_retrieval_evaluator(query: ArrayDataset, gallery: ArrayDataset):
    qx, gx = to_tensor(query.x), to_tensor(gallery.x)

    def evaluate(model, _unused=None) -> dict:
        qe, _ = predict(model, qx)
        ge, _ = predict(model, gx)
        mAP, rank1 = evaluate_retrieval(qe.numpy(), query.y, ge.numpy(), gallery.y, query.cameras, gallery.cameras)
        return {"mAP": mAP, "rank1": rank1}

    return evaluate


def train_phase1_dml(model, train, schedule: DmlSchedule, query=None, gallery=None) -> PhaseResult:
    """CosFace training against the live prototypes."""
    if not model.normalize:
        raise ValueError("metric learning needs a cosine-mode model")
    evaluate = make_retrieval_evaluator(query, gallery) if query is not None else None
    return train_phase1(model, train, schedule, test=query, evaluate=evaluate)


def train_phase2_mbj_dml(
    model, train, schedule: DmlSchedule, query=None, gallery=None, variant: str = "mbj", **kw
) -> PhaseResult:
    """CosFace on live prototypes plus the circle-style loss on memorized ones."""
    if not model.normalize:
        raise ValueError("metric learning needs a cosine-mode model")
    evaluate = make_retrieval_evaluator(query, gallery) if query is not None else None
    return train_phase2(model, train, schedule, variant, test=query, evaluate=evaluate, **kw)
