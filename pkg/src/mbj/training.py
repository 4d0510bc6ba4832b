"""Two-phase training: a conventional phase, then a low-lr phase with a memory bank.

The same loop serves classification (cross-entropy on raw logits) and metric
learning (CosFace on cosine logits); ``dml.py`` wraps the latter.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .analysis import JitterTrace
from .data import ArrayDataset
from .losses import (
    LossConfig,
    circle_memory_loss_batch,
    cosface_loss,
    cross_entropy,
    fuse_losses,
    memory_loss_cls,
)
from .memory import MemoryBank, SamplingConfig, enqueue_dequeue, select_for_memory
from .model import EmbeddingModel
from .record import RunRecord

log = logging.getLogger(__name__)

CLS_VARIANTS = ("baseline", "mbj", "rr", "fr", "fr+rj", "mbj-w", "mbj-f", "mbj-wf")
# which memories each variant keeps in phase 2
_MEMORY = {
    "baseline": (),
    "rr": (),
    "fr": (),
    "fr+rj": (),
    "mbj-f": ("feature",),
    "mbj-w": ("weight",),
    "mbj-wf": ("feature", "weight"),
}

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)[:, None, None]
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)[:, None, None]


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class ClsSchedule:
    phase1_epochs: int = 30
    phase2_epochs: int = 10
    phase1_lr: float = 0.1
    phase2_lr: float | None = None  # None: 0.1 x the final phase-1 rate
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    seed: int = 0
    loss: LossConfig = field(default_factory=lambda: LossConfig(eta=15.0))
    beta: float = 1.5
    memory_capacity: int | None = None  # None: 5 x num_classes
    memory_batch: int | None = None  # None: batch_size
    rj_sigma_ratio: float = 0.1
    augment: bool = False

    def __post_init__(self):
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.effective_phase2_lr >= self.phase1_lr:
            raise ValueError("phase2_lr must be smaller than phase1_lr")

    @property
    def final_phase1_lr(self) -> float:
        n = sum(1 for e in self.lr_decay_epochs if e < self.phase1_epochs)
        return self.phase1_lr * self.lr_decay_factor**n

    @property
    def effective_phase2_lr(self) -> float:
        return self.phase2_lr if self.phase2_lr is not None else 0.1 * self.final_phase1_lr

    def capacity(self, num_classes: int) -> int:
        return self.memory_capacity or 5 * num_classes


@dataclass
class PhaseResult:
    model: EmbeddingModel
    record: RunRecord
    bank: MemoryBank | None = None
    proto_bank: MemoryBank | None = None
    traces: dict[str, JitterTrace] = field(default_factory=dict)
    loader_histogram: np.ndarray | None = None


# -- data plumbing ---------------------------------------------------------------

def normalize_images(x: np.ndarray) -> np.ndarray:
    return ((x.astype(np.float32) / 255.0) - CIFAR_MEAN) / CIFAR_STD


def to_tensor(x: np.ndarray) -> torch.Tensor:
    if x.dtype == np.uint8:
        x = normalize_images(x)
    return torch.as_tensor(np.ascontiguousarray(x), dtype=torch.float32)


def iterate_batches(labels: torch.Tensor, batch_size: int, generator: torch.Generator, balanced: bool = False):
    """Index batches for one epoch: a uniform permutation, or class-balanced draws with replacement."""
    n = len(labels)
    if balanced:
        counts = torch.bincount(labels).double()
        weights = 1.0 / counts[labels]
        order = torch.multinomial(weights, n, replacement=True, generator=generator)
    else:
        order = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        idx = order[i : i + batch_size]
        if len(idx) > 1:  # batch norm cannot train on one sample
            yield idx


def augment_images(x: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Pad-4 random crop and horizontal flip."""
    n, _, h, w = x.shape
    padded = torch.nn.functional.pad(x, (4, 4, 4, 4))
    dx = torch.randint(0, 9, (n,), generator=generator)
    dy = torch.randint(0, 9, (n,), generator=generator)
    flip = torch.rand(n, generator=generator) < 0.5
    out = torch.empty_like(x)
    for i in range(n):
        crop = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
        out[i] = crop.flip(-1) if flip[i] else crop
    return out


@torch.no_grad()
def predict(model: EmbeddingModel, x: torch.Tensor, batch_size: int = 1024) -> tuple[torch.Tensor, torch.Tensor]:
    model.eval()
    embs, logits = [], []
    for i in range(0, len(x), batch_size):
        e, l = model(x[i : i + batch_size])
        embs.append(e)
        logits.append(l)
    return torch.cat(embs), torch.cat(logits)


def evaluate_classifier(model: EmbeddingModel, dataset: ArrayDataset) -> dict:
    _, logits = predict(model, to_tensor(dataset.x))
    pred = logits.argmax(1).numpy()
    y = dataset.y
    per_class = []
    for c in range(model.num_classes):
        mask = y == c
        per_class.append(float((pred[mask] == c).mean()) if mask.any() else float("nan"))
    return {"top1": float((pred == y).mean()), "per_class_top1": per_class}


def _check_finite(loss: torch.Tensor, where: str) -> None:
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss during {where}: {loss.item()}")


def _batch_loss(model, emb, y, loss_cfg: LossConfig) -> torch.Tensor:
    if model.normalize:
        return cosface_loss(emb, y, model.weight, loss_cfg.alpha, loss_cfg.delta)
    return cross_entropy(emb, y, model.weight)


def _feature_memory_loss(model, vecs, labels, loss_cfg: LossConfig) -> torch.Tensor:
    if model.normalize:
        if vecs is None or len(vecs) == 0:
            return torch.zeros((), dtype=model.weight.dtype)
        return cosface_loss(vecs.detach(), labels, model.weight, loss_cfg.alpha, loss_cfg.delta)
    return memory_loss_cls(vecs, labels, model.weight)


def _optimizer(model, lr, schedule: ClsSchedule):
    return torch.optim.SGD(
        model.parameters(), lr=lr, momentum=schedule.momentum, weight_decay=schedule.weight_decay
    )


# -- phase 1 ------------------------------------------------------------------------

def train_phase1(
    model: EmbeddingModel,
    train: ArrayDataset,
    schedule: ClsSchedule,
    test: ArrayDataset | None = None,
    record: RunRecord | None = None,
    evaluate=None,
) -> PhaseResult:
    """Conventional training with natural (uniform-over-images) sampling."""
    record = record or RunRecord("phase1")
    evaluate = evaluate or evaluate_classifier
    x, y = to_tensor(train.x), torch.as_tensor(train.y)
    gen = torch.Generator().manual_seed(schedule.seed)
    opt = _optimizer(model, schedule.phase1_lr, schedule)
    sched = torch.optim.lr_scheduler.MultiStepLR(
        opt, milestones=list(schedule.lr_decay_epochs), gamma=schedule.lr_decay_factor
    )
    hist = np.zeros(model.num_classes, dtype=np.int64)
    for epoch in range(schedule.phase1_epochs):
        model.train()
        total, n = 0.0, 0
        for idx in iterate_batches(y, schedule.batch_size, gen):
            xb, yb = x[idx], y[idx]
            hist += np.bincount(yb.numpy(), minlength=model.num_classes)
            if schedule.augment:
                xb = augment_images(xb, gen)
            emb, _ = model(xb)
            loss = _batch_loss(model, emb, yb, schedule.loss)
            _check_finite(loss, f"phase 1 epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        sched.step()
        row = {"epoch": epoch, "phase": "phase1", "loss_batch": total / max(n, 1), "loss_memory": 0.0}
        if test is not None:
            row.update(evaluate(model, test))
        record.log(**row)
    return PhaseResult(model, record, loader_histogram=hist)


# -- phase 2 ------------------------------------------------------------------------

def _resample(vecs, labels, n, generator):
    idx = torch.randint(0, len(labels), (n,), generator=generator)
    return vecs[idx], labels[idx]


def train_phase2(
    model: EmbeddingModel,
    train: ArrayDataset,
    schedule: ClsSchedule,
    variant: str = "mbj",
    test: ArrayDataset | None = None,
    record: RunRecord | None = None,
    evaluate=None,
    probe_index: int | None = None,
    probe_class: int | None = None,
    lr: float | None = None,
) -> PhaseResult:
    """Low-learning-rate fine-tuning with the memory wiring of ``variant``.

    Every step: forward the batch, admit gradient-blocked vectors into the
    memory, then step on ``eta * L_memory + L_batch``. ``probe_index`` and
    ``probe_class`` select a training sample and a class whose feature and
    prototype are recorded each iteration.
    """
    if variant == "mbj":
        variant = "mbj-w" if model.normalize else "mbj-f"
    if variant not in _MEMORY:
        raise ValueError(f"unknown variant {variant!r}; choose from {CLS_VARIANTS}")
    record = record or RunRecord(f"phase2-{variant}")
    evaluate = evaluate or evaluate_classifier
    C = model.num_classes
    x, y = to_tensor(train.x), torch.as_tensor(train.y)
    counts = np.bincount(train.y, minlength=C)
    sampling = SamplingConfig(schedule.beta, np.maximum(counts, 1))
    memories = _MEMORY[variant]
    bank = MemoryBank(schedule.capacity(C)) if "feature" in memories else None
    proto_bank = MemoryBank(schedule.capacity(C)) if "weight" in memories else None
    m_batch = schedule.memory_batch or schedule.batch_size
    eta = schedule.loss.eta

    data_gen = torch.Generator().manual_seed(schedule.seed + 1)
    mem_gen = torch.Generator().manual_seed(schedule.seed + 2)
    # fresh optimizer state
    opt = _optimizer(model, lr if lr is not None else schedule.effective_phase2_lr, schedule)

    traces: dict[str, JitterTrace] = {}
    if probe_index is not None:
        traces["feature"] = JitterTrace(f"sample-{probe_index}", "feature")
        probe_x = x[probe_index : probe_index + 1]
    if probe_class is not None:
        traces["weight"] = JitterTrace(f"class-{probe_class}", "weight")

    hist = np.zeros(C, dtype=np.int64)
    it = 0
    for epoch in range(schedule.phase2_epochs):
        sum_b = sum_m = 0.0
        steps = 0
        grew = False
        for idx in iterate_batches(y, schedule.batch_size, data_gen, balanced=(variant == "rr")):
            model.train()
            xb, yb = x[idx], y[idx]
            hist += np.bincount(yb.numpy(), minlength=C)
            if schedule.augment:
                xb = augment_images(xb, data_gen)
            emb, _ = model(xb)
            l_batch = _batch_loss(model, emb, yb, schedule.loss)
            l_mem = torch.zeros((), dtype=emb.dtype)

            if variant in ("fr", "fr+rj"):
                picked = select_for_memory(emb, yb, sampling, mem_gen, it)
                if picked:
                    vecs = torch.stack([e.vector for e in picked])
                    labs = torch.tensor([e.label for e in picked])
                    vecs, labs = _resample(vecs, labs, m_batch, mem_gen)
                    if variant == "fr+rj" and schedule.rj_sigma_ratio > 0:
                        sigma = schedule.rj_sigma_ratio * emb.detach().norm(dim=1).mean()
                        vecs = vecs + sigma * torch.randn(vecs.shape, generator=mem_gen)
                    l_mem = _feature_memory_loss(model, vecs, labs, schedule.loss)
            if bank is not None:
                before = len(bank)
                enqueue_dequeue(bank, select_for_memory(emb, yb, sampling, mem_gen, it))
                grew |= len(bank) != before
                if len(bank):
                    mv, ml = bank.sample(m_batch, mem_gen)
                    l_mem = l_mem + _feature_memory_loss(model, mv, ml, schedule.loss)
            if proto_bank is not None:
                present = torch.unique(yb)
                protos = model.weight[present]
                enqueue_dequeue(proto_bank, select_for_memory(protos, present, sampling, mem_gen, it))
                if len(proto_bank):
                    pv, pl = proto_bank.tensors()
                    l_mem = l_mem + circle_memory_loss_batch(
                        emb, yb, pv, pl, schedule.loss.alpha, schedule.loss.delta
                    )

            total = fuse_losses(l_mem, l_batch, eta)
            _check_finite(total, f"phase 2 epoch {epoch}")
            opt.zero_grad()
            total.backward()
            opt.step()
            sum_b += l_batch.item()
            sum_m += l_mem.item()
            steps += 1
            it += 1
            if traces:
                with torch.no_grad():
                    if "feature" in traces:
                        model.eval()
                        traces["feature"].record(model.extractor(probe_x)[0], it)
                    if "weight" in traces:
                        traces["weight"].record(model.weight[probe_class], it)

        if bank is not None and not len(bank) and not grew:
            log.warning("memory bank stayed empty for all of epoch %d", epoch)
        row = {
            "epoch": epoch,
            "phase": "phase2",
            "variant": variant,
            "loss_batch": sum_b / max(steps, 1),
            "loss_memory": sum_m / max(steps, 1),
        }
        row["bank_occupancy_per_class"] = (bank or proto_bank).occupancy(C) if (bank or proto_bank) else [0] * C
        if test is not None:
            row.update(evaluate(model, test))
        record.log(**row)
    return PhaseResult(model, record, bank, proto_bank, traces, hist)


def train_phase2_mbj(model, train, schedule, test=None, **kw) -> PhaseResult:
    return train_phase2(model, train, schedule, "mbj", test=test, **kw)


def run_ablation_variant(
    variant: str,
    train: ArrayDataset,
    schedule: ClsSchedule,
    test: ArrayDataset | None = None,
    phase1_state: dict | None = None,
    model_factory=None,
    **kw,
) -> PhaseResult:
    """Phase 2 of ``variant`` starting from a shared phase-1 state.

    ``baseline`` continues plain training at the phase-2 rate, so every
    variant gets the same budget.
    """
    if variant not in CLS_VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {CLS_VARIANTS}")
    model = model_factory()
    if phase1_state is not None:
        model.load_state_dict(phase1_state)
    return train_phase2(model, train, schedule, variant, test=test, **kw)


def observe_jitter(
    model: EmbeddingModel,
    train: ArrayDataset,
    schedule: ClsSchedule,
    epochs: int,
    probe_index: int,
    probe_class: int,
) -> PhaseResult:
    """Continue conventional training of a copy of ``model`` at the final
    phase-1 rate, recording the probe sample's feature and the probe class's
    prototype after every iteration."""
    observer = copy.deepcopy(model)
    return train_phase2(
        observer,
        train,
        replace(schedule, phase2_epochs=epochs),
        "baseline",
        probe_index=probe_index,
        probe_class=probe_class,
        lr=schedule.final_phase1_lr,
        record=RunRecord("observation"),
    )


def with_eta(schedule: ClsSchedule, eta: float) -> ClsSchedule:
    return replace(schedule, loss=replace(schedule.loss, eta=eta))


def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2**32))

