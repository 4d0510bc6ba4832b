"""Bounded FIFO memory of gradient-blocked vectors with tail-biased admission."""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
import torch


def admission_probabilities(class_counts: Sequence[float], beta: float) -> np.ndarray:
    """Class sampling distribution ``P_i = (1/N_i)**beta / sum_j (1/N_j)**beta``."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) == 0:
        raise ValueError("class_counts must be a non-empty 1-d sequence")
    if np.any(counts <= 0):
        raise ValueError("class counts must be positive")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    # log space keeps large counts / large beta finite
    logw = -beta * np.log(counts)
    w = np.exp(logw - logw.max())
    return w / w.sum()


@dataclass(frozen=True)
class SamplingConfig:
    beta: float
    class_counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "class_counts", tuple(int(c) for c in self.class_counts))
        admission_probabilities(self.class_counts, self.beta)

    @cached_property
    def probabilities(self) -> np.ndarray:
        return admission_probabilities(self.class_counts, self.beta)

    @cached_property
    def admission_rates(self) -> np.ndarray:
        """Per-sample Bernoulli rates ``P_y / max_j P_j``; the rarest class gets 1."""
        p = self.probabilities
        return p / p.max()


@dataclass(frozen=True)
class MemoryEntry:
    vector: torch.Tensor
    label: int
    iteration: int = 0


def select_for_memory(
    vectors: torch.Tensor,
    labels: torch.Tensor,
    config: SamplingConfig,
    generator: torch.Generator | None = None,
    iteration: int = 0,
) -> list[MemoryEntry]:
    """Admit each ``(vector, label)`` independently with its class admission rate."""
    if len(vectors) == 0:
        return []
    rates = torch.as_tensor(config.admission_rates, dtype=torch.float64)[labels.cpu()]
    draws = torch.rand(len(labels), generator=generator, dtype=torch.float64)
    keep = torch.nonzero(draws < rates).flatten().tolist()
    snap = vectors.detach()
    return [MemoryEntry(snap[i].clone(), int(labels[i]), iteration) for i in keep]


class MemoryBank:
    """FIFO queue of :class:`MemoryEntry`, oldest first."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._entries: deque[MemoryEntry] = deque(maxlen=self.capacity)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(tuple(self._entries))

    def push(self, entries: Iterable[MemoryEntry]) -> None:
        # deque(maxlen) drops from the left, so an oversized push keeps its newest items
        self._entries.extend(entries)

    def snapshot(self) -> tuple[MemoryEntry, ...]:
        return tuple(self._entries)

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Stacked ``(vectors, labels)``; raises on an empty bank."""
        if not self._entries:
            raise ValueError("memory bank is empty")
        vecs = torch.stack([e.vector for e in self._entries])
        labels = torch.tensor([e.label for e in self._entries], dtype=torch.long, device=vecs.device)
        return vecs, labels

    def sample(self, n: int, generator: torch.Generator | None = None):
        """Up to ``n`` entries drawn without replacement, as ``(vectors, labels)``."""
        vecs, labels = self.tensors()
        if len(labels) <= n:
            return vecs, labels
        idx = torch.randperm(len(labels), generator=generator)[:n].to(vecs.device)
        return vecs[idx], labels[idx]

    def occupancy(self, num_classes: int) -> list[int]:
        counts = np.bincount([e.label for e in self._entries], minlength=num_classes)
        return counts.tolist()

    def dump_csv(self, path) -> None:
        """One row per entry: vector components, then label and insertion iteration."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            dim = len(self._entries[0].vector) if self._entries else 0
            w.writerow([f"v{i}" for i in range(dim)] + ["label", "iteration"])
            for e in self._entries:
                w.writerow([f"{v:.8g}" for v in e.vector.float().cpu().tolist()] + [e.label, e.iteration])


def enqueue_dequeue(bank: MemoryBank, new_entries: Iterable[MemoryEntry]) -> MemoryBank:
    bank.push(new_entries)
    return bank


def snapshot(bank: MemoryBank) -> tuple[MemoryEntry, ...]:
    return bank.snapshot()


def load_bank_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, :-2], rows[:, -2].astype(int), rows[:, -1].astype(int)
