"""Jitter statistics, shot-bucketed accuracy and embedding export."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch


@dataclass
class JitterTrace:
    subject: str
    kind: str  # "weight" | "feature"
    vectors: list[np.ndarray] = field(default_factory=list)
    iterations: list[int] = field(default_factory=list)

    def record(self, vector, iteration: int) -> None:
        v = vector.detach().double().cpu().numpy() if isinstance(vector, torch.Tensor) else np.asarray(vector, float)
        if self.vectors and v.shape != self.vectors[0].shape:
            raise ValueError("trace vectors must share one dimension")
        self.vectors.append(v.copy())
        self.iterations.append(int(iteration))

    def __len__(self):
        return len(self.vectors)


def angular_variance(vectors: Sequence | JitterTrace, k: int | None = None) -> float:
    """Mean squared angle (degrees^2) of the first ``k`` vectors around their mean direction.

    Every vector is normalized before averaging, so rescaling any one of them
    does not change the result.
    """
    if isinstance(vectors, JitterTrace):
        vectors = vectors.vectors
    v = np.asarray(vectors, dtype=np.float64)
    k = len(v) if k is None else k
    if not 1 <= k <= len(v):
        raise ValueError(f"prefix length {k} outside [1, {len(v)}]")
    v = v[:k]
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm vector in trace")
    u = v / norms[:, None]
    if k == 1:
        return 0.0
    mean = u.mean(axis=0)
    mnorm = np.linalg.norm(mean)
    if mnorm == 0:
        raise ValueError("mean direction is undefined")
    cos = np.clip(u @ (mean / mnorm), -1.0, 1.0)
    ang = np.degrees(np.arccos(cos))
    return float(np.mean(ang**2))


def jitter_curve(trace: Sequence | JitterTrace) -> list[tuple[int, float]]:
    """Angular variance at every prefix length. O(n) via running sums."""
    vecs = trace.vectors if isinstance(trace, JitterTrace) else trace
    v = np.asarray(vecs, dtype=np.float64)
    if len(v) < 2:
        raise ValueError("need at least two vectors")
    norms = np.linalg.norm(v, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm vector in trace")
    u = v / norms[:, None]
    out = [(1, 0.0)]
    running = u[0].copy()
    for k in range(2, len(u) + 1):
        running += u[k - 1]
        d = running / np.linalg.norm(running)
        ang = np.degrees(np.arccos(np.clip(u[:k] @ d, -1.0, 1.0)))
        out.append((k, float(np.mean(ang**2))))
    return out


def quarter_slopes(curve: Sequence[tuple[int, float]]) -> tuple[float, float]:
    """Least-squares slopes of the first and last quarter of a curve."""
    k = np.array([p[0] for p in curve], dtype=float)
    y = np.array([p[1] for p in curve], dtype=float)
    q = max(2, len(k) // 4)
    first = np.polyfit(k[:q], y[:q], 1)[0]
    last = np.polyfit(k[-q:], y[-q:], 1)[0]
    return float(first), float(last)


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "angular_variance_deg2"])
        w.writerows(curve)


# -- shot buckets -------------------------------------------------------------

def shot_bucket(count: int) -> str:
    if count > 100:
        return "many"
    if count >= 20:
        return "medium"
    return "few"


def shot_bucketed_accuracy(per_class_acc: Sequence[float], class_counts: Sequence[int]) -> dict:
    """Unweighted per-class mean accuracy in each bucket; empty buckets are left out."""
    if len(per_class_acc) != len(class_counts):
        raise ValueError("per_class_acc and class_counts differ in length")
    groups: dict[str, list[float]] = {}
    for acc, n in zip(per_class_acc, class_counts):
        groups.setdefault(shot_bucket(int(n)), []).append(float(acc))
    out = {name: float(np.mean(v)) for name, v in groups.items()}
    out["overall"] = float(np.mean(per_class_acc))
    return out


# -- embedding export -----------------------------------------------------------

_HEADER = struct.Struct("<qq")


@torch.no_grad()
def compute_embeddings(model, x, batch_size: int = 512) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(x), batch_size):
        xb = torch.as_tensor(x[i : i + batch_size]).float()
        out.append(model.extractor(xb).numpy())
    return np.concatenate(out).astype(np.float32)


def export_embeddings(model, dataset, path) -> str:
    """Write ``(n, d)`` little-endian int64 header + float32 rows, plus ``<path>.labels.csv``."""
    emb = compute_embeddings(model, _as_model_input(dataset.x))
    write_embedding_file(path, emb, dataset.y, dataset.indices, dataset.cameras)
    return str(path)


def write_embedding_file(path, emb: np.ndarray, labels, indices=None, cameras=None) -> None:
    emb = np.ascontiguousarray(emb, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*emb.shape))
        fh.write(emb.tobytes())
    indices = np.arange(len(labels)) if indices is None else indices
    with open(f"{path}.labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "index", "label", "camera"])
        for r, (i, y) in enumerate(zip(indices, labels)):
            w.writerow([r, int(i), int(y), "" if cameras is None else int(cameras[r])])


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        n, d = _HEADER.unpack(fh.read(_HEADER.size))
        emb = np.frombuffer(fh.read(), dtype="<f4").reshape(n, d)
    labels = np.loadtxt(f"{path}.labels.csv", delimiter=",", skiprows=1, usecols=2, dtype=int, ndmin=1)
    return emb.copy(), labels


def _as_model_input(x: np.ndarray) -> np.ndarray:
    # uint8 images are scaled and standardized the same way the trainers do
    if x.dtype == np.uint8:
        from .training import normalize_images

        return normalize_images(x)
    return x

