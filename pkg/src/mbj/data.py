"""Long-tailed dataset construction and synthetic embedding sets."""

from __future__ import annotations

import csv
import json
import math
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DATA_ROOT_ENV = "MBJ_DATA_ROOT"


class DataUnavailableError(FileNotFoundError):
    """A dataset could not be resolved on disk."""


@dataclass(frozen=True)
class LongTailProfile:
    class_count: int
    max_count: int
    imbalance_ratio: float
    per_class_counts: tuple[int, ...]

    def __post_init__(self):
        counts = self.per_class_counts
        if len(counts) != self.class_count:
            raise ValueError("per_class_counts must have class_count entries")
        if any(c < 1 for c in counts):
            raise ValueError("every class needs at least one sample")
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise ValueError("per_class_counts must be non-increasing")

    @property
    def total(self) -> int:
        return sum(self.per_class_counts)


@dataclass(frozen=True)
class HeadTailSplit:
    head_class_count: int
    tail_images_per_class: int
    class_assignment: Mapping[int, str]

    @property
    def head_classes(self) -> list[int]:
        return sorted(c for c, kind in self.class_assignment.items() if kind == "head")

    @property
    def tail_classes(self) -> list[int]:
        return sorted(c for c, kind in self.class_assignment.items() if kind == "tail")


@dataclass
class ArrayDataset:
    """In-memory dataset. ``indices`` point back into the source it was cut from."""

    x: np.ndarray
    y: np.ndarray
    indices: np.ndarray | None = None
    cameras: np.ndarray | None = None
    name: str = "dataset"

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError("x and y length mismatch")
        if self.indices is None:
            self.indices = np.arange(len(self.y))

    def __len__(self) -> int:
        return len(self.y)

    def class_counts(self, num_classes: int | None = None) -> np.ndarray:
        n = num_classes if num_classes is not None else int(self.y.max()) + 1
        return np.bincount(self.y, minlength=n)

    def take(self, idx: np.ndarray) -> "ArrayDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ArrayDataset(
            self.x[idx],
            self.y[idx],
            indices=self.indices[idx],
            cameras=None if self.cameras is None else self.cameras[idx],
            name=self.name,
        )


@dataclass
class SyntheticEmbeddingSet(ArrayDataset):
    class_means: np.ndarray = field(default=None)
    within_class_scale: float = 0.0
    per_class_counts: tuple[int, ...] = ()


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def build_longtail_profile(class_count: int, max_count: int, imbalance_ratio: float) -> LongTailProfile:
    """Exponential decay ``n_i = n_max * IR**(-i/(C-1))`` rounded half-up."""
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if imbalance_ratio < 1:
        raise ValueError(f"imbalance_ratio must be >= 1, got {imbalance_ratio}")
    if max_count < imbalance_ratio:
        raise ValueError("max_count must be >= imbalance_ratio or the tail class would be empty")
    counts = tuple(
        _round_half_up(max_count * imbalance_ratio ** (-i / (class_count - 1)))
        for i in range(class_count)
    )
    if min(counts) < 1:
        raise ValueError("profile produces an empty class")
    return LongTailProfile(class_count, max_count, float(imbalance_ratio), counts)


def build_single_tail_profile(class_count: int, max_count: int, tail_count: int) -> LongTailProfile:
    """All classes at ``max_count`` except the last, which keeps ``tail_count``."""
    if not 1 <= tail_count <= max_count:
        raise ValueError("tail_count must be in [1, max_count]")
    counts = (max_count,) * (class_count - 1) + (tail_count,)
    return LongTailProfile(class_count, max_count, max_count / tail_count, counts)


def profile_from_counts(counts: Sequence[int]) -> LongTailProfile:
    counts = tuple(int(c) for c in counts)
    return LongTailProfile(len(counts), counts[0], counts[0] / counts[-1], counts)


def build_head_tail_split(
    class_ids: Iterable[int], head_class_count: int, tail_images_per_class: int = 5
) -> HeadTailSplit:
    """The first ``head_class_count`` ids (sorted) are head classes, the rest are tail."""
    ids = sorted(set(int(c) for c in class_ids))
    if not 0 < head_class_count <= len(ids):
        raise ValueError("head_class_count out of range")
    if tail_images_per_class < 1:
        raise ValueError("tail_images_per_class must be positive")
    assignment = {c: ("head" if i < head_class_count else "tail") for i, c in enumerate(ids)}
    return HeadTailSplit(head_class_count, tail_images_per_class, assignment)


def subset_dataset(
    dataset: ArrayDataset, profile_or_split: LongTailProfile | HeadTailSplit, seed: int = 0
) -> ArrayDataset:
    """Cut ``dataset`` down to the per-class counts of a profile or head/tail split.

    Each class keeps the first k samples of a seeded shuffle; the kept indices
    are returned in source order, so the operation is idempotent.
    """
    rng = np.random.default_rng(seed)
    if isinstance(profile_or_split, LongTailProfile):
        wanted = {c: n for c, n in enumerate(profile_or_split.per_class_counts)}
    else:
        k = profile_or_split.tail_images_per_class
        wanted = {
            c: (None if kind == "head" else k)
            for c, kind in profile_or_split.class_assignment.items()
        }
    keep = []
    for c in sorted(wanted):
        idx = np.flatnonzero(dataset.y == c)
        n = wanted[c]
        if n is None:
            keep.append(idx)
            continue
        if len(idx) < n:
            raise DataUnavailableError(
                f"class {c} has {len(idx)} samples, profile needs {n}"
            )
        perm = rng.permutation(len(idx))
        keep.append(np.sort(idx[perm[:n]]))
    return dataset.take(np.sort(np.concatenate(keep)))


def _unit_vectors(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def make_synthetic_embeddings(
    class_count: int,
    dim: int,
    profile: LongTailProfile | Sequence[int],
    within_class_scale: float,
    seed: int = 0,
    class_means: np.ndarray | None = None,
) -> SyntheticEmbeddingSet:
    """Gaussian mixture around ``class_count`` unit-norm means.

    Pass ``class_means`` from a training set to draw a test split of the same
    classes with fresh noise.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    if within_class_scale < 0:
        raise ValueError("within_class_scale must be >= 0")
    counts = tuple(profile.per_class_counts if isinstance(profile, LongTailProfile) else profile)
    if len(counts) != class_count:
        raise ValueError("profile does not match class_count")
    rng = np.random.default_rng(seed)
    means = _unit_vectors(rng, class_count, dim) if class_means is None else np.asarray(class_means)
    if means.shape != (class_count, dim):
        raise ValueError("class_means has the wrong shape")
    y = np.repeat(np.arange(class_count), counts)
    x = means[y] + within_class_scale * rng.standard_normal((len(y), dim))
    return SyntheticEmbeddingSet(
        x.astype(np.float32),
        y,
        name="synthetic",
        class_means=means,
        within_class_scale=float(within_class_scale),
        per_class_counts=counts,
    )


@dataclass
class RetrievalBenchmark:
    train: ArrayDataset
    query: ArrayDataset
    gallery: ArrayDataset
    split: HeadTailSplit


def make_synthetic_retrieval(
    head_classes: int = 20,
    tail_classes: int = 100,
    head_count: int = 60,
    tail_count: int = 5,
    test_ids: int = 60,
    test_images_per_id: int = 10,
    latent_dim: int = 16,
    input_dim: int = 64,
    within_class_scale: float = 0.2,
    nuisance_rank: int = 8,
    nuisance_scale: float = 0.6,
    seed: int = 0,
) -> RetrievalBenchmark:
    """Retrieval stand-in with disjoint train/test identities.

    Identity means live in a ``latent_dim`` space and are lifted into
    ``input_dim`` by a fixed random map; every image also carries variation
    along a shared low-rank nuisance subspace that the extractor has to learn
    to ignore. Test identities never appear in training. Cameras are drawn
    uniformly from six ids so same-camera matches can be excluded.
    """
    rng = np.random.default_rng(seed)
    n_train = head_classes + tail_classes
    lift = rng.standard_normal((latent_dim, input_dim)) / math.sqrt(latent_dim)
    nuisance = rng.standard_normal((nuisance_rank, input_dim)) / math.sqrt(nuisance_rank)

    def draw(means: np.ndarray, counts: Sequence[int], basis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = np.repeat(np.arange(len(counts)), counts)
        z = means[y] + within_class_scale * rng.standard_normal((len(y), latent_dim))
        x = z @ lift + nuisance_scale * rng.standard_normal((len(y), len(basis))) @ basis
        return x.astype(np.float32), y

    train_means = _unit_vectors(rng, n_train, latent_dim)
    source_counts = [head_count] * n_train
    x, y = draw(train_means, source_counts, nuisance)
    source = ArrayDataset(x, y, name="synthetic-retrieval")
    split = build_head_tail_split(range(n_train), head_classes, tail_count)
    train = subset_dataset(source, split, seed=seed)

    test_means = _unit_vectors(rng, test_ids, latent_dim)
    tx, ty = draw(test_means, [test_images_per_id] * test_ids, nuisance)
    ty = ty + n_train  # identity labels never collide with training ids
    cams = rng.integers(0, 6, size=len(ty))
    # two queries per identity, the rest go to the gallery
    is_query = np.zeros(len(ty), dtype=bool)
    for c in range(n_train, n_train + test_ids):
        is_query[np.flatnonzero(ty == c)[:2]] = True
    test = ArrayDataset(tx, ty, cameras=cams, name="synthetic-retrieval-test")
    return RetrievalBenchmark(
        train=train,
        query=test.take(np.flatnonzero(is_query)),
        gallery=test.take(np.flatnonzero(~is_query)),
        split=split,
    )


# -- real data on disk ------------------------------------------------------

def data_root(explicit: str | os.PathLike | None = None) -> Path:
    return Path(explicit or os.environ.get(DATA_ROOT_ENV, "data"))


def load_cifar(name: str, root: str | os.PathLike | None = None, train: bool = True) -> ArrayDataset:
    """Read the python-pickle CIFAR release (``cifar-10-batches-py`` / ``cifar-100-python``)."""
    base = data_root(root)
    if name == "cifar10":
        folder = base / "cifar-10-batches-py"
        files = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
        key = b"labels"
    elif name == "cifar100":
        folder = base / "cifar-100-python"
        files = ["train"] if train else ["test"]
        key = b"fine_labels"
    else:
        raise ValueError(f"unknown CIFAR variant {name!r}")
    xs, ys = [], []
    for fname in files:
        path = folder / fname
        if not path.exists():
            raise DataUnavailableError(f"{name}: expected {path} (set ${DATA_ROOT_ENV})")
        with open(path, "rb") as fh:
            entry = pickle.load(fh, encoding="bytes")
        xs.append(np.asarray(entry[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        ys.extend(entry[key])
    return ArrayDataset(np.concatenate(xs), np.asarray(ys), name=name)


def load_market1501(root: str | os.PathLike | None = None, size=(128, 64)):
    """Load Market-1501 as ``(train, query, gallery)`` with ids and cameras parsed from filenames."""
    from PIL import Image

    base = data_root(root) / "Market-1501-v15.09.15"
    if not base.exists():
        raise DataUnavailableError(f"market1501: expected {base} (set ${DATA_ROOT_ENV})")

    def read(sub: str, relabel: bool):
        xs, pids, cams = [], [], []
        for path in sorted((base / sub).glob("*.jpg")):
            pid, rest = path.name.split("_", 1)
            pid = int(pid)
            if pid < 0:
                continue  # distractors
            img = Image.open(path).convert("RGB").resize((size[1], size[0]))
            xs.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
            pids.append(pid)
            cams.append(int(rest[1]))
        pids = np.asarray(pids)
        if relabel:
            _, pids = np.unique(pids, return_inverse=True)
        return ArrayDataset(np.stack(xs), pids, cameras=np.asarray(cams), name=f"market1501-{sub}")

    return read("bounding_box_train", True), read("query", False), read("bounding_box_test", False)


# -- manifests ---------------------------------------------------------------

def write_manifest(path: str | os.PathLike, dataset: ArrayDataset, split: str) -> None:
    with open(path, "w") as fh:
        for idx, label in zip(dataset.indices, dataset.y):
            fh.write(json.dumps({"path_or_index": int(idx), "label": int(label), "split": split}) + "\n")


def read_manifest(path: str | os.PathLike) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_profile_csv(path: str | os.PathLike, counts: Sequence[int]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "count"])
        for c, n in enumerate(counts):
            w.writerow([c, int(n)])
