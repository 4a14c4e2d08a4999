"""Datasets, task streams and the class-balanced replay buffer.

Streams are built eagerly from a seed: every permutation, label draw and
subset index is fixed at construction, so ``(kind, seed)`` determines the
whole stream and rebuilding it is bit-identical. Tasks hold indices into a
shared Dataset; images are only materialized on request.
"""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_PIXELS = 3072


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass
class Dataset:
    images: np.ndarray  # (N, D) or (N, C, H, W), float64 in [0, 1] unless normalized
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    n_classes: int = 10
    name: str = ""
    mean: float | None = None
    std: float | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ConfigError(f"labels outside [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def sample_shape(self):
        return self.images.shape[1:]

    def normalized(self, mean, std):
        if std <= 0:
            raise ConfigError("normalization std must be positive")
        return Dataset((self.images - mean) / std, self.labels, self.split, self.n_classes,
                       self.name, float(mean), float(std))

    def class_indices(self, cls):
        return np.flatnonzero(self.labels == cls)


# ------------------------------------------------------------------- readers

def _open_bytes(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expect_magic=None):
    """Parse an unsigned-byte IDX file into an array shaped by its header."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"file too short for IDX magic ({len(raw)} bytes)", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic not in (IDX_IMAGES, IDX_LABELS) or (expect_magic and magic != expect_magic):
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"truncated IDX header: expected {header} bytes, got {len(raw)}", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataFormatError(f"IDX payload length mismatch: expected {expected} bytes, got {len(raw)}",
                              offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train", name="mnist", n_classes=10):
    """IDX image/label pair -> Dataset with flattened images scaled to [0, 1]."""
    imgs = read_idx(images_path, IDX_IMAGES)
    labels = read_idx(labels_path, IDX_LABELS)
    if len(imgs) != len(labels):
        raise DataFormatError(f"{len(imgs)} images vs {len(labels)} labels")
    x = imgs.reshape(len(imgs), -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), split, n_classes, name)


def load_mnist(root, name="mnist"):
    """(train, test) from a directory holding the four standard IDX files (optionally gzipped)."""
    root = Path(root)

    def find(stem):
        for cand in (stem, stem + ".gz"):
            if (root / cand).exists():
                return root / cand
        raise FileNotFoundError(root / stem)

    train = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"), "train", name)
    test = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"), "test", name)
    return train, test


def load_cifar_binary(paths, label_bytes=1, split="train", name="cifar10", n_classes=10):
    """CIFAR binary batches: records of ``label_bytes`` label bytes + 3072 pixels (NCHW).

    CIFAR-10 uses one label byte; CIFAR-100 uses two (coarse, fine) and the
    fine label (last byte) is kept.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    rec = label_bytes + CIFAR_PIXELS
    xs, ys = [], []
    for p in paths:
        raw = _open_bytes(p)
        if len(raw) == 0 or len(raw) % rec:
            raise DataFormatError(f"{p}: length {len(raw)} is not a multiple of record size {rec}",
                                  offset=len(raw) - len(raw) % rec)
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
        ys.append(arr[:, label_bytes - 1].astype(np.int64))
        xs.append(arr[:, label_bytes:].reshape(-1, 3, 32, 32))
    x = np.concatenate(xs).astype(np.float64) / 255.0
    return Dataset(x, np.concatenate(ys), split, n_classes, name)


def synthetic_dataset(n_per_class, n_classes=10, shape=(784,), seed=0, noise=0.35,
                      split="train", prototype_seed=None):
    """Gaussian blobs around per-class prototypes, clipped to [0, 1].

    Train and test splits built with the same ``prototype_seed`` share class
    prototypes but draw independent samples.
    """
    protos = np.random.default_rng(seed if prototype_seed is None else prototype_seed)
    centers = protos.uniform(0.0, 1.0, size=(n_classes,) + tuple(shape))
    rng = np.random.default_rng([seed, 1 if split == "train" else 2])
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = centers[labels] + noise * rng.standard_normal((len(labels),) + tuple(shape))
    return Dataset(np.clip(x, 0.0, 1.0), labels.astype(np.int64), split, n_classes, "synthetic")


def synthetic_pair(n_train_per_class, n_test_per_class, n_classes=10, shape=(784,), seed=0, noise=0.35):
    train = synthetic_dataset(n_train_per_class, n_classes, shape, seed, noise, "train", prototype_seed=seed)
    test = synthetic_dataset(n_test_per_class, n_classes, shape, seed, noise, "test", prototype_seed=seed)
    return train, test


def default_data_dir():
    """First existing MNIST directory among $STRUCTPLAST_DATA, ./data/mnist, ~/data/mnist."""
    cands = []
    if os.environ.get("STRUCTPLAST_DATA"):
        cands.append(Path(os.environ["STRUCTPLAST_DATA"]))
    cands += [Path.cwd() / "data" / "mnist", Path(__file__).resolve().parents[2] / "data" / "mnist",
              Path.home() / "data" / "mnist"]
    for c in cands:
        if (c / "train-images-idx3-ubyte").exists() or (c / "train-images-idx3-ubyte.gz").exists():
            return c
    return None


# ------------------------------------------------------------------- streams

@dataclass(frozen=True)
class Task:
    name: str
    classes: tuple
    train_idx: np.ndarray
    eval_idx: np.ndarray | None = None
    eval_source: str = "test"  # which dataset eval_idx points into
    epochs: int | None = 1
    steps: int | None = None  # fixed update budget; overrides epochs when set
    batch_size: int = 16
    permutation: np.ndarray | None = None
    train_labels: np.ndarray | None = None  # override aligned with train_idx
    eval_labels: np.ndarray | None = None
    label_map: dict | None = None
    evaluated: bool = True  # False for tasks excluded from reporting (easy 5+1 tasks)


@dataclass
class TaskStream:
    kind: str
    tasks: list
    train: Dataset
    test: Dataset | None
    n_outputs: int
    seed: int | None = None
    eval_mode: str = "current"  # "full" | "cumulative" | "current"
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.tasks)

    def _materialize(self, ds, idx, task, labels):
        x = ds.images[idx]
        if task.permutation is not None:
            n = len(x)
            x = x.reshape(n, -1)[:, task.permutation].reshape((n,) + ds.sample_shape)
        if labels is None:
            labels = ds.labels[idx]
            if task.label_map is not None:
                labels = np.array([task.label_map[int(c)] for c in labels], dtype=np.int64)
        return x, np.asarray(labels, dtype=np.int64)

    def train_data(self, k):
        t = self.tasks[k]
        return self._materialize(self.train, t.train_idx, t, t.train_labels)

    def eval_data(self, k):
        t = self.tasks[k]
        if t.eval_idx is None:
            return None
        ds = self.test if t.eval_source == "test" else self.train
        if ds is None:
            return None
        return self._materialize(ds, t.eval_idx, t, t.eval_labels)

    def eval_tasks(self, k):
        """Task indices evaluated at the checkpoint after task ``k``."""
        if self.eval_mode == "cumulative":
            return [j for j in range(k + 1) if self.tasks[j].evaluated]
        return [k] if self.tasks[k].evaluated else []

    def fingerprint(self):
        """Stable digest of every task definition (for determinism checks)."""
        import hashlib

        h = hashlib.sha256(self.kind.encode())
        for t in self.tasks:
            for arr in (t.train_idx, t.eval_idx, t.permutation, t.train_labels, t.eval_labels):
                h.update(b"|" if arr is None else np.ascontiguousarray(arr).tobytes())
            h.update(repr((t.classes, t.epochs, t.steps, t.batch_size, t.evaluated,
                           sorted((t.label_map or {}).items()))).encode())
        return h.hexdigest()


def _rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng, None
    return np.random.default_rng(rng), rng


def _take_per_class(ds, classes, per_class, rng):
    out = []
    for c in classes:
        idx = ds.class_indices(c)
        if per_class is not None:
            if per_class > idx.size:
                raise ConfigError(f"class {c} has {idx.size} samples, {per_class} requested")
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        out.append(idx)
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def make_iid_stream(train, test, epochs=100, batch_size=256):
    task = Task("iid", tuple(range(train.n_classes)), _frozen(np.arange(len(train))),
                None if test is None else _frozen(np.arange(len(test))),
                epochs=epochs, batch_size=batch_size)
    return TaskStream("iid", [task], train, test, train.n_classes, eval_mode="full")


def make_split_stream(train, test, n_tasks=5, rng=None, epochs=20, batch_size=256, replay=True):
    """Class-incremental pairs with a shared head; class order shuffled when ``rng`` is given."""
    C = train.n_classes
    if C % n_tasks:
        raise ConfigError(f"{C} classes cannot be split into {n_tasks} equal tasks")
    if rng is None:
        order, seed = np.arange(C), None
    else:
        gen, seed = _rng(rng)
        order = gen.permutation(C)
    per = C // n_tasks
    tasks = []
    for k in range(n_tasks):
        cls = tuple(sorted(int(c) for c in order[k * per:(k + 1) * per]))
        tr = _take_per_class(train, cls, None, None)
        ev = None if test is None else _take_per_class(test, cls, None, None)
        tasks.append(Task(f"split-{k}", cls, _frozen(tr), None if ev is None else _frozen(ev),
                          epochs=epochs, batch_size=batch_size))
    return TaskStream("split", tasks, train, test, C, seed, eval_mode="cumulative",
                      meta={"replay": replay, "class_order": [int(c) for c in order]})


def make_permuted_stream(train, n_tasks, subset_size=10000, rng=0, test=None, test_size=2000,
                         epochs=1, batch_size=16, identity_first=False):
    """Fixed image subset; each task applies its own pixel permutation."""
    if subset_size > len(train):
        raise ConfigError(f"subset of {subset_size} exceeds dataset of {len(train)}")
    gen, seed = _rng(rng)
    subset = _frozen(np.sort(gen.choice(len(train), size=subset_size, replace=False)))
    ev = None
    if test is not None:
        ev = _frozen(np.sort(gen.choice(len(test), size=min(test_size, len(test)), replace=False)))
    D = int(np.prod(train.sample_shape))
    tasks = []
    for k in range(n_tasks):
        perm = np.arange(D) if (identity_first and k == 0) else gen.permutation(D)
        tasks.append(Task(f"perm-{k}", tuple(range(train.n_classes)), subset, ev,
                          epochs=epochs, batch_size=batch_size, permutation=_frozen(perm)))
    return TaskStream("permuted", tasks, train, test, train.n_classes, seed)


def make_random_label_stream(train, n_tasks, subset_size=1200, rng=0, epochs=400, batch_size=16):
    """Fixed inputs, fresh uniform labels per task; evaluated on the same (relabelled) subset."""
    if subset_size > len(train):
        raise ConfigError(f"subset of {subset_size} exceeds dataset of {len(train)}")
    gen, seed = _rng(rng)
    subset = _frozen(np.sort(gen.choice(len(train), size=subset_size, replace=False)))
    tasks = []
    for k in range(n_tasks):
        labels = _frozen(gen.integers(0, train.n_classes, size=subset_size), np.int64)
        tasks.append(Task(f"randlabel-{k}", tuple(range(train.n_classes)), subset, subset, "train",
                          epochs=epochs, batch_size=batch_size, train_labels=labels, eval_labels=labels))
    return TaskStream("random_label", tasks, train, None, train.n_classes, seed)


def make_hard_easy_stream(train, rng=0, test=None, n_pairs=15, hard_classes=5, per_class=500,
                          steps=780, batch_size=32, hard_first=True):
    """Alternating hard (``hard_classes`` classes) and easy (1 class) tasks; classes never reused.

    Only hard tasks are flagged for evaluation.
    """
    need = n_pairs * (hard_classes + 1)
    if need > train.n_classes:
        raise ConfigError(f"{n_pairs} hard/easy pairs need {need} classes, dataset has {train.n_classes}")
    gen, seed = _rng(rng)
    order = gen.permutation(train.n_classes)[:need]
    tasks, pos = [], 0
    for k in range(2 * n_pairs):
        hard = (k % 2 == 0) == hard_first
        n = hard_classes if hard else 1
        cls = tuple(sorted(int(c) for c in order[pos:pos + n]))
        pos += n
        tr = _take_per_class(train, cls, per_class, gen)
        ev = None if test is None else _take_per_class(test, cls, None, None)
        tasks.append(Task(f"{'hard' if hard else 'easy'}-{k}", cls, _frozen(tr),
                          None if ev is None else _frozen(ev), epochs=None, steps=steps,
                          batch_size=batch_size, evaluated=hard))
    return TaskStream("hard_easy", tasks, train, test, train.n_classes, seed)


def make_binary_pair_stream(train, n_tasks, images_per_task=1200, rng=0, test=None,
                            epochs=10, batch_size=100):
    """Binary tasks over disjoint class pairs, labels remapped to {0, 1}."""
    if 2 * n_tasks > train.n_classes:
        raise ConfigError(f"{n_tasks} disjoint pairs need {2 * n_tasks} classes, dataset has {train.n_classes}")
    if images_per_task % 2:
        raise ConfigError("images_per_task must be even (balanced pairs)")
    gen, seed = _rng(rng)
    order = gen.permutation(train.n_classes)[:2 * n_tasks]
    tasks = []
    for k in range(n_tasks):
        a, b = int(order[2 * k]), int(order[2 * k + 1])
        tr = _take_per_class(train, (a, b), images_per_task // 2, gen)
        ev = None if test is None else _take_per_class(test, (a, b), None, None)
        tasks.append(Task(f"pair-{k}", (a, b), _frozen(tr), None if ev is None else _frozen(ev),
                          epochs=epochs, batch_size=batch_size, label_map={a: 0, b: 1}))
    return TaskStream("binary_pair", tasks, train, test, 2, seed)


# -------------------------------------------------------------------- replay

class ReplayBuffer:
    """Class-balanced exemplar store: first ``per_class`` samples seen per new class, ``total`` overall."""

    def __init__(self, per_class=50, total=200):
        if per_class < 1 or total < 1:
            raise ConfigError("replay capacities must be positive")
        self.per_class = per_class
        self.total = total
        self.x = {}
        self.y = {}

    def __len__(self):
        return sum(len(v) for v in self.y.values())

    def counts(self):
        return {c: len(v) for c, v in self.y.items()}

    def add_task(self, x, y):
        """Insert exemplars for classes not yet stored, in class order, respecting both caps."""
        y = np.asarray(y)
        for c in sorted(set(int(v) for v in y)):
            if c in self.y:
                continue
            room = min(self.per_class, self.total - len(self))
            if room <= 0:
                break
            idx = np.flatnonzero(y == c)[:room]
            self.x[c] = np.array(x[idx])
            self.y[c] = np.array(y[idx])

    def arrays(self):
        if not self.y:
            return None, None
        keys = sorted(self.y)
        return np.concatenate([self.x[c] for c in keys]), np.concatenate([self.y[c] for c in keys])

    def sample(self, n, rng):
        x, y = self.arrays()
        if x is None:
            raise ConfigError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, len(y), size=n)
        return x[idx], y[idx]


def replay_count(batch_size, fraction, buffer):
    """Replay samples per mixed batch: ceil(fraction * B), or 0 while the buffer is empty."""
    if buffer is None or len(buffer) == 0 or fraction <= 0:
        return 0
    return int(math.ceil(fraction * batch_size))


def replay_mix(buffer, cur_x, cur_y, fraction=0.5, rng=None, batch_size=None):
    """Compose a batch of ``ceil(fraction * B)`` replay samples plus ``B - that`` current samples."""
    B = batch_size or len(cur_y)
    r = replay_count(B, fraction, buffer)
    if r == 0:
        return cur_x, cur_y
    rng = rng if rng is not None else np.random.default_rng()
    n_cur = min(B - r, len(cur_y))
    rx, ry = buffer.sample(r, rng)
    return np.concatenate([cur_x[:n_cur], rx]), np.concatenate([cur_y[:n_cur], ry])
