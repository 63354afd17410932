"""Seeded synthetic classification data, splits and the binary dataset cache."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"MQDS1"
# magic, input_dim, classes, n_train, n_val, n_test, seed, difficulty
_HEADER = struct.Struct("<5sIIIIIqd")


@dataclass
class DatasetSplit:
    train: tuple[np.ndarray, np.ndarray]
    val: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]
    seed: int
    difficulty: float = 0.0
    classes: int = 2

    @property
    def input_dim(self) -> int:
        return self.train[0].shape[1]

    def pool(self) -> tuple[np.ndarray, np.ndarray]:
        """Train and validation parts together (the full training split used for retraining)."""
        return (np.concatenate([self.train[0], self.val[0]]),
                np.concatenate([self.train[1], self.val[1]]))


def split_sizes(n: int) -> tuple[int, int, int]:
    n_test = round(0.1 * n)
    pool = n - n_test
    n_val = round(0.1 * pool)
    return pool - n_val, n_val, n_test


def gen_synthetic_classification(n: int, input_dim: int, classes: int, difficulty: float,
                                 seed: int) -> DatasetSplit:
    """Gaussian clusters, one per class when ``difficulty == 0``.

    For ``difficulty > 0`` every class becomes a mixture of several clusters
    (not linearly separable) and the cluster noise grows with ``difficulty``.
    """
    if n < 100:
        raise ConfigError(f"need n >= 100 samples, got {n}")
    if classes < 2:
        raise ConfigError("need at least two classes")
    rng = np.random.default_rng(seed)
    clusters = 1 if difficulty <= 0 else 4
    radius = 5.0 if difficulty <= 0 else 4.0
    centers = rng.standard_normal((classes * clusters, input_dim))
    if clusters == 1 and classes <= input_dim:
        # orthogonal means keep the separable task separable for every seed
        centers = np.linalg.qr(centers.T)[0].T
    centers *= radius / np.linalg.norm(centers, axis=1, keepdims=True)
    noise = 1.0 + difficulty

    labels = np.arange(n) % classes
    rng.shuffle(labels)
    which = rng.integers(0, clusters, size=n)
    x = centers[labels * clusters + which] + noise * rng.standard_normal((n, input_dim))
    y = labels.astype(np.int32)

    n_train, n_val, n_test = split_sizes(n)
    order = rng.permutation(n)
    tr, va, te = np.split(order, [n_train, n_train + n_val])
    return DatasetSplit((x[tr], y[tr]), (x[va], y[va]), (x[te], y[te]), seed, float(difficulty), classes)


def save_dataset(path: str | Path, data: DatasetSplit) -> None:
    header = _HEADER.pack(MAGIC, data.input_dim, data.classes, len(data.train[1]), len(data.val[1]),
                          len(data.test[1]), data.seed, data.difficulty)
    with open(path, "wb") as fh:
        fh.write(header)
        for x, y in (data.train, data.val, data.test):
            fh.write(np.ascontiguousarray(x, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(y, dtype="<i4").tobytes())


def read_header(path: str | Path) -> tuple | None:
    try:
        with open(path, "rb") as fh:
            raw = fh.read(_HEADER.size)
    except FileNotFoundError:
        return None
    if len(raw) < _HEADER.size:
        return None
    fields = _HEADER.unpack(raw)
    return fields if fields[0] == MAGIC else None


def load_dataset(path: str | Path) -> DatasetSplit:
    header = read_header(path)
    if header is None:
        raise ConfigError(f"{path}: not a dataset cache (bad magic or truncated header)")
    _, dim, classes, n_train, n_val, n_test, seed, difficulty = header
    buf = Path(path).read_bytes()[_HEADER.size:]
    parts, offset = [], 0
    for count in (n_train, n_val, n_test):
        nx = count * dim * 8
        x = np.frombuffer(buf, dtype="<f8", count=count * dim, offset=offset).reshape(count, dim)
        offset += nx
        y = np.frombuffer(buf, dtype="<i4", count=count, offset=offset)
        offset += count * 4
        parts.append((x.astype(np.float64), y.astype(np.int32)))
    if offset != len(buf):
        raise ConfigError(f"{path}: payload size does not match header")
    return DatasetSplit(parts[0], parts[1], parts[2], int(seed), float(difficulty), int(classes))


def load_or_generate(path: str | Path | None, n: int, input_dim: int, classes: int, difficulty: float,
                     seed: int) -> DatasetSplit:
    """Read the cache at ``path`` if its header matches the request, else regenerate and rewrite it."""
    if path is not None:
        header = read_header(path)
        want = (MAGIC, input_dim, classes, *split_sizes(n), seed, float(difficulty))
        if header == want:
            return load_dataset(path)
    data = gen_synthetic_classification(n, input_dim, classes, difficulty, seed)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        save_dataset(path, data)
    return data


def batches(x: np.ndarray, y: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Endless stream of mini-batches, reshuffled every pass."""
    n = len(y)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            idx = order[start:start + batch_size]
            yield x[idx], y[idx]
