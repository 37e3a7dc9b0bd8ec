"""Synthetic datasets: random-features teacher/student, duplicates, label noise, 2-D blobs."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gradclust.numerics import ContractError, as_generator

DATASET_MAGIC = b"GCDS"
DATASET_VERSION = 1

ORIGINAL = "original"
CORRUPTED = "corrupted"
MARGIN = "margin"


def duplicate_tag(j: int) -> str:
    return f"duplicate-of:{j}"


@dataclass(frozen=True, eq=False)
class Dataset:
    """Examples are rows: ``features`` is ``(N, I)``.

    ``provenance`` holds exactly one tag per example: ``original``,
    ``duplicate-of:<j>``, ``corrupted`` or ``margin``.
    """

    features: np.ndarray
    labels: np.ndarray
    provenance: tuple[str, ...] = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise ContractError("features must be 2-D (N, I)")
        y = np.array(self.labels, dtype=np.int64).ravel()
        if y.size != x.shape[0]:
            raise ContractError("one label per example required")
        prov = tuple(self.provenance) or (ORIGINAL,) * x.shape[0]
        if len(prov) != x.shape[0]:
            raise ContractError("one provenance tag per example required")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "provenance", prov)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    def count(self, prefix: str) -> int:
        return sum(t.startswith(prefix) for t in self.provenance)


@dataclass(frozen=True)
class RFConfig:
    input_dim: int = 20
    teacher_hidden: int = 20
    student_hidden: int = 200
    n_train: int = 200
    seed: int = 0
    bias: float | None = None  # teacher bias; drawn N(0, 1) when None

    def __post_init__(self):
        for name in ("input_dim", "teacher_hidden", "student_hidden", "n_train"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")

    @property
    def overparam(self) -> float:
        return self.student_hidden / self.n_train


@dataclass(frozen=True)
class RFProblem:
    train: Dataset
    test: Dataset
    student_features: np.ndarray  # theta_1, (I, h_s), frozen
    teacher_features: np.ndarray  # (I, h_t)
    teacher_weights: np.ndarray  # (h_t,)
    teacher_bias: float


def _unit_columns(m):
    return m / np.linalg.norm(m, axis=0, keepdims=True)


def gen_rf(config: RFConfig) -> RFProblem:
    """Teacher/student random-features problem.

    Inputs are standard normal, labels are ``sign(relu(x^T T1) t2 + b)`` with
    unit-norm teacher feature columns. Test size equals train size.
    """
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(config.seed, spawn_key=(0x52F,))))
    I, ht, hs, n = config.input_dim, config.teacher_hidden, config.student_hidden, config.n_train
    t1 = _unit_columns(gen.standard_normal((I, ht)))
    t2 = gen.standard_normal(ht)
    b = float(gen.standard_normal()) if config.bias is None else float(config.bias)
    s1 = _unit_columns(gen.standard_normal((I, hs)))
    x = gen.standard_normal((2 * n, I))
    score = np.maximum(x @ t1, 0.0) @ t2 + b
    y = np.where(score >= 0, 1, -1)
    meta = {"kind": "rf", "seed": config.seed, "input_dim": I, "teacher_hidden": ht,
            "student_hidden": hs}
    train = Dataset(x[:n], y[:n], meta=dict(meta, split="train"))
    test = Dataset(x[n:], y[n:], meta=dict(meta, split="test"))
    return RFProblem(train, test, s1, t1, t2, b)


def rf_features(x: np.ndarray, student_features: np.ndarray) -> np.ndarray:
    """Frozen first student layer: ``relu(x @ theta_1)``."""
    return np.maximum(np.asarray(x) @ student_features, 0.0)


def student_dataset(problem: RFProblem, split="train") -> Dataset:
    d = problem.train if split == "train" else problem.test
    return replace(d, features=rf_features(d.features, problem.student_features))


def inject_duplicates(d: Dataset, n_distinct: int, target_fraction: float, rng) -> Dataset:
    """Overwrite examples with copies of ``n_distinct`` source points.

    ``ceil(target_fraction * N)`` slots end up in duplicate groups (sources
    included), split as evenly as possible between the sources. Every group
    member is tagged ``duplicate-of:<source>``.
    """
    n = len(d)
    if not 0 <= target_fraction < 1:
        raise ContractError("target_fraction must be in [0, 1)")
    slots = math.ceil(target_fraction * n - 1e-12)
    if slots == 0:
        return d
    if n_distinct < 1 or slots < 2 * n_distinct:
        raise ContractError(
            f"{slots} duplicate slots cannot hold {n_distinct} groups of at least two copies")
    gen = as_generator(rng)
    chosen = gen.permutation(n)[:slots]
    sources = chosen[:n_distinct]
    x = np.array(d.features)
    y = np.array(d.labels)
    prov = list(d.provenance)
    # member m of `chosen` joins group m % n_distinct, so group sizes differ by at most one
    for m, idx in enumerate(chosen):
        src = sources[m % n_distinct]
        x[idx] = x[src]
        y[idx] = y[src]
        prov[idx] = duplicate_tag(int(src))
    return Dataset(x, y, tuple(prov), dict(d.meta, duplicates=n_distinct, dup_fraction=target_fraction))


def corrupt_labels(d: Dataset, fraction: float, rng, num_classes: int | None = None) -> Dataset:
    """Give ``floor(fraction * N)`` random examples a different, uniformly chosen label."""
    if not 0 <= fraction <= 1:
        raise ContractError("fraction must be in [0, 1]")
    n = len(d)
    count = math.floor(fraction * n + 1e-12)
    if count == 0:
        return d
    gen = as_generator(rng)
    y = np.array(d.labels)
    binary = set(np.unique(y).tolist()) <= {-1, 1}
    idx = np.sort(gen.permutation(n)[:count])
    if binary:
        y[idx] = -y[idx]
    else:
        c = num_classes or int(y.max()) + 1
        if c < 2:
            raise ContractError("need at least two classes to corrupt labels")
        shift = gen.integers(1, c, size=count)
        y[idx] = (y[idx] + shift) % c
    prov = list(d.provenance)
    for i in idx:
        prov[i] = CORRUPTED
    return Dataset(d.features, y, tuple(prov), dict(d.meta, corrupted=fraction))


def gen_two_blobs(n_per_class: int, separation: float, overlap_count: int, rng, spread=0.5) -> Dataset:
    """Two Gaussian blobs on either side of the ``x0 = 0`` line, labels +1 / -1.

    Margin points come in mirrored pairs ``(p, +1)`` and ``(-p, -1)`` close to
    the boundary. For a bias-free linear model both members of a pair have the
    same gradient even though they sit far apart in input space. All pairs
    share one location (up to 1e-9 jitter), so margin gradients nearly coincide.
    """
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    gen = as_generator(rng)
    half = separation / 2.0
    pos = gen.standard_normal((n_per_class, 2)) * spread
    neg = gen.standard_normal((n_per_class, 2)) * spread
    # fold each blob onto its side of the boundary so the classes stay separable
    pos[:, 0] = half + np.abs(pos[:, 0])
    neg[:, 0] = -half - np.abs(neg[:, 0])
    x = [pos, neg]
    y = [np.ones(n_per_class, int), -np.ones(n_per_class, int)]
    prov = [ORIGINAL] * (2 * n_per_class)
    if overlap_count:
        anchor = np.array([0.1 * max(half, 0.1), 2.0 * spread + half])
        pts, labs = [], []
        for m in range(overlap_count):
            jitter = gen.standard_normal(2) * 1e-9
            sign = 1 if m % 2 == 0 else -1
            pts.append(sign * anchor + jitter)
            labs.append(sign)
        x.append(np.array(pts))
        y.append(np.array(labs))
        prov += [MARGIN] * overlap_count
    return Dataset(np.concatenate(x), np.concatenate(y), tuple(prov),
                   {"kind": "blobs", "separation": separation})


def save_dataset(d: Dataset, path) -> None:
    """Binary container: magic, header length, JSON header, float64 features, int64 labels."""
    header = json.dumps({
        "version": DATASET_VERSION,
        "n": len(d),
        "dim": d.dim,
        "provenance": list(d.provenance),
        "meta": d.meta,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(d.features, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(d.labels, dtype="<i8").tobytes())


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != DATASET_MAGIC:
        raise ContractError(f"{path}: not a dataset file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    header = json.loads(raw[12:12 + hlen])
    if header["version"] != DATASET_VERSION:
        raise ContractError(f"{path}: unsupported dataset version {header['version']}")
    n, dim = header["n"], header["dim"]
    off = 12 + hlen
    x = np.frombuffer(raw, dtype="<f8", count=n * dim, offset=off).reshape(n, dim)
    y = np.frombuffer(raw, dtype="<i8", count=n, offset=off + 8 * n * dim)
    return Dataset(x.astype(np.float64), y.astype(np.int64), tuple(header["provenance"]), header["meta"])
