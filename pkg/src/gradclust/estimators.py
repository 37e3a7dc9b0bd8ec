"""Gradient-mean estimators evaluated at a fixed model snapshot.

All estimators work from a :class:`GradientTable`, the ``(N, d)`` matrix of
per-example gradients at one snapshot. Sampling is with replacement; the
stratified estimator draws one example per cluster and weights it by
``N_k / N``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from gradclust.model import Model, per_example_gradients
from gradclust.numerics import ContractError, NumericalError, RngStream, as_generator

# bound on floats materialized per sampling chunk
_CHUNK_FLOATS = 1 << 22


def dataset_fingerprint(dataset) -> str:
    h = hashlib.sha1()
    h.update(np.ascontiguousarray(dataset.features).tobytes())
    h.update(np.ascontiguousarray(dataset.labels).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class GradientTable:
    per_example: np.ndarray  # (N, d)
    fingerprint: str = ""

    def __post_init__(self):
        g = np.asarray(self.per_example, dtype=np.float64)
        if g.ndim != 2:
            raise ContractError("per-example gradients must be (N, d)")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite per-example gradient")
        g.flags.writeable = False
        object.__setattr__(self, "per_example", g)

    @classmethod
    def from_model(cls, model: Model, dataset) -> GradientTable:
        return cls(per_example_gradients(model, dataset.features, dataset.labels),
                   dataset_fingerprint(dataset))

    @property
    def n(self):
        return self.per_example.shape[0]

    @property
    def d(self):
        return self.per_example.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.per_example.mean(axis=0)


@dataclass(frozen=True)
class GradientEstimate:
    vector: np.ndarray
    estimator: str
    indices: np.ndarray
    draw_id: int = 0


class Estimator:
    """Base class: subclasses implement ``_sample(table, gen, n)``."""

    name = "base"

    def _sample(self, table, gen, n):
        raise NotImplementedError

    def sample(self, table: GradientTable, rng, n: int):
        """``n`` independent estimates ``(n, d)`` and their sample indices."""
        return self._sample(table, as_generator(rng), n)

    def chunk_size(self, table):
        return 1

    def estimate(self, table: GradientTable, rng, draw_id: int = 0) -> GradientEstimate:
        est, idx = self._sample(table, as_generator(rng), 1)
        return GradientEstimate(est[0], self.name, idx[0], draw_id)


class FullGradient(Estimator):
    name = "full"

    def _sample(self, table, gen, n):
        g = table.mean
        return np.broadcast_to(g, (n, table.d)).copy(), np.broadcast_to(np.arange(table.n), (n, table.n))

    def chunk_size(self, table):
        return max(1, _CHUNK_FLOATS // table.d)


class MiniBatch(Estimator):
    """SG-B: mean gradient of ``B`` examples drawn uniformly with replacement."""

    def __init__(self, batch_size: int, name: str | None = None):
        if batch_size < 1:
            raise ContractError("batch size must be >= 1")
        self.batch_size = batch_size
        self.name = name or f"sg{batch_size}"

    def _sample(self, table, gen, n):
        if self.batch_size > table.n:
            raise ContractError(f"batch size {self.batch_size} exceeds dataset size {table.n}")
        idx = gen.integers(0, table.n, size=(n, self.batch_size))
        return table.per_example[idx].mean(axis=1), idx

    def chunk_size(self, table):
        return max(1, _CHUNK_FLOATS // (table.d * self.batch_size))


@dataclass(frozen=True)
class SvrgState:
    """Control-variate anchor: snapshot, its per-example gradients and full gradient."""

    anchor: Model
    table: GradientTable
    step: int

    @property
    def full(self):
        return self.table.mean

    @classmethod
    def anchor_at(cls, model: Model, dataset) -> SvrgState:
        return cls(model, GradientTable.from_model(model, dataset), model.step)


class Svrg(Estimator):
    """``mean_B g(theta) - mean_B g(anchor) + full(anchor)`` with shared indices."""

    name = "svrg"

    def __init__(self, batch_size: int, state: SvrgState):
        self.batch_size = batch_size
        self.state = state

    def _sample(self, table, gen, n):
        anchor = self.state.table
        if anchor.fingerprint != table.fingerprint or anchor.per_example.shape != table.per_example.shape:
            raise ContractError("SVRG anchor was computed on a different dataset")
        idx = gen.integers(0, table.n, size=(n, self.batch_size))
        diff = table.per_example[idx].mean(axis=1) - anchor.per_example[idx].mean(axis=1)
        return diff + self.state.full, idx

    def chunk_size(self, table):
        return max(1, _CHUNK_FLOATS // (2 * table.d * self.batch_size))


class Stratified(Estimator):
    """One uniform draw per cluster, weighted by cluster size over ``N``."""

    name = "gc"

    def __init__(self, assignments, n_clusters: int | None = None, name: str = "gc"):
        a = np.asarray(assignments, dtype=np.int64)
        K = int(a.max()) + 1 if n_clusters is None else n_clusters
        sizes = np.bincount(a, minlength=K)
        if np.any(sizes == 0):
            raise ContractError(f"empty clusters {np.flatnonzero(sizes == 0).tolist()}; repair first")
        self.assignments = a
        self.sizes = sizes
        self.members = np.argsort(a, kind="stable")
        self.offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.name = name

    @property
    def n_clusters(self):
        return self.sizes.size

    def _sample(self, table, gen, n):
        if self.assignments.size != table.n:
            raise ContractError("cluster assignments do not match the dataset size")
        local = gen.integers(0, self.sizes, size=(n, self.n_clusters))
        idx = self.members[self.offsets + local]
        w = self.sizes / table.n
        return np.einsum("k,rkd->rd", w, table.per_example[idx]), idx

    def chunk_size(self, table):
        return max(1, _CHUNK_FLOATS // (table.d * self.n_clusters))


def full_gradient(table: GradientTable) -> GradientEstimate:
    return FullGradient().estimate(table, 0)


def sgb_estimate(table: GradientTable, B: int, rng) -> GradientEstimate:
    return MiniBatch(B, "sgb").estimate(table, rng)


def svrg_estimate(table: GradientTable, B: int, state: SvrgState, rng) -> GradientEstimate:
    return Svrg(B, state).estimate(table, rng)


def stratified_estimate(table: GradientTable, assignments, rng) -> GradientEstimate:
    return Stratified(assignments).estimate(table, rng)


def stratified_variance(per_example: np.ndarray, assignments) -> float:
    """Exact trace variance ``N^-2 sum_k N_k^2 V_k`` of the stratified estimator."""
    g = np.asarray(per_example)
    a = np.asarray(assignments)
    n = g.shape[0]
    total = 0.0
    for k in np.unique(a):
        members = g[a == k]
        nk = members.shape[0]
        vk = ((members - members.mean(axis=0)) ** 2).sum() / nk
        total += nk * nk * vk
    return total / (n * n)


@dataclass(frozen=True)
class VarianceEntry:
    estimator: str
    avg_var: float
    avg_var_se: float  # standard error of avg_var over draws
    mean: np.ndarray
    mean_se: np.ndarray  # per-coordinate standard error of the Monte-Carlo mean
    draws: int


def _chunks(total, size):
    start = 0
    while start < total:
        yield start, min(size, total - start)
        start += size


def empirical_variance(table: GradientTable, estimator: Estimator, draws: int, rng) -> VarianceEntry:
    """Average per-coordinate variance of ``draws`` independent estimates.

    Two passes over the same random stream: the first accumulates the mean,
    the second the squared deviations. Values are shifted by the first draw,
    so an estimator that always returns the same vector reports exactly 0.
    Chunk boundaries are fixed, so results do not depend on anything but
    ``(table, estimator, draws, rng)``.
    """
    if draws < 2:
        raise ContractError("need at least two draws")
    if not isinstance(rng, RngStream) and not isinstance(rng, (int, np.integer)):
        raise ContractError("empirical_variance needs a replayable RngStream or integer seed")
    size = estimator.chunk_size(table)

    gen = as_generator(rng)
    shift = None
    total = np.zeros(table.d)
    for _, m in _chunks(draws, size):
        est, _ = estimator._sample(table, gen, m)
        if shift is None:
            shift = est[0].copy()
        total += (est - shift).sum(axis=0)
    offset = total / draws
    mean = shift + offset

    gen = as_generator(rng)
    sq = np.zeros(table.d)
    q_sum = 0.0
    q_sq = 0.0
    for _, m in _chunks(draws, size):
        est, _ = estimator._sample(table, gen, m)
        dev = (est - shift) - offset
        sq += (dev * dev).sum(axis=0)
        q = (dev * dev).sum(axis=1) / table.d
        q_sum += q.sum()
        q_sq += (q * q).sum()
    var = sq / (draws - 1)
    avg_var = float(var.mean())
    q_mean = q_sum / draws
    q_var = max(q_sq / draws - q_mean * q_mean, 0.0)
    avg_var_se = float(np.sqrt(q_var / draws) * draws / (draws - 1))
    return VarianceEntry(estimator.name, avg_var, avg_var_se, mean, np.sqrt(var / draws), draws)
