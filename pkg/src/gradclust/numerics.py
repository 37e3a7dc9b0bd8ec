"""Small dense linear algebra helpers and keyed random streams.

Everything is float64. Matrices are plain ``numpy.ndarray`` objects; the
helpers here only add the shape contracts and the leading-singular-pair
routine used by the rank-1 center fallback.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class ContractError(ValueError):
    """Raised when a caller violates a documented precondition."""


class NumericalError(RuntimeError):
    """Raised when a computation produces non-finite values."""


def _key(part) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    if isinstance(part, (int, np.integer)) and part >= 0:
        return int(part)
    raise ContractError(f"stream key must be a str or non-negative int, got {part!r}")


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream keyed by ``(seed, stream)``.

    ``stream`` is a tuple of non-negative integers; ``child`` extends it with
    string or integer keys so that independent consumers (an estimator, a
    snapshot, a trial) never share draws.
    """

    seed: int
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        if self.seed < 0:
            raise ContractError("seed must be non-negative")
        object.__setattr__(self, "stream", tuple(_key(k) for k in self.stream))

    def child(self, *keys) -> RngStream:
        return RngStream(self.seed, self.stream + tuple(_key(k) for k in keys))

    def generator(self) -> np.random.Generator:
        # Philox is counter based; SeedSequence spawn keys keep streams disjoint.
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream)
        return np.random.Generator(np.random.Philox(ss))


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, (int, np.integer)):
        return RngStream(int(rng)).generator()
    raise ContractError(f"cannot build a generator from {type(rng).__name__}")


def normal_sample(rng, n: int) -> np.ndarray:
    if n < 1:
        raise ContractError("n must be >= 1")
    return as_generator(rng).standard_normal(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ContractError("matmul expects 2-D matrices")
    if a.shape[1] != b.shape[0]:
        raise ContractError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


class SingularTriple(NamedTuple):
    u: np.ndarray
    s: float
    v: np.ndarray
    converged: bool


def top_singular_pair(m: np.ndarray, iters: int = 1000, tol: float = 1e-14) -> SingularTriple:
    """Leading singular triple of ``m`` by power iteration on the smaller Gram matrix.

    The start vector is the Gram row with the largest norm, so the routine is
    deterministic. If ``iters`` runs out before the iterate settles, the last
    iterate is returned with ``converged=False``.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ContractError("top_singular_pair needs a non-empty 2-D matrix")
    if iters < 1:
        raise ContractError("iters must be >= 1")
    rows, cols = m.shape
    tall = rows >= cols
    gram = m.T @ m if tall else m @ m.T
    n = gram.shape[0]

    row_norms = np.einsum("ij,ij->i", gram, gram)
    if row_norms.max() == 0.0:
        u = np.zeros(rows)
        u[0] = 1.0
        v = np.zeros(cols)
        v[0] = 1.0
        return SingularTriple(u, 0.0, v, True)

    x = gram[int(np.argmax(row_norms))].copy()
    x /= np.linalg.norm(x)
    converged = n == 1
    for _ in range(iters):
        if converged:
            break
        y = gram @ x
        norm = np.linalg.norm(y)
        if norm == 0.0:
            break
        y /= norm
        if y @ x < 0:
            y = -y
        delta = np.linalg.norm(y - x)
        x = y
        if delta <= tol:
            converged = True

    if tall:
        v = x
        mv = m @ v
        s = float(np.linalg.norm(mv))
        u = mv / s if s > 0 else np.eye(rows)[0]
    else:
        u = x
        mu = m.T @ u
        s = float(np.linalg.norm(mu))
        v = mu / s if s > 0 else np.eye(cols)[0]
    return SingularTriple(u, s, v, converged)


def rank_one_error(m: np.ndarray, u: np.ndarray, s: float, v: np.ndarray) -> float:
    return float(np.linalg.norm(m - s * np.outer(u, v)))
