"""Weighted gradient clustering.

The objective is ``sum_i N_{a_i} ||C_{a_i} - g_i||^2``: a K-means cost where
each point is additionally weighted by the size of its cluster. With exact
member-mean centers it equals ``N^2`` times the variance of the stratified
estimator.

Two solvers share the same assignment/size/update loop:

* ``exact_*`` work on dense per-example gradients and serve as the oracle.
* ``gc_fit`` never forms per-example gradients. Each parameter block keeps a
  rank-1 center ``c_k d_k^T`` and assignment costs are assembled from inner
  products of the layer factors ``A`` and ``D``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from gradclust.model import PerExampleFactors
from gradclust.numerics import ContractError, as_generator, top_singular_pair

log = logging.getLogger(__name__)


@dataclass
class ClusterState:
    assignments: np.ndarray
    sizes: np.ndarray
    objective: float = float("nan")
    iteration: int = 0

    @property
    def n_clusters(self):
        return self.sizes.size

    def to_dict(self):
        return {
            "assignments": self.assignments.tolist(),
            "sizes": self.sizes.tolist(),
            "objective": self.objective,
            "iteration": self.iteration,
        }


def cluster_sizes(assignments, K) -> np.ndarray:
    return np.bincount(np.asarray(assignments), minlength=K)


def balanced_assignment(n: int, K: int, rng) -> np.ndarray:
    """Random assignment where every cluster gets floor(N/K) or ceil(N/K) points."""
    if not 1 <= K <= n:
        raise ContractError(f"need 1 <= K <= N, got K={K}, N={n}")
    a = np.empty(n, dtype=np.int64)
    a[as_generator(rng).permutation(n)] = np.arange(n) % K
    return a


def repair_empty_clusters(assignments, K: int, point_costs) -> np.ndarray:
    """Reseed every empty cluster with the worst-fit member of the largest cluster.

    ``point_costs[i]`` is the unweighted cost of point ``i`` to its current
    center. Ties go to the lowest cluster index and then the lowest point
    index.
    """
    a = np.array(assignments, dtype=np.int64)
    if K > a.size:
        raise ContractError(f"cannot fill {K} clusters with {a.size} points")
    costs = np.asarray(point_costs, dtype=np.float64)
    sizes = cluster_sizes(a, K)
    for k in np.flatnonzero(sizes == 0):
        big = int(np.argmax(sizes))
        members = np.flatnonzero(a == big)
        worst = members[int(np.argmax(costs[members]))]
        a[worst] = k
        sizes[big] -= 1
        sizes[k] = 1
        # the moved point now sits exactly on its new center
        costs[worst] = 0.0
    return a


# ---------------------------------------------------------------------------
# exact (dense) oracle


def _dense_costs(gradients, centers):
    g = np.asarray(gradients, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    out = np.empty((g.shape[0], c.shape[0]))
    for k in range(c.shape[0]):
        diff = g - c[k]
        out[:, k] = np.einsum("nd,nd->n", diff, diff)
    return out


def exact_assign(gradients, centers, sizes) -> np.ndarray:
    """``a_i = argmin_k N_k ||C_k - g_i||^2`` with sizes held fixed; ties go to the lowest k."""
    cost = _dense_costs(gradients, centers) * np.asarray(sizes, dtype=np.float64)
    return np.argmin(cost, axis=1)


def exact_update(gradients, assignments, K: int | None = None):
    """Member-mean centers ``(K, d)`` and sizes."""
    g = np.asarray(gradients, dtype=np.float64)
    a = np.asarray(assignments, dtype=np.int64)
    K = int(a.max()) + 1 if K is None else K
    sizes = cluster_sizes(a, K)
    if np.any(sizes == 0):
        raise ContractError(f"empty clusters {np.flatnonzero(sizes == 0).tolist()} in update step")
    centers = np.zeros((K, g.shape[1]))
    np.add.at(centers, a, g)
    return centers / sizes[:, None], sizes


def weighted_objective(gradients, assignments, centers, sizes=None) -> float:
    g = np.asarray(gradients, dtype=np.float64)
    a = np.asarray(assignments, dtype=np.int64)
    c = np.asarray(centers, dtype=np.float64)
    if sizes is None:
        sizes = cluster_sizes(a, c.shape[0])
    diff = g - c[a]
    return float(np.sum(np.asarray(sizes)[a] * np.einsum("nd,nd->n", diff, diff)))


def exact_fit(gradients, K: int, iters: int, rng) -> ClusterState:
    """Alternating assign / size / update steps on dense gradients, best state kept."""
    g = np.asarray(gradients, dtype=np.float64)
    a = balanced_assignment(g.shape[0], K, rng)
    centers, sizes = exact_update(g, a, K)
    best = ClusterState(a, sizes, weighted_objective(g, a, centers, sizes), 0)
    for it in range(1, iters + 1):
        cost = _dense_costs(g, centers)
        new = np.argmin(cost * sizes, axis=1)
        new = repair_empty_clusters(new, K, cost[np.arange(g.shape[0]), new])
        centers, sizes = exact_update(g, new, K)
        obj = weighted_objective(g, new, centers, sizes)
        if obj < best.objective:
            best = ClusterState(new, sizes, obj, it)
        if np.array_equal(new, a):
            break
        a = new
    return best


# ---------------------------------------------------------------------------
# efficient rank-1 GC


@dataclass
class RankOneCenters:
    """Per parameter block: ``c`` is ``(K, I)``, ``d`` is ``(K, O)``."""

    c: list
    d: list
    norms: list = field(default_factory=list)  # per block, ||c_k||^2 ||d_k||^2

    def __post_init__(self):
        if not self.norms:
            self.norms = [np.einsum("ki,ki->k", c, c) * np.einsum("ko,ko->k", d, d)
                          for c, d in zip(self.c, self.d)]

    @property
    def n_clusters(self):
        return self.c[0].shape[0]

    def dense(self, k: int) -> np.ndarray:
        """Flattened center of cluster ``k`` in theta layout."""
        return np.concatenate([np.outer(c[k], d[k]).ravel() for c, d in zip(self.c, self.d)])

    def dense_all(self) -> np.ndarray:
        return np.stack([self.dense(k) for k in range(self.n_clusters)])


def conv_formulation(T: int, K: int, I: int, O: int) -> tuple[str, str]:
    """Cheaper formulation for the cross term and the gradient-norm term.

    "summed" materializes ``sum_t A_t D_t^T``; "positional" works position by position.
    Cross term: "positional" costs ``T K (I + O)`` against ``(T + K) I O``.
    Norm term: "positional" costs ``T^2 (I + O)`` against ``T I O``.
    """
    cross = "positional" if T * K * (I + O) < (T + K) * I * O else "summed"
    norm = "positional" if T * T * (I + O) < T * I * O else "summed"
    return cross, norm


def _cross(A, D, c, d, form):
    if form == "positional":
        # sum_t (A_t . c_k)(D_t . d_k)
        return np.einsum("ntk,ntk->nk", A @ c.T, D @ d.T)
    G = np.einsum("nti,nto->nio", A, D)
    return np.einsum("nio,ki,ko->nk", G, c, d)


def _gnorm(A, D, form):
    if form == "positional":
        # sum_{t,t'} (A_t . A_t')(D_t . D_t')
        return np.einsum("nst,nst->n", A @ A.transpose(0, 2, 1), D @ D.transpose(0, 2, 1))
    G = np.einsum("nti,nto->nio", A, D)
    return np.einsum("nio,nio->n", G, G)


def _as_block(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, None, :]
    elif x.ndim == 2:
        x = x[:, None, :]
    return x


def assign_cost_fc(A, D, c, d) -> np.ndarray:
    """``||c_k d_k^T - A D^T||_F^2`` for FC factors.

    ``A`` is ``(I,)`` or ``(N, I)``, ``D`` is ``(O,)`` or ``(N, O)``; centers
    are ``(K, I)`` and ``(K, O)``. Returns ``(K,)`` or ``(N, K)``.
    """
    single = np.ndim(A) == 1
    A3, D3 = _as_block(A), _as_block(D)
    out = _block_costs(A3, D3, np.atleast_2d(c), np.atleast_2d(d), ("positional", "positional"))
    return out[0] if single else out


def assign_cost_conv(A, D, c, d, formulation="auto") -> np.ndarray:
    """Conv costs ``||c_k d_k^T - sum_t A_t D_t^T||_F^2`` for ``A (N, T, I)``, ``D (N, T, O)``.

    ``formulation`` is "summed", "positional", "auto", or a ``(cross, norm)`` pair.
    """
    A = np.asarray(A, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    c, d = np.atleast_2d(c), np.atleast_2d(d)
    if formulation == "auto":
        forms = conv_formulation(A.shape[1], c.shape[0], A.shape[2], D.shape[2])
    elif isinstance(formulation, str):
        forms = (formulation, formulation)
    else:
        forms = tuple(formulation)
    return _block_costs(A, D, c, d, forms)


def _block_costs(A, D, c, d, forms, gnorm=None):
    cn = np.einsum("ki,ki->k", c, c) * np.einsum("ko,ko->k", d, d)
    if gnorm is None:
        gnorm = _gnorm(A, D, forms[1])
    cost = cn[None, :] - 2.0 * _cross(A, D, c, d, forms[0]) + gnorm[:, None]
    return np.maximum(cost, 0.0)


def _one_hot(assignments, sizes):
    K = sizes.size
    m = np.zeros((K, assignments.size))
    m[assignments, np.arange(assignments.size)] = 1.0
    return m / sizes[:, None]


def u_step_rank1(factors: PerExampleFactors, assignments, sizes, svd_blocks=()) -> RankOneCenters:
    """Rank-1 centers per block.

    Default: ``c_k`` is the member mean of ``sum_t A_t`` and ``d_k`` the member
    mean of ``D`` averaged over positions; for FC blocks this is the mean-factor
    update, exact when activations and output gradients are uncorrelated inside
    the cluster. Blocks named in ``svd_blocks`` (or all, when it is ``True``)
    instead take the leading singular pair of the dense member-mean gradient.
    """
    a = np.asarray(assignments, dtype=np.int64)
    sizes = np.asarray(sizes)
    if np.any(sizes == 0):
        raise ContractError("u_step_rank1 called with empty clusters")
    avg = _one_hot(a, sizes)
    cs, ds = [], []
    for f in factors.blocks:
        if svd_blocks is True or f.block.name in svd_blocks:
            mean = (avg @ f.gradients().reshape(factors.n, -1)).reshape(-1, f.A.shape[2], f.D.shape[2])
            c = np.empty((sizes.size, f.A.shape[2]))
            d = np.empty((sizes.size, f.D.shape[2]))
            for k in range(sizes.size):
                u, s, v, _ = top_singular_pair(mean[k])
                root = np.sqrt(s)
                c[k], d[k] = root * u, root * v
        else:
            c = avg @ f.A.sum(axis=1)
            d = avg @ f.D.mean(axis=1)
        cs.append(c)
        ds.append(d)
    return RankOneCenters(cs, ds)


class _CostModel:
    """Caches the cluster-independent gradient norms of one factor set."""

    def __init__(self, factors: PerExampleFactors, K: int, formulation="auto"):
        self.factors = factors
        self.forms = []
        self.gnorms = []
        for f in factors.blocks:
            if formulation == "auto":
                forms = conv_formulation(f.T, K, f.A.shape[2], f.D.shape[2])
            else:
                forms = (formulation, formulation)
            self.forms.append(forms)
            self.gnorms.append(_gnorm(f.A, f.D, forms[1]))
        self.total_gnorm = np.sum(self.gnorms, axis=0)

    def costs(self, centers: RankOneCenters) -> np.ndarray:
        """Unweighted ``(N, K)`` costs summed over blocks."""
        total = 0.0
        for f, forms, gn, c, d in zip(self.factors.blocks, self.forms, self.gnorms, centers.c, centers.d):
            total = total + _block_costs(f.A, f.D, c, d, forms, gn)
        return total


@dataclass
class GCResult:
    state: ClusterState
    centers: RankOneCenters
    trace: list  # rank-1 objective after each round, starting with the initial partition
    initial_objective: float
    degenerate: bool = False


def _rank1_objective(cost, a, sizes):
    return float(np.sum(sizes[a] * cost[np.arange(a.size), a]))


def _point_inner(factors: PerExampleFactors, s: int) -> np.ndarray:
    """``<g_i, g_s>`` for every example ``i`` without forming gradients."""
    total = np.zeros(factors.n)
    for f in factors.blocks:
        aa = np.einsum("nti,ui->ntu", f.A, f.A[s])
        dd = np.einsum("nto,uo->ntu", f.D, f.D[s])
        total += np.einsum("ntu,ntu->n", aa, dd)
    return total


def seed_assignment(factors: PerExampleFactors, K: int, rng, gnorm=None) -> np.ndarray:
    """D^2 (k-means++) seeding followed by nearest-seed assignment.

    Seeds are examples; the first is uniform, each next one is drawn with
    probability proportional to the squared distance to the closest seed so
    far. When every remaining distance is zero (fewer distinct gradients than
    K) the next seed is uniform over unused examples.
    """
    n = factors.n
    if not 1 <= K <= n:
        raise ContractError(f"need 1 <= K <= N, got K={K}, N={n}")
    gen = as_generator(rng)
    if gnorm is None:
        gnorm = np.sum([_gnorm(f.A, f.D, "summed") for f in factors.blocks], axis=0)
    seeds = [int(gen.integers(n))]
    dist = np.empty((n, K))
    dist[:, 0] = np.maximum(gnorm - 2.0 * _point_inner(factors, seeds[0]) + gnorm[seeds[0]], 0.0)
    closest = dist[:, 0].copy()
    for k in range(1, K):
        weights = closest.copy()
        weights[seeds] = 0.0
        total = weights.sum()
        if total > 0:
            s = int(np.searchsorted(np.cumsum(weights) / total, gen.random(), side="right"))
            s = min(s, n - 1)
        else:
            unused = np.setdiff1d(np.arange(n), seeds)
            s = int(unused[gen.integers(unused.size)])
        seeds.append(s)
        dist[:, k] = np.maximum(gnorm - 2.0 * _point_inner(factors, s) + gnorm[s], 0.0)
        np.minimum(closest, dist[:, k], out=closest)
    a = np.argmin(dist, axis=1)
    return repair_empty_clusters(a, K, dist[np.arange(n), a])


def _au_rounds(factors, model, a, K, iters, svd_blocks):
    """Run AU rounds from partition ``a``; returns (best, trace)."""
    n = factors.n
    sizes = cluster_sizes(a, K)
    centers = u_step_rank1(factors, a, sizes, svd_blocks)
    cost = model.costs(centers)
    obj = _rank1_objective(cost, a, sizes)
    best = (ClusterState(a, sizes, obj, 0), centers)
    trace = [obj]
    for it in range(1, iters + 1):
        new = np.argmin(cost * sizes, axis=1)
        new = repair_empty_clusters(new, K, cost[np.arange(n), new])
        if np.array_equal(new, a):
            break
        a = new
        sizes = cluster_sizes(a, K)
        centers = u_step_rank1(factors, a, sizes, svd_blocks)
        cost = model.costs(centers)
        obj = _rank1_objective(cost, a, sizes)
        trace.append(obj)
        if obj < best[0].objective:
            best = (ClusterState(a, sizes, obj, it), centers)
    return best, trace


GC_INITS = ("both", "balanced", "kmeans++")


def gc_fit(factors: PerExampleFactors, K: int, iters: int, rng, svd_blocks=(),
           formulation="auto", init="both", start=None) -> GCResult:
    """Gradient Clustering with rank-1 centers.

    From an initial partition and its update step, runs ``iters`` rounds of:
    assignment with sizes frozen from the previous round, empty-cluster
    repair, size recount, rank-1 update. Because these rounds do not always
    lower the objective, the best partition seen (by the rank-1 objective) is
    returned.

    ``init="balanced"`` starts from a random balanced split, ``"kmeans++"``
    from D^2 seeding. The default ``"both"`` runs the balanced start and then
    a D^2 restart, keeping the better result: the balanced start rarely loses
    to random stratification, while D^2 seeding is what separates exact
    duplicate groups reliably. A ``start`` partition (warm start) takes the
    place of the balanced split. ``trace`` and ``initial_objective`` always
    describe the first start.
    """
    n = factors.n
    if not 1 <= K <= n:
        raise ContractError(f"need 1 <= K <= N, got K={K}, N={n}")
    if iters < 1:
        raise ContractError("iters must be >= 1")
    if init not in GC_INITS:
        raise ContractError(f"unknown init {init!r}")
    gen = as_generator(rng)
    model = _CostModel(factors, K, formulation)

    if not np.any(model.total_gnorm > 0):
        log.warning("all per-example gradients are zero; clustering is degenerate")
        a = balanced_assignment(n, K, gen)
        sizes = cluster_sizes(a, K)
        centers = u_step_rank1(factors, a, sizes, svd_blocks)
        return GCResult(ClusterState(a, sizes, 0.0, 0), centers, [0.0], 0.0, degenerate=True)

    starts = []
    if start is not None:
        start = np.asarray(start, dtype=np.int64)
        if start.shape != (n,) or start.min() < 0 or start.max() >= K:
            raise ContractError(f"start partition must be {n} labels in [0, {K})")
        if np.any(cluster_sizes(start, K) == 0):
            raise ContractError("start partition has empty clusters")
        starts.append(lambda: start)
    elif init in ("both", "balanced"):
        starts.append(lambda: balanced_assignment(n, K, gen))
    if init in ("both", "kmeans++"):
        starts.append(lambda: seed_assignment(factors, K, gen, model.total_gnorm))
    best, trace = _au_rounds(factors, model, starts[0](), K, iters, svd_blocks)
    for start in starts[1:]:
        other, _ = _au_rounds(factors, model, start(), K, iters, svd_blocks)
        if other[0].objective < best[0].objective:
            best = other
    return GCResult(best[0], best[1], trace, trace[0])
