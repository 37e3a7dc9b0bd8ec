"""Single-trajectory measurement protocol, sweeps and the 2-D clustering demo.

The model is always trained with plain mini-batch SGD. At every ``log_every``
steps the parameters are frozen and each estimator in the roster is sampled
``draws`` times to measure its variance; estimators never drive training.
Every ``refit_every`` steps the GC clustering and the SVRG anchor are
recomputed at the current snapshot.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gradclust import config as cfgmod
from gradclust.clustering import exact_update, gc_fit
from gradclust.config import ConfigError, ExperimentConfig
from gradclust.data import (Dataset, RFConfig, corrupt_labels, gen_rf, gen_two_blobs, inject_duplicates,
                            student_dataset)
from gradclust.estimators import (FullGradient, GradientTable, MiniBatch, Stratified, Svrg, SvrgState,
                                  dataset_fingerprint, empirical_variance)
from gradclust.metrics import (E_G2_AGGREGATION, ReportRow, aggregate_tail, format_rows, normalized_variance,
                               parse_rows, second_moment)
from gradclust.model import LayerSpec, Model, backward_factored, batch_gradient, mean_loss, sgd_step
from gradclust.numerics import NumericalError, RngStream
from gradclust.plots import cluster_scatter, log_panel

log = logging.getLogger(__name__)

OUT_ENV = "GRADCLUST_OUT"


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# problem construction


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    """Training set in model-input space (student features for RF)."""
    d = cfg.dataset
    root = RngStream(cfg.seed).child("data")
    if d.kind == "rf":
        problem = gen_rf(RFConfig(d.input_dim, d.teacher_hidden, d.student_hidden, d.n_train, cfg.seed, d.bias))
        train = problem.train
    else:
        train = gen_two_blobs(d.n_per_class, d.separation, d.overlap_count, root.child("blobs"))
    if d.duplicates.fraction > 0:
        train = inject_duplicates(train, d.duplicates.n_distinct, d.duplicates.fraction, root.child("dup"))
    if d.corrupt_fraction > 0:
        train = corrupt_labels(train, d.corrupt_fraction, root.child("corrupt"))
    if d.kind == "rf":
        train = student_dataset(replace(problem, train=train))
    return train


def build_model(cfg: ExperimentConfig, in_dim: int) -> Model:
    m = cfg.model
    sizes = [in_dim, *m.hidden, 1]
    specs = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        act = "identity" if i == len(sizes) - 2 else m.activation
        specs.append(LayerSpec.fc(a, b, act, m.bias))
    return Model.init(specs, RngStream(cfg.seed).child("init"), "logistic", scale=m.init_scale)


class BatchStream:
    """Epoch-wise shuffled mini-batches without replacement."""

    def __init__(self, n, batch_size, stream: RngStream):
        self.n, self.b, self.stream = n, batch_size, stream
        self.epoch, self.pos = 0, n
        self.order = None

    def next(self):
        if self.pos + self.b > self.n:
            self.order = self.stream.child(self.epoch).generator().permutation(self.n)
            self.epoch += 1
            self.pos = 0
        idx = self.order[self.pos:self.pos + self.b]
        self.pos += self.b
        return idx


# ---------------------------------------------------------------------------
# trajectory


@dataclass
class Snapshot:
    step: int
    loss: float
    refit: bool
    avg_var: dict = field(default_factory=dict)
    avg_var_se: dict = field(default_factory=dict)
    e_g2: float = 0.0


@dataclass
class TrajectoryResult:
    config: ExperimentConfig
    rows: list
    snapshots: list
    clusters: list  # per refit: dict export
    failed: str | None = None

    def series(self, estimator: str, quantity: str = "avg_var") -> np.ndarray:
        return np.array([getattr(r, quantity) for r in self.rows if r.estimator == estimator])

    @property
    def csv(self) -> str:
        return format_rows(self.rows)


def _make_estimator(name, cfg, svrg_state, clusters):
    B = cfg.trainer.batch_size
    if name == "full":
        return FullGradient()
    if name == "sgb":
        return MiniBatch(B, "sgb")
    if name == "sg2b":
        return MiniBatch(2 * B, "sg2b")
    if name == "svrg":
        return Svrg(B, svrg_state)
    if name == "gc":
        return Stratified(clusters, cfg.n_clusters, "gc")
    raise ConfigError(f"unknown estimator {name!r}")


def run_trajectory(cfg: ExperimentConfig, out_dir=None) -> TrajectoryResult:
    """Train one SGD trajectory and measure every estimator at each snapshot."""
    cfg = cfg.validate()
    train = build_dataset(cfg)
    model = build_model(cfg, train.dim)
    root = RngStream(cfg.seed)
    batches = BatchStream(len(train), cfg.trainer.batch_size, root.child("train"))
    t, s = cfg.trainer, cfg.schedule
    fingerprint = dataset_fingerprint(train)

    rows, snaps, clusters = [], [], []
    svrg_state = None
    assignments = None
    last_refit = None
    velocity = None
    failed = None
    X, y = train.features, train.labels
    try:
        for step in range(1, t.steps + 1):
            idx = batches.next()
            model, velocity = sgd_step(model, X[idx], y[idx], t.lr, t.momentum, t.weight_decay, velocity)
            if step % s.log_every:
                continue
            loss = mean_loss(model, X, y)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite training loss at step {step}")
            factors = backward_factored(model, X, y)
            table = GradientTable(factors.per_example_gradients(), fingerprint)
            refit = last_refit is None or step // s.refit_every > last_refit // s.refit_every
            if refit:
                last_refit = step
                svrg_state = SvrgState(model, table, step)
                warm = assignments if s.gc_warm_start else None
                fit = gc_fit(factors, cfg.n_clusters, s.gc_iters, root.child("gc", step),
                             svd_blocks=bool(s.svd_fallback) or (), init=s.gc_init, start=warm)
                assignments = fit.state.assignments
                clusters.append({"step": step, **fit.state.to_dict(), "trace": fit.trace,
                                 "initial_objective": fit.initial_objective, "degenerate": fit.degenerate})
            e_g2 = second_moment(table.per_example)
            snap = Snapshot(step, loss, refit, e_g2=e_g2)
            for name in cfg.estimators:
                est = _make_estimator(name, cfg, svrg_state, assignments)
                entry = empirical_variance(table, est, s.draws, root.child("est", name, step))
                snap.avg_var[name] = entry.avg_var
                snap.avg_var_se[name] = entry.avg_var_se
                rows.append(ReportRow(step, name, entry.avg_var, e_g2,
                                      normalized_variance(entry.avg_var, e_g2), s.draws))
            snaps.append(snap)
            log.info("step %d loss %.6g %s", step, loss,
                     " ".join(f"{k}={v:.4g}" for k, v in snap.avg_var.items()))
    except NumericalError as exc:
        failed = str(exc)
        log.error("trajectory failed: %s", exc)

    result = TrajectoryResult(cfg, rows, snaps, clusters, failed)
    if out_dir is not None:
        write_run(result, out_dir)
    if failed:
        raise NumericalError(failed)
    return result


def write_run(result: TrajectoryResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", json.dumps(cfgmod.to_dict(result.config), indent=2, sort_keys=True) + "\n")
    atomic_write(out / "reports.csv", result.csv)
    meta = {
        "e_g2_aggregation": E_G2_AGGREGATION,
        "snapshots": [{"step": sn.step, "loss": sn.loss, "refit": sn.refit, "avg_var_se": sn.avg_var_se}
                      for sn in result.snapshots],
    }
    atomic_write(out / "trajectory.json", json.dumps(meta, indent=1, sort_keys=True) + "\n")
    for c in result.clusters:
        atomic_write(out / "clusters" / f"step{c['step']:07d}.json", json.dumps(c, sort_keys=True) + "\n")
    if result.failed:
        atomic_write(out / "FAILED", result.failed + "\n")
    elif result.rows:
        emit_plots([out / "reports.csv"], out / "plots")


# ---------------------------------------------------------------------------
# sweeps

SWEEP_COLUMNS = ("overparam", "lr", "dup_fraction", "estimator", "statistic", "avg_var", "avg_var_std",
                 "norm_var", "norm_var_std", "seeds", "status")


@dataclass(frozen=True)
class SweepSpec:
    base: ExperimentConfig
    overparam: tuple = ()
    lr: tuple = ()
    dup_fraction: tuple = ()
    seeds: tuple = (0,)
    tail: float = 0.7

    @classmethod
    def from_dict(cls, d) -> SweepSpec:
        d = dict(d)
        unknown = sorted(set(d) - {"base", "axes", "tail"})
        if unknown:
            raise ConfigError(f"sweep: unknown keys {unknown}")
        axes = dict(d.get("axes", {}))
        bad = sorted(set(axes) - {"overparam", "lr", "dup_fraction", "seeds"})
        if bad:
            raise ConfigError(f"sweep.axes: unknown axes {bad}")
        for k, v in axes.items():
            if not isinstance(v, list) or not v:
                raise ConfigError(f"sweep.axes.{k}: must be a non-empty list")
        return cls(cfgmod.from_dict(d.get("base", {})), tuple(axes.get("overparam", ())),
                   tuple(axes.get("lr", ())), tuple(axes.get("dup_fraction", ())),
                   tuple(axes.get("seeds", (0,))), float(d.get("tail", 0.7)))

    def points(self):
        return list(itertools.product(self.overparam or (None,), self.lr or (None,),
                                      self.dup_fraction or (None,)))

    def config_for(self, overparam, lr, dup, seed) -> ExperimentConfig:
        ch = {"seed": int(seed)}
        if overparam is not None:
            hs = self.base.dataset.student_hidden
            ch["dataset.n_train"] = max(1, int(round(hs / overparam)))
        if lr is not None:
            ch["trainer.lr"] = lr
        if dup is not None:
            ch["dataset.duplicates"] = {"n_distinct": self.base.dataset.duplicates.n_distinct, "fraction": dup}
        return cfgmod.override(self.base, **ch)


@dataclass
class TrialSummary:
    key: tuple
    seed: int
    stats: dict  # (estimator, statistic, quantity) -> value
    failed: str | None = None


def _run_trial(args) -> TrialSummary:
    spec, key, seed = args
    cfg = spec.config_for(*key, seed)
    try:
        res = run_trajectory(cfg)
    except NumericalError as exc:
        return TrialSummary(key, seed, {}, str(exc))
    stats = {}
    for name in cfg.estimators:
        for q in ("avg_var", "norm_var"):
            mean, mx = aggregate_tail(res.series(name, q), spec.tail)
            stats[(name, "mean", q)] = mean
            stats[(name, "max", q)] = mx
    return TrialSummary(key, seed, stats)


@dataclass
class SweepResult:
    spec: SweepSpec
    trials: list

    def table(self):
        """Rows ``dict`` per (axis point, estimator, statistic) aggregated over seeds."""
        out = []
        for key in self.spec.points():
            trials = [t for t in self.trials if t.key == key]
            ok = [t for t in trials if t.failed is None]
            status = "ok" if len(ok) == len(trials) else ("failed" if not ok else "partial")
            for name in self.spec.base.estimators:
                for stat in ("mean", "max"):
                    row = {"overparam": key[0], "lr": key[1], "dup_fraction": key[2], "estimator": name,
                           "statistic": stat, "seeds": len(ok), "status": status}
                    for q in ("avg_var", "norm_var"):
                        vals = np.array([t.stats[(name, stat, q)] for t in ok])
                        row[q] = float(vals.mean()) if vals.size else math.nan
                        row[f"{q}_std"] = float(vals.std()) if vals.size else math.nan
                    out.append(row)
        return out

    def value(self, estimator, statistic="mean", quantity="avg_var", **key):
        k = (key.get("overparam"), key.get("lr"), key.get("dup_fraction"))
        for row in self.table():
            if (row["overparam"], row["lr"], row["dup_fraction"]) == k and row["estimator"] == estimator \
                    and row["statistic"] == statistic:
                return row[quantity]
        raise KeyError(k)

    def per_seed(self, estimator, statistic="mean", quantity="avg_var", **key):
        k = (key.get("overparam"), key.get("lr"), key.get("dup_fraction"))
        return {t.seed: t.stats[(estimator, statistic, quantity)] for t in self.trials
                if t.key == k and t.failed is None}

    @property
    def csv(self) -> str:
        def fmt(v):
            if v is None:
                return ""
            if isinstance(v, float):
                return f"{v:.17g}"
            return str(v)
        lines = [",".join(SWEEP_COLUMNS)]
        for row in self.table():
            lines.append(",".join(fmt(row[c]) for c in SWEEP_COLUMNS))
        return "\n".join(lines) + "\n"


def run_sweep(spec: SweepSpec, jobs: int = 1, out_dir=None) -> SweepResult:
    """Run every (axis point, seed) trial; failures are recorded and the sweep continues."""
    tasks = [(spec, key, seed) for key in spec.points() for seed in spec.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trials = list(pool.map(_run_trial, tasks))
    else:
        trials = [_run_trial(t) for t in tasks]
    result = SweepResult(spec, trials)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write(out / "sweep.csv", result.csv)
        atomic_write(out / "config.json", json.dumps(
            {"base": cfgmod.to_dict(spec.base),
             "axes": {"overparam": list(spec.overparam), "lr": list(spec.lr),
                      "dup_fraction": list(spec.dup_fraction), "seeds": list(spec.seeds)},
             "tail": spec.tail}, indent=2, sort_keys=True) + "\n")
        plot_sweep(result, out / "plots")
    return result


def plot_sweep(result: SweepResult, out_dir) -> list:
    table = result.table()
    written = []
    if not result.spec.overparam:
        return written
    for stat in ("mean", "max"):
        for q in ("avg_var", "norm_var"):
            series = {}
            for row in table:
                if row["statistic"] != stat:
                    continue
                label = f"{row['estimator']} lr={row['lr']} dup={row['dup_fraction']}"
                xs, ys = series.setdefault(label, ([], []))
                xs.append(math.log10(row["overparam"]))
                ys.append(row[q])
            svg = log_panel({k: (np.array(v[0]), np.array(v[1])) for k, v in series.items()},
                            f"{stat} {q}", "log10 overparametrization", q)
            if svg is not None:
                path = Path(out_dir) / f"{stat}_{q}.svg"
                atomic_write(path, svg)
                written.append(path)
    return written


# ---------------------------------------------------------------------------
# plots and demo


def emit_plots(csv_paths, out_dir, window: int = 5) -> list:
    """Render ``avg_var`` and ``norm_var`` panels (log scale vs step) from report CSVs."""
    written = []
    for path in csv_paths:
        path = Path(path)
        rows = parse_rows(path.read_text(), str(path))
        stem = path.stem if len(csv_paths) > 1 else ""
        for q in ("avg_var", "norm_var"):
            series = {}
            for r in rows:
                xs, ys = series.setdefault(r.estimator, ([], []))
                xs.append(r.step)
                ys.append(getattr(r, q))
            svg = log_panel({k: (np.array(v[0]), np.array(v[1])) for k, v in series.items()},
                            f"{stem} {q}".strip(), "step", q, window)
            if svg is None:
                continue
            name = f"{stem}_{q}.svg" if stem else f"{q}.svg"
            target = Path(out_dir) / name
            atomic_write(target, svg)
            written.append(target)
    return written


@dataclass
class DemoResult:
    svgs: list
    assignments: list  # per GD step
    weights: list  # per GD step, before the step
    margin: np.ndarray  # indices of margin points


def demo_fig1(n_per_class=20, separation=3.0, overlap_count=4, K=4, steps=3, lr=0.5, gc_iters=10,
              seed=0, svd_centers=True, out_dir=None) -> DemoResult:
    """Gradient descent on a bias-free linear classifier over two blobs, clustered each step.

    The model has one block with a single output, so the SVD center is the
    exact member mean. The mean-factor center would multiply the mean input
    by the mean output gradient, and with mirrored classes both means nearly
    cancel; ``svd_centers=False`` shows that failure.

    Predicted boundaries apply one GD step using a single cluster's size-weighted
    member-mean gradient ``(N_k / N) C_k``; with one cluster this is the actual
    next GD step.
    """
    root = RngStream(seed)
    data = gen_two_blobs(n_per_class, separation, overlap_count, root.child("blobs"))
    X, y = data.features, data.labels
    spec = LayerSpec.fc(2, 1, "identity", bias=False)
    # start from a boundary that is wrong on purpose, so the first steps move it
    model = Model((spec,), np.array([0.2, 1.0]), "logistic")
    svgs, assigns, weights = [], [], []
    for step in range(steps):
        factors = backward_factored(model, X, y)
        fit = gc_fit(factors, K, gc_iters, root.child("gc", step), svd_blocks=svd_centers or ())
        a = fit.state.assignments
        G = factors.per_example_gradients()
        centers, sizes = exact_update(G, a, K)
        w = model.theta.copy()
        predicted = [w - lr * (sizes[k] / len(y)) * centers[k] for k in range(K)]
        svg = cluster_scatter(X, y, a, w, predicted, lr, step)
        svgs.append(svg)
        assigns.append(a.tolist())
        weights.append(w.tolist())
        if out_dir is not None:
            atomic_write(Path(out_dir) / f"fig1_step{step}.svg", svg)
        model = model.with_theta(w - lr * batch_gradient(model, X, y), step + 1)
    if out_dir is not None:
        atomic_write(Path(out_dir) / "assignments.json", json.dumps(
            {"lr": lr, "K": K, "assignments": assigns, "weights": weights,
             "labels": y.tolist(), "provenance": list(data.provenance)}, sort_keys=True) + "\n")
    margin = np.array([i for i, t in enumerate(data.provenance) if t == "margin"])
    return DemoResult(svgs, assigns, weights, margin)
