"""Command line entry point: ``gradclust {gen-data,run,sweep,demo-fig1,plot}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from gradclust import config as cfgmod
from gradclust.config import ConfigError
from gradclust.data import save_dataset
from gradclust.numerics import ContractError, NumericalError

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

log = logging.getLogger("gradclust")


def _load_config(args):
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig().validate()
    if args.seed is not None:
        cfg = cfgmod.override(cfg, seed=args.seed)
    return cfg


def _out_dir(args, name):
    from gradclust.harness import default_out_root
    return Path(args.out) if args.out else default_out_root() / name


def _attach_log(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger().addHandler(handler)


def cmd_gen_data(args):
    from gradclust.harness import build_dataset
    cfg = _load_config(args)
    out = _out_dir(args, f"data-seed{cfg.seed}")
    out.mkdir(parents=True, exist_ok=True)
    d = build_dataset(cfg)
    save_dataset(d, out / "train.gcds")
    print(f"wrote {len(d)} examples to {out / 'train.gcds'}")


def cmd_run(args):
    from gradclust.harness import run_trajectory
    cfg = _load_config(args)
    out = _out_dir(args, f"run-seed{cfg.seed}")
    _attach_log(out)
    res = run_trajectory(cfg, out)
    print(f"{len(res.rows)} report rows written to {out / 'reports.csv'}")


def cmd_sweep(args):
    from gradclust.harness import SweepSpec, run_sweep
    if not args.config:
        raise ConfigError("sweep needs --config")
    try:
        doc = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    spec = SweepSpec.from_dict(doc)
    if args.seed is not None:
        spec = SweepSpec(spec.base, spec.overparam, spec.lr, spec.dup_fraction, (args.seed,), spec.tail)
    out = _out_dir(args, "sweep")
    _attach_log(out)
    res = run_sweep(spec, jobs=args.jobs, out_dir=out)
    failed = sum(t.failed is not None for t in res.trials)
    print(f"{len(res.trials)} trials ({failed} failed); table in {out / 'sweep.csv'}")


def cmd_demo(args):
    from gradclust.harness import demo_fig1
    opts = {}
    if args.config:
        try:
            opts = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{args.config}: {exc}") from None
    allowed = {"n_per_class", "separation", "overlap_count", "K", "steps", "lr", "gc_iters", "seed", "svd_centers"}
    unknown = sorted(set(opts) - allowed)
    if unknown:
        raise ConfigError(f"demo config: unknown keys {unknown}")
    if args.seed is not None:
        opts["seed"] = args.seed
    out = _out_dir(args, "demo-fig1")
    res = demo_fig1(out_dir=out, **opts)
    print(f"wrote {len(res.svgs)} SVG frames to {out}")


def cmd_plot(args):
    from gradclust.harness import emit_plots
    out = Path(args.out) if args.out else Path(args.csv[0]).parent / "plots"
    written = emit_plots([Path(p) for p in args.csv], out)
    for p in written:
        print(p)


def build_parser():
    p = argparse.ArgumentParser(prog="gradclust", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory (default under $GRADCLUST_OUT or ./runs)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel workers for sweeps")
        sp.add_argument("-v", "--verbose", action="store_true")

    for name, fn in (("gen-data", cmd_gen_data), ("run", cmd_run), ("sweep", cmd_sweep),
                     ("demo-fig1", cmd_demo)):
        sp = sub.add_parser(name)
        common(sp)
        sp.set_defaults(fn=fn)
    sp = sub.add_parser("plot")
    sp.add_argument("csv", nargs="+", help="report CSV files")
    sp.add_argument("--out")
    sp.add_argument("-v", "--verbose", action="store_true")
    sp.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().handlers[0].setLevel(logging.INFO if args.verbose else logging.WARNING)
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
