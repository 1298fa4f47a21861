"""Command line front end: one subcommand per experiment kind, plus `mesh`."""
import argparse
import json
import os
import sys

from .geometry import GeometryError, build_mesh, curve_from_dict, dyadic, load_curve_spec, unit_square
from .harness import ConfigError, ExperimentConfig, emit_report, load_config, run_experiment

SWEEP = [0.2 * 2.0 ** -k for k in range(6)]

DEFAULTS = {
    "rates-exchange": {"experiment": "exchange_rate", "sweep": SWEEP},
    "rates-dtn": {"experiment": "dtn_rate", "sweep": SWEEP},
    "rates-scatter": {"experiment": "scattering_rate", "sweep": SWEEP},
    "counterexample": {"experiment": "counterexample", "sweep": [0.1 * 2.0 ** -k for k in range(4)],
                       "geometry": unit_square().to_dict()},
    "spectrum": {"experiment": "spectrum", "sweep": [0.1, 0.05, 0.025],
                 "geometry": unit_square().to_dict()},
    "solve": {"experiment": "solve", "sweep": [0.1], "geometry": {"builtin": "disc"}},
}


def _config(args):
    if args.config:
        cfg = load_config(args.config)
        expected = DEFAULTS[args.command]["experiment"]
        if cfg.experiment != expected:
            raise ConfigError(f"config is for {cfg.experiment!r}, subcommand expects {expected!r}")
    else:
        cfg = ExperimentConfig.from_dict(DEFAULTS[args.command])
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_mesh(args):
    if args.config:
        with open(args.config) as f:
            d = json.load(f)
        spec = curve_from_dict(d.get("geometry", d) if "experiment" in d else d)
    else:
        spec = unit_square()
    grading = dyadic(gamma=args.gamma) if spec.is_polygon else None
    mesh = build_mesh(spec, args.n, grading)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "mesh.csv")
    mesh.to_csv(path)
    print(f"{path}: {mesh.n} nodes, {mesh.n_panels} panels, length {mesh.length:.12g}, digest {mesh.digest}")
    return 0


def cmd_experiment(args):
    cfg = _config(args)
    rep = run_experiment(cfg)
    path = emit_report(rep, args.out, args.format, cfg)
    if cfg.experiment == "solve":
        rep.metadata["solve_result"].history_csv(os.path.join(args.out, "history.csv"))
    status = "PASS" if rep.passed else "FAIL"
    slope = "" if rep.experiment in ("solve", "spectrum") else f" slope={rep.fitted_slope:.4f}"
    print(f"{status} {rep.experiment}{slope} -> {path}")
    for name, ok in rep.checks.items():
        print(f"  {'ok  ' if ok else 'FAIL'} {name}")
    return 0 if rep.passed else 1


def build_parser():
    p = argparse.ArgumentParser(prog="yukawa-exchange", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in ["mesh"] + list(DEFAULTS):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config (curve spec for `mesh`)")
        s.add_argument("--out", default="out", help="output directory")
        s.add_argument("--seed", type=int, default=None)
        s.add_argument("--format", choices=("csv", "json"), default="json")
        if name == "mesh":
            s.add_argument("--n", type=int, default=256)
            s.add_argument("--gamma", type=float, default=None, help="sets the grading cutoff on polygons")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "mesh":
            return cmd_mesh(args)
        return cmd_experiment(args)
    except (ConfigError, GeometryError, KeyError, TypeError) as e:
        print(f"error: invalid configuration: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
