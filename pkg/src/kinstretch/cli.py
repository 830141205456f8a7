"""Command-line front end.

    kinstretch <subcommand> [--config run.yaml] [--out DIR] [--seed N] [options]

Every subcommand writes <experiment>.json and <experiment>.csv into the output
directory (flag --out, else config key `out`, else $KINSTRETCH_OUT, else
./kinstretch-out) and exits 0 iff every asserted check passed.  Values are
resolved as: built-in defaults < config file (top level, then the section
named after the subcommand) < command-line flags.
"""
from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import __version__
from .report import ExperimentReport, table

log = logging.getLogger("kinstretch")

ENV_OUT = "KINSTRETCH_OUT"


class ConfigInvalid(ValueError):
    pass


def _floats(s):
    return [float(x) for x in str(s).replace(",", " ").split()]


# subcommand defaults; flags of the same name (dashes for underscores) override
DEFAULTS = {
    "verify-stretching": dict(lemma="cap", eps=0.5, L=1.0, r=1.0, M=2.0, T=1.0, eta=0.5, samples=100_000,
                              chain_len=50),
    "kernel-bounds": dict(check="all", v_max=5.0, n_v=14, N=10.0, n_inputs=20, deltas=[0.1, 0.01],
                          ck_samples=1 << 20),
    "jacobian": dict(t=3.0, s=2.0, r=0.0, eps=[0.2, 0.1, 0.05]),
    "decay-linear": dict(eps=[0.4, 0.2, 0.1], dx=0.25, v_max=4.5, n_v=12, dt=0.1, horizon_scale=4.0,
                         spectral=True),
    "decay-nonlinear": dict(eps=0.4, dx=0.25, v_max=4.0, n_v=8, dt=0.2, horizon=20.0, pairs=3),
    "decay-split": dict(eps=0.4, dx=0.25, v_max=4.0, n_v=8, dt=0.1, horizon=6.0, delta=0.001, amplitude=1e-3),
    "poisson-scaling": dict(bc_mode="both", eps=[1.0, 0.5, 0.25], trials=4),
    "report": dict(paths=[]),
}

SCHEMA = {k: set(v) | {"seed", "out"} for k, v in DEFAULTS.items()}


def load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid("config must be a mapping")
    return data


def resolve(cmd, args, config):
    """Merge defaults, config and flags for one subcommand; unknown keys are an error."""
    vals = dict(DEFAULTS[cmd], seed=0, out=None)
    top = {k: v for k, v in config.items() if not isinstance(v, dict)}
    section = config.get(cmd, {}) or {}
    if not isinstance(section, dict):
        raise ConfigInvalid(f"config section {cmd!r} must be a mapping")
    for src in (top, section):
        for k, v in src.items():
            key = k.replace("-", "_")
            if key not in SCHEMA[cmd]:
                if src is section:
                    raise ConfigInvalid(f"unknown key {k!r} for {cmd}")
                continue
            vals[key] = v
    for k, v in vars(args).items():
        if k in ("cmd", "config", "func", "verbose") or v is None:
            continue
        vals[k] = v
    # list-valued keys accept "0.4,0.2" strings from either source
    for k in ("eps", "deltas"):
        if k in vals and isinstance(DEFAULTS[cmd].get(k), list) and not isinstance(vals[k], list):
            vals[k] = _floats(vals[k])
    vals["out"] = vals["out"] or os.environ.get(ENV_OUT) or "kinstretch-out"
    try:
        vals["seed"] = int(vals["seed"])
        if not 0 <= vals["seed"] < 2 ** 64:
            raise ValueError
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid("seed must be a 64-bit unsigned integer") from exc
    return vals


def _validate(cond, msg):
    if not cond:
        raise ConfigInvalid(msg)


# runners; each returns a list of reports

def run_verify_stretching(c):
    from .geometry import Domain
    from . import trajectories as tj
    lemma = c["lemma"]
    _validate(lemma in ("cap", "lateral", "circle", "angle"), f"unknown lemma {lemma!r}")
    _validate(c["eps"] > 0 and c["M"] > 0 and c["T"] > 0, "eps, M, T must be positive")
    d = Domain.cylinder(float(c["L"]), float(c["r"]), float(c["eps"]))
    if lemma == "cap":
        return [tj.verify_single_bounce_cap(d, c["eta"], c["M"], c["T"], int(c["samples"]), c["seed"])]
    if lemma == "lateral":
        return [tj.verify_single_bounce_lateral(d, c["eta"], c["M"], c["T"], int(c["samples"]), c["seed"])]
    if lemma == "circle":
        x0 = np.array([0.0, 0.3 * d.R, 0.1 * d.R])
        v0 = np.array([0.3, 0.8, 0.5])
        return [tj.verify_circle_chain(d, x0, v0, int(c["chain_len"]))]
    return [tj.verify_diffuse_then_lateral_angle(d, c["eta"], int(c["samples"]), c["M"], c["seed"])]


def run_kernel_bounds(c):
    from . import collision as col
    from .transport import maxwell_flux_check
    checks = ("nu-bounds", "k1", "conservation", "coercivity", "split", "cq", "maxwell-flux")
    which = checks if c["check"] == "all" else (c["check"],)
    for w in which:
        _validate(w in checks, f"unknown check {w!r}")
    grid = col.VelocityGrid(float(c["v_max"]), int(c["n_v"]))
    out = []
    ck = None

    def kernel():
        nonlocal ck
        if ck is None:
            ck = col.CollisionKernel(grid)
        return ck

    for w in which:
        if w == "nu-bounds":
            out.append(col.nu_bounds_check(grid))
        elif w == "k1":
            out.append(col.k1_check(kernel(), N=float(c["N"]), seed=c["seed"], ck_samples=int(c["ck_samples"])))
        elif w == "conservation":
            out.append(col.conservation_check(kernel(), int(c["n_inputs"]), c["seed"]))
        elif w == "coercivity":
            out.append(col.coercivity_sanity(kernel(), seed=c["seed"]))
        elif w == "split":
            out.append(col.split_check(kernel(), tuple(c["deltas"]), seed=c["seed"]))
        elif w == "cq":
            out.append(cq_report(grid, c["seed"]))
        else:
            out.append(maxwell_flux_check(seed=c["seed"]))
    return out


def cq_report(grid, seed):
    """Measured bilinear constant C_Q of Q in the default transport weight (measured only)."""
    from .collision import CollisionKernel
    from .report import Timer
    from .transport import default_weight, measure_cq
    rep = ExperimentReport("kernel_cq", seed=seed, params=dict(v_max=grid.v_max, n_v=grid.n_v))
    with Timer() as tm:
        cq, spread = measure_cq(CollisionKernel(grid, interp_order=1), default_weight(), seed=seed)
    rep.measure("C_Q", cq, spread, "max ratio over random pairs; uncertainty is the relative gap of the two largest")
    rep.check("C_Q_finite", np.isfinite(cq) and cq > 0, cq)
    rep.timing = tm.elapsed
    return rep


def run_jacobian(c):
    from .trajectories import jacobian_check
    return [jacobian_check(c["t"], c["s"], c["r"], tuple(c["eps"]))]


def run_decay_linear(c):
    from .collision import VelocityGrid
    from .transport import decay_linear
    return [decay_linear(tuple(c["eps"]), c["dx"], VelocityGrid(c["v_max"], int(c["n_v"])), c["dt"],
                         c["horizon_scale"], spectral=bool(c["spectral"]), seed=c["seed"])]


def run_decay_nonlinear(c):
    from .collision import VelocityGrid
    from .transport import decay_nonlinear
    return [decay_nonlinear(c["eps"], c["dx"], VelocityGrid(c["v_max"], int(c["n_v"])), c["dt"], c["horizon"],
                            pairs=int(c["pairs"]), seed=c["seed"])]


def run_decay_split(c):
    from .collision import VelocityGrid
    from .transport import decay_split
    return [decay_split(c["eps"], c["dx"], VelocityGrid(c["v_max"], int(c["n_v"])), c["dt"], c["horizon"],
                        c["delta"], c["amplitude"], seed=c["seed"])]


def run_poisson(c):
    from . import elliptic
    mode = c["bc_mode"]
    _validate(mode in ("P1", "P2", "both"), f"unknown bc mode {mode!r}")
    if mode == "both":
        return [elliptic.poisson_experiment(tuple(c["eps"]), int(c["trials"]), c["seed"])]
    return [elliptic.verify_epsilon_scaling(mode, tuple(c["eps"]), int(c["trials"]), c["seed"])]


RUNNERS = {
    "verify-stretching": run_verify_stretching,
    "kernel-bounds": run_kernel_bounds,
    "jacobian": run_jacobian,
    "decay-linear": run_decay_linear,
    "decay-nonlinear": run_decay_nonlinear,
    "decay-split": run_decay_split,
    "poisson-scaling": run_poisson,
}


def run_report(c):
    """Aggregate stored JSON reports into the human table, without recomputation."""
    paths = c["paths"] or sorted(glob.glob(os.path.join(c["out"], "*.json")))
    if not paths:
        raise ConfigInvalid(f"no reports found in {c['out']}")
    reports = []
    for p in paths:
        with open(p) as fh:
            reports.append(json.load(fh))
    print(table(reports))
    return all(r.get("passed") for r in reports)


def build_parser():
    p = argparse.ArgumentParser(prog="kinstretch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"kinstretch {__version__}")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./kinstretch-out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    s = common(sub.add_parser("verify-stretching", help="single-bounce lemmas and billiard invariants"))
    s.add_argument("--lemma", choices=["cap", "lateral", "circle", "angle"])
    s.add_argument("--eps", type=float)
    for k in ("L", "r", "M", "T", "eta"):
        s.add_argument(f"--{k}", type=float)
    s.add_argument("--samples", type=int)
    s.add_argument("--chain-len", type=int)

    s = common(sub.add_parser("kernel-bounds", help="collision kernel bounds and conservation"))
    s.add_argument("--check", choices=["all", "nu-bounds", "k1", "conservation", "coercivity", "split", "cq",
                                       "maxwell-flux"])
    s.add_argument("--v-max", type=float)
    s.add_argument("--n-v", type=int)
    s.add_argument("--N", type=float)
    s.add_argument("--n-inputs", type=int)
    s.add_argument("--deltas", type=str)
    s.add_argument("--ck-samples", type=int)

    s = common(sub.add_parser("jacobian", help="direct and one-bounce Jacobians"))
    for k in ("t", "s", "r"):
        s.add_argument(f"--{k}", type=float)
    s.add_argument("--eps", type=str)

    s = common(sub.add_parser("decay-linear", help="linear decay and eps exponent"))
    s.add_argument("--eps", type=str)
    for k in ("dx", "v-max", "dt", "horizon-scale"):
        s.add_argument(f"--{k}", type=float)
    s.add_argument("--n-v", type=int)
    s.add_argument("--no-spectral", dest="spectral", action="store_false", default=None)

    s = common(sub.add_parser("decay-nonlinear", help="nonlinear contraction and decay"))
    for k in ("eps", "dx", "v-max", "dt", "horizon"):
        s.add_argument(f"--{k}", type=float)
    s.add_argument("--n-v", type=int)
    s.add_argument("--pairs", type=int)

    s = common(sub.add_parser("decay-split", help="split system with weak weight"))
    for k in ("eps", "dx", "v-max", "dt", "horizon", "delta", "amplitude"):
        s.add_argument(f"--{k}", type=float)
    s.add_argument("--n-v", type=int)

    s = common(sub.add_parser("poisson-scaling", help="Poisson eps^-2 scaling, convergence, reflection"))
    s.add_argument("--bc-mode", choices=["P1", "P2", "both"])
    s.add_argument("--eps", type=str)
    s.add_argument("--trials", type=int)

    s = common(sub.add_parser("report", help="table of stored JSON reports"))
    s.add_argument("paths", nargs="*", default=None)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.cmd == "report" and not args.paths:
        args.paths = None
    try:
        cfg = resolve(args.cmd, args, load_config(args.config))
        if args.cmd == "report":
            return 0 if run_report(cfg) else 1
        reports: list[ExperimentReport] = RUNNERS[args.cmd](cfg)
    except ConfigInvalid as exc:
        print(f"kinstretch: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"kinstretch {args.cmd}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    for rep in reports:
        rep.params.setdefault("seed", cfg["seed"])
        j, c = rep.write(cfg["out"])
        log.info("wrote %s and %s", j, c)
    print(table([r.to_dict() for r in reports]))
    return 0 if all(r.passed for r in reports) else 1


if __name__ == "__main__":
    sys.exit(main())
