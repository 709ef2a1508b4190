"""Command-line front end.

Commands: ``fit``, ``simulate``, ``summarize``, ``hermite-split`` and
``check-separation``.  Exit status is 0 on success, 2 on usage or input
errors and 3 on numerical failure.

Config files are flat ``key = value`` text; values are parsed as JSON when
possible (numbers, ``true``/``false``, lists) and kept as strings otherwise.
Every hyperparameter field is addressable, plus the run controls listed in
``RUN_KEYS``.  Unknown keys are rejected.

Snapshot files are line delimited.  The first line is the version tag
``# npmix-snapshots 1``, the second ``# hyperparams <json>``; every further
line is one JSON record with fields, in order: ``iteration``, ``w``, ``c``,
``r``, ``rest`` (leftover stick mass per component) and ``atoms``, a list of
``[k, j, u_1..u_m, cov lower triangle row by row, beta]``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from dataclasses import fields
from pathlib import Path

import numpy as np

from npmix import __version__
from npmix.errors import (
    ConditioningError,
    DegenerateEstimateError,
    InvalidArgumentError,
    NumericalFailure,
    NumericalMassError,
    SliceDegenerateError,
)
from npmix.geometry import check_separation_C2
from npmix.hermite import hermite_split
from npmix.model import Atoms, Dataset, Hyperparams, Snapshot
from npmix.sampler import SweepPlan, run
from npmix import summary, synthgen

log = logging.getLogger("npmix")

SNAPSHOT_VERSION = 1
SNAPSHOT_TAG = f"# npmix-snapshots {SNAPSHOT_VERSION}"
RUN_KEYS = {
    "iters": 2000, "burnin": 1000, "thin": 1, "seed": 0, "threads": 1, "mh_step": 0.3,
    "adapt_mh": True, "block_size": 4096, "data": None, "out": None,
}
HP_KEYS = {f.name for f in fields(Hyperparams)}
NUMERIC_ERRORS = (NumericalFailure, SliceDegenerateError, NumericalMassError, ConditioningError,
                  DegenerateEstimateError, FloatingPointError)


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# config and data files
# ---------------------------------------------------------------------------


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_config(path) -> dict:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, val = (t.strip() for t in line.split("=", 1))
            out[key] = parse_value(val)
    check_keys(out)
    return out


def check_keys(cfg: dict):
    unknown = set(cfg) - HP_KEYS - set(RUN_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")


def split_config(cfg: dict):
    hp = {k: v for k, v in cfg.items() if k in HP_KEYS}
    runcfg = dict(RUN_KEYS)
    runcfg.update({k: v for k, v in cfg.items() if k in RUN_KEYS})
    return hp, runcfg


def read_data(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such data file: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise UsageError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != len(header):
                raise UsageError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise UsageError(f"{path}:{lineno}: non-numeric value") from None
    x = np.asarray(rows, dtype=float).reshape(-1, len(header))
    if not np.all(np.isfinite(x)):
        raise UsageError(f"{path}: data contain non-finite values")
    return Dataset(x, [h.strip() for h in header])


def write_csv(path, header, columns):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*columns):
            fh.write(",".join(v if isinstance(v, str) else _fmt(v) for v in row) + "\n")


# ---------------------------------------------------------------------------
# snapshot files
# ---------------------------------------------------------------------------


def _jsonable(v):
    return float(v)


def snapshot_record(sn: Snapshot) -> dict:
    m = sn.dim
    tril = np.tril_indices(m)
    atoms = []
    for k, at in enumerate(sn.atoms):
        for j in range(len(at)):
            atoms.append([k, j] + [_jsonable(v) for v in at.u[j]]
                         + [_jsonable(v) for v in at.cov[j][tril]] + [_jsonable(at.beta[j])])
    return {
        "iteration": int(sn.iteration),
        "w": [_jsonable(v) for v in sn.w],
        "c": [[_jsonable(v) for v in row] for row in sn.c],
        "r": [_jsonable(v) for v in sn.r],
        "rest": [_jsonable(at.rest) for at in sn.atoms],
        "atoms": atoms,
    }


def write_snapshots(path, snapshots, hp: Hyperparams):
    with open(path, "w") as fh:
        fh.write(SNAPSHOT_TAG + "\n")
        fh.write("# hyperparams " + json.dumps(hp.to_dict(), sort_keys=True) + "\n")
        for sn in snapshots:
            fh.write(json.dumps(snapshot_record(sn)) + "\n")


def parse_snapshot(rec: dict, m: int) -> Snapshot:
    c = np.asarray(rec["c"], dtype=float).reshape(-1, m)
    K = c.shape[0]
    tril = np.tril_indices(m)
    ntri = len(tril[0])
    per = [[] for _ in range(K)]
    for row in rec["atoms"]:
        per[int(row[0])].append(row)
    atoms = []
    for k in range(K):
        rows = sorted(per[k], key=lambda r: r[1])
        u = np.array([r[2:2 + m] for r in rows], dtype=float).reshape(-1, m)
        cov = np.zeros((len(rows), m, m))
        for j, r in enumerate(rows):
            L = np.zeros((m, m))
            L[tril] = r[2 + m:2 + m + ntri]
            cov[j] = L + np.tril(L, -1).T
        beta = np.array([r[-1] for r in rows], dtype=float)
        atoms.append(Atoms(u, cov, beta, float(rec["rest"][k])))
    return Snapshot(int(rec["iteration"]), np.asarray(rec["w"], dtype=float), c,
                    np.asarray(rec["r"], dtype=float), atoms)


def read_snapshots(path):
    """Return ``(hyperparams, snapshots)`` from a snapshot file."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such snapshot file: {path}")
    with open(path) as fh:
        tag = fh.readline().rstrip("\n")
        if tag != SNAPSHOT_TAG:
            raise UsageError(f"{path}: not a version {SNAPSHOT_VERSION} snapshot file")
        hline = fh.readline()
        if not hline.startswith("# hyperparams "):
            raise UsageError(f"{path}: missing hyperparameter header")
        hp = Hyperparams.from_dict(json.loads(hline[len("# hyperparams "):]))
        snaps = []
        for lineno, line in enumerate(fh, 3):
            if not line.strip():
                continue
            try:
                snaps.append(parse_snapshot(json.loads(line), hp.dim))
            except (json.JSONDecodeError, KeyError, IndexError, ValueError) as exc:
                raise UsageError(f"{path}:{lineno}: malformed record ({exc})") from None
    return hp, snaps


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _threads(runcfg) -> int:
    env = os.environ.get("NPMIX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError("NPMIX_THREADS must be an integer") from None
    return int(runcfg["threads"])


def cmd_fit(args) -> int:
    cfg = read_config(args.config) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k.strip()] = parse_value(v)
    for key in ("iters", "burnin", "thin", "seed", "threads", "data", "out"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    check_keys(cfg)
    hp_cfg, runcfg = split_config(cfg)
    if runcfg["data"] is None or runcfg["out"] is None:
        raise UsageError("fit needs --data and --out (or data/out in the config)")
    data = read_data(runcfg["data"])
    hp_cfg.setdefault("dim", data.dim)
    if "K" not in hp_cfg and hp_cfg.get("fixed_centers") is not None:
        hp_cfg["K"] = len(hp_cfg["fixed_centers"])
    try:
        hp = Hyperparams(**hp_cfg)
    except TypeError as exc:
        raise UsageError(str(exc)) from None
    if hp.dim != data.dim:
        raise UsageError(f"dim={hp.dim} but the data have {data.dim} columns")
    iters, burnin, thin = int(runcfg["iters"]), int(runcfg["burnin"]), int(runcfg["thin"])
    if not iters > burnin >= 0 or thin < 1:
        raise UsageError("require iters > burnin >= 0 and thin >= 1")
    threads = _threads(runcfg)
    plan = SweepPlan(parallel=threads > 1, threads=threads, mh_step=float(runcfg["mh_step"]),
                     adapt_mh=bool(runcfg["adapt_mh"]), block_size=int(runcfg["block_size"]))
    out = Path(runcfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    chain = run(data, hp, plan, iters=iters, burnin=burnin, thin=thin, seed=int(runcfg["seed"]))
    write_snapshots(out / "samples.txt", chain.snapshots, hp)
    alloc = chain.allocation()
    write_csv(out / "allocation.csv", ["label"], [[str(int(v)) for v in alloc]])
    with open(out / "run.log", "w") as fh:
        fh.write(f"npmix {__version__}\n")
        fh.write(f"data: {runcfg['data']} (n={data.n}, m={data.dim})\n")
        fh.write(f"iters: {iters} burnin: {burnin} thin: {thin} seed: {runcfg['seed']} "
                 f"threads: {threads}\n")
        fh.write(f"snapshots: {len(chain.snapshots)}\n")
        fh.write("r_acceptance: " + " ".join(f"{a:.4f}" for a in chain.acceptance) + "\n")
        for k, v in chain.timing.items():
            fh.write(f"{k}: {v:.4f}\n")
        fh.write("hyperparams: " + json.dumps(hp.to_dict(), sort_keys=True) + "\n")
    print(f"wrote {len(chain.snapshots)} snapshots to {out / 'samples.txt'}")
    return 0


def _component_manifest(comp) -> dict:
    if isinstance(comp, synthgen.HermiteDensity):
        return {"type": "hermite", "coefs": comp.coefs.tolist(), "center": comp.center,
                "scale": comp.scale, "lo": comp.lo, "hi": comp.hi}
    if isinstance(comp, synthgen.LaplaceDensity):
        return {"type": "laplace", "mu": comp.mu, "b": comp.b}
    if isinstance(comp, synthgen.SkewExpPowerDensity):
        return {"type": "skew_exp_power", "mu": comp.mu, "alpha": comp.alpha,
                "beta_shape": comp.beta_shape, "skew": comp.skew}
    g = comp if isinstance(comp, synthgen.GaussianMixtureDensity) else comp.g
    return {"type": "gaussian_mixture", "weights": g.weights.tolist(), "means": g.means.tolist(),
            "covs": g.covs.tolist(), "support": g.means.tolist()}


DESIGNS = {
    "three_component": lambda seed: synthgen.three_component_truth(seed),
    "circle": lambda seed: synthgen.circle_truth(seed),
    "two_gaussian": lambda seed: synthgen.gaussian_truth((0.7, 0.3), (-3.0, 3.0), (0.5, 0.5)),
    "scale": lambda seed: synthgen.scale_separated_truth(seed=seed),
}


def cmd_simulate(args) -> int:
    if args.n < 0:
        raise UsageError("n must be nonnegative")
    truth = DESIGNS[args.design](args.seed)
    ds, labels = synthgen.sample_mixture(truth, args.n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = [f"x{i + 1}" for i in range(ds.dim)]
    write_csv(out / "data.csv", cols, [ds.x[:, i] for i in range(ds.dim)])
    write_csv(out / "labels.csv", ["label"], [[str(int(v)) for v in labels]])
    manifest = {"design": args.design, "seed": args.seed, "n": args.n,
                "weights": truth.weights.tolist(),
                "components": [_component_manifest(c) for c in truth.components]}
    with open(out / "truth.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    print(f"wrote {args.n} observations to {out / 'data.csv'}")
    return 0


def _band_csv(path, band: summary.DensityGrid):
    if band.ndim == 1:
        write_csv(path, ["grid", "mean", "lo", "hi"], [band.grid, band.mean, band.lower, band.upper])
        return
    gx, gy = band.grid
    X, Y = np.meshgrid(gx, gy, indexing="ij")
    write_csv(path, ["x", "y", "mean", "lo", "hi"],
              [X.ravel(), Y.ravel(), band.mean.ravel(), band.lower.ravel(), band.upper.ravel()])


def _snapshot_grid(snaps, m: int, points: int):
    """Grid spanning atom means padded by three kernel standard deviations."""
    lo = np.full(m, np.inf)
    hi = np.full(m, -np.inf)
    for sn in snaps:
        for at in sn.atoms:
            if len(at):
                sd = np.sqrt(np.diagonal(at.cov, axis1=-2, axis2=-1))
                lo = np.minimum(lo, (at.u - 3 * sd).min(axis=0))
                hi = np.maximum(hi, (at.u + 3 * sd).max(axis=0))
    axes = [np.linspace(lo[a], hi[a], points) for a in range(m)]
    return axes[0] if m == 1 else tuple(axes)


def cmd_summarize(args) -> int:
    hp, snaps = read_snapshots(args.samples)
    if not snaps:
        raise UsageError("snapshot file has no records")
    if not 0 <= args.level < 1:
        raise UsageError("level must lie in [0, 1)")
    points = args.points or (summary.DEFAULT_POINTS if hp.dim == 1 else 128)
    if args.data:
        grid = summary.default_grid(read_data(args.data).x, points)
    else:
        grid = _snapshot_grid(snaps, hp.dim, points)
    if hp.dim > 2:
        raise UsageError("density grids are available in one or two dimensions")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _band_csv(out / "density_mixture.csv", summary.density_band(snaps, "mixture", grid, args.level, hp))
    for k in range(hp.K):
        band = summary.density_band(snaps, k, grid, args.level, hp, weighted=args.weighted)
        _band_csv(out / f"density_component_{k}.csv", band)
    wt = summary.weight_table(snaps, args.weight_level)
    write_csv(out / "weights.csv", ["component", "mean", "lo", "hi"],
              [wt.labels, wt.mean, wt.lower, wt.upper])
    if args.cdf:
        F = summary.cdf_grid(snaps, grid, hp)
        if hp.dim == 1:
            write_csv(out / "cdf.csv", ["grid", "cdf"], [grid, F])
        else:
            X, Y = np.meshgrid(*grid, indexing="ij")
            write_csv(out / "cdf.csv", ["x", "y", "cdf"], [X.ravel(), Y.ravel(), F.ravel()])
    print(f"wrote summaries for {len(snaps)} snapshots to {out}")
    return 0


def cmd_hermite_split(args) -> int:
    data = read_data(args.data)
    if data.dim != 1:
        raise UsageError("hermite-split needs one-dimensional data")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = hermite_split(data.x[:, 0], args.c1, args.c2, args.sigma, ell=args.ell,
                            epsilon=args.epsilon, r1=args.r1, r2=args.r2,
                            bandwidth=args.bandwidth)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lo, hi = res.basis.domain()
    grid = np.linspace(lo, hi, args.points)
    write_csv(out / "component_1.csv", ["grid", "density"], [grid, res.f1_hat(grid)])
    write_csv(out / "component_2.csv", ["grid", "density"], [grid, res.f2_hat(grid)])
    write_csv(out / "weights.csv", ["component", "weight"], [["1", "2"], list(res.weights)])
    print(f"ell={res.basis.ell} weights={res.weights[0]:.6f},{res.weights[1]:.6f}")
    return 0


def cmd_check_separation(args) -> int:
    if args.truth:
        path = Path(args.truth)
        if not path.is_file():
            raise UsageError(f"no such manifest: {path}")
        with open(path) as fh:
            manifest = json.load(fh)
        supports = []
        for comp in manifest["components"]:
            if "support" not in comp:
                raise UsageError(f"component of type {comp['type']!r} has no finite support")
            supports.append(np.asarray(comp["support"], dtype=float))
    elif args.samples:
        _, snaps = read_snapshots(args.samples)
        if not snaps:
            raise UsageError("snapshot file has no records")
        sn = snaps[args.index]
        supports = [at.u for at in sn.atoms if len(at)]
    else:
        raise UsageError("give --truth or --samples")
    rep = check_separation_C2(supports, args.gap)
    print(f"separated: {'yes' if rep.separated else 'no'}")
    print(f"max_within: {_fmt(rep.max_within)}")
    print(f"min_between: {_fmt(rep.min_between)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npmix", description="Mixtures of Dirichlet process mixtures.")
    p.add_argument("--version", action="version", version=f"npmix {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="run the sampler")
    f.add_argument("--config")
    f.add_argument("--data")
    f.add_argument("--out")
    f.add_argument("--iters", type=int)
    f.add_argument("--burnin", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--threads", type=int)
    f.add_argument("--set", action="append", metavar="KEY=VALUE")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="draw a synthetic data set")
    s.add_argument("--design", choices=sorted(DESIGNS), default="three_component")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    m = sub.add_parser("summarize", help="density bands, weights and CDFs from a snapshot file")
    m.add_argument("--samples", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--data", help="set the grid from the data range")
    m.add_argument("--points", type=int)
    m.add_argument("--level", type=float, default=0.95)
    m.add_argument("--weight-level", type=float, default=0.68)
    m.add_argument("--weighted", action="store_true", help="scale component densities by weight")
    m.add_argument("--cdf", action="store_true")
    m.set_defaults(func=cmd_summarize)

    h = sub.add_parser("hermite-split", help="two-component Hermite estimator")
    h.add_argument("--data", required=True)
    h.add_argument("--c1", type=float, required=True)
    h.add_argument("--c2", type=float, required=True)
    h.add_argument("--sigma", type=float, required=True)
    h.add_argument("--ell", type=int)
    h.add_argument("--epsilon", type=float)
    h.add_argument("--r1", type=float, default=0.0)
    h.add_argument("--r2", type=float, default=0.0)
    h.add_argument("--bandwidth", type=float)
    h.add_argument("--points", type=int, default=512)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_hermite_split)

    c = sub.add_parser("check-separation", help="test the C2 separation condition")
    c.add_argument("--truth")
    c.add_argument("--samples")
    c.add_argument("--index", type=int, default=-1, help="snapshot to check")
    c.add_argument("--gap", type=float, required=True)
    c.set_defaults(func=cmd_check_separation)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (UsageError, InvalidArgumentError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
