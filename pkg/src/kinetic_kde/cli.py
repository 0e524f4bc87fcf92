"""Command line: build a coreset, simulate the kinetic quadtree, validate the pipeline.

All coordinates and the domain size are divided by the kernel width
``sigma`` on input so that the kernel has unit support internally; track
positions are written back in input units.

Exit status: 0 on success, 1 when validation fails, 2 on bad input.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import kds, scenario as scen
from .coreset import build_coreset, choose_parameters, coreset_from_dict, verification_probes, \
    verify_range_error
from .kds import DomainExit, audit, event_bound, maxima_track, tracks_to_csv
from .kernel import make_kernel
from .persistence import CellComplex, check_injection
from .wquadtree import MAX_POINTERS, depth_bound, node_count_bound, rasterize as tree_raster

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
DEFAULT_CORESET_FLOOR = 0.02
BUILTINS = {"reference": scen.reference_scenario, "merge": scen.merge_scenario,
            "static": lambda seed=0: scen.generate({"n": 20, "clusters": 1, "speed": 0.0, "spread": 0.25,
                                                   "T": 1.0, "seed": seed})}


class InputError(ValueError):
    pass


@dataclass
class Config:
    epsilon: float = 0.5
    kernel: str = None  # None keeps the scenario's kernel
    sigma: float = None
    D: float = None
    T: float = None
    seed: int = 0
    z_star: float = 1.0
    out: str = "."
    coreset_epsilon: float = DEFAULT_CORESET_FLOOR  # smallest coreset error actually built
    rho: float = None  # None derives rho from epsilon

    def check(self):
        if not 0 < self.epsilon <= 1:
            raise InputError(f"--epsilon must lie in (0, 1], got {self.epsilon}")
        if self.sigma is not None and not self.sigma > 0:
            raise InputError("--sigma must be positive")
        if self.D is not None and not self.D > 0:
            raise InputError("--domain must be positive")
        if self.T is not None and not self.T > 0:
            raise InputError("--horizon must be positive")
        if not 0 < self.z_star <= 1:
            raise InputError("--zstar must lie in (0, 1]")
        if not 0 < self.coreset_epsilon < 1:
            raise InputError("--coreset-epsilon must lie in (0, 1)")
        if self.rho is not None and not 0 < self.rho < 1:
            raise InputError("--rho must lie in (0, 1)")
        if self.kernel is not None and self.kernel not in scen.KERNEL_NAMES:
            raise InputError(f"unknown kernel {self.kernel}")
        return self


def parameters(config, kernel):
    rho, eps_cor, eps_dsc = choose_parameters(config.epsilon, kernel.lipschitz, config.z_star)
    used_cor = max(eps_cor, config.coreset_epsilon)
    return {
        "epsilon": config.epsilon,
        "lipschitz": kernel.lipschitz,
        "z_star": config.z_star,
        "rho": rho,
        "epsilon_cor": eps_cor,
        "epsilon_dsc": eps_dsc,
        "rho_used": config.rho if config.rho is not None else rho,
        "epsilon_cor_used": used_cor,
        "target_met": used_cor <= eps_cor,
    }


def load_scenario(source, config):
    """Scenario from a JSON file or a builtin name (``builtin:reference``, ``builtin:merge``, ``builtin:static``)."""
    if source.startswith("builtin:"):
        name = source.split(":", 1)[1]
        if name not in BUILTINS:
            raise InputError(f"unknown builtin scenario '{name}' (choose from {', '.join(sorted(BUILTINS))})")
        text = scen.dumps(BUILTINS[name](seed=config.seed))
    else:
        try:
            with open(source) as fh:
                text = fh.read()
        except OSError as e:
            raise InputError(f"cannot read {source}: {e.strerror}") from None
    return scenario_from_text(text, config)


def scenario_from_text(text, config):
    sc = scen.loads(text, sigma=config.sigma, epsilon=config.epsilon, seed=config.seed)
    if config.kernel is not None:
        sc.kernel = make_kernel(scen.KERNEL_NAMES[config.kernel])
    if config.D is not None:
        sc.D = config.D / sc.sigma
    if config.T is not None:
        sc.T = config.T
    try:
        # samples sit up to one kernel width from their point, so supports must fit
        sc.validate(margin=scen.MARGIN)
    except ValueError as e:
        raise InputError(f"{e}; kernel supports must stay inside the domain") from None
    return sc


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- build --------------------------------------------------------------------------

def build(sc, config, n_verify=10_000):
    """Coreset plus its parameter and verification report."""
    par = parameters(config, sc.kernel)
    Q = build_coreset(sc.points, sc.kernel, par["epsilon_cor_used"], sc.T, D=sc.D, rho=par["rho_used"],
                      seed=config.seed)
    probes = verification_probes(sc.points, sc.T, n_verify, seed=config.seed + 1)
    err = verify_range_error(Q, sc.points, sc.kernel, probes)
    report = dict(par)
    report.update({
        "coreset_size": len(Q),
        "verification_probes": len(probes),
        "verification_digest": probes.digest,
        "verification_max_error": err,
        "verification_passed": bool(err < par["epsilon_cor_used"]),
        "construction": Q.report,
    })
    Q.report = report
    return Q, report


def cmd_build(config, source):
    config.check()
    sc = load_scenario(source, config)
    Q, report = build(sc, config)
    os.makedirs(config.out, exist_ok=True)
    doc = {"config": asdict(config), "scenario": scen.to_dict(sc), "coreset": Q.to_dict()}
    doc["config"].pop("out")
    _dump(doc, os.path.join(config.out, "coreset.json"))
    _dump(report, os.path.join(config.out, "build_report.json"))
    return Q, report


def load_coreset(path, config=None):
    """Scenario, coreset and stored config from a coreset file; explicit ``config`` fields win."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise InputError(f"cannot read {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: line {e.lineno}: invalid JSON: {e.msg}") from None
    for key in ("config", "scenario", "coreset"):
        if key not in doc:
            raise InputError(f"{path}: missing '{key}'")
    stored = Config(**doc["config"])
    if config is not None:
        for k, v in asdict(config).items():
            if v is not None and k in _explicit(config):
                setattr(stored, k, v)
        stored.out = config.out if "out" in _explicit(config) else os.path.dirname(os.path.abspath(path))
    sc = scenario_from_text(json.dumps(doc["scenario"]), stored)
    try:
        Q = coreset_from_dict(doc["coreset"], sc.points)
    except (KeyError, TypeError) as e:
        raise InputError(f"{path}: malformed coreset: {e}") from None
    return sc, Q, stored


def _explicit(config):
    return getattr(config, "_explicit", set(asdict(config)))


# -- simulate ----------------------------------------------------------------------------

def simulate(sc, Q, config, snapshot_times=(), out=None):
    par = parameters(config, sc.kernel)
    state = kds.init(Q, par["rho_used"], sc.D, 0.0, epsilon=config.epsilon)
    for i, t in enumerate(sorted(snapshot_times)):
        if not 0 <= t <= sc.T:
            raise InputError(f"snapshot time {t} outside [0, {sc.T}]")
        state.advance(t)
        if out is not None:
            state.tree.to_svg(os.path.join(out, f"snapshot_{i:03d}.svg"), epsilon=config.epsilon)
    state.advance(sc.T)
    return state


def cmd_simulate(config, coreset_path, snapshot_times=()):
    sc, Q, cfg = load_coreset(coreset_path, config)
    cfg.check()
    os.makedirs(cfg.out, exist_ok=True)
    start = time.perf_counter()
    state = simulate(sc, Q, cfg, snapshot_times, cfg.out)
    tracks = maxima_track(state.log)
    state.log.to_csv(os.path.join(cfg.out, "events.csv"))
    tracks_to_csv(tracks, os.path.join(cfg.out, "tracks.csv"), sc.D * sc.sigma, state.tree.F)
    summary = state.metrics.summary(state.tree.depth())
    summary.pop("update_seconds")
    summary.update({"tracks": len(tracks), "coreset_size": len(Q), "depth": state.tree.depth(),
                    "depth_bound": depth_bound(sc.D, parameters(cfg, sc.kernel)["rho_used"], cfg.z_star)})
    _dump(summary, os.path.join(cfg.out, "metrics.json"))
    print(f"simulated {summary['events_processed']} events in {time.perf_counter() - start:.2f}s; "
          f"{len(tracks)} tracks", file=sys.stderr)
    return state, tracks


# -- validate ----------------------------------------------------------------------------

LEVELS = {
    "fast": {"verify": 2000, "raster": 128, "audits": 5, "injection_times": 2},
    "full": {"verify": 10_000, "raster": 512, "audits": 100, "injection_times": 10},
}


def validate(sc, config, level="fast", coreset=None):
    """Run the invariant suite; returns a list of ``(name, ok, detail)``."""
    opts = LEVELS[level]
    par = parameters(config, sc.kernel)
    rho = par["rho_used"]
    checks = []
    rng = np.random.default_rng([config.seed, 5])

    def record(name, ok, detail):
        checks.append((name, bool(ok), detail))

    Q = coreset if coreset is not None else build(sc, config, n_verify=opts["verify"])[0]
    probes = verification_probes(sc.points, sc.T, opts["verify"], seed=config.seed + 1)
    err = verify_range_error(Q, sc.points, sc.kernel, probes)
    record("coreset range error", err < par["epsilon_cor_used"],
           f"max error {err:.3g} vs bound {par['epsilon_cor_used']:.3g} over {len(probes)} probes")

    state = kds.init(Q, rho, sc.D, 0.0, epsilon=config.epsilon)
    times = sorted({0.0, sc.T / 2, sc.T} | set(np.round(rng.uniform(0, sc.T, opts["audits"]), 12).tolist()))
    inj_times = set(np.linspace(0, sc.T, opts["injection_times"]).tolist())
    times = sorted(set(times) | inj_times)
    worst_gap, audits_ok, first_bad, struct_bad, inj_bad = 0.0, 0, None, [], []
    min_side = math.sqrt(rho) / 2
    dbound, nbound = depth_bound(sc.D, rho, config.z_star), node_count_bound(sc.D, rho, config.z_star)
    for t in times:
        state.advance(t)
        rep = audit(state)
        if rep.ok:
            audits_ok += 1
        elif first_bad is None:
            first_bad = f"t={t:.6g}: {rep.divergence}"
        tree = state.tree
        leaf_side = min(tree.side(v.level) for v in tree.leaves())
        biggest_M = max(len(v.M) for v in tree.nodes.values())
        if not (leaf_side > min_side and tree.depth() <= dbound and len(tree.nodes) <= nbound
                and biggest_M <= MAX_POINTERS and len(state.heap) == len(Q)):
            struct_bad.append(t)
        if t in (0.0, sc.T / 2, sc.T) or t in inj_times:
            r = scen.rasterize(sc, t, opts["raster"])
            ft = tree_raster(tree, opts["raster"])
            gap = float(np.abs(r.heights - ft).max())
            if t in (0.0, sc.T / 2, sc.T):
                worst_gap = max(worst_gap, gap - r.slack)
            if t in inj_times:
                rep = check_injection(CellComplex.from_raster(r.heights), CellComplex.from_raster(ft),
                                      config.epsilon + r.slack)
                if not rep.ok:
                    inj_bad.append(f"t={t:.6g}: {rep.message}")
    record("quadtree error bound", worst_gap < config.epsilon,
           f"max |KDE - f_T| minus raster slack {worst_gap:.3g} vs epsilon {config.epsilon}")
    record("structural bounds", not struct_bad,
           f"leaf side > {min_side:.3g}, depth <= {dbound:.3g}, nodes <= {nbound:.4g}, |M| <= {MAX_POINTERS}"
           + (f"; violated at t={struct_bad[:3]}" if struct_bad else ""))
    record("kinetic audits", audits_ok == len(times),
           f"{audits_ok}/{len(times)} audits identical to a rebuild" + (f"; first divergence {first_bad}" if first_bad else ""))
    bound = event_bound(Q, rho, sc.D, 0.0, sc.T)
    ev = state.metrics.events_processed
    record("event budget", ev <= bound, f"{ev} events vs bound {bound:.0f}")
    record("maxima injection", not inj_bad, "; ".join(inj_bad) or f"{len(inj_times)} times checked")
    return checks


def cmd_validate(config, source, level="fast", coreset_path=None):
    if coreset_path:
        sc, Q, cfg = load_coreset(coreset_path, config)
    else:
        cfg = config
        sc, Q = load_scenario(source, cfg), None
    cfg.check()
    start = time.perf_counter()
    checks = validate(sc, cfg, level, Q)
    ok = all(c[1] for c in checks)
    for name, good, detail in checks:
        print(f"{'PASS' if good else 'FAIL'} {name}: {detail}")
    print(f"{'PASS' if ok else 'FAIL'} overall ({level}, {time.perf_counter() - start:.1f}s)")
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        _dump({"level": level, "ok": ok, "checks": [{"name": n, "ok": g, "detail": d} for n, g, d in checks]},
              os.path.join(cfg.out, "validation.json"))
    return ok


# -- argument parsing -------------------------------------------------------------------

def _common(p):
    p.add_argument("--epsilon", type=float, help="target approximation error (default 0.5)")
    p.add_argument("--kernel", choices=["cone", "pyramid", "gaussian"], help="override the scenario kernel")
    p.add_argument("--sigma", type=float, help="kernel width in input units (default: from file, else 1)")
    p.add_argument("--domain", type=float, help="domain side D in input units")
    p.add_argument("--horizon", type=float, help="time horizon T")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--zstar", type=float, help="lower bound on the peak of the density (default 1)")
    p.add_argument("--out", help="output directory (default .)")
    p.add_argument("--coreset-epsilon", type=float,
                   help=f"smallest coreset error to build (default {DEFAULT_CORESET_FLOOR})")
    p.add_argument("--rho", type=float, help="override the quadtree weight threshold")


def make_parser():
    ap = argparse.ArgumentParser(prog="kinetic-kde", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    b = sub.add_parser("build", help="build and verify a coreset for a trajectory file")
    b.add_argument("trajectories", help="scenario JSON file or builtin:NAME")
    _common(b)
    s = sub.add_parser("simulate", help="run the kinetic quadtree over [0, T]")
    s.add_argument("coreset", help="coreset.json written by build")
    s.add_argument("--snapshot-times", type=lambda x: [float(v) for v in x.split(",") if v],
                   default=[], help="comma separated times for SVG snapshots")
    _common(s)
    v = sub.add_parser("validate", help="run the invariant suite")
    v.add_argument("trajectories", nargs="?", default="builtin:reference", help="scenario JSON file or builtin:NAME")
    v.add_argument("--coreset", help="validate this coreset file instead of building one")
    v.add_argument("--validate-level", choices=["fast", "full"], default="fast")
    _common(v)
    g = sub.add_parser("scenario", help="write a builtin scenario to a JSON file")
    g.add_argument("name", choices=sorted(BUILTINS))
    g.add_argument("path")
    g.add_argument("--seed", type=int, default=0)
    return ap


FLAG_FIELDS = {"epsilon": "epsilon", "kernel": "kernel", "sigma": "sigma", "domain": "D", "horizon": "T",
               "seed": "seed", "zstar": "z_star", "out": "out", "coreset_epsilon": "coreset_epsilon", "rho": "rho"}


def config_from_args(args):
    cfg = Config()
    explicit = set()
    for flag, name in FLAG_FIELDS.items():
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, name, val)
            explicit.add(name)
    cfg._explicit = explicit
    return cfg


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        if args.command == "scenario":
            scen.save(BUILTINS[args.name](seed=args.seed), args.path)
            return EXIT_OK
        cfg = config_from_args(args)
        if args.command == "build":
            _, report = cmd_build(cfg, args.trajectories)
            print(json.dumps({k: report[k] for k in ("rho", "epsilon_cor", "epsilon_dsc", "epsilon_cor_used",
                                                     "coreset_size", "verification_max_error")}, sort_keys=True))
            return EXIT_OK if report["verification_passed"] else EXIT_FAIL
        if args.command == "simulate":
            cmd_simulate(cfg, args.coreset, args.snapshot_times)
            return EXIT_OK
        if args.command == "validate":
            return EXIT_OK if cmd_validate(cfg, args.trajectories, args.validate_level, args.coreset) else EXIT_FAIL
    except (InputError, scen.ScenarioError, DomainExit) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
