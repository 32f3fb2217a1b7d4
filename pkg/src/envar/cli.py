"""Command-line front end.

Exit codes: 0 when every asserted check passes, 1 when a check fails (the
report is still written), 2 for malformed configuration or usage errors.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import binormal as bn
from . import euler_korteweg as ek
from .core import Trajectory
from .experiments import build, check_step_count
from .io import (
    ConfigError,
    ManifestMismatch,
    ReportBundle,
    check,
    config_hash,
    load_config,
    load_trajectory,
    save_trajectory,
    write_series_csv,
)
from .stepper import StepFailure, run
from .verify import (
    apriori_check,
    constant_functional,
    default_pairs,
    integrated_aux_energy,
    negative_defect_functional,
    reconstruct_min_defect,
    select_min_functional,
    verify,
    with_defect_profile,
)

FAILING_ENTRY_LIMIT = 200


class UsageError(ValueError):
    pass


def _out_dir(args, cfg: dict | None) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path(cfg["output_dir"]) if cfg else Path("envar-out")


def _load_run(args, cfg: dict, bundle: ReportBundle) -> Trajectory | None:
    """Load the trajectory for ``cfg``; records an integrity check in ``bundle``."""
    source = Path(args.trajectory) if args.trajectory else _out_dir(args, cfg) / "trajectory"
    if not (source / "manifest.json").exists():
        raise UsageError(f"no trajectory manifest in {source}")
    try:
        traj, _ = load_trajectory(source, force=args.force, expected_config=cfg)
        bundle.checks["manifest_integrity"] = check(0, 0, relation="==")
    except ManifestMismatch as exc:
        bundle.checks["manifest_integrity"] = check(1, 0, passed=False, relation="==")
        bundle.data["refusal"] = str(exc)
        return None
    return traj


def cmd_simulate(args, cfg: dict) -> ReportBundle:
    setup = build(cfg)
    check_step_count(setup)
    bundle = ReportBundle("simulate", config_hash(cfg))
    start = time.perf_counter()
    try:
        traj = run(setup.system, setup.initial, setup.horizon, setup.steps, cfg["restart_times"], setup.solver)
    except StepFailure as exc:
        bundle.checks["step_certificates"] = check(exc.diagnostics.get("sup", math.inf), setup.solver.tol, passed=False)
        bundle.data["failure"] = {"step": exc.index, "message": str(exc)}
        return bundle
    bundle.timing["run_seconds"] = time.perf_counter() - start
    out = _out_dir(args, cfg)
    save_trajectory(out / "trajectory", traj, cfg)
    bundle.checks["step_certificates"] = check(np.max(traj.certificates), setup.solver.tol)
    bundle.data.update({
        "certificates": traj.certificates,
        "energy": traj.aux_energy,
        "trajectory": str(out / "trajectory"),
    })
    return bundle


def cmd_verify(args, cfg: dict) -> ReportBundle:
    bundle = ReportBundle("verify", config_hash(cfg))
    traj = _load_run(args, cfg, bundle)
    if traj is None:
        return bundle
    setup = build(cfg)
    vcfg = cfg["verify"]
    pairs = default_pairs(len(traj), vcfg["max_pairs"], cfg["family"]["seed"])
    rep = verify(setup.system, traj, setup.family, pairs, vcfg["tol"], vcfg["mode"])
    failing = [e for e in rep.entries if e[3] > rep.tolerance]
    failing.sort(key=lambda e: -e[3])
    bundle.checks["max_residual"] = check(rep.max_residual, rep.tolerance)
    bundle.data.update({
        "mode": rep.mode,
        "paths": len(setup.family),
        "pairs": len(pairs),
        "failing_count": len(failing),
        "failing_entries": [{"path": p, "s": s, "t": t, "residual": r} for p, s, t, r in failing[:FAILING_ENTRY_LIMIT]],
    })
    return bundle


def _candidates(traj: Trajectory, count: int, seed: int) -> list[Trajectory]:
    """The input trajectory plus copies carrying non-increasing defect profiles."""
    rng = np.random.default_rng(seed)
    span = traj.times[-1] - traj.times[0]
    out = [traj]
    for _ in range(count - 1):
        level = rng.uniform(0.0, 1e-3)
        drop = rng.uniform(0.0, 1.0)
        out.append(with_defect_profile(traj, level * (1.0 - drop * (traj.times - traj.times[0]) / span)))
    return out


def cmd_select(args, cfg: dict) -> ReportBundle:
    bundle = ReportBundle("select", config_hash(cfg))
    traj = _load_run(args, cfg, bundle)
    if traj is None:
        return bundle
    setup = build(cfg)
    functionals = {
        "integrated_aux_energy": integrated_aux_energy,
        "constant": constant_functional,
        "negative_defect": negative_defect_functional(setup.system),
    }
    name = cfg["selection"]["functional"]
    cands = _candidates(traj, cfg["selection"]["candidates"], cfg["family"]["seed"])
    try:
        sel = select_min_functional(cands, functionals[name], setup.system, setup.family, cfg["verify"]["tol"])
    except ValueError as exc:
        bundle.checks["candidates_verified"] = check(1, 0, passed=False, relation="==")
        bundle.data["failure"] = str(exc)
        return bundle
    scan = [{"candidate": k, "value": v, "not_below_selected": v >= sel.values[sel.index]} for k, v in enumerate(sel.values)]
    bundle.checks["candidates_verified"] = check(0, 0, relation="==")
    bundle.checks["minimality_scan"] = check(sum(not s["not_below_selected"] for s in scan), 0)
    bundle.data.update({"functional": name, "selected": sel.index, "tied": sel.tied, "scan": scan})
    return bundle


def cmd_reconstruct(args, cfg: dict) -> ReportBundle:
    bundle = ReportBundle("reconstruct-defect", config_hash(cfg))
    traj = _load_run(args, cfg, bundle)
    if traj is None:
        return bundle
    setup = build(cfg)
    pairs = default_pairs(len(traj), cfg["verify"]["max_pairs"], cfg["family"]["seed"])
    curve = reconstruct_min_defect(setup.system, traj, setup.family, pairs, cfg["verify"]["tol"], cfg["verify"]["mode"])
    bundle.checks["feasible"] = check(0 if curve.feasible else 1, 0, relation="==")
    bundle.data["defect_curve"] = curve.to_dict()
    if curve.feasible:
        out = _out_dir(args, cfg)
        write_series_csv(out / "defect.csv", traj.times, curve.values, curve.energies,
                         [setup.mass_or_length(u) for u in traj.states])
    return bundle


def _parse_matrix(text: str) -> np.ndarray:
    try:
        rows = [[float(x) for x in row.split(",")] for row in text.split(";")]
        m = np.array(rows, float)
    except ValueError as exc:
        raise UsageError(f"cannot parse matrix {text!r}: {exc}") from None
    if m.shape != (3, 3):
        raise UsageError("matrix must be 3x3, rows separated by ';' and entries by ','")
    return m


def cmd_probe(args, cfg: dict | None) -> ReportBundle:
    if args.matrix is not None:
        if args.gamma is None:
            raise UsageError("--gamma is required with --matrix")
        m = _parse_matrix(args.matrix)
        bundle = ReportBundle("probe-convexity", config_hash({"matrix": m.tolist(), "gamma": args.gamma}))
        threshold = bn.hom_convexity_threshold(m)
        probe = bn.hom_convexity_probe(m, args.gamma, args.samples, args.seed)
        expected = args.gamma >= threshold
        bundle.checks["verdict_matches_threshold"] = check(0 if probe.convex == expected else 1, 0, relation="==")
        bundle.data.update({
            "verdict": "convex" if probe.convex else "not convex",
            "threshold": threshold,
            "gamma": args.gamma,
            "worst_violation": probe.worst_violation,
            "witness": list(probe.witness) if probe.witness is not None else None,
        })
        return bundle
    if cfg is None:
        raise UsageError("probe-convexity needs --matrix/--gamma or --config")
    if cfg["system"] != "euler_korteweg_1d":
        raise UsageError("configuration probes are available for euler_korteweg_1d only")
    setup = build(cfg)
    bundle = ReportBundle("probe-convexity", config_hash(cfg))
    n = setup.system.params["n_nodes"]
    n_modes = cfg["euler_korteweg"]["n_modes"]
    aux, plain = [], []
    for a in ek.shipped_phi(n_modes):
        v = np.concatenate([np.zeros(n), a])
        aux.append(ek.ek_convexity_probe(setup.system, v, args.samples // 10, True, args.seed).worst_violation)
        plain.append(ek.ek_convexity_probe(setup.system, v, args.samples // 10, False, args.seed).worst_violation)
    bundle.checks["aux_weight_convex"] = check(max(aux), 1e-9)
    bundle.data.update({
        "aux_violations": aux,
        "plain_violations": plain,
        "verdict": "convex" if max(aux) <= 1e-9 else "not convex",
        "plain_weight_witness": max(plain) > 0,
    })
    return bundle


def cmd_weak_strong(args, cfg: dict | None) -> ReportBundle:
    radius = args.radius
    if cfg is not None:
        if cfg["system"] != "binormal":
            raise UsageError("weak-strong needs a binormal configuration")
        radius = cfg["binormal"]["radius"]
    circle = bn.TranslatingCircle(radius)
    bundle = ReportBundle("weak-strong", config_hash(cfg or {"radius": radius, "n": args.n_vertices,
                                                              "horizon": args.horizon, "frames": args.frames}))
    if cfg is not None and (args.trajectory or (_out_dir(args, cfg) / "trajectory" / "manifest.json").exists()):
        traj = _load_run(args, cfg, bundle)
        if traj is None:
            return bundle
        data = build(cfg).system.params["data"]
        measures = [data.measure(u) for u in traj.states]
        times, aux = traj.times, traj.aux_energy
    else:
        times = np.linspace(0.0, args.horizon, args.frames)
        measures = [circle.polygon(t, args.n_vertices) for t in times]
        aux = np.array([bn.bn_energy(mu) for mu in measures])
    mon = bn.weak_strong_monitor(measures, aux, times, circle)
    const = bn.gronwall_constant(circle, float(times[-1]))
    excess = float(np.max(mon.relative - mon.relative[0]))
    bundle.checks["relative_energy_excess"] = check(excess, mon.allowance)
    bundle.data.update({
        "gronwall_constant": const.value,
        "security_radius": const.radius,
        "rate": mon.rate,
        "allowance": mon.allowance,
        "table": [{"t": t, "relative_energy": r, "envelope": e, "margin": g}
                  for t, r, e, g in zip(mon.times, mon.relative, mon.envelope, mon.margins)],
        "within_envelope": mon.within,
    })
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "envelope.csv").open("w") as fh:
        fh.write("t,relative_energy,envelope,margin\n")
        for t, r, e, g in zip(mon.times, mon.relative, mon.envelope, mon.margins):
            fh.write(f"{float(t)!r},{float(r)!r},{float(e)!r},{float(g)!r}\n")
    return bundle


def cmd_report(args, cfg: dict) -> ReportBundle:
    bundle = ReportBundle("report", config_hash(cfg))
    traj = _load_run(args, cfg, bundle)
    if traj is None:
        return bundle
    setup = build(cfg)
    energies = np.array([setup.system.energy(u) for u in traj.states])
    quantity = np.array([setup.mass_or_length(u) for u in traj.states])
    out = _out_dir(args, cfg)
    write_series_csv(out / "series.csv", traj.times, traj.aux_energy, energies, quantity)
    if len(traj.certificates):
        bundle.checks["step_certificates"] = check(np.max(traj.certificates), cfg["solver"]["tol"])
    bundle.checks["energy_non_increasing"] = check(float(np.max(np.diff(traj.aux_energy), initial=-math.inf)),
                                                   cfg["solver"]["tol"])
    bundle.checks["defect_nonnegative"] = check(float(np.max(energies - traj.aux_energy)), 1e-12)
    ap = apriori_check(setup.system, traj, float(traj.aux_energy[0]), cfg["solver"]["tol"])
    bundle.checks["a_priori_bounds"] = check(-ap.margin, 0.0, passed=all(ap.checks.values()))
    pairs = default_pairs(len(traj), cfg["verify"]["max_pairs"], cfg["family"]["seed"])
    rep = verify(setup.system, traj, setup.family, pairs, cfg["verify"]["tol"], cfg["verify"]["mode"])
    bundle.checks["variational_inequality"] = check(rep.max_residual, rep.tolerance)
    bundle.data.update({
        "series": str(out / "series.csv"),
        "mass_or_length_drift": float(np.max(np.abs(quantity - quantity[0]))),
        "a_priori": ap.to_dict(),
    })
    return bundle


COMMANDS = {
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "select": cmd_select,
    "reconstruct-defect": cmd_reconstruct,
    "probe-convexity": cmd_probe,
    "weak-strong": cmd_weak_strong,
    "report": cmd_report,
}
NEEDS_CONFIG = {"simulate", "verify", "select", "reconstruct-defect", "report"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="envar", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in COMMANDS:
        p = sub.add_parser(verb)
        p.add_argument("--config", help="run configuration (JSON)")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--force", action="store_true", help="load trajectories despite manifest mismatches")
        if verb not in ("simulate", "probe-convexity"):
            p.add_argument("--trajectory", help="trajectory directory (default: <out>/trajectory)")
    probe = sub.choices["probe-convexity"]
    probe.add_argument("--matrix", help="3x3 matrix as 'a,b,c;d,e,f;g,h,i'")
    probe.add_argument("--gamma", type=float)
    probe.add_argument("--samples", type=int, default=10_000)
    probe.add_argument("--seed", type=int, default=0)
    ws = sub.choices["weak-strong"]
    ws.add_argument("--radius", type=float, default=1.0)
    ws.add_argument("--n-vertices", type=int, default=64)
    ws.add_argument("--horizon", type=float, default=0.1)
    ws.add_argument("--frames", type=int, default=11)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = None
        if args.config is not None:
            cfg = load_config(args.config)
        elif args.verb in NEEDS_CONFIG:
            raise UsageError(f"{args.verb} requires --config")
        start = time.perf_counter()
        bundle = COMMANDS[args.verb](args, cfg)
        bundle.timing["total_seconds"] = time.perf_counter() - start
    except ConfigError as exc:
        print(f"envar: configuration error at {exc}", file=sys.stderr)
        return 2
    except (UsageError, FileNotFoundError) as exc:
        print(f"envar: {exc}", file=sys.stderr)
        return 2
    out = _out_dir(args, cfg)
    path = bundle.write(out, args.verb.replace("-", "_"))
    status = "pass" if bundle.passed else "FAIL"
    for name, c in bundle.checks.items():
        print(f"{name}: {c['value']:.6g} {c['relation']} {c['tolerance']:.3g} [{'pass' if c['pass'] else 'FAIL'}]")
    if "verdict" in bundle.data:
        print(f"verdict: {bundle.data['verdict']}")
    print(f"{args.verb}: {status}; report written to {path}")
    return 0 if bundle.passed else 1


if __name__ == "__main__":
    sys.exit(main())
