"""Command-line entry point.

    protonplan simulate        Monte Carlo batch -> fluence.csv, dose.csv
    protonplan solve-pde       deterministic 1D solve -> psi.csv, dose.csv
    protonplan optimize        beam-weight optimization -> weights.csv, trace.csv, dose.csv
    protonplan verify-duality  Monte Carlo vs deterministic comparison -> duality.txt

Every command writes ``manifest.txt`` and the effective ``config.yaml`` into
the output directory.  Exit codes: 0 ok, 1 invalid configuration, 2 runtime
failure, 3 verification failed.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from protonplan import __version__
from protonplan.config import ConfigValidationError, RunConfig, load_config
from protonplan.materials import Phantom
from protonplan.optimizer import (
    AdjointObjective,
    InfluenceObjective,
    PlanProblem,
    default_g_max,
    entrance_ratio,
    influence_matrix,
    mesh_for,
    optimize,
    sample_scenarios,
    target_ripple,
)
from protonplan.pde_1d import CFLError, beam_spectrum, bin_dose, binned_fluence, solve_forward
from protonplan.rng import derive_seed
from protonplan.sde_engine import ConfigError, TransportModel, run_batch
from protonplan.tally import dose_from_fluence, write_dose_csv, write_fluence_csv

log = logging.getLogger("protonplan")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class VerificationFailed(RuntimeError):
    pass


# -- shared helpers --------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def write_manifest(out: Path, command: str, cfg: RunConfig, threads: int, wall: float, extra: dict) -> None:
    lines = [
        f"command: {command}",
        f"version: {__version__}",
        f"python: {platform.python_version()}",
        f"numpy: {np.__version__}",
        f"config: {cfg.source_path or '<defaults>'}",
        f"config_sha256: {cfg.sha256}",
        f"seed: {cfg.seed}",
        f"threads: {threads}",
        f"wall_time_s: {wall:.3f}",
    ]
    lines += [f"{k}: {v}" for k, v in extra.items()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.tree, sort_keys=True))


def _mesh_top(cfg: RunConfig) -> float:
    if cfg.tree["mesh"]["e_max"] is not None:
        return float(cfg.tree["mesh"]["e_max"])
    top = max(b.energy_mean + 6.0 * b.energy_sigma for b in cfg.source.beams) + 1.0
    return min(top, cfg.window.e_max)


def pde_solution(cfg: RunConfig, phantom: Phantom | None = None):
    """Deterministic field for the configured source on a range-aligned mesh."""
    if cfg.domain.kind != "slab-1d":
        raise ConfigError("the deterministic solver needs a slab-1d domain")
    phantom = phantom or cfg.phantom
    m = cfg.tree["mesh"]
    mesh = mesh_for(phantom, cfg.domain.length, cfg.window.e_min, _mesh_top(cfg), m["dz"])
    g = sum(beam_spectrum(b.energy_mean, b.energy_sigma, b.weight, mesh, cfg.window) for b in cfg.source.beams)
    return mesh, solve_forward(g, mesh, phantom, m["cfl_limit"])


def _rel_l2(a: np.ndarray, b: np.ndarray) -> float:
    nb = float(np.linalg.norm(b))
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float("inf")


# -- commands ----------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig, out: Path, threads: int = 1) -> dict:
    t0 = time.perf_counter()
    res = run_batch(cfg.source, cfg.model, cfg.sim, cfg.grid, threads=threads)
    phi, se = res.fluence.angle_integrated()
    write_fluence_csv(out / "fluence.csv", cfg.grid, phi, se)
    dose = res.direct_dose(cfg.phantom)
    write_dose_csv(out / "dose.csv", dose)
    write_dose_csv(out / "dose_fluence.csv", dose_from_fluence(res.fluence, cfg.phantom,
                                                               method=cfg.tree["tally"]["dose_method"]))
    info = {"n_particles": res.n, "peak_depth_cm": _fmt(dose.peak_depth())}
    info.update({f"balance.{k}": _fmt(v) for k, v in res.balance.items()})
    write_manifest(out, "simulate", cfg, threads, time.perf_counter() - t0, info)
    return info


def cmd_solve_pde(cfg: RunConfig, out: Path, threads: int = 1) -> dict:
    t0 = time.perf_counter()
    mesh, field = pde_solution(cfg)
    write_fluence_csv(out / "psi.csv", cfg.grid, binned_fluence(field, cfg.grid))
    dose = bin_dose(field, cfg.phantom, cfg.grid.z_edges)
    write_dose_csv(out / "dose.csv", dose)
    info = {"mesh_nodes": mesh.n_z, "mesh_cells": mesh.n_e, "peak_depth_cm": _fmt(dose.peak_depth())}
    write_manifest(out, "solve-pde", cfg, threads, time.perf_counter() - t0, info)
    return info


def cmd_optimize(cfg: RunConfig, out: Path, threads: int = 1) -> dict:
    t0 = time.perf_counter()
    o, opt, pres, bank = cfg.tree["optimizer"], cfg.opt, cfg.prescription, cfg.bank
    if cfg.domain.kind != "slab-1d":
        raise ConfigError("optimize needs a slab-1d domain")
    model = TransportModel(cfg.phantom, cfg.domain, cfg.window, cfg.xs)
    dz = cfg.tree["mesh"]["dz"]
    e_top = min(cfg.window.e_max, max((e + 6 * s for e, s in zip(bank.energies, bank.sigmas)), default=2.0) + 1.0)
    mesh = mesh_for(cfg.phantom, cfg.domain.length, cfg.window.e_min, e_top, dz)
    sim = replace(cfg.sim, n_particles=opt.n_mc)
    if o["gradient"] == "influence":
        influences = []
        for s in range(opt.n_scenarios):
            if opt.scenario.degenerate and s > 0:
                influences.append(influences[0])
                continue
            rng = np.random.default_rng(derive_seed(cfg.seed, 0, s))
            ph = cfg.phantom if opt.scenario.degenerate else cfg.phantom.perturbed(opt.scenario, rng)
            m = TransportModel(ph, cfg.domain, cfg.window, cfg.xs)
            sc_mesh = mesh if ph is cfg.phantom else mesh_for(ph, cfg.domain.length, cfg.window.e_min, e_top, dz)
            sc_sim = replace(sim, seed=derive_seed(cfg.seed, 0, s))
            influences.append(influence_matrix(bank, pres.z_edges, m, o["influence"], sc_sim, sc_mesh, threads))
        objective = InfluenceObjective(influences, pres, opt.alpha_reg)
        scale_matrix = np.mean(influences, axis=0)
    else:
        rng = np.random.default_rng(cfg.seed)
        scenarios = sample_scenarios(bank, cfg.phantom, opt.scenario, opt.n_scenarios, cfg.domain.length,
                                     cfg.window, dz, rng)
        objective = AdjointObjective(bank, pres, scenarios, opt.alpha_reg, forward=o["influence"],
                                     window=cfg.window, sim=sim, q_factor=cfg.q_factor, threads=threads)
        scale_matrix = influence_matrix(bank, pres.z_edges, model, "pde", mesh=mesh)
    g_max = o["g_max"] if o["g_max"] is not None else default_g_max(scale_matrix, pres, o["g_max_factor"])
    g0 = np.full(bank.n_beams, g_max / o["g_max_factor"])
    result = optimize(PlanProblem(objective, g0, g_max), opt)
    dose = objective.dose(result.weights)

    lines = ["beam,energy[MeV],sigma[MeV],weight"]
    lines += [f"{k},{_fmt(e)},{_fmt(s)},{_fmt(w)}"
              for k, (e, s, w) in enumerate(zip(bank.energies, bank.sigmas, result.weights))]
    (out / "weights.csv").write_text("\n".join(lines) + "\n")
    lines = ["iteration,cost,vi_residual,grad_norm"]
    lines += [f"{k},{_fmt(c)},{_fmt(r)},{_fmt(g)}"
              for k, (c, r, g) in enumerate(zip(result.cost_trace, result.vi_trace, result.grad_norm_trace))]
    (out / "trace.csv").write_text("\n".join(lines) + "\n")
    z = pres.z_edges
    lines = ["z_lo[cm],z_hi[cm],dose[MeV/g],prescribed[MeV/g],weight"]
    lines += [f"{_fmt(z[i])},{_fmt(z[i + 1])},{_fmt(dose[i])},{_fmt(pres.d_prescribed[i])},{_fmt(pres.w[i])}"
              for i in range(dose.size)]
    (out / "dose.csv").write_text("\n".join(lines) + "\n")
    info = {
        "n_beams": bank.n_beams,
        "g_max": _fmt(g_max),
        "iterations": result.iterations,
        "converged": result.converged,
        "final_cost": _fmt(result.final_cost),
        "final_vi_residual": _fmt(result.vi_trace[-1]),
        "target_ripple": _fmt(target_ripple(dose, pres)) if pres.in_target.any() else "n/a",
        "entrance_ratio": _fmt(entrance_ratio(dose, pres)) if pres.in_target.any() else "n/a",
    }
    if o["influence"] == "mc":
        info["n_particles_per_solve"] = opt.n_mc
    write_manifest(out, "optimize", cfg, threads, time.perf_counter() - t0, info)
    return info


def duality_report(cfg: RunConfig, threads: int = 1) -> dict:
    """Relative L2 distances between the Monte Carlo and deterministic answers."""
    tol = cfg.tree["duality"]["tolerance"]
    name = cfg.tree["duality"]["pde_medium"]
    pde_phantom = Phantom.homogeneous(cfg.media[name]) if name is not None else cfg.phantom
    res = run_batch(cfg.source, cfg.model, cfg.sim, cfg.grid, threads=threads)
    phi_mc, se_mc = res.fluence.angle_integrated()
    mesh, field = pde_solution(cfg, pde_phantom)
    phi_pde = binned_fluence(field, cfg.grid)
    dose_mc = res.direct_dose(cfg.phantom)
    dose_pde = bin_dose(field, pde_phantom, cfg.grid.z_edges)
    dose_flu = dose_from_fluence(res.fluence, cfg.phantom, method=cfg.tree["tally"]["dose_method"])
    # statistical size of the Monte Carlo answer relative to its norm
    mc_rel_error = float(np.linalg.norm(se_mc) / max(np.linalg.norm(phi_mc), 1e-300))
    dose_rel_error = float(np.linalg.norm(dose_mc.stderr) / max(np.linalg.norm(dose_mc.dose), 1e-300))
    metrics = {
        "fluence_rel_l2": _rel_l2(phi_mc, phi_pde),
        "dose_rel_l2": _rel_l2(dose_mc.dose, dose_pde.dose),
        "dose_identity_rel_l2": _rel_l2(dose_flu.dose, dose_mc.dose),
    }
    if max(mc_rel_error, dose_rel_error) > tol:
        status = "inconclusive: MC error exceeds bar"
    elif all(v <= tol for v in metrics.values()):
        status = "pass"
    else:
        status = "fail"
    return {"status": status, "tolerance": tol, "n_particles": res.n, "mc_fluence_rel_error": mc_rel_error,
            "mc_dose_rel_error": dose_rel_error, **metrics, "pde_medium": pde_phantom.media[0].name
            if len(pde_phantom) == 1 else "phantom"}


def cmd_verify_duality(cfg: RunConfig, out: Path, threads: int = 1) -> dict:
    t0 = time.perf_counter()
    report = duality_report(cfg, threads)
    text = "\n".join(f"{k}: {_fmt(v) if isinstance(v, float) else v}" for k, v in report.items())
    (out / "duality.txt").write_text(text + "\n")
    write_manifest(out, "verify-duality", cfg, threads, time.perf_counter() - t0,
                   {"status": report["status"], "n_particles": report["n_particles"]})
    if report["status"] == "fail":
        raise VerificationFailed(text)
    return report


COMMANDS = {
    "simulate": cmd_simulate,
    "solve-pde": cmd_solve_pde,
    "optimize": cmd_optimize,
    "verify-duality": cmd_verify_duality,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protonplan", description="Proton transport and plan optimization.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMANDS[name].__name__.replace("cmd_", "").replace("_", " "))
        p.add_argument("--config", type=Path, default=None, help="YAML configuration file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                       help="override one field, e.g. --set simulation.n_particles=1000 (repeatable)")
        p.add_argument("--out", type=Path, default=None, help="output directory (default: config 'output')")
        p.add_argument("--seed", type=int, default=None, help="random seed (unsigned 64-bit)")
        p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigValidationError(["--threads: must be >= 1"])
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        cfg = load_config(args.config, overrides)
        out = args.out if args.out is not None else Path(cfg.output)
        out.mkdir(parents=True, exist_ok=True)
        info = COMMANDS[args.command](cfg, out, args.threads)
    except (ConfigValidationError, ConfigError, CFLError) as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except VerificationFailed as exc:
        print(f"verification failed:\n{exc}", file=sys.stderr)
        return EXIT_VERIFY
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for k, v in info.items():
        print(f"{k}: {_fmt(v) if isinstance(v, float) else v}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
