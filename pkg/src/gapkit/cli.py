"""Command-line pipeline.

Configuration comes from a TOML file (human-edited); reports are JSON
(machine-read); bulk numeric output is CSV with ``#`` comment headers, so
the columns feed gnuplot directly; the report command additionally renders
matplotlib figures next to the CSVs.  Every artifact embeds the resolved
configuration and seed.  Execution details that vary between equivalent
runs (timestamp, thread count, output directory) live in a single ``run``
block so golden-file comparisons can mask them.

Exit codes: 0 success, 1 validity failure or computation error, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import expr, figures, model, stats, transfer, ulam

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2

COMMANDS = ("check", "simulate", "ulam", "spectrum", "marginals", "decay",
            "report")


class ConfigError(ValueError):
    """Bad configuration file or option."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    spec: model.ModelSpec
    resolution: int
    boundary_sampling: int
    grid_per_axis: tuple
    subsamples: int
    max_boxes: int
    quad_order: int
    sim_steps: int
    burn_in: int
    x0: tuple
    seed: int
    threads: int
    decay_n_max: int
    out_dir: Path
    echo: dict


_SCHEMA = {
    None: {"k", "L", "beta", "phi0", "sigma", "C1", "C2", "seed",
           "perturbation", "geometry", "grid", "quadrature", "simulation",
           "decay", "output"},
    "perturbation": {"law", "mean", "std", "a", "b", "truncation"},
    "geometry": {"resolution", "boundary_sampling"},
    "grid": {"per_axis", "subsamples", "max_boxes"},
    "quadrature": {"order"},
    "simulation": {"steps", "burn_in", "x0"},
    "decay": {"n_max"},
    "output": {"directory"},
}


def _reject_unknown(section: Optional[str], table: dict) -> None:
    allowed = _SCHEMA[section]
    for key in table:
        if key not in allowed:
            where = f"[{section}] " if section else ""
            raise ConfigError(f"unknown key {where}{key!r}")


def _require(raw: dict, key: str):
    if key not in raw:
        raise ConfigError(f"{key} required")
    return raw[key]


def load_config(path) -> RunConfig:
    """Load and validate a TOML run configuration; fills documented defaults."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"TOML parse error in {path}: {e}")

    _reject_unknown(None, raw)
    for section in ("perturbation", "geometry", "grid", "quadrature",
                    "simulation", "decay", "output"):
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"[{section}] must be a table")
            _reject_unknown(section, raw[section])

    k = int(_require(raw, "k"))
    length = float(_require(raw, "L"))
    beta = float(_require(raw, "beta"))
    phi_text = _require(raw, "phi0")
    sigma = float(_require(raw, "sigma"))
    c1 = float(_require(raw, "C1"))
    c2 = float(_require(raw, "C2"))
    if c1 <= 1.0:
        raise ConfigError("C1 must exceed 1")
    if c2 <= 1.0:
        raise ConfigError("C2 must exceed 1")

    pert_raw = _require(raw, "perturbation")
    law = _require(pert_raw, "law")
    try:
        pert = model.PerturbationSpec(
            law=law,
            mean=float(pert_raw.get("mean", 0.0)),
            std=float(pert_raw.get("std", 1.0)),
            a=float(pert_raw.get("a", 0.0)),
            b=float(pert_raw.get("b", 0.0)),
            truncation=float(pert_raw.get("truncation", 8.0)))
        phi0 = expr.parse_expression(str(phi_text), k)
        spec = model.ModelSpec(k=k, L=length, beta=beta, phi0=phi0,
                               perturbation=pert, C1=c1, C2=c2, sigma=sigma)
    except (model.ModelError, expr.ExpressionError) as e:
        raise ConfigError(str(e))

    geo = raw.get("geometry", {})
    grid_raw = raw.get("grid", {})
    quad = raw.get("quadrature", {})
    sim = raw.get("simulation", {})
    decay_raw = raw.get("decay", {})
    out = raw.get("output", {})

    per_axis = tuple(int(n) for n in grid_raw.get("per_axis", [32] * k))
    if len(per_axis) != k:
        raise ConfigError("grid.per_axis must list one count per axis")
    x0 = tuple(float(v) for v in sim.get("x0", [0.0] * k))
    if len(x0) != k:
        raise ConfigError("simulation.x0 must list one scalar per axis")

    resolution = int(geo.get("resolution", 33))
    subsamples = int(grid_raw.get("subsamples", 4))
    quad_order = int(quad.get("order", 8))
    sim_steps = int(sim.get("steps", 100_000))
    burn_in = int(sim.get("burn_in", 10_000))
    decay_n_max = int(decay_raw.get("n_max", 16))
    for name, value in (("geometry.resolution", resolution),
                        ("grid.subsamples", subsamples),
                        ("quadrature.order", quad_order),
                        ("decay.n_max", decay_n_max)):
        if value < 2:
            raise ConfigError(f"{name} must be >= 2")
    if sim_steps < 1 or burn_in < 0:
        raise ConfigError("simulation.steps must be >= 1 and burn_in >= 0")

    echo = {
        "k": k, "L": length, "beta": beta, "phi0": str(phi_text),
        "sigma": sigma, "C1": c1, "C2": c2,
        "seed": int(raw.get("seed", 0)),
        "perturbation": {key: pert_raw[key] for key in sorted(pert_raw)},
        "geometry": {"resolution": resolution,
                     "boundary_sampling": int(geo.get("boundary_sampling", 17))},
        "grid": {"per_axis": list(per_axis), "subsamples": subsamples,
                 "max_boxes": int(grid_raw.get("max_boxes", ulam.DEFAULT_MAX_BOXES))},
        "quadrature": {"order": quad_order},
        "simulation": {"steps": sim_steps, "burn_in": burn_in, "x0": list(x0)},
        "decay": {"n_max": decay_n_max},
    }
    return RunConfig(
        spec=spec,
        resolution=resolution,
        boundary_sampling=int(geo.get("boundary_sampling", 17)),
        grid_per_axis=per_axis,
        subsamples=subsamples,
        max_boxes=int(grid_raw.get("max_boxes", ulam.DEFAULT_MAX_BOXES)),
        quad_order=quad_order,
        sim_steps=sim_steps,
        burn_in=burn_in,
        x0=x0,
        seed=int(raw.get("seed", 0)),
        threads=1,
        decay_n_max=decay_n_max,
        out_dir=Path(out.get("directory", "gapkit-out")),
        echo=echo,
    )


# ---------------------------------------------------------------------------
# artifact helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, float) and math.isinf(obj):
        return "inf" if obj > 0 else "-inf"
    return obj


def _write_json(path: Path, cfg: RunConfig, payload: dict) -> None:
    doc = {
        "run": {
            "generated_at": datetime.now(timezone.utc).isoformat(),
            "threads": cfg.threads,
            "output_directory": str(cfg.out_dir),
        },
        "config": _jsonable(cfg.echo),
    }
    doc.update(_jsonable(payload))
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")


def _write_csv(path: Path, cfg: RunConfig, header: list, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# gapkit\n")
        fh.write("# config " + json.dumps(_jsonable(cfg.echo), sort_keys=True)
                 + "\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")


def _theta_center(pert: model.PerturbationSpec) -> float:
    return pert.mean if pert.law == "gaussian" else 0.5 * (pert.a + pert.b)


# ---------------------------------------------------------------------------
# pipeline pieces shared by the commands


def _geometry_block(cfg: RunConfig):
    geom = model.derive_geometry(cfg.spec, cfg.resolution)
    ly = None
    ly_error = None
    try:
        ly = transfer.lasota_yorke_constants(cfg.spec, geom)
    except transfer.TransferError as e:
        ly_error = str(e)
    sep = model.boundary_separation(cfg.spec, geom,
                                    _theta_center(cfg.spec.perturbation),
                                    cfg.boundary_sampling)
    payload = {
        "geometry": geom.to_dict(),
        "lasota_yorke": ly.to_dict() if ly is not None else None,
        "lasota_yorke_error": ly_error,
        "boundary_separation": {
            "min_distance": sep.min_distance, "bound": sep.bound,
            "ok": sep.ok, "vacuous": sep.vacuous,
            "n_boundaries": sep.n_boundaries,
        },
    }
    valid = geom.ok and sep.ok and (ly is None or ly.eta < 1.0)
    return geom, ly, payload, valid


def _ulam_block(cfg: RunConfig, geom):
    grid = ulam.build_grid(geom, cfg.grid_per_axis, cfg.max_boxes)
    matrix = ulam.assemble_ulam(cfg.spec, geom, grid, theta_quad=cfg.quad_order,
                                subsamples=cfg.subsamples, threads=cfg.threads)
    return grid, matrix


def _density_rows(h: ulam.DensityGrid, chunk: int = 1 << 15):
    grid = h.grid
    for start in range(0, grid.size, chunk):
        ids = np.arange(start, min(start + chunk, grid.size))
        centers = grid.centers(ids)
        for i, box in zip(ids, centers):
            yield [int(i), *[float(c) for c in box], float(h.values[i])]


# ---------------------------------------------------------------------------
# commands


def _cmd_check(cfg: RunConfig) -> int:
    _, _, payload, valid = _geometry_block(cfg)
    payload["valid"] = valid
    _write_json(cfg.out_dir / "check.json", cfg, payload)
    return EXIT_OK if valid else EXIT_INVALID


def _cmd_simulate(cfg: RunConfig) -> int:
    geom = model.derive_geometry(cfg.spec, cfg.resolution)
    traj = stats.simulate_process(cfg.spec, geom, cfg.x0, cfg.sim_steps,
                                  cfg.seed)
    k = cfg.spec.k
    rows = ([n + 1, float(traj.thetas[n]), float(traj.X[k + n])]
            for n in range(traj.n_steps))
    _write_csv(cfg.out_dir / "trajectory.csv", cfg, ["step", "theta", "x"], rows)
    _write_json(cfg.out_dir / "simulate.json", cfg, {
        "steps": traj.n_steps,
        "boundary_hits": traj.boundary_hits,
        "max_step_deviation": traj.max_step_deviation,
        "x_final": float(traj.X[-1]),
    })
    return EXIT_OK


def _cmd_ulam(cfg: RunConfig) -> int:
    geom = model.derive_geometry(cfg.spec, cfg.resolution)
    grid, matrix = _ulam_block(cfg, geom)
    h, residual, info = ulam.stationary_density(matrix, grid)
    matrix.export_triplets(cfg.out_dir / "matrix.txt")
    axis_cols = [f"center_{i + 1}" for i in range(grid.k)]
    _write_csv(cfg.out_dir / "hstar.csv", cfg, ["box", *axis_cols, "density"],
               _density_rows(h))
    _write_json(cfg.out_dir / "ulam.json", cfg, {
        "boxes": grid.size,
        "nnz": int(matrix.matrix.nnz),
        "pre_normalization_drift": matrix.pre_normalization_drift,
        "stationary_residual": residual,
        "stationary_info": info,
    })
    return EXIT_OK if info["converged"] else EXIT_INVALID


def _cmd_spectrum(cfg: RunConfig) -> int:
    geom = model.derive_geometry(cfg.spec, cfg.resolution)
    grid, matrix = _ulam_block(cfg, geom)
    report = ulam.spectral_report(matrix, grid, seed=cfg.seed)
    _write_json(cfg.out_dir / "spectrum.json", cfg, report.to_dict())
    valid = report.converged and abs(report.leading - 1.0) <= 1e-8
    return EXIT_OK if valid else EXIT_INVALID


def _marginal_artifacts(cfg: RunConfig, grid, h) -> tuple[list, dict]:
    marginals = [stats.marginal_density(h, grid, axis)
                 for axis in range(grid.k)]
    for m in marginals:
        rows = ([float(t), float(v)] for t, v in zip(m.t, m.values))
        _write_csv(cfg.out_dir / f"marginal_axis{m.axis + 1}.csv", cfg,
                   ["t", "density"], rows)
    table = {}
    for i in range(len(marginals)):
        for j in range(i + 1, len(marginals)):
            table[f"axis{i + 1}-axis{j + 1}"] = marginals[i].l1_distance(
                marginals[j])
    return marginals, table


def _cmd_marginals(cfg: RunConfig) -> int:
    geom = model.derive_geometry(cfg.spec, cfg.resolution)
    grid, matrix = _ulam_block(cfg, geom)
    h, _, info = ulam.stationary_density(matrix, grid)
    marginals, table = _marginal_artifacts(cfg, grid, h)
    valid = info["converged"] and all(v <= 0.05 for v in table.values())
    _write_json(cfg.out_dir / "marginals.json", cfg, {
        "cross_axis_l1": table,
        "integrals": [m.integral() for m in marginals],
        "valid": valid,
    })
    return EXIT_OK if valid else EXIT_INVALID


def _decay_fits(cfg: RunConfig, geom, grid, matrix, h):
    """Autocovariance fits: the documented defaults plus last-axis modes.

    The default pairs can decorrelate below the noise floor in one step on
    strongly mixing models (reported as lam None); the last-axis modes
    resolve a fittable rate because they overlap the slow direction.
    """
    named = [(f"default{i}", fn)
             for i, fn in enumerate(stats.default_test_functions(cfg.spec, geom))]
    hw = grid.half_widths[-1]
    named.append(("cos_last", lambda p: np.cos(np.pi * p[:, -1] / hw)))
    named.append(("sin_last", lambda p: np.sin(np.pi * p[:, -1] / hw)))
    fits = []
    for label, fn in named:
        fit = stats.correlation_decay(matrix, grid, h, fn, fn,
                                      n_max=cfg.decay_n_max)
        fits.append((label, fit))
    return fits


def _cmd_decay(cfg: RunConfig) -> int:
    geom = model.derive_geometry(cfg.spec, cfg.resolution)
    grid, matrix = _ulam_block(cfg, geom)
    h, _, _ = ulam.stationary_density(matrix, grid)
    lam2, _ = ulam.subdominant_modulus(matrix, h, seed=cfg.seed)
    fits = _decay_fits(cfg, geom, grid, matrix, h)
    rows = []
    for label, fit in fits:
        for n, cov in enumerate(fit.covariances):
            rows.append([label, n, float(cov)])
    _write_csv(cfg.out_dir / "decay.csv", cfg, ["pair", "lag", "covariance"],
               rows)
    payload = {"lam2": lam2,
               "fits": {label: fit.to_dict() for label, fit in fits}}
    fitted = [fit.lam for _, fit in fits if fit.lam is not None]
    valid = all(lam <= lam2 + 0.05 for lam in fitted)
    payload["valid"] = valid
    _write_json(cfg.out_dir / "decay.json", cfg, payload)
    return EXIT_OK if valid else EXIT_INVALID


def _cmd_report(cfg: RunConfig) -> int:
    geom, ly, geo_payload, geo_valid = _geometry_block(cfg)
    grid, matrix = _ulam_block(cfg, geom)
    spectral = ulam.spectral_report(matrix, grid, seed=cfg.seed)
    h = spectral.h_star

    axis_cols = [f"center_{i + 1}" for i in range(grid.k)]
    _write_csv(cfg.out_dir / "hstar.csv", cfg, ["box", *axis_cols, "density"],
               _density_rows(h))
    marginals, cross_table = _marginal_artifacts(cfg, grid, h)

    burn_in = min(cfg.burn_in, cfg.sim_steps // 10)
    traj = stats.simulate_process(cfg.spec, geom, cfg.x0, cfg.sim_steps,
                                  cfg.seed)
    empirical_l1 = stats.empirical_vs_stationary(traj, marginals[0], burn_in)
    samples = traj.X[burn_in:]
    edges = np.linspace(-cfg.spec.L, cfg.spec.L, marginals[0].values.size + 1)
    counts, _ = np.histogram(samples, bins=edges)
    emp_density = counts / (samples.size * marginals[0].cell_width)
    _write_csv(cfg.out_dir / "empirical_hist.csv", cfg, ["t", "density"],
               ([float(t), float(v)] for t, v in zip(marginals[0].t,
                                                     emp_density)))

    push_n = min(1_000_000, max(100_000, 10 * cfg.sim_steps))
    _, push_l1 = stats.pushforward_histogram(cfg.spec, geom, grid, h,
                                             push_n, seed=cfg.seed)

    lam2 = spectral.lam2
    fits = _decay_fits(cfg, geom, grid, matrix, h)
    rows = []
    for label, fit in fits:
        for n, cov in enumerate(fit.covariances):
            rows.append([label, n, float(cov)])
    _write_csv(cfg.out_dir / "decay.csv", cfg, ["pair", "lag", "covariance"],
               rows)

    theta0 = _theta_center(cfg.spec.perturbation)
    fig_paths = {
        "density": figures.density_figure(h, grid, cfg.out_dir / "density.png"),
        "marginals": figures.marginals_figure(
            marginals, cfg.out_dir / "marginals.png",
            empirical=(marginals[0].t, emp_density)),
        "decay": figures.decay_figure(
            [(label, fit.covariances, fit.lam) for label, fit in fits],
            lam2, cfg.out_dir / "decay.png"),
        "boundaries": figures.boundaries_figure(
            cfg.spec, geom, theta0, cfg.out_dir / "boundaries.png"),
    }
    # only file names in the report: paths must not vary between runs
    fig_paths = {key: (Path(p).name if p else None)
                 for key, p in fig_paths.items()}

    fitted = [fit.lam for _, fit in fits if fit.lam is not None]
    checks = {
        "geometry_ok": bool(geom.ok),
        "lasota_yorke_contraction": ly is not None and ly.eta < 1.0,
        "boundary_separation_ok": geo_payload["boundary_separation"]["ok"],
        "row_drift_small": matrix.pre_normalization_drift <= 1e-6,
        "stationary_converged": bool(spectral.converged),
        "leading_eigenvalue_one": abs(spectral.leading - 1.0) <= 1e-8,
        "spectral_gap_found": lam2 < 1.0,
        "marginals_consistent": all(v <= 0.05 for v in cross_table.values()),
        "empirical_matches_marginal": empirical_l1 <= 0.05,
        "pushforward_stationary": push_l1 <= 0.05,
        "decay_within_gap": all(lam <= lam2 + 0.05 for lam in fitted),
        "embedding_consistent": traj.max_step_deviation <= 1e-10,
    }
    payload = dict(geo_payload)
    payload.update({
        "ulam": {
            "boxes": grid.size,
            "nnz": int(matrix.matrix.nnz),
            "pre_normalization_drift": matrix.pre_normalization_drift,
        },
        "spectrum": spectral.to_dict(),
        "marginals": {"cross_axis_l1": cross_table,
                      "integrals": [m.integral() for m in marginals]},
        "simulation": {
            "steps": traj.n_steps,
            "burn_in": burn_in,
            "boundary_hits": traj.boundary_hits,
            "max_step_deviation": traj.max_step_deviation,
            "empirical_l1": empirical_l1,
        },
        "pushforward": {"samples": push_n, "l1": push_l1},
        "decay": {"lam2": lam2,
                  "fits": {label: fit.to_dict() for label, fit in fits}},
        "figures": fig_paths,
        "checks": checks,
        "valid": all(checks.values()),
    })
    _write_json(cfg.out_dir / "report.json", cfg, payload)
    return EXIT_OK if all(checks.values()) else EXIT_INVALID


_DISPATCH = {
    "check": _cmd_check,
    "simulate": _cmd_simulate,
    "ulam": _cmd_ulam,
    "spectrum": _cmd_spectrum,
    "marginals": _cmd_marginals,
    "decay": _cmd_decay,
    "report": _cmd_report,
}


def run(command: str, cfg: RunConfig) -> int:
    """Execute one pipeline command; returns the process exit status."""
    if command not in _DISPATCH:
        raise ConfigError(f"unknown command {command!r}")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    return _DISPATCH[command](cfg)


# ---------------------------------------------------------------------------
# entry point


def _error_json(exc: Exception) -> str:
    return json.dumps({"error": {"type": type(exc).__name__,
                                 "message": str(exc)}}, sort_keys=True)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gapkit",
        description="transfer-operator toolkit for randomly perturbed "
                    "k-term recurrences")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML configuration")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--threads", type=int, default=1,
                       help="worker-thread cap for matrix assembly")
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0

    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.out_dir = Path(args.out)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.echo["seed"] = args.seed
        cfg.threads = max(1, args.threads)
    except ConfigError as e:
        print(_error_json(e), file=sys.stderr)
        return EXIT_USAGE

    try:
        return run(args.command, cfg)
    except ConfigError as e:
        print(_error_json(e), file=sys.stderr)
        return EXIT_USAGE
    except (model.ModelError, transfer.TransferError, ulam.UlamError,
            stats.StatsError, expr.ExpressionError, OSError) as e:
        print(_error_json(e), file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
