"""Command line entry point: simulate, compare and sweep.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import SCENARIO_NAMES, WINDOW_NAMES, ConfigError, ExperimentConfig
from .ensemble import DensityHistogram, Normalization, compare_histogram_to_density, histogram_tv
from .propagator import psi_after_closed, psi_after_quadrature
from .scenarios import (
    ScenarioResult,
    build_scenario,
    run_scenario,
    smear_velocity,
    wave_field,
)

log = logging.getLogger("bohmsim")

MANIFEST_VERSION = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4
SEED_ENV = "BOHMSIM_SEED"
# closed form vs quadrature spot check before a run is accepted
ORACLE_TOL = 1e-6


class NumericError(RuntimeError):
    pass


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_csv(path: Path, units: str, header: list[str], columns) -> None:
    cols = [np.asarray(c) for c in columns]
    with open(path, "w", newline="") as fh:
        fh.write(f"# {units}\n")
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(v if isinstance(v, str) else fmt(v) for v in row) + "\n")


def read_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln and not ln.startswith("#")]
    if not lines:
        raise ConfigError(f"{path}: no data")
    header = lines[0].split(",")
    rows = [ln.split(",") for ln in lines[1:]]
    out = {}
    for j, name in enumerate(header):
        vals = [r[j] for r in rows]
        try:
            out[name] = np.array(vals, dtype=float)
        except ValueError:
            out[name] = np.array(vals)
    return out


# ------------------------------------------------------------------ simulate


def resolve_seed(flag: int | None, config_seed: int) -> int:
    if flag is not None:
        seed = flag
    elif os.environ.get(SEED_ENV):
        try:
            seed = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from None
    else:
        seed = config_seed
    if not 0 <= seed < 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    return seed


def effective_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    sampling = cfg.sampling
    changes = {"seed": resolve_seed(args.seed, sampling.seed)}
    if args.trajectories is not None:
        changes["n_trajectories"] = args.trajectories
    if args.threads is not None:
        changes["threads"] = args.threads
    try:
        sampling = dataclasses.replace(sampling, **changes)
        cfg = dataclasses.replace(cfg, sampling=sampling)
        if args.scenario is not None:
            cfg = dataclasses.replace(cfg, scenario=args.scenario)
        if args.smear_vy is not None:
            if args.smear_vy < 0:
                raise ValueError("--smear-vy must be >= 0")
            beam = dataclasses.replace(cfg.beam, v_y_spread=args.smear_vy * cfg.beam.v_y)
            cfg = dataclasses.replace(cfg, beam=beam)
        if args.windows is not None:
            names = tuple(w.strip() for w in args.windows.split(",") if w.strip())
            cfg = dataclasses.replace(cfg, analysis=dataclasses.replace(cfg.analysis, windows=names))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def parse_threads(text: str) -> int | str:
    if text == "auto":
        return text
    try:
        n = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("threads must be a positive integer or 'auto'") from None
    if n < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return n


def oracle_check(spec, n_points: int = 7) -> float:
    """Largest relative difference between the fast field and quadrature on a few screen points."""
    field = wave_field(spec)
    if field is None:
        return 0.0
    cfg = spec.config
    x = np.linspace(-cfg.analysis.global_half_width, cfg.analysis.global_half_width, n_points)
    fast = psi_after_closed(x, cfg.t2, field.ctx)
    slow = psi_after_quadrature(x, cfg.t2, field.ctx)
    return float(np.max(np.abs(fast - slow)) / np.max(np.abs(slow)))


def _peaks_json(peaks):
    return [{"position_m": p.position, "height": p.height, "fwhm_m": p.fwhm} for p in peaks]


def _finite(metrics):
    bad = [k for k, v in metrics.items() if v is not None and not math.isfinite(v)]
    if bad:
        raise NumericError(f"non-finite metrics: {bad}")


def simulate(cfg: ExperimentConfig, out: Path) -> dict:
    spec = build_scenario(cfg.scenario, cfg)
    t_start = time.perf_counter()
    err = oracle_check(spec)
    if not err < ORACLE_TOL:
        raise NumericError(f"fast field disagrees with quadrature: relative error {err:.3g}")
    s = cfg.sampling
    smear = None
    if cfg.beam.v_y_spread > 0:
        k = cfg.analysis.smear_nodes
        per_node = -(-s.n_trajectories // k) if s.n_trajectories else 0
        sm = smear_velocity(spec, k, cfg.beam.v_y_spread, s.seed, per_node, s.threads)
        grids, hist, ensembles = sm.grids, sm.histogram, sm.ensembles
        total, peaks, metrics = sm.transmitted_fraction, sm.peaks, sm.metrics
        tallies: dict[str, int] = {}
        for ens in ensembles:
            for key, v in ens.tallies().items():
                tallies[key] = tallies.get(key, 0) + v
        smear = {"nodes_m_per_s": list(map(float, sm.nodes)), "weights": list(map(float, sm.weights)),
                 "trajectories_per_node": per_node}
        # pooled ensembles restart their ids; offset them to stay unique
        trajectories = [(j * per_node + tr.id, tr) for j, ens in enumerate(ensembles) for tr in ens.trajectories]
    else:
        res: ScenarioResult = run_scenario(spec)
        grids, hist, total, peaks, metrics = res.grids, res.histogram, res.transmitted_fraction, res.peaks, res.metrics
        tallies = res.fate_tallies
        trajectories = [(tr.id, tr) for tr in res.ensemble.trajectories] if res.ensemble is not None else []
    _finite(metrics)
    elapsed = time.perf_counter() - t_start

    out.mkdir(parents=True, exist_ok=True)
    for name, g in grids.items():
        if g.psi is not None:
            write_csv(out / f"wavefield_{name}.csv", "x [m], re [m^-1/2], im [m^-1/2], rho [m^-1]",
                      ["x", "re", "im", "rho"], [g.x, g.psi.real, g.psi.imag, g.rho])
        else:
            write_csv(out / f"wavefield_{name}.csv", "x [m], rho [m^-1] (velocity-averaged)", ["x", "rho"], [g.x, g.rho])
    ids, ts, xs, fates = [], [], [], []
    for tid, tr in trajectories:
        ids.append(np.full(tr.t.size, tid, dtype=np.int64))
        ts.append(tr.t)
        xs.append(tr.x)
        fates.extend([tr.fate.label] * tr.t.size)
    if trajectories:
        write_csv(out / "trajectories.csv", "id [-], t [s], x [m], fate [-]", ["id", "t", "x", "fate"],
                  [np.concatenate(ids).astype(str), np.concatenate(ts), np.concatenate(xs), np.array(fates)])
    if hist is not None:
        write_csv(out / "histogram.csv", "bin_center [m], bin_left [m], bin_right [m], density [m^-1], weight [-]",
                  ["bin_center", "bin_left", "bin_right", "density", "weight"],
                  [hist.centers, hist.bin_edges[:-1], hist.bin_edges[1:], hist.density, hist.counts])
    a = cfg.analysis
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "code_version": __version__,
        "scenario": cfg.scenario,
        "seed": cfg.sampling.seed,
        "null_prediction": spec.null_prediction,
        "fate_tallies": tallies,
        "transmitted_fraction": total,
        "metrics": metrics,
        "peaks": {k: _peaks_json(v) for k, v in peaks.items()},
        "histogram": None if hist is None else {
            "normalization": Normalization(hist.normalization).value,
            "range_m": list(hist.range), "n_bins": int(hist.counts.size),
            "n_effective": hist.n_effective, "total_weight": hist.total_weight,
        },
        "velocity_smear": smear,
        "oracle_check_rel_error": err,
        "timing_s": {"total": elapsed},
        "decisions": {
            "layout": "slit A centred at x = 0, grating B centred at +150 nm; asymmetry > 0 means more mass towards B",
            "guidance": "v = (hbar/m) Im(dpsi/dx / psi)",
            "thresholds": {
                "global": [a.global_threshold, a.global_separation],
                "zoom": [a.zoom_threshold, a.zoom_separation],
            },
        },
        "config": cfg.to_dict(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ------------------------------------------------------------------ compare


def load_run(run: Path):
    path = run / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{run} is not a run directory (no manifest.json)") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return manifest


def load_histogram(run: Path, manifest) -> DensityHistogram | None:
    path = run / "histogram.csv"
    if not path.exists():
        return None
    h = read_csv(path)
    edges = np.append(h["bin_left"], h["bin_right"][-1])
    meta = manifest["histogram"]
    return DensityHistogram(tuple(meta["range_m"]), edges, h["weight"], Normalization(meta["normalization"]),
                            meta["n_effective"], meta["total_weight"], meta["total_weight"])


def compare(run: Path, other: Path | None) -> dict:
    """Histogram of `run` against the global density of `other` (default: itself).

    With two runs the histograms and density grids are also compared with
    each other, and the peak lists are matched by position.
    """
    m_run = load_run(run)
    ref = other if other is not None else run
    m_ref = load_run(ref) if other is not None else m_run
    report: dict = {"run": str(run), "reference": str(ref)}
    hist = load_histogram(run, m_run)
    dens_path = ref / "wavefield_global.csv"
    if hist is not None and dens_path.exists():
        d = read_csv(dens_path)
        total = m_ref["transmitted_fraction"]
        try:
            rep = compare_histogram_to_density(hist, d["x"], d["rho"], total if total > 0 else None)
        except ValueError as exc:
            raise ConfigError(f"incompatible grids: {exc}") from exc
        report["histogram_vs_density"] = {"tv": rep.tv_distance, "chi2_per_dof": rep.chi2_per_dof, "n_bins": rep.n_bins}
    if other is not None:
        h_ref = load_histogram(ref, m_ref)
        if hist is not None and h_ref is not None:
            try:
                report["histogram_vs_histogram"] = {"tv": histogram_tv(hist, h_ref)}
            except ValueError as exc:
                raise ConfigError(f"incompatible grids: {exc}") from exc
        a_path, b_path = run / "wavefield_global.csv", ref / "wavefield_global.csv"
        if a_path.exists() and b_path.exists():
            da, db = read_csv(a_path), read_csv(b_path)
            if da["x"].shape != db["x"].shape or not np.allclose(da["x"], db["x"], rtol=0, atol=1e-15):
                raise ConfigError("incompatible grids: density grids differ")
            pa, pb = da["rho"] / da["rho"].sum(), db["rho"] / db["rho"].sum()
            report["density_vs_density"] = {"tv": 0.5 * float(np.abs(pa - pb).sum())}
    report["peaks"] = {}
    for name in sorted(set(m_run["peaks"]) | set(m_ref["peaks"])):
        a = [p["position_m"] for p in m_run["peaks"].get(name, [])]
        b = [p["position_m"] for p in m_ref["peaks"].get(name, [])]
        matched = [min(b, key=lambda q: abs(q - p)) - p for p in a] if b else []
        report["peaks"][name] = {"run": a, "reference": b, "count_diff": len(a) - len(b), "nearest_offset_m": matched}
    # with no reference run, compare the histogram peaks to the density peaks
    if other is None and "histogram" in m_run["peaks"] and "global" in m_run["peaks"]:
        a = [p["position_m"] for p in m_run["peaks"]["histogram"]]
        b = [p["position_m"] for p in m_run["peaks"]["global"]]
        report["peaks"]["histogram_vs_global"] = {"run": a, "reference": b, "count_diff": len(a) - len(b)}
    return report


# ------------------------------------------------------------------ sweep


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def sweep_configs(base: ExperimentConfig, param: str, values):
    """One config per value of the dotted parameter path, e.g. beam.v_y."""
    for v in values:
        d = base.to_dict()
        node = d
        keys = param.split(".")
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ConfigError(f"unknown sweep parameter {param!r}")
            node = node[k]
        if keys[-1] not in node:
            raise ConfigError(f"unknown sweep parameter {param!r}")
        node[keys[-1]] = v
        yield v, ExperimentConfig.from_dict(d)


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bohmsim", description="Bohmian trajectories for a C60 beam through an asymmetric slit plate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_flags(sp):
        sp.add_argument("--config", type=Path, help="JSON configuration or a previous manifest.json")
        sp.add_argument("--scenario", choices=SCENARIO_NAMES)
        sp.add_argument("--out", type=Path, default=Path("run"))
        sp.add_argument("--seed", type=int, help=f"overrides ${SEED_ENV} and the config")
        sp.add_argument("--trajectories", type=int)
        sp.add_argument("--threads", type=parse_threads)
        sp.add_argument("--smear-vy", type=float, metavar="REL_SPREAD", help="relative Gaussian spread of v_y")
        sp.add_argument("--windows", help=f"comma-separated subset of {','.join(WINDOW_NAMES)}")

    run_flags(sub.add_parser("simulate", help="run one scenario and write its outputs"))
    cp = sub.add_parser("compare", help="compare a run's histogram with a density and another run")
    cp.add_argument("run", type=Path)
    cp.add_argument("reference", type=Path, nargs="?")
    cp.add_argument("--out", type=Path, help="report path (default RUN/compare.json)")
    sw = sub.add_parser("sweep", help="repeat simulate over a list of parameter values")
    run_flags(sw)
    sw.add_argument("--param", required=True, help="dotted config path, e.g. beam.v_y")
    sw.add_argument("--values", required=True, help="comma-separated JSON values")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            report = compare(args.run, args.reference)
            dest = args.out or args.run / "compare.json"
            dest.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
            print(dest)
        elif args.command == "simulate":
            cfg = effective_config(args)
            simulate(cfg, args.out)
            print(args.out)
        else:
            base = effective_config(args)
            values = [_parse_value(v) for v in args.values.split(",")]
            for v, cfg in list(sweep_configs(base, args.param, values)):
                out = args.out / f"{args.param}={v}"
                log.info("sweep %s", out)
                simulate(cfg, out)
                print(out)
    except ConfigError as exc:
        print(f"bohmsim: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError, FloatingPointError) as exc:
        print(f"bohmsim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"bohmsim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
