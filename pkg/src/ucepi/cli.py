"""Command-line entry points: simulate, fit, select, analyze.

Fits write one directory per repeat (posterior.csv, evidence.json and the
analysis inputs); ``analyze`` is pure post-processing of those files.  All
outputs are written atomically, and every job's random streams derive from
the master seed by content, so results do not depend on worker scheduling.
"""

import argparse
import concurrent.futures
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from ._files import atomic_write, write_json
from .analysis import effective_r_from_components, kde_grid, model_posterior
from .config import (load_config, merged_model_config, modelspec_from_config,
                     population_from_config, prior_from_config, theta_from_config)
from .errors import (ConfigError, DataError, DegenerateFilterError, DegenerateRunError,
                     ParseError)
from .rng import StreamFactory, stream, stream_key
from .smc2 import run_smc2
from .ucmodel import (build_schedule, load_observations, simulate_dataset,
                      write_latent, write_observations)

POSTERIOR_COLUMNS = ("beta1", "beta2", "phi", "alpha", "delta_gender",
                     "delta_income", "delta_age", "epsilon", "weight")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ucepi",
        description="Household epidemic model: simulation, SMC^2 fitting, "
                    "model selection and analytics.")
    parser.add_argument("--version", action="version", version=f"ucepi {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, run_dir=False):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override run.seed")
        p.add_argument("--workers", type=int, default=None, help="override run.workers")
        if run_dir:
            p.add_argument("--run-dir", required=True, help="completed fit output directory")

    p = sub.add_parser("simulate", help="simulate a dataset from the generating parameters")
    common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("fit", help="run SMC^2 over repeated seeds and flag the best run")
    common(p)
    p.set_defaults(func=cmd_fit)
    p = sub.add_parser("select", help="fit a model grid across areas and tabulate evidence")
    common(p)
    p.set_defaults(func=cmd_select)
    p = sub.add_parser("analyze", help="effective-R and prevalence KDE from a fit")
    common(p, run_dir=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (DegenerateFilterError, DegenerateRunError) as exc:
        print(f"degenerate run: {exc}", file=sys.stderr)
        return 4


def _require(cfg, key, command):
    if key not in cfg:
        raise ConfigError(f"'{command}' requires a '{key}' section in the config")
    return cfg[key]


def _run_settings(cfg, args):
    run = dict(cfg.get("run", {}))
    if args.seed is not None:
        run["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        run["workers"] = args.workers
    run.setdefault("seed", 0)
    run.setdefault("p_theta", 100)
    run.setdefault("p", 100)
    run.setdefault("h", 7)
    run.setdefault("repeats", 1)
    run.setdefault("workers", os.cpu_count() or 1)
    run.setdefault("ess_threshold", 0.5)
    run.setdefault("mh_steps", 1)
    run.setdefault("resampling", "systematic")
    run.setdefault("save_states", False)
    proposal = run.get("proposal", {})
    run["proposal_scale"] = proposal.get("scale", 0.001)
    run["proposal_ridge"] = proposal.get("ridge", 0.25)
    return run


# ---------------------------------------------------------------- simulate

def cmd_simulate(args):
    cfg = load_config(args.config)
    sim = _require(cfg, "simulate", "simulate")
    pop = population_from_config(_require(cfg, "population", "simulate"))
    spec = modelspec_from_config(cfg.get("model"))
    theta = theta_from_config(sim["theta"], spec)
    run = _run_settings(cfg, args)
    seed = run["seed"]

    if "panel_file" in sim:
        obs_times, reported = _load_panel_file(sim["panel_file"], pop)
    else:
        obs_times, reported = build_panel(pop, sim["panel"], seed)
    series, trajectory = simulate_dataset(pop, theta, spec, obs_times, reported,
                                          sim.get("h", 1), StreamFactory(seed, "simulate"))
    os.makedirs(args.out, exist_ok=True)
    write_observations(os.path.join(args.out, "observations.csv"), series, pop)
    write_latent(os.path.join(args.out, "latent.csv"), trajectory, pop)

    prevalence = [s.colonised_count / max(pop.n_individuals, 1) for s in trajectory]
    n_results = series.total_results
    n_positive = sum(int(r.results.sum()) for r in series.records)
    print(f"simulated {len(trajectory) - 1} steps over {len(obs_times)} observation days")
    print(f"latent prevalence: start {prevalence[0]:.4f}, "
          f"mean {np.mean(prevalence):.4f}, min {min(prevalence):.4f}, "
          f"max {max(prevalence):.4f}")
    if n_results:
        print(f"observations: {n_results} results, positivity {n_positive / n_results:.4f}")
    else:
        print("observations: none")
    return 0


def build_panel(pop, panel_cfg, master_seed):
    """Rotating-group observation design over a seeded household panel."""
    gen = stream(master_seed, "panel", panel_cfg.get("seed", 0))
    n = panel_cfg["households"]
    if n > pop.n_households:
        raise ConfigError(f"panel wants {n} households, population has {pop.n_households}")
    chosen = np.sort(gen.permutation(pop.n_households)[:n])
    groups = panel_cfg.get("groups", 1)
    days = np.arange(panel_cfg["start"], panel_cfg["end"] + 1e-9, panel_cfg["period"])
    days = [d for d in days
            if not any(lo <= d <= hi for lo, hi in panel_cfg.get("gaps", []))]
    obs_times, reported = [], []
    for i, day in enumerate(days):
        households = chosen[np.arange(len(chosen)) % groups == i % groups]
        ids = np.concatenate([
            np.arange(pop.member_starts[h], pop.member_starts[h] + pop.hh_sizes[h])
            for h in households]) if len(households) else np.empty(0, dtype=np.int64)
        if len(ids):
            obs_times.append(float(day))
            reported.append(ids)
    return np.array(obs_times), reported


def _load_panel_file(path, pop):
    by_day = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"day", "individual_id"}:
            raise ParseError(f"{path}: header must be day,individual_id")
        for row in reader:
            try:
                day, ext = float(row["day"]), int(row["individual_id"])
            except (TypeError, ValueError):
                raise ParseError(f"{path}: line {reader.line_num}: malformed row") from None
            if ext not in pop.id_to_index:
                raise DataError(f"{path}: line {reader.line_num}: unknown individual {ext}")
            by_day.setdefault(day, set()).add(pop.id_to_index[ext])
    times = sorted(by_day)
    return np.array(times), [np.array(sorted(by_day[t]), dtype=np.int64) for t in times]


# ---------------------------------------------------------------- fit

def cmd_fit(args):
    cfg = load_config(args.config)
    _require(cfg, "population", "fit")
    _require(cfg, "observations", "fit")
    run = _run_settings(cfg, args)
    summary = run_fit(cfg, run, args.out, run["seed"])
    for entry in summary["runs"]:
        flag = " (best)" if entry["dir"] == summary["best"] else ""
        print(f"{entry['dir']}: log evidence {entry['log_evidence']:.4f}{flag}")
    return 0


def run_fit(cfg, run, out_dir, seed):
    """Run `repeats` seeded SMC^2 passes, persist each, flag the best."""
    repeats = run["repeats"]
    jobs = [(cfg, run, out_dir, seed, r) for r in range(repeats)]
    if run["workers"] > 1 and repeats > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=run["workers"]) as pool:
            evidences = list(pool.map(_fit_repeat_star, jobs))
    else:
        evidences = [_fit_repeat_star(job) for job in jobs]
    runs = [{"dir": f"run_{r:03d}", "seed": seed, "repeat": r, "log_evidence": ev}
            for r, ev in enumerate(evidences)]
    best = max(runs, key=lambda e: e["log_evidence"])
    summary = {"runs": runs, "best": best["dir"], "log_evidence": best["log_evidence"]}
    write_json(os.path.join(out_dir, "fit_summary.json"), summary)
    return summary


def _fit_repeat_star(job):
    return _fit_repeat(*job)


def _fit_repeat(cfg, run, out_dir, seed, repeat):
    pop = population_from_config(cfg["population"])
    spec = modelspec_from_config(cfg.get("model"))
    prior = prior_from_config(spec, cfg.get("prior"))
    obs = load_observations(cfg["observations"], pop)
    schedule = build_schedule(obs.times, run["h"])
    output = run_smc2(pop, spec, prior, obs, schedule, run["p_theta"], run["p"],
                      StreamFactory(seed, "fit", repeat),
                      ess_threshold_fraction=run["ess_threshold"],
                      mh_steps=run["mh_steps"],
                      proposal_scale=run["proposal_scale"],
                      proposal_ridge=run["proposal_ridge"],
                      resampling=run["resampling"])
    run_dir = os.path.join(out_dir, f"run_{repeat:03d}")
    _write_fit_outputs(run_dir, output, run)
    return output.log_evidence


def _write_fit_outputs(run_dir, output, run):
    os.makedirs(run_dir, exist_ok=True)
    with atomic_write(os.path.join(run_dir, "posterior.csv")) as fh:
        writer = csv.writer(fh)
        writer.writerow(POSTERIOR_COLUMNS)
        for row in output.natural_table():
            writer.writerow([repr(float(v)) for v in row])
    write_json(os.path.join(run_dir, "evidence.json"), {
        "log_evidence": output.log_evidence,
        "increments": [{"day": d, "value": v} for d, v in output.log_increments],
        "ess_trace": [{"day": d, "value": v} for d, v in output.ess_trace],
        "rejuvenations": output.rejuvenations,
        "n_rejuvenations": len(output.rejuvenations),
    })
    times = sorted(output.r_components)
    if times:
        with atomic_write(os.path.join(run_dir, "r_components.npz"), "wb") as fh:
            np.savez(fh, times=np.array(times),
                     components=np.stack([output.r_components[t]["components"] for t in times]),
                     weights=np.stack([output.r_components[t]["weights"] for t in times]))
    if output.prevalence:
        with atomic_write(os.path.join(run_dir, "prevalence.npz"), "wb") as fh:
            np.savez(fh, times=np.array([t for t, _ in output.prevalence]),
                     values=np.stack([v for _, v in output.prevalence]))
    if run.get("save_states"):
        _write_states_bin(os.path.join(run_dir, "states.bin"), output.final_states)


def _write_states_bin(path, states):
    """Little-endian dump: uint32 header (n_I, P_theta, P), then the state
    bits row-major, packed 8 per byte least-significant bit first."""
    p_theta, p, n_i = states.shape
    with atomic_write(path, "wb") as fh:
        fh.write(np.array([n_i, p_theta, p], dtype="<u4").tobytes())
        fh.write(np.packbits(states.reshape(-1), bitorder="little").tobytes())


def read_states_bin(path):
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(12), dtype="<u4")
        n_i, p_theta, p = (int(v) for v in header)
        bits = np.unpackbits(np.frombuffer(fh.read(), dtype=np.uint8),
                             count=n_i * p_theta * p, bitorder="little")
    return bits.reshape(p_theta, p, n_i)


# ---------------------------------------------------------------- select

def cmd_select(args):
    cfg = load_config(args.config)
    sel = _require(cfg, "select", "select")
    run = _run_settings(cfg, args)
    master_seed = run["seed"]

    jobs, scores = [], {}
    for model in sel["models"]:
        scores[model["id"]] = {}
        for area in sel["areas"]:
            job_dir = os.path.join(args.out, "select", model["id"], area["name"])
            summary_path = os.path.join(job_dir, "fit_summary.json")
            if os.path.exists(summary_path):
                scores[model["id"]][area["name"]] = _read_json(summary_path)["log_evidence"]
            else:
                jobs.append((cfg, run, model, area, job_dir, master_seed))
    if jobs:
        if run["workers"] > 1 and len(jobs) > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=run["workers"]) as pool:
                results = list(pool.map(_select_job_star, jobs))
        else:
            results = [_select_job_star(job) for job in jobs]
        for (model_id, area_name), evidence in results:
            scores[model_id][area_name] = evidence

    table = model_posterior(scores)
    with atomic_write(os.path.join(args.out, "model_table.csv")) as fh:
        writer = csv.writer(fh)
        writer.writerow(["model_id"] + [f"log_evidence_{a}" for a in table.areas]
                        + ["total_log_evidence", "posterior"])
        for i, mid in enumerate(table.model_ids):
            writer.writerow([mid] + [repr(float(v)) for v in table.log_evidence[i]]
                            + [repr(float(table.totals[i])), repr(float(table.posterior[i]))])
    for i, mid in enumerate(table.model_ids):
        print(f"{mid}: total log evidence {table.totals[i]:.4f}, "
              f"posterior {table.posterior[i]:.4f}")
    return 0


def _select_job_star(job):
    return _select_job(*job)


def _select_job(cfg, run, model, area, job_dir, master_seed):
    job_cfg = {
        "population": area["population"],
        "observations": area["observations"],
        "model": merged_model_config(cfg, model.get("model")),
        "prior": {**cfg.get("prior", {}), **model.get("prior", {})},
    }
    job_seed = stream_key(master_seed, "select", model["id"], area["name"]) % (2 ** 63)
    summary = run_fit(job_cfg, run, job_dir, job_seed)
    return (model["id"], area["name"]), summary["log_evidence"]


def _read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------- analyze

def cmd_analyze(args):
    cfg = load_config(args.config)
    ana = dict(cfg.get("analysis", {}))
    pop = population_from_config(_require(cfg, "population", "analyze"))

    summary_path = os.path.join(args.run_dir, "fit_summary.json")
    if not os.path.exists(summary_path):
        raise DataError(
            f"{args.run_dir} is not a completed fit: expected fit_summary.json plus "
            "run_*/evidence.json, run_*/posterior.csv, run_*/r_components.npz and "
            "run_*/prevalence.npz as written by 'ucepi fit'")
    best_dir = os.path.join(args.run_dir, _read_json(summary_path)["best"])
    r_path = os.path.join(best_dir, "r_components.npz")
    prev_path = os.path.join(best_dir, "prevalence.npz")
    for path in (r_path, prev_path):
        if not os.path.exists(path):
            raise DataError(f"missing analysis input {path}; rerun 'ucepi fit'")

    quantiles = tuple(ana.get("quantiles", (0.05, 0.5, 0.95)))
    with np.load(r_path) as blob:
        trace = effective_r_from_components(blob["times"], blob["components"],
                                            blob["weights"], quantiles)
    os.makedirs(args.out, exist_ok=True)
    with atomic_write(os.path.join(args.out, "effective_r.csv")) as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "channel", "q05", "q50", "q95"])
        for t, channel, lo, mid, hi in trace.rows():
            writer.writerow([repr(float(t)), channel] +
                            [repr(float(v)) for v in (lo, mid, hi)])

    with np.load(prev_path) as blob:
        times, values = blob["times"], blob["values"]
    if ana.get("time_average", "all_steps") == "observation_times":
        obs = load_observations(_require(cfg, "observations", "analyze"), pop)
        keep = np.isin(times, obs.times)
        if keep.any():
            values = values[keep]
    weights = values.mean(axis=0)

    bandwidth = ana.get("bandwidth")
    grid = None
    if ana.get("grid") is not None:
        gx, gy = ana["grid"]["x"], ana["grid"]["y"]
        grid = (np.linspace(gx[0], gx[1], gx[2]), np.linspace(gy[0], gy[1], gy[2]))
    prevalence_grid = kde_grid(pop.locations, weights, bandwidth=bandwidth, grid=grid,
                               mode="prevalence")
    uniform_grid = kde_grid(pop.locations, np.ones(pop.n_households), bandwidth=bandwidth,
                            grid=(prevalence_grid.x, prevalence_grid.y), mode="uniform")
    with atomic_write(os.path.join(args.out, "kde_grid.csv")) as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "density", "mode"])
        for g in (prevalence_grid, uniform_grid):
            for x, y, density, mode in g.rows():
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(density)), mode])
    print(f"analyze: wrote effective_r.csv ({len(trace.times)} times) and "
          f"kde_grid.csv ({prevalence_grid.density.size} cells per mode) from {best_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
