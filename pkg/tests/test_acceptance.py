"""Acceptance suite: one test per criterion, printing a PASS/FAIL line each.

The desk-scale criteria (3-6) share one module-scoped set of fits; expect
roughly an hour of compute on a single core.  Run with ``pytest -s`` to see
the per-criterion lines as they complete.
"""

import math
import time

import numpy as np
import pytest

import desk
from conftest import make_population
from ucepi.analysis import kde_grid, model_posterior, weighted_quantile
from ucepi.apf import (exact_likelihood, initial_proposal_prob, mean_loglik_vs_exact,
                       proposal_prob, replicate_logliks)
from ucepi.rng import stream
from ucepi.smc2 import Prior, ess, log_evidence_increment, run_smc2
from ucepi.transmission import ModelSpec, Theta, seasonal_multiplier, spatial_kernel, within_rate
from ucepi.ucmodel import ObservationRecord, ObservationSeries, build_schedule

GENERATING = desk.GENERATING
TRACKED = ("log_beta2", "log_phi", "log_epsilon")


def report(criterion, ok, detail):
    print(f"\nACCEPTANCE {criterion}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def posterior_quantiles(out, qs=(0.05, 0.5, 0.95)):
    w = out.weights
    return {name: weighted_quantile(out.z[:, i], qs, w)
            for i, name in enumerate(out.names)}


def covers(quantiles, name):
    lo, _, hi = quantiles[name]
    return lo <= GENERATING[name] <= hi


# ---------------------------------------------------------------- fixtures

@pytest.fixture(scope="module")
def desk_runs():
    """All desk-scale fits shared by criteria 3-6."""
    pop = desk.synth_population(2000)
    series, _ = desk.simulate_study(pop)
    positives = sum(int(r.results.sum()) for r in series.records)
    assert 0 < positives < series.total_results  # simulated positivity in (0, 1)
    spec = desk.model_spec()
    prior = Prior(spec)
    runs = {"n_i": pop.n_individuals, "n_h": pop.n_households,
            "n_results": series.total_results}

    sched7 = build_schedule(series.times, 7)
    fits = {}
    for seed in (1, 2, 3, 4):
        t0 = time.time()
        out = run_smc2(pop, spec, prior, series, sched7, 100, 100, seed,
                       collect_prevalence=False, collect_r=False)
        fits[seed] = {"out": out, "elapsed": time.time() - t0,
                      "quantiles": posterior_quantiles(out)}
    runs["fits7"] = fits

    # the h comparison shares one seed and one proposal tuned to the
    # posterior covariance (the fixed-ridge default is built for the larger
    # motivating study and starves late rejuvenations here)
    tuned = {"proposal_scale": 1.0, "proposal_ridge": 0.01}
    h_fits = {}
    for h in (7, 3, 1):
        t0 = time.time()
        out = run_smc2(pop, spec, prior, series, build_schedule(series.times, h),
                       100, 100, 1, collect_prevalence=False, collect_r=False, **tuned)
        h_fits[h] = {"out": out, "elapsed": time.time() - t0,
                     "quantiles": posterior_quantiles(out)}
    runs["fits_h"] = h_fits

    scale = {}
    for target in (1400, 2600):
        pop_t = desk.synth_population(target)
        series_t, _ = desk.simulate_study(pop_t)
        out = run_smc2(pop_t, spec, prior, series_t, build_schedule(series_t.times, 7),
                       100, 100, 1, collect_prevalence=False, collect_r=False, **tuned)
        scale[target] = {"out": out, "n_i": pop_t.n_individuals,
                         "quantiles": posterior_quantiles(out)}
    runs["scale"] = scale
    return runs


# ---------------------------------------------------------------- criteria

def test_acceptance_01_filter_matches_exact_likelihood():
    """Mean filter likelihood within 3 standard errors of the forward
    algorithm on 1-3 individual populations."""
    t_start = time.time()
    spec = ModelSpec()
    pops = {
        1: make_population([1], [(0.0, 0.0)]),
        2: make_population([1, 1], [(0.0, 0.0), (0.04, 0.0)]),
        3: make_population([2, 1], [(0.0, 0.0), (0.05, 0.0)]),
    }
    obs_plans = {
        1: [(0.0, [0]), (7.0, [0]), (16.0, [0])],
        2: [(0.0, [0, 1]), (7.0, [0]), (16.0, [1]), (21.0, [0, 1])],
        3: [(0.0, [0, 2]), (7.0, [1]), (16.0, [0, 1, 2]), (21.0, [2]), (30.0, [0])],
    }
    gen = stream(555, "acceptance-1")
    checks = []
    for n_i, pop in pops.items():
        for draw in range(2):
            theta = Theta(beta1=math.exp(gen.uniform(-3, -1)),
                          beta2=math.exp(gen.uniform(-4, -2)),
                          phi=math.exp(gen.uniform(-3.5, -2.5)),
                          alpha=0.8, delta=np.zeros(3),
                          epsilon=math.exp(gen.uniform(-4, -2)))
            records = []
            for day, ids in obs_plans[n_i]:
                y = (gen.random(len(ids)) < 0.4).astype(np.uint8)
                records.append(ObservationRecord(day, np.array(ids), y))
            obs = ObservationSeries(tuple(records), n_i)
            sched = build_schedule(obs.times, 7)
            exact = exact_likelihood(pop, theta, spec, obs, sched)
            for n_particles in (8, 64):
                lls = replicate_logliks(pop, theta, spec, obs, sched, n_particles,
                                        1000, rng=1000 + draw + n_i)
                _, _, z = mean_loglik_vs_exact(lls, exact)
                checks.append((n_i, n_particles, draw, z))
    elapsed = time.time() - t_start
    worst = max(abs(z) for *_, z in checks)
    ok = worst < 3.0 and elapsed < 120.0
    report(1, ok, f"{len(checks)} configs, worst |z| = {worst:.2f}, "
                  f"elapsed {elapsed:.0f}s (< 120s)")


def test_acceptance_02_closed_form_spot_values():
    """Hand-derived proposal probabilities and weights."""
    p1, w1 = proposal_prob(1, 1, 0.0, 1, 0.1, 0.8, 0.95)
    p2, w2 = proposal_prob(0, 0, 0.2, 1, 0.1, 0.8, 0.95)
    p0, w0 = initial_proposal_prob(1, 0.13, 0.8, 0.95)
    checks = [
        abs(p1 - 0.9934697) < 1e-6, abs(w1 - 0.7286281) < 1e-6,
        abs(p2 - 0.0445353) < 1e-6, abs(w2 - 0.8140481) < 1e-6,
        abs(p0 - 0.68956) < 1e-5, abs(w0 - 0.141426) < 1e-5,
    ]
    report(2, all(checks),
           f"proposal ({p1:.7f}, {w1:.7f}), ({p2:.7f}, {w2:.7f}); "
           f"initial ({p0:.6f}, {w0:.6f})")


def test_acceptance_03_simulation_study_recovery(desk_runs):
    """90% credible intervals cover the generating log beta2, log phi and
    log epsilon in at least 3 of 4 seeded desk-scale fits."""
    fits = desk_runs["fits7"]
    passing = []
    lines = []
    for seed, fit in fits.items():
        q = fit["quantiles"]
        run_covers = all(covers(q, name) for name in TRACKED)
        passing.append(run_covers)
        lines.append(f"seed {seed}: " + ", ".join(
            f"{n}[{q[n][0]:.2f},{q[n][2]:.2f}]{'*' if covers(q, n) else '!'}"
            for n in TRACKED))
    total_minutes = sum(f["elapsed"] for f in fits.values()) / 60
    ok = sum(passing) >= 3
    report(3, ok, f"{sum(passing)}/4 runs cover all of log_beta2/log_phi/"
                  f"log_epsilon on n_I={desk_runs['n_i']} "
                  f"({desk_runs['n_results']} results), "
                  f"{total_minutes:.0f} core-min total; " + "; ".join(lines))


def test_acceptance_04_h_robustness(desk_runs):
    """Coarse-step posteriors overlap the daily-step run and cost far less."""
    q7 = desk_runs["fits_h"][7]["quantiles"]
    q1 = desk_runs["fits_h"][1]["quantiles"]
    inside = {name: q1[name][0] <= q7[name][1] <= q1[name][2] for name in TRACKED}
    wall7 = desk_runs["fits_h"][7]["elapsed"]
    wall1 = desk_runs["fits_h"][1]["elapsed"]
    speed_ok = wall7 < 0.25 * wall1
    ok = all(inside.values()) and speed_ok
    report(4, ok, "h=7 medians inside h=1 90% CI: "
                  + ", ".join(f"{n}={'yes' if v else 'NO'}" for n, v in inside.items())
                  + f"; wall h7/h1 = {wall7:.0f}s/{wall1:.0f}s = {wall7 / wall1:.3f} (< 0.25)")


def test_acceptance_05_scale_invariance(desk_runs):
    """log beta2 posteriors agree across population sizes built from the
    same household sample."""
    small = desk_runs["scale"][1400]
    large = desk_runs["scale"][2600]
    qs, ql = small["quantiles"]["log_beta2"], large["quantiles"]["log_beta2"]
    mutual = (ql[0] <= qs[1] <= ql[2]) and (qs[0] <= ql[1] <= qs[2])
    report(5, mutual,
           f"log_beta2 n_I={small['n_i']}: median {qs[1]:.2f} in "
           f"[{qs[0]:.2f}, {qs[2]:.2f}]; n_I={large['n_i']}: median {ql[1]:.2f} "
           f"in [{ql[0]:.2f}, {ql[2]:.2f}]; mutual coverage={mutual}")


def test_acceptance_06_smc2_mechanics(desk_runs):
    """ESS trigger, weight reset, acceptance-rate band, rejuvenation counts."""
    problems = []
    for seed, fit in desk_runs["fits7"].items():
        out = fit["out"]
        fired = {r["day"] for r in out.rejuvenations}
        for day, value in out.ess_trace:
            should_fire = value < 0.5 * 100
            if should_fire != (day in fired):
                problems.append(f"seed {seed} day {day}: ess {value:.1f} "
                                f"fired={day in fired}")
        for r in out.rejuvenations:
            if abs(r["ess_after_reset"] - 100.0) > 1e-9:
                problems.append(f"seed {seed}: weights not reset at day {r['day']}")
    rates = {seed: float(np.mean([r["acceptance_rate"]
                                  for r in fit["out"].rejuvenations]))
             for seed, fit in desk_runs["fits7"].items()}
    for seed, rate in rates.items():
        if not 0.05 < rate < 0.5:
            problems.append(f"seed {seed}: mean acceptance {rate:.3f} outside (0.05, 0.5)")
    counts = {h: len(desk_runs["fits_h"][h]["out"].rejuvenations) for h in (1, 3, 7)}
    if not counts[1] >= counts[3] >= counts[7]:
        problems.append(f"rejuvenation counts not non-increasing in h: {counts}")
    report(6, not problems,
           f"acceptance rates {({s: round(r, 3) for s, r in rates.items()})}, "
           f"rejuvenations h1/h3/h7 = {counts[1]}/{counts[3]}/{counts[7]}"
           + ("; " + "; ".join(problems) if problems else ""))


def test_acceptance_07_property_battery():
    """Representative invariants from every module (full versions live in the
    per-module test files)."""
    t0 = time.time()
    problems = []

    freq = 2 * math.pi / 365.25
    t = np.linspace(0, 700, 41)
    if np.max(np.abs(seasonal_multiplier(t, 0.7, freq, 1.0)
                     - seasonal_multiplier(t + 365.25, 0.7, freq, 1.0))) > 1e-9:
        problems.append("seasonal period")
    if not spatial_kernel(0.4, 0.1) < spatial_kernel(0.4, 0.3):
        problems.append("kernel monotone in phi")

    pop4 = make_population([4], [(0.0, 0.0)])
    pop8 = make_population([8], [(0.0, 0.0)])
    s4 = np.array([1, 1, 0, 0], dtype=np.uint8)
    s8 = np.array([1, 1, 1, 1, 0, 0, 0, 0], dtype=np.uint8)
    if abs(within_rate(pop4, s4, 2, 0.3, "household_size")
           - within_rate(pop8, s8, 6, 0.3, "household_size")) > 1e-12:
        problems.append("density dependence")
    if abs(2 * within_rate(pop4, s4, 2, 0.3, "one")
           - within_rate(pop8, s8, 6, 0.3, "one")) > 1e-12:
        problems.append("frequency dependence")

    # synchronous update: the fused transition kernel consumes uniforms by
    # individual identity, so any evaluation order gives the same states
    from ucepi._engine import _transition_household
    gen = np.random.default_rng(0)
    pop = make_population([3, 2, 4], gen.uniform(0, 0.2, (3, 2)))
    states = (gen.random((2, 8, 9)) < 0.3).astype(np.uint8)
    pflip = (gen.random((2, 8, 3)) * 0.5).astype(np.float32)
    u = gen.random((2, 8, 9)).astype(np.float32)
    stay = np.float32(math.exp(-0.7))
    engine_out = np.empty_like(states)
    _transition_household(states, pflip, pop.hh_index, u, stay, engine_out)
    manual = np.zeros_like(states)
    for m in range(2):
        for p in range(8):
            for k in gen.permutation(9):  # arbitrary evaluation order
                threshold = stay if states[m, p, k] == 1 else pflip[m, p, pop.hh_index[k]]
                manual[m, p, k] = 1 if u[m, p, k] < threshold else 0
    if not np.array_equal(engine_out, manual):
        problems.append("synchronous update order independence")

    # weight locality: untested individuals carry unit weight
    p_na, w_na = proposal_prob(0, None, 0.3, 7, 0.1, 0.8, 0.95)
    if w_na != 1.0:
        problems.append("weight locality")

    # marginal-likelihood increment scale invariance
    lw = gen.normal(size=30)
    inc = gen.normal(size=30)
    if abs(log_evidence_increment(lw, inc)
           - log_evidence_increment(lw + 55.5, inc)) > 1e-10:
        problems.append("increment scale invariance")

    # KDE normalization for arbitrary weights
    pop_k = make_population([2] * 12, gen.uniform(0, 3, (12, 2)))
    grid = kde_grid(pop_k.locations, gen.random(12) ** 2)
    if abs(grid.integral() - 1.0) > 1e-6:
        problems.append("KDE normalization")

    # model posterior shift invariance
    scores = {"a": {"x": -3.0}, "b": {"x": -4.0}}
    shifted = {m: {a: v + 9.9 for a, v in per.items()} for m, per in scores.items()}
    if not np.allclose(model_posterior(scores).posterior,
                       model_posterior(shifted).posterior):
        problems.append("model posterior shift invariance")

    # ESS bounds
    if not (1.0 <= ess(gen.normal(size=64)) <= 64.0):
        problems.append("ESS bounds")

    elapsed = time.time() - t0
    ok = not problems and elapsed < 300
    report(7, ok, f"battery elapsed {elapsed:.1f}s (< 300s)"
                  + ("; " + "; ".join(problems) if problems else
                     "; full property suites in tests/test_*.py"))
