"""Desk-scale synthetic study shared by the acceptance suite.

A field sample of 120 households is resampled onto a clustered 1 km^2
location pool, giving populations of a few hundred households.  A 20-household
panel is observed weekly in three rotating groups with a 60-day reporting
gap, and test results are simulated daily from the generating parameters.
Everything is deterministic given the frozen seeds.
"""

import numpy as np

from ucepi.population import Household, Individual, LocationPool, Population, synthesize_population
from ucepi.rng import stream
from ucepi.transmission import ModelSpec, Theta
from ucepi.ucmodel import simulate_dataset

GENERATING = {"log_beta1": -2.8, "log_beta2": -4.4, "log_phi": -4.6,
              "log_epsilon": -6.1}
ALPHA = 0.8


def generating_theta():
    return Theta(beta1=np.exp(GENERATING["log_beta1"]),
                 beta2=np.exp(GENERATING["log_beta2"]),
                 phi=np.exp(GENERATING["log_phi"]),
                 alpha=ALPHA, delta=np.zeros(3),
                 epsilon=np.exp(GENERATING["log_epsilon"]))


def model_spec():
    return ModelSpec()  # kappa = |H| both, exponential kernel, alpha fixed 0.8


def field_sample(seed=101, n_households=120):
    gen = stream(seed, "field-sample")
    individuals, households, k = [], [], 0
    for h in range(n_households):
        size = 1 + gen.poisson(3.4)
        members = []
        for _ in range(size):
            cov = np.array([float(gen.integers(0, 2)),
                            float(np.exp(gen.normal(10.0, 0.5))),
                            float(gen.uniform(1, 80))])
            individuals.append(Individual(k, h, cov))
            members.append(k)
            k += 1
        households.append(Household(h, tuple(gen.uniform(0.0, 1.0, 2)), tuple(members)))
    return Population.build(individuals, households)


def location_pool(seed=102, n=900):
    gen = stream(seed, "pool")
    centers = gen.uniform(0.1, 0.9, (6, 2))
    points = []
    for i in range(n):
        if i % 4 == 0:
            points.append(gen.uniform(0.0, 1.0, 2))
        else:
            c = centers[gen.integers(0, len(centers))]
            points.append(np.clip(c + gen.normal(0, 0.12, 2), 0, 1))
    return LocationPool(np.array(points))


def synth_population(target=2000):
    return synthesize_population(field_sample(), location_pool(), target, rng_seed=7)


def panel_design(pop, n_panel=20, groups=3, start=7.0, end=420.0, period=7.0,
                 gap=(180.0, 240.0), seed=5):
    """Weekly observation days with rotating household groups and a
    reporting gap (sparse panel like the motivating study)."""
    gen = stream(seed, "panel")
    panel = np.sort(gen.permutation(pop.n_households)[:n_panel])
    days = [d for d in np.arange(start, end + 1e-9, period)
            if not gap[0] <= d <= gap[1]]
    obs_times, reported = [], []
    for i, day in enumerate(days):
        households = panel[np.arange(len(panel)) % groups == i % groups]
        ids = np.concatenate([
            np.arange(pop.member_starts[h], pop.member_starts[h] + pop.hh_sizes[h])
            for h in households])
        obs_times.append(float(day))
        reported.append(ids)
    return np.array(obs_times), reported


def simulate_study(pop, sim_seed=2024):
    """Daily-dynamics simulation reported on the panel design."""
    obs_times, reported = panel_design(pop)
    series, trajectory = simulate_dataset(pop, generating_theta(), model_spec(),
                                          obs_times, reported, 1, sim_seed)
    return series, trajectory
