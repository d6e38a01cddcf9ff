import numpy as np
import pytest

from ucepi.population import Household, Individual, Population


def make_population(household_sizes, locations, cov_seed=0):
    """Population with given household sizes and locations; covariates are
    seeded noise so standardization is well defined."""
    gen = np.random.default_rng(cov_seed)
    individuals, households, k = [], [], 0
    for h, (size, loc) in enumerate(zip(household_sizes, locations)):
        members = []
        for _ in range(size):
            individuals.append(Individual(k, h, gen.normal(size=3)))
            members.append(k)
            k += 1
        households.append(Household(h, tuple(loc), tuple(members)))
    return Population.build(individuals, households)


@pytest.fixture
def two_household_pop():
    """4 + 4 individuals in two households 1 km apart."""
    return make_population([4, 4], [(0.0, 0.0), (1.0, 0.0)])


@pytest.fixture
def close_pop():
    """3 individuals in two households 50 m apart (filter-oracle toys)."""
    return make_population([2, 1], [(0.0, 0.0), (0.05, 0.0)])
