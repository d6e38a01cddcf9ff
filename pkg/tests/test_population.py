import numpy as np
import pytest

from ucepi.errors import CapacityError, IntegrityError, ParseError, StandardizationError
from ucepi.population import (Household, Individual, LocationPool, Population,
                              household_distance, load_location_pool, load_population,
                              synthesize_population)

from conftest import make_population


def write_csvs(tmp_path, households_rows, individuals_rows):
    hf = tmp_path / "households.csv"
    hf.write_text("household_id,easting_km,northing_km\n"
                  + "".join(f"{r}\n" for r in households_rows))
    inf = tmp_path / "individuals.csv"
    inf.write_text("individual_id,household_id,gender,income,age\n"
                   + "".join(f"{r}\n" for r in individuals_rows))
    return hf, inf


def test_load_population_three_four_five(tmp_path):
    hf, inf = write_csvs(
        tmp_path,
        ["1,0.0,0.0", "2,3.0,4.0"],
        ["1,1,0,100,30", "2,1,1,200,40", "3,2,0,150,20"],
    )
    pop = load_population(hf, inf)
    assert pop.n_individuals == 3
    assert pop.distance_matrix[0, 1] == pytest.approx(5.0)
    assert np.all(np.abs(pop.covariates.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(pop.covariates.var(axis=0) - 1.0) < 1e-6)


def test_load_population_dangling_household(tmp_path):
    hf, inf = write_csvs(tmp_path, ["1,0.0,0.0"], ["1,99,0,100,30"])
    with pytest.raises(IntegrityError, match="99"):
        load_population(hf, inf)


def test_load_population_malformed_row_reports_line(tmp_path):
    hf, inf = write_csvs(tmp_path, ["1,0.0,0.0", "2,oops,4.0"], ["1,1,0,100,30"])
    with pytest.raises(ParseError, match="line 3"):
        load_population(hf, inf)


def test_load_population_wrong_header(tmp_path):
    hf = tmp_path / "households.csv"
    hf.write_text("hid,x,y\n1,0,0\n")
    inf = tmp_path / "individuals.csv"
    inf.write_text("individual_id,household_id,gender,income,age\n1,1,0,1,2\n")
    with pytest.raises(ParseError, match="header"):
        load_population(hf, inf)


def test_constant_covariate_column_named(tmp_path):
    hf, inf = write_csvs(tmp_path, ["1,0.0,0.0"],
                         ["1,1,0,100,30", "2,1,1,100,40"])
    with pytest.raises(StandardizationError, match="income"):
        load_population(hf, inf)


def test_single_individual_population(tmp_path):
    hf, inf = write_csvs(tmp_path, ["7,2.0,3.0"], ["5,7,1,120,33"])
    pop = load_population(hf, inf)
    assert pop.n_individuals == 1
    assert pop.distance_matrix.shape == (1, 1)
    assert pop.distance_matrix[0, 0] == 0.0


def test_household_distance_cases():
    pop = make_population([1, 1, 1], [(0.0, 0.0), (3.0, 4.0), (1.0, 1.0)])
    assert household_distance(pop, 0, 0) == 0.0
    assert household_distance(pop, 0, 1) == pytest.approx(5.0)
    # (1,1) to (4,5): recompute the Euclidean distance independently
    pop2 = make_population([1, 1], [(1.0, 1.0), (4.0, 5.0)])
    assert household_distance(pop2, 0, 1) == pytest.approx(np.hypot(3.0, 4.0))
    with pytest.raises(IndexError):
        household_distance(pop, 0, 9)


def test_distance_matrix_symmetric_zero_diagonal():
    gen = np.random.default_rng(3)
    pop = make_population([2] * 10, gen.uniform(0, 5, (10, 2)))
    d = pop.distance_matrix
    assert np.array_equal(d, d.T)
    assert np.all(np.diag(d) == 0.0)


def test_membership_partition():
    pop = make_population([3, 1, 5], [(0, 0), (1, 0), (2, 0)])
    assert pop.hh_sizes.sum() == pop.n_individuals
    for k in range(pop.n_individuals):
        h = pop.hh_index[k]
        assert pop.member_starts[h] <= k < pop.member_starts[h] + pop.hh_sizes[h]


def sample_one_household():
    individuals = [Individual(i, 0, np.array([float(i), i * 2.0, i + 0.5]))
                   for i in range(5)]
    return Population.build(individuals, [Household(0, (0.0, 0.0), tuple(range(5)))])


def test_synthesize_rounds_up_to_whole_households():
    sample = sample_one_household()
    pool = LocationPool(np.column_stack([np.arange(10.0), np.zeros(10)]))
    synth = synthesize_population(sample, pool, 12, rng_seed=1)
    assert synth.n_households == 3
    assert synth.n_individuals == 15


def test_synthesize_target_zero_is_empty():
    sample = sample_one_household()
    pool = LocationPool(np.column_stack([np.arange(3.0), np.zeros(3)]))
    synth = synthesize_population(sample, pool, 0, rng_seed=1)
    assert synth.n_individuals == 0
    assert synth.n_households == 0
    assert synth.distance_matrix.shape == (0, 0)


def test_synthesize_deterministic():
    gen = np.random.default_rng(0)
    sample = make_population([2, 4, 3], gen.uniform(0, 1, (3, 2)))
    pool = LocationPool(gen.uniform(0, 1, (40, 2)))
    a = synthesize_population(sample, pool, 20, rng_seed=9)
    b = synthesize_population(sample, pool, 20, rng_seed=9)
    assert np.array_equal(a.covariates_raw, b.covariates_raw)
    assert np.array_equal(a.locations, b.locations)
    assert a.households == b.households
    c = synthesize_population(sample, pool, 20, rng_seed=10)
    assert not np.array_equal(a.locations, c.locations)


def test_synthesized_households_copy_sample_rows():
    gen = np.random.default_rng(1)
    sample = make_population([2, 4, 3], gen.uniform(0, 1, (3, 2)), cov_seed=5)
    pool = LocationPool(gen.uniform(2, 3, (30, 2)))
    synth = synthesize_population(sample, pool, 25, rng_seed=2)
    sample_rows = {}
    for h in range(sample.n_households):
        start = sample.member_starts[h]
        rows = sample.covariates_raw[start:start + sample.hh_sizes[h]]
        sample_rows[sample.hh_sizes[h]] = sample_rows.get(sample.hh_sizes[h], []) + [rows]
    for h in range(synth.n_households):
        start = synth.member_starts[h]
        size = synth.hh_sizes[h]
        rows = synth.covariates_raw[start:start + size]
        assert any(np.array_equal(rows, cand) for cand in sample_rows.get(size, [])), \
            "synthesized household does not match any sample household"
    # pool locations consumed without replacement
    assert len(np.unique(synth.locations, axis=0)) == synth.n_households


def test_synthesize_capacity_error_reports_shortfall():
    sample = sample_one_household()
    pool = LocationPool(np.column_stack([np.arange(2.0), np.zeros(2)]))
    with pytest.raises(CapacityError, match="short"):
        synthesize_population(sample, pool, 100, rng_seed=0)


def test_location_pool_rejects_duplicates():
    with pytest.raises(IntegrityError):
        LocationPool(np.array([[0.0, 0.0], [0.0, 0.0]]))


def test_load_location_pool(tmp_path):
    f = tmp_path / "locations.csv"
    f.write_text("easting_km,northing_km\n0.0,0.0\n1.5,2.5\n")
    pool = load_location_pool(f)
    assert len(pool) == 2
    assert pool.locations[1, 1] == 2.5
