"""Households, individuals and the synthetic-population builder.

A :class:`Population` is an immutable roster of individuals grouped into
located households.  Internally individuals are stored contiguously by
household so that per-household aggregation is a single segmented reduction;
``order`` maps the internal layout back to the declared individual order.

CSV schemas (UTF-8, header required, '.' decimal separator):

* households.csv:  ``household_id,easting_km,northing_km``
* individuals.csv: ``individual_id,household_id,gender,income,age``
* locations.csv:   ``easting_km,northing_km``
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, IntegrityError, ParseError, StandardizationError
from .rng import stream

COVARIATE_NAMES = ("gender", "income", "age")


@dataclass(frozen=True)
class Individual:
    """One person: unique id, home household and raw covariate 3-vector."""

    id: int
    household_id: int
    covariates: np.ndarray  # (3,) gender, income, age


@dataclass(frozen=True)
class Household:
    id: int
    location: tuple  # (easting_km, northing_km)
    member_ids: tuple


@dataclass(frozen=True)
class LocationPool:
    """Candidate household coordinates, consumed without replacement."""

    locations: np.ndarray  # (n, 2) km

    def __post_init__(self):
        locs = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        if len(np.unique(locs, axis=0)) != len(locs):
            raise IntegrityError("location pool contains duplicate coordinates")
        locs.setflags(write=False)
        object.__setattr__(self, "locations", locs)

    def __len__(self):
        return len(self.locations)


@dataclass(frozen=True)
class Population:
    """Validated, immutable population with precomputed structure.

    Array fields follow the internal individual order (grouped by household,
    households in roster order).  ``covariates`` holds the standardized
    values used by the transmission model, ``covariates_raw`` the values as
    ingested.
    """

    individuals: tuple
    households: tuple
    distance_matrix: np.ndarray      # (n_H, n_H) km
    hh_index: np.ndarray             # (n_I,) household position per individual
    hh_sizes: np.ndarray             # (n_H,)
    member_starts: np.ndarray        # (n_H,) offsets into the internal order
    locations: np.ndarray            # (n_H, 2) km
    covariates: np.ndarray           # (n_I, 3) standardized
    covariates_raw: np.ndarray       # (n_I, 3)
    individual_ids: np.ndarray       # (n_I,) external ids, internal order
    household_ids: np.ndarray        # (n_H,) external ids
    id_to_index: dict = field(repr=False)

    @property
    def n_individuals(self):
        return len(self.individuals)

    @property
    def n_households(self):
        return len(self.households)

    @classmethod
    def build(cls, individuals, households) -> "Population":
        """Validate, order by household, standardize covariates, precompute distances."""
        hh_ids = [h.id for h in households]
        if len(set(hh_ids)) != len(hh_ids):
            raise IntegrityError("duplicate household ids")
        ind_ids = [i.id for i in individuals]
        if len(set(ind_ids)) != len(ind_ids):
            raise IntegrityError("duplicate individual ids")

        hh_pos = {h.id: j for j, h in enumerate(households)}
        members = {h.id: [] for h in households}
        for ind in individuals:
            if ind.household_id not in hh_pos:
                raise IntegrityError(
                    f"individual {ind.id} references missing household {ind.household_id}"
                )
            members[ind.household_id].append(ind)
        for h in households:
            if not members[h.id]:
                raise IntegrityError(f"household {h.id} has no members")
            declared = set(h.member_ids)
            actual = {i.id for i in members[h.id]}
            if declared and declared != actual:
                raise IntegrityError(f"household {h.id} member list does not match individuals")

        ordered = [ind for h in households for ind in members[h.id]]
        n_i, n_h = len(ordered), len(households)
        hh_index = np.array([hh_pos[ind.household_id] for ind in ordered], dtype=np.int64)
        hh_sizes = np.array([len(members[h.id]) for h in households], dtype=np.int64)
        member_starts = np.concatenate([[0], np.cumsum(hh_sizes)[:-1]]).astype(np.int64)
        raw = (
            np.array([np.asarray(ind.covariates, dtype=float) for ind in ordered])
            if ordered else np.zeros((0, 3))
        )
        if raw.shape != (n_i, 3):
            raise IntegrityError("covariates must be 3-vectors")
        if n_i and not np.all(np.isfinite(raw)):
            raise IntegrityError("covariates contain missing or non-finite entries")

        std = _standardize(raw)

        locations = (
            np.array([h.location for h in households], dtype=float)
            if households else np.zeros((0, 2))
        )
        diff = locations[:, None, :] - locations[None, :, :]
        dist = np.sqrt((diff ** 2).sum(axis=2))
        np.fill_diagonal(dist, 0.0)

        frozen_households = tuple(
            Household(h.id, tuple(h.location), tuple(i.id for i in members[h.id]))
            for h in households
        )
        for arr in (dist, hh_index, hh_sizes, member_starts, locations, std, raw):
            arr.setflags(write=False)
        standardized_individuals = tuple(
            Individual(ind.id, ind.household_id, std[k])
            for k, ind in enumerate(ordered)
        )
        return cls(
            individuals=standardized_individuals,
            households=frozen_households,
            distance_matrix=dist,
            hh_index=hh_index,
            hh_sizes=hh_sizes,
            member_starts=member_starts,
            locations=locations,
            covariates=std,
            covariates_raw=raw,
            individual_ids=np.array([i.id for i in ordered], dtype=np.int64),
            household_ids=np.array(hh_ids, dtype=np.int64),
            id_to_index={ind.id: k for k, ind in enumerate(ordered)},
        )


def _standardize(raw):
    """Per-column zero mean, unit variance; a single row standardizes to zeros."""
    if len(raw) == 0:
        return raw.copy()
    if len(raw) == 1:
        return np.zeros_like(raw)
    mean = raw.mean(axis=0)
    sd = raw.std(axis=0)
    for j, name in enumerate(COVARIATE_NAMES):
        if sd[j] == 0.0:
            raise StandardizationError(f"covariate column '{name}' is constant")
    return (raw - mean) / sd


def _read_rows(path, fields):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise ParseError(f"{path}: empty file, header row required")
        if set(reader.fieldnames) != set(fields):
            raise ParseError(
                f"{path}: header must be exactly {','.join(fields)}, got "
                f"{','.join(reader.fieldnames)}"
            )
        for row in reader:
            if any(v is None or v == "" for v in row.values()):
                raise ParseError(f"{path}: line {reader.line_num}: missing value")
            yield reader.line_num, row


def _parse_num(path, line, value, column, cast=float):
    try:
        return cast(value)
    except ValueError:
        raise ParseError(f"{path}: line {line}: bad {column} value {value!r}") from None


def load_population(households_file, individuals_file) -> Population:
    """Read household and individual CSVs into a validated Population."""
    households = []
    for line, row in _read_rows(households_file, ("household_id", "easting_km", "northing_km")):
        households.append(
            Household(
                id=_parse_num(households_file, line, row["household_id"], "household_id", int),
                location=(
                    _parse_num(households_file, line, row["easting_km"], "easting_km"),
                    _parse_num(households_file, line, row["northing_km"], "northing_km"),
                ),
                member_ids=(),
            )
        )
    individuals = []
    fields = ("individual_id", "household_id") + COVARIATE_NAMES
    for line, row in _read_rows(individuals_file, fields):
        individuals.append(
            Individual(
                id=_parse_num(individuals_file, line, row["individual_id"], "individual_id", int),
                household_id=_parse_num(individuals_file, line, row["household_id"], "household_id", int),
                covariates=np.array(
                    [_parse_num(individuals_file, line, row[c], c) for c in COVARIATE_NAMES]
                ),
            )
        )
    return Population.build(individuals, households)


def load_location_pool(path) -> LocationPool:
    locs = [
        (_parse_num(path, line, row["easting_km"], "easting_km"),
         _parse_num(path, line, row["northing_km"], "northing_km"))
        for line, row in _read_rows(path, ("easting_km", "northing_km"))
    ]
    return LocationPool(np.array(locs).reshape(-1, 2))


def synthesize_population(sample: Population, pool: LocationPool, target_n_i, rng_seed) -> Population:
    """Resample whole households from ``sample`` onto pool locations.

    Households are drawn with replacement and placed on locations drawn
    without replacement until the synthetic population reaches
    ``target_n_i`` individuals (the final household may overshoot).  Member
    covariates are copied verbatim; the returned Population re-standardizes
    over itself.
    """
    gen = stream(rng_seed, "population-synthesis")
    location_order = gen.permutation(len(pool))

    new_households, new_individuals = [], []
    total = 0
    next_ind = 0
    while total < target_n_i:
        if len(new_households) == len(pool):
            raise CapacityError(
                f"location pool exhausted after {len(pool)} households; "
                f"short {target_n_i - total} of {target_n_i} individuals"
            )
        src = sample.households[gen.integers(0, sample.n_households)]
        loc = pool.locations[location_order[len(new_households)]]
        hid = len(new_households)
        member_ids = []
        for member in src.member_ids:
            k = sample.id_to_index[member]
            new_individuals.append(
                Individual(id=next_ind, household_id=hid,
                           covariates=sample.covariates_raw[k].copy())
            )
            member_ids.append(next_ind)
            next_ind += 1
        new_households.append(Household(id=hid, location=tuple(loc), member_ids=tuple(member_ids)))
        total += len(member_ids)
    return Population.build(new_individuals, new_households)


def household_distance(pop: Population, h1, h2) -> float:
    """Euclidean distance in km between two households (by position)."""
    n = pop.n_households
    if not (0 <= h1 < n and 0 <= h2 < n):
        raise IndexError(f"household index out of range [0, {n})")
    return float(pop.distance_matrix[h1, h2])
