"""Forward dynamics, observation model and the time-jumping schedule.

The latent state advances in synchronous Euler steps of h days: an
uncolonised individual becomes colonised with probability 1 - exp(-h*rate),
a colonised one stays colonised with probability exp(-h*gamma), everyone
updating from the same pre-step state.  Between observation days the step
sizes are laid out backward from the later observation, so any remainder
shorter than h lands earliest.
"""

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import transmission
from ._files import atomic_write
from .errors import DataError, IntegrityError, ParseError
from .rng import as_factory


@dataclass(frozen=True)
class ColonisationState:
    """Binary colonisation vector over the population at day t."""

    bits: np.ndarray  # (n_I,) uint8
    t: float

    def __post_init__(self):
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1 or not np.all((bits == 0) | (bits == 1)):
            raise DataError("state bits must be a flat 0/1 vector")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def colonised_count(self):
        return int(self.bits.sum())


@dataclass(frozen=True)
class ObservationRecord:
    """Test results for the reported set at one day (internal indices)."""

    day: float
    ids: np.ndarray      # (r,) int64, sorted, unique
    results: np.ndarray  # (r,) uint8

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        results = np.asarray(self.results, dtype=np.uint8).reshape(-1)
        if ids.shape != results.shape:
            raise DataError("ids and results must align")
        if len(np.unique(ids)) != len(ids):
            raise IntegrityError(f"day {self.day}: individual reported twice")
        if not np.all((results == 0) | (results == 1)):
            raise DataError("results must be 0 or 1")
        order = np.argsort(ids)
        ids, results = ids[order], results[order]
        ids.setflags(write=False)
        results.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "results", results)


@dataclass(frozen=True)
class ObservationSeries:
    """Time-indexed sparse test results, days strictly increasing."""

    records: tuple
    n_individuals: int

    def __post_init__(self):
        days = [r.day for r in self.records]
        if any(b <= a for a, b in zip(days, days[1:])):
            raise DataError("observation days must be strictly increasing")
        for r in self.records:
            if len(r.ids) and (r.ids[0] < 0 or r.ids[-1] >= self.n_individuals):
                raise IntegrityError(f"day {r.day}: individual index out of range")

    @property
    def times(self):
        return np.array([r.day for r in self.records], dtype=float)

    @property
    def total_results(self):
        return sum(len(r.ids) for r in self.records)


@dataclass(frozen=True)
class Schedule:
    """Simulation step layout from the origin through the last observation.

    ``segments[i]`` holds the step sizes (earliest first) of the gap ending
    at ``anchor_times[i]``; an observation at the origin has an empty
    segment and is handled at initialisation.
    """

    origin: float
    anchor_times: np.ndarray
    segments: tuple

    def __post_init__(self):
        prev = self.origin
        for t, sizes in zip(self.anchor_times, self.segments):
            if len(sizes) and not np.isclose(sizes.sum(), t - prev):
                raise DataError("segment sizes must sum to the gap length")
            prev = t

    @property
    def n_steps(self):
        return int(sum(len(s) for s in self.segments))

    def flattened(self):
        """(start_times, step_sizes, anchor_index) with anchor_index the
        observation position a step lands on, or -1."""
        starts, sizes, anchors = [], [], []
        t = self.origin
        for i, seg in enumerate(self.segments):
            for j, dt in enumerate(seg):
                starts.append(t)
                sizes.append(dt)
                anchors.append(i if j == len(seg) - 1 else -1)
                t += dt
        return (np.array(starts, dtype=float), np.array(sizes, dtype=float),
                np.array(anchors, dtype=np.int64))


def build_schedule(obs_times, h, origin=0.0) -> Schedule:
    """Backward-divided step layout: within each gap, steps of size h counted
    from the gap's end, any remainder (< h) as the earliest step."""
    obs_times = np.asarray(obs_times, dtype=float).reshape(-1)
    if np.any(np.diff(obs_times) <= 0):
        raise DataError("observation times must be strictly increasing")
    if len(obs_times) and obs_times[0] < origin:
        raise DataError("observation times precede the origin")
    if h < 1:
        raise DataError("step size h must be at least one day")
    segments = []
    prev = origin
    for t in obs_times:
        gap = t - prev
        n_full = int(np.floor(gap / h + 1e-12))
        rem = gap - n_full * h
        sizes = ([rem] if rem > 1e-9 else []) + [float(h)] * n_full
        segments.append(np.array(sizes, dtype=float))
        prev = t
    return Schedule(origin=float(origin), anchor_times=obs_times, segments=tuple(segments))


def init_state(pop, lambda0, rng, t=0.0) -> ColonisationState:
    """Independent Bernoulli(1 - exp(-lambda0)) colonisation at the origin."""
    gen = as_factory(rng).generator("sim", "init")
    u = gen.random(pop.n_individuals)
    bits = (u < -np.expm1(-lambda0)).astype(np.uint8)
    return ColonisationState(bits=bits, t=t)


def transition_probabilities(bits, rates, h, gamma) -> np.ndarray:
    """P(colonised at t+h) per individual given the pre-step state."""
    bits = np.asarray(bits)
    flip = -np.expm1(-h * np.asarray(rates, dtype=float))
    stay = np.exp(-h * gamma)
    return np.where(bits == 1, stay, flip)


def step(pop, state: ColonisationState, theta, spec, h, rng) -> ColonisationState:
    """One synchronous h-day step; rates frozen at the step start."""
    if h > 1.0 / spec.constants.gamma:
        warnings.warn(
            f"step size h={h} exceeds the mean recovery time {1.0 / spec.constants.gamma:.1f}",
            stacklevel=2,
        )
    rates = transmission.all_rates(pop, state.bits, theta, spec, state.t)
    p = transition_probabilities(state.bits, rates, h, spec.constants.gamma)
    u = rng.random(pop.n_individuals) if hasattr(rng, "random") else np.asarray(rng)
    return ColonisationState(bits=(u < p).astype(np.uint8), t=state.t + h)


def emit(state: ColonisationState, reported_ids, s_e, s_p, rng) -> ObservationRecord:
    """Noisy test results for the reported set: sensitivity s_e on colonised,
    specificity s_p on uncolonised."""
    ids = np.asarray(reported_ids, dtype=np.int64)
    u = rng.random(len(ids))
    colonised = state.bits[ids] == 1
    p_positive = np.where(colonised, s_e, 1.0 - s_p)
    return ObservationRecord(day=state.t, ids=ids, results=(u < p_positive).astype(np.uint8))


def simulate_dataset(pop, theta, spec, obs_times, reported_sets, h, rng):
    """Simulate latent dynamics on the backward schedule and report at the
    observation days.

    Returns ``(series, trajectory)`` where trajectory holds the latent state
    at the origin and after every step.
    """
    obs_times = np.asarray(obs_times, dtype=float).reshape(-1)
    if len(obs_times) != len(reported_sets):
        raise DataError("one reported set required per observation time")
    factory = as_factory(rng)
    schedule = build_schedule(obs_times, h)
    c = spec.constants

    state = init_state(pop, c.lambda0, factory)
    trajectory = [state]
    records = []
    obs_at = {float(t): i for i, t in enumerate(obs_times)}
    if obs_at.get(state.t) is not None:
        i = obs_at[state.t]
        records.append(emit(state, reported_sets[i], c.s_e, c.s_p,
                            factory.generator("sim", "emit", i)))
    starts, sizes, anchors = schedule.flattened()
    for j in range(len(sizes)):
        state = step(pop, state, theta, spec, sizes[j],
                     factory.generator("sim", "step", j).random(pop.n_individuals))
        trajectory.append(state)
        if anchors[j] >= 0:
            i = int(anchors[j])
            records.append(emit(state, reported_sets[i], c.s_e, c.s_p,
                                factory.generator("sim", "emit", i)))
    series = ObservationSeries(records=tuple(records), n_individuals=pop.n_individuals)
    return series, trajectory


def load_observations(path, pop) -> ObservationSeries:
    """Read ``day,individual_id,result`` rows; absent rows mean untested."""
    by_day = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"day", "individual_id", "result"}:
            raise ParseError(f"{path}: header must be day,individual_id,result")
        for row in reader:
            try:
                day = float(row["day"])
                ext_id = int(row["individual_id"])
                result = int(row["result"])
            except (TypeError, ValueError):
                raise ParseError(f"{path}: line {reader.line_num}: malformed row") from None
            if result not in (0, 1):
                raise ParseError(f"{path}: line {reader.line_num}: result must be 0 or 1")
            if ext_id not in pop.id_to_index:
                raise IntegrityError(f"{path}: line {reader.line_num}: unknown individual {ext_id}")
            by_day.setdefault(day, []).append((pop.id_to_index[ext_id], result))
    records = []
    for day in sorted(by_day):
        ids, results = zip(*by_day[day])
        records.append(ObservationRecord(day=day, ids=np.array(ids), results=np.array(results)))
    return ObservationSeries(records=tuple(records), n_individuals=pop.n_individuals)


def write_observations(path, series: ObservationSeries, pop):
    with atomic_write(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "individual_id", "result"])
        for rec in series.records:
            for k, y in zip(rec.ids, rec.results):
                writer.writerow([_fmt_day(rec.day), int(pop.individual_ids[k]), int(y)])


def write_latent(path, trajectory, pop):
    with atomic_write(path) as fh:
        writer = csv.writer(fh)
        writer.writerow(["day", "individual_id", "colonised"])
        for state in trajectory:
            for k in range(pop.n_individuals):
                writer.writerow([_fmt_day(state.t), int(pop.individual_ids[k]), int(state.bits[k])])


def _fmt_day(day):
    return int(day) if float(day).is_integer() else float(day)
