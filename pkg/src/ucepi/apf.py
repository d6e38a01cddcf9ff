"""Auxiliary particle filter with the locally-optimal per-individual proposal.

Conditional on the previous state and the current test result, each
individual's next colonisation bit is independent with a closed-form
probability; its normalising denominator is the individual's weight
contribution.  Untested individuals follow the prior dynamics with unit
weight, so per-particle log-weights sum over the reported set only.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from ._engine import BatchFilter, BatchModel, ThetaBatch, log_mean_exp
from .errors import DataError, DegenerateFilterError
from .rng import as_factory


def _is_na(y):
    return y is None or (isinstance(y, float) and math.isnan(y))


def proposal_prob(c_prev, y, lambda_k, h, gamma, s_e, s_p):
    """Proposal probability of being colonised next, and its weight.

    With no test result the prior transition applies and the weight is one;
    otherwise the transition is reweighted by the emission likelihoods and
    the weight is the normalising denominator.
    """
    prior1 = math.exp(-h * gamma) if c_prev == 1 else -math.expm1(-h * lambda_k)
    if _is_na(y):
        return prior1, 1.0
    like1 = s_e if y == 1 else 1.0 - s_e
    like0 = (1.0 - s_p) if y == 1 else s_p
    num = prior1 * like1
    den = num + (1.0 - prior1) * like0
    return (num / den if den > 0 else prior1), den


def initial_proposal_prob(y, lambda0, s_e, s_p):
    """Time-zero variant of :func:`proposal_prob` with the colonisation prior."""
    prior1 = -math.expm1(-lambda0)
    if _is_na(y):
        return prior1, 1.0
    like1 = s_e if y == 1 else 1.0 - s_e
    like0 = (1.0 - s_p) if y == 1 else s_p
    num = prior1 * like1
    den = num + (1.0 - prior1) * like0
    return (num / den if den > 0 else prior1), den


@dataclass
class FilterResult:
    """Likelihood estimate and terminal particle cloud of one filter pass."""

    loglik: float
    log_mean_weights: list          # (day, log mean particle weight) per observation
    particles: np.ndarray           # (P, n_I) uint8 at the final time
    stored: dict = field(default_factory=dict)  # day -> (P, n_I) post-resample clouds

    def to_json(self) -> str:
        return json.dumps({
            "loglik": self.loglik,
            "log_mean_weight": [{"day": d, "value": v} for d, v in self.log_mean_weights],
        }, indent=2)


def filter(pop, theta, spec, obs, schedule, n_particles, rng,
           resampling="systematic", store_days=()):
    """Run the particle filter for one parameter value.

    ``rng`` is an integer seed or a StreamFactory; draws are counter-based
    so the result is independent of scheduling.  Raises
    DegenerateFilterError if every particle weight vanishes at some
    observation.
    """
    theta.validate_against(spec)
    bm = BatchModel(pop, spec)
    thetas = ThetaBatch.from_thetas([theta])
    streams = as_factory(rng, "apf")
    bf = BatchFilter(bm, schedule, obs.records, thetas, n_particles, streams,
                     resampling=resampling)
    store_days = set(float(d) for d in store_days)
    stored = {}
    if schedule.origin in store_days:
        stored[schedule.origin] = bf.states[0].copy()
    while not bf.done:
        out = bf.advance()
        if out is None:
            break
        anchor, inc = out
        day = obs.records[anchor].day
        if not np.isfinite(inc[0]):
            raise DegenerateFilterError(
                f"all particle weights vanished at observation day {day}")
        if day in store_days:
            stored[day] = bf.states[0].copy()
    return FilterResult(
        loglik=float(bf.loglik[0]),
        log_mean_weights=[(day, float(inc[0])) for day, inc in bf.increments],
        particles=bf.states[0],
        stored=stored,
    )


def replicate_logliks(pop, theta, spec, obs, schedule, n_particles, n_replicates, rng,
                      resampling="systematic"):
    """Log-likelihood estimates from independent filter runs, batched as one
    engine pass (one parameter row per replicate)."""
    theta.validate_against(spec)
    bm = BatchModel(pop, spec)
    reps = ThetaBatch.from_thetas([theta] * n_replicates)
    streams = as_factory(rng, "apf-replicates")
    bf = BatchFilter(bm, schedule, obs.records, reps, n_particles, streams,
                     resampling=resampling)
    bf.run()
    return bf.loglik.copy()


MAX_EXACT_INDIVIDUALS = 12


def exact_likelihood(pop, theta, spec, obs, schedule):
    """Forward-algorithm log-likelihood over all 2^n_I joint states.

    The independent oracle for the particle filter; only tractable for tiny
    populations.
    """
    n = pop.n_individuals
    if n > MAX_EXACT_INDIVIDUALS:
        raise DataError(
            f"exact likelihood enumerates 2^n_I states; n_I={n} exceeds "
            f"the bound {MAX_EXACT_INDIVIDUALS}")
    theta.validate_against(spec)
    c = spec.constants
    n_states = 1 << n
    bits = ((np.arange(n_states)[:, None] >> np.arange(n)[None, :]) & 1).astype(np.uint8)

    prior1 = -np.expm1(-c.lambda0)
    alpha = np.prod(np.where(bits == 1, prior1, 1.0 - prior1), axis=1)
    loglik = 0.0

    record_at = {r.day: r for r in obs.records}
    if schedule.origin in record_at:
        alpha = alpha * _emission_vector(bits, record_at[schedule.origin], c)
        total = alpha.sum()
        if total <= 0:
            return -np.inf
        loglik += np.log(total)
        alpha = alpha / total

    bm = BatchModel(pop, spec)
    thetas = ThetaBatch.from_thetas([theta])
    kernels = bm.kernel_stack(thetas.phi)
    idelta = bm.individual_multipliers(thetas.delta)
    idelta = np.ones(n) if idelta is None else idelta[0]
    starts, sizes, anchors = schedule.flattened()
    for j in range(len(sizes)):
        rate_h = bm.household_rates(bits[None, :, :], kernels, thetas, starts[j])[0]
        rates = idelta[None, :] * rate_h[:, pop.hh_index] + theta.epsilon
        h = sizes[j]
        p1 = np.where(bits == 1, np.exp(-h * c.gamma), -np.expm1(-h * rates))
        trans = np.ones((n_states, n_states))
        for k in range(n):
            trans *= np.where(bits[None, :, k] == 1, p1[:, k, None], 1.0 - p1[:, k, None])
        alpha = alpha @ trans
        if anchors[j] >= 0:
            record = obs.records[int(anchors[j])]
            alpha = alpha * _emission_vector(bits, record, c)
            total = alpha.sum()
            if total <= 0:
                return -np.inf
            loglik += np.log(total)
            alpha = alpha / total
    return float(loglik)


def _emission_vector(bits, record, constants):
    out = np.ones(bits.shape[0])
    for k, y in zip(record.ids, record.results):
        like1 = constants.s_e if y == 1 else 1.0 - constants.s_e
        like0 = (1.0 - constants.s_p) if y == 1 else constants.s_p
        out *= np.where(bits[:, k] == 1, like1, like0)
    return out


def mean_loglik_vs_exact(logliks, exact):
    """Linear-space mean of likelihood estimates, its standard error and the
    z-score against the exact value (unbiasedness checks)."""
    logliks = np.asarray(logliks, dtype=float)
    n = len(logliks)
    log_mean = log_mean_exp(logliks)
    ratios = np.exp(logliks - exact)
    se = ratios.std(ddof=1) / np.sqrt(n)
    z = (ratios.mean() - 1.0) / se if se > 0 else 0.0
    return float(log_mean), float(se), float(z)
