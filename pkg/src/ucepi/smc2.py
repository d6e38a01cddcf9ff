"""Outer sequential Monte Carlo over the transmission parameters.

Parameter particles carry an inner particle filter each.  Weights multiply
by the inner filter's per-observation mean weight; when the effective sample
size halves, the cloud is rejuvenated: resample, propose from an adaptive
Gaussian in unconstrained space, refilter the proposals from scratch, and
accept per particle with a pseudo-marginal Metropolis-Hastings ratio.  The
running product of self-normalized increments estimates the marginal
likelihood of the model.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import betaln, logsumexp

from ._engine import BatchFilter, BatchModel, ThetaBatch, multinomial_indices, systematic_indices
from .errors import ConfigError, DataError, DegenerateRunError
from .rng import as_factory
from .transmission import ModelSpec, Theta


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class NormalComponent:
    name: str
    mean: float
    sd: float

    def sample(self, gen, m):
        return gen.normal(self.mean, self.sd, m)

    def logpdf(self, z):
        return -0.5 * ((z - self.mean) / self.sd) ** 2 - np.log(self.sd * np.sqrt(2 * np.pi))


@dataclass(frozen=True)
class LogitBetaComponent:
    """Beta(a, b) on the natural scale, expressed on the logit scale."""

    name: str
    a: float
    b: float

    def sample(self, gen, m):
        x = gen.beta(self.a, self.b, m)
        return np.log(x) - np.log1p(-x)

    def logpdf(self, z):
        # Beta density times the d(alpha)/d(logit alpha) Jacobian
        return (self.a * np.log(_sigmoid(z)) + self.b * np.log(_sigmoid(-z))
                - betaln(self.a, self.b))


class Prior:
    """Product prior over the model's free parameters, in unconstrained space.

    Defaults: Normal(-3, 1) on the log transmission parameters, Normal(0,
    sqrt(0.5)) per covariate coefficient, Beta(50, 50) on a learned
    seasonal amplitude and Normal(-5, 1) on the log environmental rate.
    """

    def __init__(self, spec: ModelSpec, log_beta1=(-3.0, 1.0), log_beta2=(-3.0, 1.0),
                 log_phi=(-3.0, 1.0), delta=(0.0, np.sqrt(0.5)), alpha=(50.0, 50.0),
                 log_epsilon=(-5.0, 1.0)):
        self.spec = spec
        by_name = {
            "log_beta1": NormalComponent("log_beta1", *log_beta1),
            "log_beta2": NormalComponent("log_beta2", *log_beta2),
            "log_phi": NormalComponent("log_phi", *log_phi),
            "logit_alpha": LogitBetaComponent("logit_alpha", *alpha),
            "delta_gender": NormalComponent("delta_gender", *delta),
            "delta_income": NormalComponent("delta_income", *delta),
            "delta_age": NormalComponent("delta_age", *delta),
            "log_epsilon": NormalComponent("log_epsilon", *log_epsilon),
        }
        self.components = tuple(by_name[n] for n in spec.free_parameters)
        self.names = spec.free_parameters

    @property
    def dim(self):
        return len(self.components)

    def sample(self, gen, m) -> np.ndarray:
        return np.column_stack([c.sample(gen, m) for c in self.components])

    def logpdf(self, z) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return sum(c.logpdf(z[:, i]) for i, c in enumerate(self.components))

    def natural(self, z) -> ThetaBatch:
        """Map unconstrained rows to natural-space parameter arrays."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        m = len(z)
        cols = {name: z[:, i] for i, name in enumerate(self.names)}
        spec = self.spec
        alpha = (_sigmoid(cols["logit_alpha"]) if spec.alpha_mode == "learned"
                 else np.full(m, spec.alpha_value))
        delta = (np.column_stack([cols["delta_gender"], cols["delta_income"], cols["delta_age"]])
                 if spec.delta_mode == "learned" else np.zeros((m, 3)))
        epsilon = (np.exp(cols["log_epsilon"]) if spec.epsilon_mode == "learned"
                   else np.zeros(m))
        return ThetaBatch(beta1=np.exp(cols["log_beta1"]), beta2=np.exp(cols["log_beta2"]),
                          phi=np.exp(cols["log_phi"]), alpha=alpha, delta=delta,
                          epsilon=epsilon)

    def theta(self, z_row) -> Theta:
        batch = self.natural(np.asarray(z_row, dtype=float)[None, :])
        return Theta(beta1=batch.beta1[0], beta2=batch.beta2[0], phi=batch.phi[0],
                     alpha=batch.alpha[0], delta=batch.delta[0], epsilon=batch.epsilon[0])


def ess(log_weights) -> float:
    """Kish effective sample size (sum w)^2 / sum w^2, stably in log space."""
    log_weights = np.asarray(log_weights, dtype=float)
    if not np.any(np.isfinite(log_weights)):
        raise DataError("effective sample size requires a finite log-weight")
    return float(np.exp(2.0 * logsumexp(log_weights) - logsumexp(2.0 * log_weights)))


@dataclass(frozen=True)
class AdaptiveProposal:
    """Independence Gaussian built from the weighted parameter cloud:
    N(mean, scale * cov + ridge * I)."""

    mean: np.ndarray
    cov: np.ndarray
    scale: float = 0.001
    ridge: float = 0.25

    @classmethod
    def from_cloud(cls, z, log_weights, scale=0.001, ridge=0.25):
        w = np.exp(log_weights - logsumexp(log_weights))
        mean = w @ z
        centered = z - mean
        cov = (centered * w[:, None]).T @ centered
        return cls(mean=mean, cov=cov, scale=scale, ridge=ridge)

    @property
    def full_cov(self):
        d = len(self.mean)
        return self.scale * self.cov + self.ridge * np.eye(d)

    def _chol(self):
        cov = self.full_cov
        jitter = 0.0
        for _ in range(8):  # auto-repair: never fail on a rank-deficient cloud
            try:
                return np.linalg.cholesky(cov + jitter * np.eye(len(cov)))
            except np.linalg.LinAlgError:
                jitter = max(jitter * 10.0, 1e-12 * max(np.trace(cov), 1.0))
        raise np.linalg.LinAlgError("proposal covariance could not be repaired")

    def sample(self, gen, m):
        normals = gen.standard_normal((m, len(self.mean)))
        return self.mean + normals @ self._chol().T

    def logpdf(self, z):
        z = np.atleast_2d(z)
        chol = self._chol()
        diff = z - self.mean
        y = np.linalg.solve(chol, diff.T)
        quad = (y ** 2).sum(axis=0)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        d = len(self.mean)
        return -0.5 * (quad + logdet + d * np.log(2 * np.pi))


@dataclass
class ThetaParticle:
    """Single-particle view: parameters, weight, cloud and running loglik."""

    theta: Theta
    z: np.ndarray
    log_weight: float
    loglik: float
    states: np.ndarray  # (P, n_I)


@dataclass
class SMC2Output:
    """Weighted posterior sample with the traces analysis consumes."""

    names: tuple
    z: np.ndarray                 # (P_theta, d) unconstrained sample
    thetas: ThetaBatch
    log_weights: np.ndarray       # (P_theta,) unnormalized
    logliks: np.ndarray           # (P_theta,) running inner-filter estimates
    log_increments: list          # (day, log p(y_s | y_<s)) per observation
    ess_trace: list               # (day, ess) per observation
    rejuvenations: list           # dicts: day, anchor, acceptance_rate
    final_states: np.ndarray      # (P_theta, P, n_I)
    r_components: dict            # day -> {"components": (P_theta, 4), "weights": (P_theta,)}
    prevalence: list              # (day, (n_H,) weighted mean colonised fraction)
    n_particles: int

    @property
    def log_evidence(self):
        return float(sum(v for _, v in self.log_increments))

    @property
    def weights(self):
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    def particle(self, m, prior: Prior) -> ThetaParticle:
        return ThetaParticle(theta=prior.theta(self.z[m]), z=self.z[m].copy(),
                             log_weight=float(self.log_weights[m]),
                             loglik=float(self.logliks[m]), states=self.final_states[m])

    def natural_table(self):
        """(P_theta, 9) array: beta1, beta2, phi, alpha, delta x3, epsilon, weight."""
        t = self.thetas
        return np.column_stack([t.beta1, t.beta2, t.phi, t.alpha, t.delta,
                                t.epsilon, self.weights])


def marginal_likelihood(output: SMC2Output) -> float:
    """Log evidence: sum of the stored per-observation log increments."""
    return output.log_evidence


def log_evidence_increment(log_w_theta, inc):
    """Self-normalized evidence increment log p(y_s | y_<s):
    the parameter-weighted mean of the inner filters' mean weights.
    Invariant under a common rescaling of the parameter weights."""
    return float(logsumexp(log_w_theta + inc) - logsumexp(log_w_theta))


def rejuvenate(bm, schedule, records, prior, z, bf, log_w_theta, anchor,
               streams, n_particles, proposal_scale=0.001, proposal_ridge=0.25,
               mh_steps=1, resampling="systematic"):
    """Resample-move refresh of the parameter cloud at observation ``anchor``.

    Resamples parameter particles by weight, proposes from the adaptive
    Gaussian, refilters each proposal from time zero through the anchor and
    accepts with the pseudo-marginal MH ratio.  Returns the refreshed
    ``(z, acceptance_rate)``; the attached BatchFilter is updated in place
    and all parameter weights are implicitly reset by the caller.
    """
    m = len(z)
    proposal = AdaptiveProposal.from_cloud(z, log_w_theta, scale=proposal_scale,
                                           ridge=proposal_ridge)
    weights = np.exp(log_w_theta - logsumexp(log_w_theta))[None, :]
    if resampling == "systematic":
        idx = systematic_indices(weights, streams.generator("resample").random(1))[0]
    else:
        idx = multinomial_indices(weights, streams.generator("resample").random((1, m)))[0]
    z = z[idx]
    bf.states = bf.states[idx]
    bf.loglik = bf.loglik[idx]
    bf.refresh_theta(prior.natural(z))

    rates = []
    for step_i in range(mh_steps):
        scope = streams.child("mh", step_i)
        z_new = proposal.sample(scope.generator("propose"), m)
        refilter = BatchFilter(bm, schedule, records, prior.natural(z_new), n_particles,
                               scope.child("refilter"), resampling=bf.resampling)
        refilter.run(upto_anchor=anchor)
        log_ratio = (prior.logpdf(z_new) - prior.logpdf(z)
                     + proposal.logpdf(z) - proposal.logpdf(z_new)
                     + refilter.loglik - bf.loglik)
        u = scope.generator("accept").random(m)
        with np.errstate(invalid="ignore"):
            accept = np.log(u) < log_ratio
        accept &= np.isfinite(refilter.loglik)
        z[accept] = z_new[accept]
        bf.loglik[accept] = refilter.loglik[accept]
        bf.states[accept] = refilter.states[accept]
        bf.refresh_theta(prior.natural(z))
        rates.append(float(accept.mean()))
    return z, float(np.mean(rates))


def run_smc2(pop, spec, prior, obs, schedule, p_theta, n_particles, rng,
             ess_threshold_fraction=0.5, mh_steps=1, proposal_scale=0.001,
             proposal_ridge=0.25, resampling="systematic",
             collect_prevalence=True, collect_r=True) -> SMC2Output:
    """Full parameter inference pass over one observation series."""
    if p_theta < 2 or n_particles < 2:
        raise ConfigError("p_theta and n_particles must both be at least 2")
    streams = as_factory(rng, "smc2")
    bm = BatchModel(pop, spec)
    z = prior.sample(streams.generator("prior"), p_theta)
    thetas = prior.natural(z)

    prevalence = []

    def step_hook(day, filt):
        if collect_prevalence:
            w = np.exp(log_w_theta - logsumexp(log_w_theta))
            prevalence.append((day, w @ filt.household_fractions()))

    bf = BatchFilter(bm, schedule, obs.records, thetas, n_particles,
                     streams.child("sweep"), resampling=resampling,
                     step_hook=step_hook if collect_prevalence else None)
    log_w_theta = np.zeros(p_theta)
    log_increments = []
    ess_trace = []
    rejuvenations = []
    r_components = {}
    rejuv_round = 0

    for day, inc in bf.increments:  # origin-time observation, same for every m
        log_increments.append((day, log_evidence_increment(log_w_theta, inc)))
        log_w_theta = log_w_theta + inc
    step_hook(schedule.origin, bf)

    while not bf.done:
        out = bf.advance()
        if out is None:
            break
        anchor, inc = out
        day = obs.records[anchor].day
        if not np.any(np.isfinite(log_w_theta + inc)):
            raise DegenerateRunError(
                f"all parameter weights vanished at observation day {day}")
        log_increments.append((day, log_evidence_increment(log_w_theta, inc)))
        log_w_theta = log_w_theta + inc
        current_ess = ess(log_w_theta)
        ess_trace.append((day, current_ess))
        if current_ess < ess_threshold_fraction * p_theta:
            z, rate = rejuvenate(
                bm, schedule, obs.records, prior, z, bf, log_w_theta, anchor,
                streams.child("rejuv", rejuv_round), n_particles,
                proposal_scale=proposal_scale, proposal_ridge=proposal_ridge,
                mh_steps=mh_steps, resampling=resampling)
            log_w_theta = np.zeros(p_theta)
            rejuvenations.append({"day": float(day), "anchor": int(anchor),
                                  "acceptance_rate": rate,
                                  "ess_after_reset": ess(log_w_theta)})
            rejuv_round += 1
        if collect_r:
            h_next = bf.sizes[bf.step_ptr] if not bf.done else bf.sizes[-1]
            comps = bf.effective_r_components(float(h_next))
            r_components[float(day)] = {
                "components": comps,
                "weights": np.exp(log_w_theta - logsumexp(log_w_theta)),
            }
        step_hook(float(day), bf)

    return SMC2Output(
        names=prior.names,
        z=z,
        thetas=prior.natural(z),
        log_weights=log_w_theta,
        logliks=bf.loglik.copy(),
        log_increments=log_increments,
        ess_trace=ess_trace,
        rejuvenations=rejuvenations,
        final_states=bf.states,
        r_components=r_components,
        prevalence=prevalence,
        n_particles=n_particles,
    )
