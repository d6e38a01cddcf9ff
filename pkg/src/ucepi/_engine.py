"""Batched particle machinery shared by the filter, SMC^2 and analytics.

State clouds are uint8 arrays of shape (M, P, n_I): M parameter settings,
P particles each.  Per step the engine aggregates colonised counts per
household, forms household-level rates (one batched matmul per step for the
spatial part) and flip probabilities, then advances all particles in a fused
numba kernel consuming one uniform per (m, p, individual).  Observation
corrections touch only the reported columns.  All per-step buffers are
preallocated; the hot path runs in float32, which is far below the Monte
Carlo noise floor.
"""

import numpy as np
from numba import njit

from .errors import DataError


@njit(cache=True)
def _household_counts(states, hh_index, n_h):
    m, p, n_i = states.shape
    out = np.zeros((m, p, n_h), dtype=np.float64)
    for a in range(m):
        for b in range(p):
            s = states[a, b]
            o = out[a, b]
            for k in range(n_i):
                if s[k]:
                    o[hh_index[k]] += 1.0
    return out


@njit(cache=True)
def _scaled_counts(states, hh_index, inv_k1, inv_k2, out_w, out_b):
    """Colonised counts scaled by the within/between denominators."""
    m, p, n_i = states.shape
    for a in range(m):
        for b in range(p):
            s = states[a, b]
            ow = out_w[a, b]
            ob = out_b[a, b]
            ow[:] = 0.0
            ob[:] = 0.0
            for k in range(n_i):
                if s[k]:
                    h = hh_index[k]
                    ow[h] += inv_k1[h]
                    ob[h] += inv_k2[h]


@njit(cache=True)
def _household_flip_probs(counts_w, between, beta1, sbeta2, eps, h, out):
    """1 - exp(-h * rate) per household (valid when delta is zero)."""
    m, p, n_h = counts_w.shape
    for a in range(m):
        b1 = np.float32(beta1[a])
        b2 = np.float32(sbeta2[a])
        e = np.float32(eps[a])
        for b in range(p):
            cw = counts_w[a, b]
            bt = between[a, b]
            o = out[a, b]
            for j in range(n_h):
                o[j] = -np.expm1(-h * (b1 * cw[j] + b2 * bt[j] + e))


@njit(cache=True)
def _transition_household(states, pflip_h, hh_index, u, stay, out):
    """Fast path: flip probabilities shared within a household.
    u[m, p, k] belongs to individual k regardless of evaluation order."""
    m, p, n_i = states.shape
    for a in range(m):
        for b in range(p):
            ph = pflip_h[a, b]
            s = states[a, b]
            su = u[a, b]
            o = out[a, b]
            for k in range(n_i):
                if s[k] == 1:
                    o[k] = 1 if su[k] < stay else 0
                else:
                    o[k] = 1 if su[k] < ph[hh_index[k]] else 0


@njit(cache=True)
def _transition_individual(states, counts_w, between, beta1, sbeta2, eps,
                           hh_index, idelta, u, h, stay, out):
    """General path: covariate multipliers make rates individual-specific."""
    m, p, n_i = states.shape
    for a in range(m):
        b1 = beta1[a]
        b2 = sbeta2[a]
        e = eps[a]
        idl = idelta[a]
        for b in range(p):
            cw = counts_w[a, b]
            bt = between[a, b]
            s = states[a, b]
            su = u[a, b]
            o = out[a, b]
            for k in range(n_i):
                if s[k] == 1:
                    o[k] = 1 if su[k] < stay else 0
                else:
                    hh = hh_index[k]
                    lam = idl[k] * (b1 * cw[hh] + b2 * bt[hh]) + e
                    o[k] = 1 if su[k] < -np.expm1(-h * lam) else 0


@njit(cache=True)
def _effective_r_sums(states, within_h, between_h, hh_index, idelta, eps, h, gamma):
    """Per-m expected new colonisations (total/within/between via rate-share
    split) and expected recoveries, averaged over particles."""
    m, p, n_i = states.shape
    out = np.zeros((m, 4), dtype=np.float64)
    p_rec = -np.expm1(-h * gamma)
    for a in range(m):
        e = eps[a]
        idl = idelta[a]
        nt = nw = nb = dn = 0.0
        for b in range(p):
            s = states[a, b]
            wh = within_h[a, b]
            bh = between_h[a, b]
            for k in range(n_i):
                if s[k] == 1:
                    dn += p_rec
                else:
                    w = idl[k] * wh[hh_index[k]]
                    v = idl[k] * bh[hh_index[k]] + e
                    lam = w + v
                    if lam > 0.0:
                        q = -np.expm1(-h * lam)
                        nt += q
                        nw += q * w / lam
                        nb += q * v / lam
        out[a, 0] = nt / p
        out[a, 1] = nw / p
        out[a, 2] = nb / p
        out[a, 3] = dn / p
    return out


class ThetaBatch:
    """Natural-space parameter arrays, one entry per parameter setting."""

    def __init__(self, beta1, beta2, phi, alpha, delta, epsilon):
        self.beta1 = np.atleast_1d(np.asarray(beta1, dtype=float))
        self.beta2 = np.atleast_1d(np.asarray(beta2, dtype=float))
        self.phi = np.atleast_1d(np.asarray(phi, dtype=float))
        self.alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        self.delta = np.asarray(delta, dtype=float).reshape(len(self.beta1), 3)
        self.epsilon = np.atleast_1d(np.asarray(epsilon, dtype=float))

    def __len__(self):
        return len(self.beta1)

    @classmethod
    def from_thetas(cls, thetas):
        thetas = list(thetas)
        return cls(
            beta1=[t.beta1 for t in thetas],
            beta2=[t.beta2 for t in thetas],
            phi=[t.phi for t in thetas],
            alpha=[t.alpha for t in thetas],
            delta=np.array([t.delta for t in thetas]),
            epsilon=[t.epsilon for t in thetas],
        )

    def take(self, idx):
        return ThetaBatch(self.beta1[idx], self.beta2[idx], self.phi[idx],
                          self.alpha[idx], self.delta[idx], self.epsilon[idx])


class BatchModel:
    """Population and model-spec arrays prepared for the kernels."""

    def __init__(self, pop, spec):
        self.pop = pop
        self.spec = spec
        self.n_i = pop.n_individuals
        self.n_h = pop.n_households
        self.hh_index = np.ascontiguousarray(pop.hh_index)
        sizes = pop.hh_sizes.astype(float)
        ones = np.ones_like(sizes)
        self.inv_k1 = 1.0 / (sizes if spec.kappa1 == "household_size" else ones)
        self.inv_k2 = 1.0 / (sizes if spec.kappa2 == "household_size" else ones)
        self.covariates = pop.covariates

    def kernel_stack(self, phis, dtype=np.float64):
        """(M, n_H, n_H) spatial kernels; symmetric with zero diagonal.
        Weights below 1e-30 flush to zero (sub-noise, and float32 denormals
        would cripple the batched matmul)."""
        d = self.pop.distance_matrix[None, :, :]
        phis = np.asarray(phis, dtype=float)[:, None, None]
        if self.spec.kernel == "exponential":
            k = np.exp(-d / phis)
        else:
            k = np.exp(-(d ** 2) / (2.0 * phis ** 2))
        k[k < 1e-30] = 0.0
        for i in range(k.shape[0]):
            np.fill_diagonal(k[i], 0.0)
        return k.astype(dtype, copy=False)

    def individual_multipliers(self, deltas):
        """(M, n_I) covariate multipliers, or None when every delta is zero."""
        deltas = np.asarray(deltas, dtype=float)
        if not np.any(deltas):
            return None
        return np.exp(deltas @ self.covariates.T)

    def seasonal_factors(self, alphas, t):
        c = self.spec.constants
        return 1.0 + np.asarray(alphas, dtype=float) * np.cos(c.frequency * t + c.phase)

    def household_rate_split(self, states, kernels, thetas, t):
        """Within and seasonal-scaled between household rates, shape
        (M, P, n_H), in float64 (analysis/oracle path)."""
        counts = _household_counts(states, self.hh_index, self.n_h)
        within = thetas.beta1[:, None, None] * (counts * self.inv_k1)
        between = np.matmul(counts * self.inv_k2, kernels.astype(np.float64, copy=False))
        between *= (self.seasonal_factors(thetas.alpha, t) * thetas.beta2)[:, None, None]
        return within, between

    def household_rates(self, states, kernels, thetas, t):
        within, between = self.household_rate_split(states, kernels, thetas, t)
        within += between
        return within


def initial_probabilities(n_i, lambda0, s_e, s_p, record=None):
    """Per-individual time-zero proposal probabilities and the shared
    log-weight of an observation at the origin."""
    prior = -np.expm1(-lambda0)
    p0 = np.full(n_i, prior)
    log_w0 = 0.0
    if record is not None and len(record.ids):
        y = record.results.astype(float)
        like1 = np.where(y == 1, s_e, 1.0 - s_e)
        like0 = np.where(y == 1, 1.0 - s_p, s_p)
        num = prior * like1
        den = num + (1.0 - prior) * like0
        with np.errstate(invalid="ignore"):
            p0[record.ids] = np.where(den > 0, num / den, prior)
        log_w0 = float(np.sum(np.log(den)))
    return p0, log_w0


def log_mean_exp(log_w, axis=-1):
    top = np.max(log_w, axis=axis, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.mean(np.exp(log_w - top), axis=axis)) + np.squeeze(top, axis=axis)
    return out


def normalized_weights(log_w):
    """Rows of weights summing to one; all-degenerate rows become uniform."""
    top = np.max(log_w, axis=-1, keepdims=True)
    safe = np.where(np.isfinite(top), top, 0.0)
    w = np.exp(log_w - safe)
    total = w.sum(axis=-1, keepdims=True)
    uniform = np.full_like(w, 1.0 / w.shape[-1])
    return np.where(total > 0, w / np.where(total > 0, total, 1.0), uniform)


def systematic_indices(weights, u):
    """Systematic resampling per row; u is one uniform per row."""
    m, p = weights.shape
    positions = (u[:, None] + np.arange(p)) / p
    return _searchsorted_rows(weights, positions)


def multinomial_indices(weights, u):
    """Multinomial resampling per row; u is (rows, P) uniforms."""
    return _searchsorted_rows(weights, u)


def _searchsorted_rows(weights, positions):
    cdf = np.cumsum(weights, axis=1)
    cdf[:, -1] = 1.0
    out = np.empty(positions.shape, dtype=np.int64)
    for i in range(weights.shape[0]):
        out[i] = np.searchsorted(cdf[i], positions[i], side="left")
    return np.minimum(out, weights.shape[1] - 1)


class BatchFilter:
    """Advances M parameter settings x P particles over a schedule.

    ``advance()`` runs simulation steps until the next observation anchor,
    applies the proposal correction and weights there, resamples within each
    parameter setting, and returns ``(anchor_index, increments)`` where
    increments[m] is the log mean particle weight.  Steps without
    observations carry unit weights and do not resample.
    """

    def __init__(self, bm, schedule, records, thetas, n_particles, streams,
                 resampling="systematic", step_hook=None):
        if resampling not in ("systematic", "multinomial"):
            raise DataError("resampling must be 'systematic' or 'multinomial'")
        self.bm = bm
        self.streams = streams
        self.resampling = resampling
        self.step_hook = step_hook
        self.n_particles = int(n_particles)
        self.records = records
        self.starts, self.sizes, self.anchors = schedule.flattened()
        self.step_ptr = 0
        self._set_theta(thetas)

        m = len(thetas)
        shape = (m, self.n_particles, bm.n_i)
        hshape = (m, self.n_particles, bm.n_h)
        self._u = np.empty(shape, dtype=np.float32)
        self._counts_w = np.empty(hshape, dtype=np.float32)
        self._counts_b = np.empty(hshape, dtype=np.float32)
        self._between = np.empty(hshape, dtype=np.float32)
        self._pflip = np.empty(hshape, dtype=np.float32)
        self._inv_k1_f32 = bm.inv_k1.astype(np.float32)
        self._inv_k2_f32 = bm.inv_k2.astype(np.float32)

        c = bm.spec.constants
        init_record = None
        if records and records[0].day == schedule.origin:
            init_record = records[0]
        p0, log_w0 = initial_probabilities(bm.n_i, c.lambda0, c.s_e, c.s_p, init_record)
        self.streams.generator("init").random(out=self._u, dtype=np.float32)
        self.states = (self._u < p0.astype(np.float32)).astype(np.uint8)
        self.loglik = np.full(m, log_w0)
        self.increments = [(schedule.origin, np.full(m, log_w0))] if init_record is not None else []

    def _set_theta(self, thetas):
        self.thetas = thetas
        self.kernels = self.bm.kernel_stack(thetas.phi, dtype=np.float32)
        self.idelta = self.bm.individual_multipliers(thetas.delta)

    @property
    def n_settings(self):
        return len(self.thetas)

    @property
    def done(self):
        return self.step_ptr >= len(self.sizes)

    def refresh_theta(self, thetas):
        """Swap parameter values (after a rejuvenation accept/reject pass)."""
        self._set_theta(thetas)

    def advance(self):
        """Run to the next anchor; returns (anchor_index, increments) or None."""
        bm, thetas = self.bm, self.thetas
        c = bm.spec.constants
        while self.step_ptr < len(self.sizes):
            j = self.step_ptr
            t0, dt, anchor = self.starts[j], float(self.sizes[j]), int(self.anchors[j])
            stay = float(np.exp(-dt * c.gamma))
            sbeta2 = self.bm.seasonal_factors(thetas.alpha, t0) * thetas.beta2

            _scaled_counts(self.states, bm.hh_index, self._inv_k1_f32,
                           self._inv_k2_f32, self._counts_w, self._counts_b)
            np.matmul(self._counts_b, self.kernels, out=self._between)
            self.streams.generator("step", j).random(out=self._u, dtype=np.float32)
            new_states = np.empty_like(self.states)
            if self.idelta is None:
                _household_flip_probs(self._counts_w, self._between, thetas.beta1,
                                      sbeta2, thetas.epsilon, np.float32(dt), self._pflip)
                _transition_household(self.states, self._pflip, bm.hh_index, self._u,
                                      np.float32(stay), new_states)
            else:
                _transition_individual(self.states, self._counts_w, self._between,
                                       thetas.beta1, sbeta2, thetas.epsilon, bm.hh_index,
                                       self.idelta, self._u, dt, stay, new_states)
            self.step_ptr += 1
            if anchor < 0:
                self.states = new_states
                if self.step_hook is not None:
                    self.step_hook(float(t0 + dt), self)
                continue

            record = self.records[anchor]
            log_w = self._observation_update(new_states, sbeta2, record, dt)
            inc = log_mean_exp(log_w, axis=1)
            self.loglik += inc
            self.increments.append((record.day, inc))
            weights = normalized_weights(log_w)
            if self.resampling == "systematic":
                ur = self.streams.generator("resample", anchor).random(len(thetas))
                idx = systematic_indices(weights, ur)
            else:
                ur = self.streams.generator("resample", anchor).random(
                    (len(thetas), self.n_particles))
                idx = multinomial_indices(weights, ur)
            self.states = np.take_along_axis(new_states, idx[:, :, None], axis=1)
            return anchor, inc
        return None

    def _observation_update(self, new_states, sbeta2, record, dt):
        """Overwrite reported columns with locally-optimal proposal draws and
        return the per-(m, p) log-weight of the observation."""
        bm = self.bm
        c = bm.spec.constants
        ids = record.ids
        y = record.results.astype(float)
        hcols = bm.hh_index[ids]
        lam = (self.thetas.beta1[:, None, None] * self._counts_w[:, :, hcols]
               + sbeta2[:, None, None] * self._between[:, :, hcols]).astype(np.float64)
        if self.idelta is not None:
            lam *= self.idelta[:, None, ids]
        lam += self.thetas.epsilon[:, None, None]
        prev = self.states[:, :, ids]
        stay = np.exp(-dt * c.gamma)
        prior1 = np.where(prev == 1, stay, -np.expm1(-dt * lam))
        like1 = np.where(y == 1, c.s_e, 1.0 - c.s_e)
        like0 = np.where(y == 1, 1.0 - c.s_p, c.s_p)
        num = prior1 * like1
        den = num + (1.0 - prior1) * like0
        with np.errstate(invalid="ignore"):
            p = np.where(den > 0, num / den, prior1)
        new_states[:, :, ids] = (self._u[:, :, ids] < p).astype(np.uint8)
        with np.errstate(divide="ignore"):
            return np.log(den).sum(axis=2)

    def run(self, upto_anchor=None):
        """Advance to the end of the schedule (or through ``upto_anchor``)."""
        while not self.done:
            out = self.advance()
            if out is not None and upto_anchor is not None and out[0] >= upto_anchor:
                break
        return self

    def effective_r_components(self, h):
        """Expected (total, within, between) new colonisations and expected
        recoveries per parameter setting for the current clouds."""
        t = self.starts[self.step_ptr] if not self.done else \
            (self.starts[-1] + self.sizes[-1] if len(self.sizes) else 0.0)
        within, between = self.bm.household_rate_split(
            self.states, self.kernels, self.thetas, t)
        idelta = self.idelta if self.idelta is not None else \
            np.ones((len(self.thetas), self.bm.n_i))
        return _effective_r_sums(self.states, within, between, self.bm.hh_index,
                                 idelta, self.thetas.epsilon, float(h),
                                 self.bm.spec.constants.gamma)

    def household_fractions(self):
        """Mean colonised fraction per household over particles, per setting."""
        counts = _household_counts(self.states, self.bm.hh_index, self.bm.n_h)
        return counts.mean(axis=1) / self.bm.pop.hh_sizes
