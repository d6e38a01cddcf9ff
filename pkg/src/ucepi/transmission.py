"""Transmission-rate algebra for the uncolonised-colonised model.

The colonisation pressure on individual k combines within-household and
between-household components, a seasonal multiplier on the between part, a
covariate-driven individual multiplier and an environmental shift:

    rate_k = I(delta)_k * (within_k + season(t) * between_k) + epsilon

``all_rates`` evaluates this for the whole population in
O(n_I + n_H^2) by aggregating colonised counts per household once.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

KERNELS = ("exponential", "gaussian")
KAPPAS = ("one", "household_size")


@dataclass(frozen=True)
class Constants:
    """Quantities treated as known: recovery, initial colonisation pressure,
    test characteristics and the seasonal clock."""

    gamma: float = 0.1
    lambda0: float = 0.13
    s_e: float = 0.8
    s_p: float = 0.95
    frequency: float = 2.0 * np.pi / 365.25
    phase: float = 0.55 * np.pi

    def __post_init__(self):
        if self.gamma <= 0 or self.lambda0 <= 0:
            raise ConfigError("gamma and lambda0 must be positive")
        for name in ("s_e", "s_p"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1)")


@dataclass(frozen=True)
class ModelSpec:
    """One point of the model grid.

    ``kappa1``/``kappa2`` pick density- vs frequency-dependent scaling,
    ``kernel`` the spatial decay shape; alpha/delta/epsilon are either fixed
    (alpha at ``alpha_value``, delta at zero, epsilon at zero) or learned.
    """

    kappa1: str = "household_size"
    kappa2: str = "household_size"
    kernel: str = "exponential"
    alpha_mode: str = "fixed"
    alpha_value: float = 0.8
    delta_mode: str = "fixed"
    epsilon_mode: str = "learned"
    constants: Constants = field(default_factory=Constants)

    def __post_init__(self):
        if self.kappa1 not in KAPPAS or self.kappa2 not in KAPPAS:
            raise ConfigError(f"kappa1/kappa2 must be one of {KAPPAS}")
        if self.kernel not in KERNELS:
            raise ConfigError(f"kernel must be one of {KERNELS}")
        for name in ("alpha_mode", "delta_mode", "epsilon_mode"):
            if getattr(self, name) not in ("fixed", "learned"):
                raise ConfigError(f"{name} must be 'fixed' or 'learned'")
        if self.alpha_mode == "fixed" and not 0.0 < self.alpha_value < 1.0:
            raise ConfigError("fixed alpha must lie in (0, 1)")

    @property
    def free_parameters(self):
        names = ["log_beta1", "log_beta2", "log_phi"]
        if self.alpha_mode == "learned":
            names.append("logit_alpha")
        if self.delta_mode == "learned":
            names += ["delta_gender", "delta_income", "delta_age"]
        if self.epsilon_mode == "learned":
            names.append("log_epsilon")
        return tuple(names)


@dataclass(frozen=True)
class Theta:
    """Natural-space transmission parameters."""

    beta1: float
    beta2: float
    phi: float
    alpha: float
    delta: np.ndarray
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=float).reshape(3))
        if self.beta1 < 0 or self.beta2 < 0 or self.epsilon < 0:
            raise ConfigError("beta1, beta2, epsilon must be nonnegative")
        if self.phi <= 0:
            raise ConfigError("phi must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")

    def validate_against(self, spec: ModelSpec):
        if spec.alpha_mode == "fixed" and self.alpha != spec.alpha_value:
            raise ConfigError("alpha differs from the spec's fixed value")
        if spec.delta_mode == "fixed" and np.any(self.delta != 0.0):
            raise ConfigError("delta must be zero under a fixed-delta spec")
        if spec.epsilon_mode == "fixed" and self.epsilon != 0.0:
            raise ConfigError("epsilon must be zero under a fixed-epsilon spec")


def _bits(state):
    return np.asarray(getattr(state, "bits", state), dtype=np.float64)


def _kappa_divisor(kappa, sizes):
    return sizes.astype(float) if kappa == "household_size" else np.ones_like(sizes, dtype=float)


def within_rate(pop, state, k, beta1, kappa1="household_size") -> float:
    """Within-household pressure on individual k."""
    bits = _bits(state)
    h = pop.hh_index[k]
    start = pop.member_starts[h]
    count = bits[start:start + pop.hh_sizes[h]].sum()
    div = pop.hh_sizes[h] if kappa1 == "household_size" else 1.0
    return float(beta1 * count / div)


def spatial_kernel(d, phi, kernel="exponential", same_household=False):
    """Distance weight in [0, 1]; zero within a household by construction."""
    if same_household:
        return 0.0
    d = np.asarray(d, dtype=float)
    if kernel == "exponential":
        out = np.exp(-d / phi)
    elif kernel == "gaussian":
        out = np.exp(-(d ** 2) / (2.0 * phi ** 2))
    else:
        raise ConfigError(f"kernel must be one of {KERNELS}")
    return float(out) if out.ndim == 0 else out


def kernel_matrix(pop, phi, kernel="exponential") -> np.ndarray:
    """(n_H, n_H) spatial kernel over household distances, zero diagonal."""
    d = pop.distance_matrix
    if kernel == "exponential":
        out = np.exp(-d / phi)
    else:
        out = np.exp(-(d ** 2) / (2.0 * phi ** 2))
    np.fill_diagonal(out, 0.0)
    return out


def household_counts(pop, state) -> np.ndarray:
    """Colonised members per household."""
    bits = _bits(state)
    return np.add.reduceat(bits, pop.member_starts) if pop.n_households else np.zeros(0)


def between_rate(pop, state, k, beta2, phi, kernel="exponential", kappa2="household_size") -> float:
    """Kernel-weighted pressure on individual k from other households."""
    counts = household_counts(pop, state)
    src = counts / _kappa_divisor(kappa2, pop.hh_sizes)
    weights = kernel_matrix(pop, phi, kernel)[pop.hh_index[k]]
    return float(beta2 * weights @ src)


def seasonal_multiplier(t, alpha, frequency, phase):
    """1 + alpha * cos(frequency * t + phase)."""
    return 1.0 + alpha * np.cos(frequency * np.asarray(t, dtype=float) + phase)


def individual_multiplier(covariates, delta) -> float:
    """exp of the covariate/delta scalar product."""
    return float(np.exp(np.dot(np.asarray(covariates, float), np.asarray(delta, float))))


def total_rate(pop, state, k, theta: Theta, spec: ModelSpec, t) -> float:
    """Full colonisation rate on individual k at day t."""
    lam_w = within_rate(pop, state, k, theta.beta1, spec.kappa1)
    lam_a = between_rate(pop, state, k, theta.beta2, theta.phi, spec.kernel, spec.kappa2)
    s = seasonal_multiplier(t, theta.alpha, spec.constants.frequency, spec.constants.phase)
    ind = individual_multiplier(pop.covariates[k], theta.delta)
    return ind * (lam_w + s * lam_a) + theta.epsilon


def household_rate_components(pop, state, theta: Theta, spec: ModelSpec, t):
    """Per-household (within, seasonal*between) rate pair, before the
    individual multiplier and epsilon shift are applied.

    Shared by every member of a household; the basis of the
    O(n_I + n_H^2) evaluation.
    """
    counts = household_counts(pop, state)
    within = theta.beta1 * counts / _kappa_divisor(spec.kappa1, pop.hh_sizes)
    src = counts / _kappa_divisor(spec.kappa2, pop.hh_sizes)
    between = theta.beta2 * (kernel_matrix(pop, theta.phi, spec.kernel) @ src)
    s = seasonal_multiplier(t, theta.alpha, spec.constants.frequency, spec.constants.phase)
    return within, s * between


def all_rates(pop, state, theta: Theta, spec: ModelSpec, t) -> np.ndarray:
    """Colonisation rate for every individual at day t."""
    within, between = household_rate_components(pop, state, theta, spec, t)
    per_household = (within + between)[pop.hh_index]
    if np.any(theta.delta != 0.0):
        per_household = per_household * np.exp(pop.covariates @ theta.delta)
    return per_household + theta.epsilon
