"""Post-hoc analytics: model selection tables, effective reproduction number
traces and spatial prevalence densities."""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._engine import BatchModel, ThetaBatch, _effective_r_sums
from .errors import DataError


@dataclass(frozen=True)
class ModelScoreTable:
    """Per-area log evidences with totals and the uniform-prior posterior."""

    model_ids: tuple
    areas: tuple
    log_evidence: np.ndarray  # (n_models, n_areas)
    totals: np.ndarray        # (n_models,)
    posterior: np.ndarray     # (n_models,)


def model_posterior(scores) -> ModelScoreTable:
    """Aggregate per-area log evidences and normalize under a uniform prior.

    ``scores`` maps model id -> {area: log evidence}; every model must cover
    every area.
    """
    model_ids = tuple(scores)
    if not model_ids:
        raise DataError("no model scores given")
    areas = tuple(sorted(scores[model_ids[0]]))
    table = np.empty((len(model_ids), len(areas)))
    for i, mid in enumerate(model_ids):
        if tuple(sorted(scores[mid])) != areas:
            raise DataError(f"model {mid!r} is missing areas; all models must cover {areas}")
        table[i] = [scores[mid][a] for a in areas]
    totals = table.sum(axis=1)
    posterior = np.exp(totals - logsumexp(totals))
    return ModelScoreTable(model_ids=model_ids, areas=areas, log_evidence=table,
                           totals=totals, posterior=posterior)


def weighted_quantile(values, quantiles, weights=None):
    """Inverse-CDF quantiles of a weighted sample (NaN values dropped)."""
    values = np.asarray(values, dtype=float)
    weights = np.ones_like(values) if weights is None else np.asarray(weights, dtype=float)
    keep = ~np.isnan(values) & (weights > 0)
    values, weights = values[keep], weights[keep]
    if len(values) == 0 or weights.sum() <= 0:
        return np.full(np.shape(quantiles), np.nan)
    order = np.argsort(values)
    values, weights = values[order], weights[order]
    cum = np.cumsum(weights) - 0.5 * weights
    cum /= weights.sum()
    return np.interp(quantiles, cum, values)


R_CHANNELS = ("total", "within", "between")


@dataclass(frozen=True)
class EffectiveRTrace:
    """Quantile bands of the effective reproduction number per channel.

    ``quantiles[channel]`` has shape (n_times, 3): 5th, 50th and 95th
    weighted percentiles across posterior draws; rows are NaN where every
    draw had no colonised individuals.
    """

    times: np.ndarray
    quantiles: dict

    def rows(self):
        for i, t in enumerate(self.times):
            for channel in R_CHANNELS:
                q = self.quantiles[channel][i]
                yield t, channel, q[0], q[1], q[2]


def effective_r_from_components(times, components, weights=None,
                                quantiles=(0.05, 0.5, 0.95)) -> EffectiveRTrace:
    """Assemble the trace from per-draw expected-event components.

    ``components[t]`` is (n_draws, 4): expected new colonisations (total,
    within-share, between-share) and expected recoveries; draws with zero
    expected recoveries are treated as missing.
    """
    times = np.asarray(times, dtype=float)
    out = {ch: np.empty((len(times), len(quantiles))) for ch in R_CHANNELS}
    for i, comp in enumerate(components):
        comp = np.asarray(comp, dtype=float)
        w = None if weights is None else np.asarray(weights[i], dtype=float)
        den = comp[:, 3]
        for j, ch in enumerate(R_CHANNELS):
            with np.errstate(divide="ignore", invalid="ignore"):
                r = np.where(den > 0, comp[:, j] / den, np.nan)
            out[ch][i] = weighted_quantile(r, quantiles, w)
    return EffectiveRTrace(times=times, quantiles=out)


def effective_r(pop, thetas, spec, clouds, times, h, weights=None,
                quantiles=(0.05, 0.5, 0.95)) -> EffectiveRTrace:
    """Effective R from latent state clouds at the requested times.

    ``clouds[i]`` holds (n_draws, P, n_I) colonisation states at
    ``times[i]``; per draw and time, R is the expected number of new
    colonisations over the expected number of recoveries in an h-day step,
    with the colonisation probability split between the within and
    between-plus-environment channels proportionally to their rate shares.
    """
    bm = BatchModel(pop, spec)
    if not isinstance(thetas, ThetaBatch):
        thetas = ThetaBatch.from_thetas(thetas)
    kernels = bm.kernel_stack(thetas.phi)
    idelta = bm.individual_multipliers(thetas.delta)
    if idelta is None:
        idelta = np.ones((len(thetas), pop.n_individuals))
    components = []
    for t, states in zip(times, clouds):
        states = np.ascontiguousarray(states, dtype=np.uint8)
        if states.ndim == 2:
            states = states[:, None, :]
        within, between = bm.household_rate_split(states, kernels, thetas, float(t))
        components.append(_effective_r_sums(states, within, between, bm.hh_index,
                                            idelta, thetas.epsilon, float(h),
                                            spec.constants.gamma))
    per_time_weights = None if weights is None else [weights] * len(components)
    return effective_r_from_components(times, components, per_time_weights, quantiles)


@dataclass(frozen=True)
class PrevalenceGrid:
    """Spatially weighted household density on a regular grid.

    ``density[i, j]`` is the kernel density at (x[i], y[j]); it integrates
    to one by the trapezoid rule when the grid covers the padded extent.
    """

    x: np.ndarray
    y: np.ndarray
    density: np.ndarray  # (nx, ny)
    bandwidth: tuple
    mode: str

    def integral(self):
        trapezoid = getattr(np, "trapezoid", np.trapz)
        return float(trapezoid(trapezoid(self.density, self.y, axis=1), self.x))

    def rows(self):
        for i, xv in enumerate(self.x):
            for j, yv in enumerate(self.y):
                yield xv, yv, self.density[i, j], self.mode


def silverman_bandwidth(locations, weights):
    """Per-axis rule-of-thumb bandwidth for a weighted 2-D sample."""
    w = weights / weights.sum()
    n_eff = 1.0 / np.sum(w ** 2)
    mean = w @ locations
    var = w @ (locations - mean) ** 2
    sd = np.sqrt(var)
    sd[sd == 0] = 1.0  # degenerate axis: fall back to a 1 km scale
    return sd * n_eff ** (-1.0 / 6.0)


def kde_grid(locations, weights, bandwidth=None, grid=None, mode="prevalence",
             pad_bandwidths=6.0, max_cells=512) -> PrevalenceGrid:
    """Weighted Gaussian product-kernel density over household locations."""
    locations = np.asarray(locations, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0):
        raise DataError("KDE weights must be nonnegative")
    total = weights.sum()
    if total <= 0:
        raise DataError("KDE weights sum to zero; nothing to weight")
    weights = weights / total
    if bandwidth is None:
        bandwidth = silverman_bandwidth(locations, weights)
    bw = np.broadcast_to(np.asarray(bandwidth, dtype=float), (2,)).copy()
    if np.any(bw <= 0):
        raise DataError("bandwidth must be positive")

    if grid is None:
        axes = []
        for j in range(2):
            lo = locations[:, j].min() - pad_bandwidths * bw[j]
            hi = locations[:, j].max() + pad_bandwidths * bw[j]
            n = int(np.clip(np.ceil((hi - lo) / (bw[j] / 4.0)) + 1, 32, max_cells))
            axes.append(np.linspace(lo, hi, n))
        x, y = axes
    else:
        x, y = np.asarray(grid[0], dtype=float), np.asarray(grid[1], dtype=float)

    gx = (x[:, None] - locations[None, :, 0]) / bw[0]
    gy = (y[:, None] - locations[None, :, 1]) / bw[1]
    kx = np.exp(-0.5 * gx ** 2) / (bw[0] * np.sqrt(2 * np.pi))
    ky = np.exp(-0.5 * gy ** 2) / (bw[1] * np.sqrt(2 * np.pi))
    density = np.einsum("ih,h,jh->ij", kx, weights, ky)
    return PrevalenceGrid(x=x, y=y, density=density, bandwidth=(float(bw[0]), float(bw[1])),
                          mode=mode)


def household_prevalence_weights(pop, clouds):
    """Mean colonised fraction per household over times, draws and particles."""
    acc = np.zeros(pop.n_households)
    for states in clouds:
        states = np.asarray(states, dtype=np.float64)
        if states.ndim == 2:
            states = states[None, :, :]
        counts = np.add.reduceat(states, pop.member_starts, axis=-1)
        acc += (counts / pop.hh_sizes).mean(axis=(0, 1))
    return acc / len(clouds)


def prevalence_kde(pop, clouds, bandwidth=None, grid=None, weighting="prevalence",
                   **kwargs) -> PrevalenceGrid:
    """KDE of household locations weighted by average colonisation prevalence
    (or uniformly)."""
    if weighting == "prevalence":
        weights = household_prevalence_weights(pop, clouds)
    elif weighting == "uniform":
        weights = np.ones(pop.n_households)
    else:
        raise DataError("weighting must be 'prevalence' or 'uniform'")
    return kde_grid(pop.locations, weights, bandwidth=bandwidth, grid=grid,
                    mode=weighting, **kwargs)
