"""Individual-based uncolonised-colonised epidemic model with nested
sequential Monte Carlo inference, model selection and epidemic analytics."""

__version__ = "0.1.0"

from .analysis import (EffectiveRTrace, ModelScoreTable, PrevalenceGrid, effective_r,
                       model_posterior, prevalence_kde)
from .apf import FilterResult, exact_likelihood, filter, initial_proposal_prob, proposal_prob
from .population import (Household, Individual, LocationPool, Population, household_distance,
                         load_location_pool, load_population, synthesize_population)
from .smc2 import (AdaptiveProposal, Prior, SMC2Output, ThetaParticle, ess,
                   log_evidence_increment, marginal_likelihood, rejuvenate, run_smc2)
from .transmission import (Constants, ModelSpec, Theta, between_rate, individual_multiplier,
                           seasonal_multiplier, spatial_kernel, total_rate, within_rate)
from .ucmodel import (ColonisationState, ObservationRecord, ObservationSeries, Schedule,
                      build_schedule, emit, init_state, load_observations, simulate_dataset,
                      step)

__all__ = [name for name in dir() if not name.startswith("_")]
