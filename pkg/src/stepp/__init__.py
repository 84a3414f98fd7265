"""Simulation and likelihood inference for spatial temporal exponential-family
point processes (STEPPs) on a latent Euclidean social space."""

__version__ = "0.1.0"

from .core import (ATTRACTION, REPULSION, ConfigError, MigrationParams, ModelConfig, ModelError,
                   Panel, ParamVector, SteppError, Violation, WaveState, null_params, validate_panel)
from .geometry import NeighborSet, atomic_weight, neighbor_set, sq_norm
from .etd import (CovariatePMF, GaussianETD, Term, WaveKernel, assemble_terms, covariate_marginal,
                  ego_log_density, gaussian_from_terms)
from .simulation import (Intervention, RandomStreams, Scenario, Selector, migration_step,
                         random_seed_wave, run_scenario, sample_transition, simulate_trajectory)
from .inference import (FitResult, PanelLikelihood, RescaledReport, deviance, fit_migration,
                        fit_mle, gof_summaries, log_likelihood, rescale, standard_errors)
from .alignment import AlignmentError, RigidTransform, align_sequence, procrustes_align
