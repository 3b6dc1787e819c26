"""Recommendation-aware discrete-choice demand estimation and recommender counterfactuals."""

__version__ = "0.1.0"

from .types import (OUTSIDE, Catalog, ChoiceEvent, InteractionLog, RecommendationPage, SlotKind,
                    SlotLayout, UserHistory)
from .params import ModelParameters, SequenceWeights
from .core import (choice_probabilities, compute_user_state, deterministic_utility, engagement,
                   event_probabilities, log_likelihood)
from .estimation import (DemandModel, FitDivergedError, FitReport, TrainingConfig,
                         finite_difference_check, fit, holdout_metrics)
from .simulator import (ExperimentArm, WorldConfig, generate_ground_truth, oracle_recommender,
                        run_salience_experiment, simulate_panel)
from .policies import MFFactors, Policy, fit_mf
from .recmodel import RecModel, RecommendationModel, fit_rec_model
from .counterfactual import (DecompositionRecord, DiversionTable, DiversityMetrics,
                             aggregate_decomposition, decompose_good, diversity_metrics,
                             impute_recs_utility, incrementality, make_policy, model_diversion,
                             simulate_counterfactual, targeting_heterogeneity, wald_diversion)
from .exog import (ExogenousEmbeddingTable, ProjectionWeights, fit_exogenous, project,
                   split_goods_crossvalidation)
