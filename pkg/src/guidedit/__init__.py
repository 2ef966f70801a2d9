"""Guided-diffusion editing toolkit.

Deterministic DDIM inversion/reverse with triplet-based representation
guidance and cycle-consistency coherence guidance, evaluation metrics, and
fully analytic desk-scale backends for verification without pretrained
weights.
"""

from .backends import (AnalyticGMMBackend, ConstantEpsilonBackend, GaussianMixture,
                       PretrainedAdapterSpec, PromptEmbedding, VocabEncoder,
                       classifier_free_epsilon, cosine_sim, embed_prompt,
                       gradient_of)
from .coherence import (CycleEstimates, backward_with_guidance, cycle_objective,
                        efficient_cycle_objective, estimate_cycle,
                        forward_with_guidance, interleaved_translation,
                        one_step_terminal_estimate, run_oig_plus)
from .ddim import (LatentState, TrajectoryCache, invert_step, reverse_step,
                   run_inversion, run_reverse, tweedie_estimate)
from .errors import (CacheError, ConfigError, GuidEditError, NumericGuardError,
                     ScheduleError)
from .guidance import (GuidanceConfig, GuidanceContext, guided_reverse_step,
                       naive_distance, representation_guidance)
from .metrics import (MetricReport, PatchProjectionEncoder, background_distance,
                      clip_similarity, structure_distance)
from .pipeline import guided_translation, replace_token, run_edit, run_oig
from .schedule import (DATA_LEVEL, DiffusionSchedule, build_schedule, gamma,
                       gamma_from_alphas, gamma_fwd)
from .task import EditTask, RunTrace

__version__ = "0.1.0"
