"""Dynamic token reduction for small transformer encoders.

A desk-scale transformer whose sequences shrink as layers deepen: learned
per-token early-termination policies trained with policy gradients,
imitation warmup, and knowledge distillation, next to heuristic selection
strategies, a FLOPs profiler, and synthetic tasks with known-important
tokens for end-to-end verification.
"""

from .autodiff import Tape, grad, node_grads
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataError, DivergenceError, UsageError
from .model import Model, ModelConfig, full_forward
from .profiling import FlopsReport, layer_flops, policy_flops, trace_flops, wall_time
from .reduction import (
    ActionPlan,
    PolicyParams,
    assemble_final_states,
    decide,
    fixed_plan,
    policy_probs,
    policy_view,
    reduced_forward,
)
from .strategies import (
    ImportanceScores,
    attention_importance,
    random_importance,
    residual_importance,
    theoretical_elimination_eval,
)
from .synthetic import (
    SyntheticExample,
    gen_keyword_task,
    gen_marker_span_task,
    load_dataset,
    save_dataset,
    selection_recall,
)
from .training import (
    Adam,
    RewardBreakdown,
    TrainConfig,
    compute_reward,
    evaluate,
    imitation_step,
    imitation_targets,
    kd_loss,
    reinforce_step,
    train_pipeline,
)

__version__ = "0.1.0"
