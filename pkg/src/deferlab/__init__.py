"""deferlab: a desk-scale laboratory for learning-to-defer systems.

Trains a classifier jointly with an expert-agnostic rejector, models expert
behaviour with Beta-Binomial posteriors over per-class accuracy, evaluates
under variable deferral budgets, and verifies the model's concentration
guarantees by Monte Carlo.
"""

__version__ = "0.1.0"

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, parse_config
from .deferral import (
    DeferralDecision,
    JointLogits,
    LossBreakdown,
    RejectorInput,
    assemble_rejector_inputs,
    decide,
    deferral_logit,
    ea_l2d_loss,
    pop_avg_loss,
    train,
    train_pop_avg,
)
from .errors import DatasetParseError, TrainingDivergenceError, UnsupportedTaskError
from .evaluation import (
    Curve,
    MetricReport,
    ScoredCase,
    area_under,
    build_curves,
    deferral_priority,
    score_cases,
    select_expert,
)
from .experts import (
    BehaviouralRepresentation,
    BetaParams,
    ClassCounts,
    ContextExample,
    PriorElicitation,
    build_representation,
    count_context,
    elicit_prior,
    posterior_mean,
    sample_complexity_bound,
    update_posterior,
)
from .harness import run_experiment, run_priors_study, run_theory_checks
from .nets import (
    DenseNet,
    GradientBundle,
    TrainConfig,
    backward,
    dense_net,
    finite_difference_check,
    forward,
    sgd_step,
    softmax,
)
from .simulate import (
    ContextSet,
    Dataset,
    LabeledExample,
    SimulatedExpertSpec,
    SyntheticTaskSpec,
    draw_context_set,
    expert_predict,
    generate_gaussian_task,
    load_csv_dataset,
    make_population,
)
from .theory import (
    TrialConfig,
    bayes_optimal_reference,
    misidentification_rate,
    posterior_convergence_errors,
)
