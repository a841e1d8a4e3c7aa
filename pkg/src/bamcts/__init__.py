"""Bayes-adaptive Monte-Carlo tree search for offline model-based RL."""

from .ensemble import (
    BeliefDegeneracyWarning,
    Ensemble,
    EnsembleTrainConfig,
    TransitionDataset,
    fit_ensemble,
    load_ensemble,
    member_likelihood,
    penalized_reward,
    sample_bamdp_transition,
    save_ensemble,
    uniform_prior,
    update_belief,
)
from .envs import BehaviorSpec, evaluate_policy, generate_dataset, make_env
from .errors import (
    CapacityError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    ShapeError,
)
from .iteration import (
    MetricsTable,
    ReplayBuffer,
    Step,
    TrainConfig,
    Trajectory,
    actor_rollout,
    learner_epoch,
    run_training,
)
from .net import (
    GaussianHead,
    Mlp,
    OptState,
    forward_gaussian,
    init_mlp,
    init_opt,
    load_mlp,
    save_mlp,
    train_step,
)
from .oracle import (
    DiscreteBAMDP,
    DiscreteBeliefModel,
    HistoryNode,
    bamcp_search,
    bayes_optimal_tree,
    root_sampling_histogram,
)
from .policy import (
    CriticPair,
    GaussianPolicy,
    SacConfig,
    ValueNet,
    actor_critic_update,
    compute_z,
    policy_sample,
    sl_policy_update,
    value_update,
)
from .search import (
    DecisionNode,
    InfoState,
    SearchConfig,
    SearchResult,
)

__version__ = "0.1.0"
