"""Cross-agent planning laboratory on masked-action gridworlds.

A compact BabyAI-style environment with a 19-action universe, a registry of
agent types defined by action-space masks, exact search experts, trajectory
datasets, a conditional diffusion planner with per-agent inverse dynamics
models, imitation baselines, closed-loop evaluation, and the experiment
protocols comparing them.
"""

from .agents import (
    ActionSpaceMask,
    AgentTypeSpec,
    action_space_vector,
    builtin_agents,
    get_agent,
    is_solvable,
    sample_diverse_agents,
)
from .config import (
    ConfigError,
    ExperimentConfig,
    desk_profile,
    get_profile,
    load_config,
    paper_profile,
    write_config,
)
from .data import (
    DataError,
    DatasetManifest,
    generate_dataset,
    generate_records,
    load_dataset,
    pool,
    replay_validate,
    sample_window,
    subsample_dataset,
    subsample_granularity,
    write_dataset,
)
from .diffusion import (
    DiffusionConfig,
    DiffusionError,
    NoiseSchedule,
    SamplerFault,
    TrainingFault,
    analytic_gaussian_denoiser,
    edm_loss,
    heun_sample,
    karras_sigmas,
    loss_weight,
    precondition,
    sample_training_sigma,
)
from .env import (
    Action,
    Color,
    DecodeError,
    Direction,
    EnvConfig,
    EnvError,
    EnvKind,
    EnvState,
    Object,
    TaskInstruction,
    decode_observation,
    denormalize,
    encode_observation,
    is_success,
    normalize,
    parse_instruction,
    replay_observation,
    reset,
    step,
)
from .expert import (
    InfeasibleTaskError,
    TrajectoryRecord,
    plan_actions,
    plan_demo,
    plan_to_pose,
)
from .experiments import (
    PROTOCOLS,
    ExperimentReport,
    format_summary,
    load_experiment_report,
    run_experiment,
)
from .inverse_dynamics import (
    IvdError,
    IvdTrainConfig,
    TrainedIvd,
    load_ivd,
    predict_action,
    save_ivd,
    train_ivd,
    transition_consistent,
)
from .baselines import (
    BaselineError,
    IlTrainConfig,
    TrainedIl,
    finetune_il,
    load_il,
    oracle_goal_policy,
    save_il,
    train_goal_policy,
    train_il,
)
from .planner import (
    ConditionalDenoiser,
    ConditioningBundle,
    ConditioningMode,
    OodAgentError,
    PlannerTrainConfig,
    TrainedPlanner,
    build_example_context,
    load_planner,
    make_bundle,
    sample_plan,
    save_planner,
    train_planner,
)
from .policy import (
    EvalReport,
    PolicyHandle,
    evaluate,
    load_report,
    make_ucap_plan_fn,
    run_episode,
    save_report,
    standard_error,
    ucap_act,
)
from .seeding import derive_seed, generator

__version__ = "0.1.0"
