"""Statewise preference alignment for river-coverage navigation."""

from .losses import AdvantageBatch, advantages, bt_nll, focops_loss
from .methods import METHOD_NAMES, METHODS, HyperParams, LatentCache, LossReport, retrain
from .nets import (
    ActionDistribution,
    Checkpoint,
    NetParams,
    Optimizer,
    act,
    encode_sequence,
    encode_step,
    init_params,
    initial_latent,
    load_checkpoint,
    obs_to_input,
    reward_estimate,
    save_checkpoint,
    snapshot,
)
from .session import (
    OverseerDecision,
    PreferencePair,
    ReplayBuffer,
    ScriptedOverseer,
    Trajectory,
    TransitionRecord,
    extract_preferences,
    load_buffer,
    load_trajectory,
    oracle_action,
    run_episode,
    save_buffer,
    save_trajectory,
)
from .validation import ConfigurationError, SchemaError, UsageError
from .world import (
    CoverageState,
    Episode,
    MultiDiscreteAction,
    Observation,
    Pose,
    RiverWorld,
    StartSpec,
    StepOutcome,
    default_river,
    marginal_gain,
    render_mask,
    reset,
    sample_start_specs,
    sinusoid_river,
    step,
    straight_river,
)

__version__ = "0.1.0"
