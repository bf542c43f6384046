"""Mixed-traffic simulation and model-based residual RL toolkit for CAV
longitudinal control."""

from .agent import (
    AgentConfig,
    BoundInputs,
    ExperienceBuffer,
    ResidualAgent,
    Transition,
    c_bound,
    compose_action,
    estimate_policy_shift,
)
from .controllers import IdmParams, PiParams, PiState, idm_accel, idm_accel_noisy
from .dynamics import ResidualDynamicsModel, RolloutConfig, rollout_length
from .env import RewardConfig, TrafficEnv, compute_reward
from .networks import Network, ScenarioConfig, VehicleState, build_network
from .trpo import GaussianPolicy, TrpoConfig, ValueNet, gae, trpo_update

__version__ = "0.1.0"

__all__ = [
    "AgentConfig", "BoundInputs", "ExperienceBuffer", "GaussianPolicy",
    "IdmParams", "Network", "PiParams", "PiState", "ResidualAgent",
    "ResidualDynamicsModel", "RewardConfig", "RolloutConfig", "ScenarioConfig",
    "TrafficEnv", "Transition", "TrpoConfig", "ValueNet", "VehicleState",
    "build_network", "c_bound", "compose_action", "compute_reward",
    "estimate_policy_shift", "gae", "idm_accel", "idm_accel_noisy",
    "rollout_length", "trpo_update",
]
