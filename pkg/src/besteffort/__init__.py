"""Best-effort LLM serving: cluster simulator, learned router, evaluation kit."""

from besteffort.reward import RewardSpec, TaskSpec, request_reward, weight_hard, weight_soft
from besteffort.simcore import ClusterSim, ModelTierSpec, Request
from besteffort.workload import (
    ArrivalEvent,
    RateEstimator,
    SegmentMark,
    WorkloadTrace,
    gen_stable,
    gen_unpredictable_request_based,
    gen_unpredictable_time_based,
)
from besteffort.policy import QNetwork, RouterState, StateEncoding, encode, q_forward, select_action

__version__ = "0.1.0"

__all__ = [
    "ArrivalEvent",
    "ClusterSim",
    "ModelTierSpec",
    "QNetwork",
    "RateEstimator",
    "Request",
    "RewardSpec",
    "RouterState",
    "SegmentMark",
    "StateEncoding",
    "TaskSpec",
    "WorkloadTrace",
    "encode",
    "gen_stable",
    "gen_unpredictable_request_based",
    "gen_unpredictable_time_based",
    "q_forward",
    "request_reward",
    "select_action",
    "weight_hard",
    "weight_soft",
]
