# atvc_lab/baselines.py
"""
Non-learning dispatch policies and the communication ablations of the agent.

JSQ and Random read the true queue lengths. The two ablations reuse the agent
network unchanged and differ only in how candidate messages are selected:
FullComm fuses every candidate with its attention weight, NoComm fuses the
scheduler's own message with the prior.
"""

import enum
import logging
from typing import Optional, Sequence

import numpy as np

from atvc_lab.atvc import (AttentionParams, FusedBelief, FusionMode, GaussianMessage,
                           attention_weights, weighted_poe)
from atvc_lab.env import AllocationAction, QueueNetworkEnv
from atvc_lab.errors import ContractError

logger = logging.getLogger(__name__)


class PolicyKind(str, enum.Enum):
    JSQ = "JSQ"
    RANDOM = "Random"
    ATVC = "ATVC"
    ATVC_FULL_COMM = "ATVC-FullComm"
    ATVC_NO_COMM = "ATVC-NoComm"

    @property
    def uses_model(self) -> bool:
        return self in (PolicyKind.ATVC, PolicyKind.ATVC_FULL_COMM, PolicyKind.ATVC_NO_COMM)

    @property
    def fusion_mode(self) -> Optional[FusionMode]:
        return {
            PolicyKind.ATVC: FusionMode.THRESHOLD,
            PolicyKind.ATVC_FULL_COMM: FusionMode.FULL,
            PolicyKind.ATVC_NO_COMM: FusionMode.NONE,
        }.get(self)

    @classmethod
    def parse(cls, name: str) -> "PolicyKind":
        for kind in cls:
            if kind.value.lower() == name.strip().lower():
                return kind
        valid = ", ".join(kind.value for kind in cls)
        logger.error(f"Unknown policy '{name}'. Valid policies: {valid}")
        raise ValueError(f"Unknown policy '{name}'. Valid policies: {valid}")


def jsq_action(true_lengths: Sequence[int], scheduler_id: int = 0,
               queue_indices: Optional[Sequence[int]] = None) -> AllocationAction:
    """Whole batch to the shortest accessible queue; ties go to the lowest queue index."""
    lengths = np.asarray(true_lengths, dtype=np.int64)
    if lengths.ndim != 1 or lengths.size == 0:
        raise ContractError(f"jsq_action needs a non-empty vector of lengths, got {lengths.tolist()}")
    indices = np.arange(lengths.size) if queue_indices is None else np.asarray(queue_indices)
    shortest = np.flatnonzero(lengths == lengths.min())
    target = shortest[np.argmin(indices[shortest])]
    fractions = np.zeros(lengths.size)
    fractions[target] = 1.0
    raw_logits = np.where(fractions > 0, 0.0, -np.inf)
    return AllocationAction(scheduler_id, raw_logits, fractions)


def random_action(d: int, scheduler_id: int = 0) -> AllocationAction:
    """Uniform split; the environment routes each packet by a multinomial draw."""
    if d < 1:
        raise ContractError(f"random_action needs d >= 1, got {d}")
    return AllocationAction(scheduler_id, np.zeros(d), np.full(d, 1.0 / d))


def baseline_actions(kind: PolicyKind, env: QueueNetworkEnv) -> list:
    """Actions of every scheduler for the oracle-informed baselines."""
    true_lengths = env.true_accessible_lengths()
    if kind is PolicyKind.JSQ:
        return [jsq_action(true_lengths[i], i, env.access_map[i]) for i in range(env.config.M)]
    if kind is PolicyKind.RANDOM:
        return [random_action(env.config.d, i) for i in range(env.config.M)]
    raise ContractError(f"{kind.value} is not a baseline policy")


def full_comm_fuse(params: AttentionParams, messages: Sequence[GaussianMessage]) -> FusedBelief:
    """Weighted PoE over every candidate, attention weights as computed."""
    return weighted_poe(messages, attention_weights(params, messages), include_prior=True)


def no_comm_fuse(own: GaussianMessage) -> FusedBelief:
    """PoE of the scheduler's own message with the standard-normal prior."""
    return weighted_poe([own], [1.0], include_prior=True)
