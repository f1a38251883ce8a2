# atvc_lab/oracle.py
"""
Exact stationary analysis of a single epoch-batched finite-buffer queue.

Under a fixed allocation policy every queue of the network is an independent
Markov chain on {0, ..., B}: a Poisson(lambda) batch arrives, overflow is
dropped, then min(length, Poisson(mu)) jobs depart. These chains are the
ground truth the simulator is checked against.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
from scipy import sparse
from scipy.stats import poisson

from atvc_lab.env import EnvConfig
from atvc_lab.errors import ContractError, NumericError

logger = logging.getLogger(__name__)

TAIL_MASS = 1e-12
CONVERGENCE_TOL = 1e-12
MAX_POWER_ITERATIONS = 200_000


def _tail_point(rate: float) -> int:
    if rate <= 0:
        return 0
    return int(poisson.isf(TAIL_MASS, rate)) + 1


@dataclass(frozen=True)
class ChainSpec:
    B: int
    arrival_rate_into_queue: float
    service_rate: float
    tail_cutoff: Optional[int] = None

    def __post_init__(self):
        message = None
        if self.B < 1:
            message = f"ChainSpec.B must be >= 1, got {self.B}"
        elif self.arrival_rate_into_queue < 0 or self.service_rate < 0:
            message = (f"ChainSpec rates must be >= 0, got lambda={self.arrival_rate_into_queue}, "
                       f"mu={self.service_rate}")
        if message:
            logger.error(message)
            raise ContractError(message)

    @property
    def cutoff(self) -> int:
        # Lumping the tail at a point >= B is exact: every larger count saturates the buffer.
        if self.tail_cutoff is not None:
            return max(self.tail_cutoff, self.B)
        return max(self.B, _tail_point(self.arrival_rate_into_queue), _tail_point(self.service_rate))


def _lumped_pmf(rate: float, cutoff: int) -> np.ndarray:
    if rate <= 0:
        pmf = np.zeros(cutoff + 1)
        pmf[0] = 1.0
        return pmf
    pmf = poisson.pmf(np.arange(cutoff + 1), rate)
    pmf[cutoff] = max(0.0, 1.0 - pmf[:cutoff].sum())
    return pmf


def transition_matrix(spec: ChainSpec) -> np.ndarray:
    """(B+1) x (B+1) transition matrix of the queue length between epoch starts."""
    B, cutoff = spec.B, spec.cutoff
    arrivals = _lumped_pmf(spec.arrival_rate_into_queue, cutoff)
    services = _lumped_pmf(spec.service_rate, cutoff)
    states = np.arange(B + 1)

    # q -> min(B, q + a)
    fill = np.zeros((B + 1, B + 1))
    targets = np.minimum(B, states[:, None] + np.arange(cutoff + 1)[None, :])
    np.add.at(fill, (np.repeat(states, cutoff + 1), targets.reshape(-1)),
              np.tile(arrivals, B + 1))

    # q1 -> q1 - min(q1, s)
    drain = np.zeros((B + 1, B + 1))
    for q1 in states:
        reachable = min(q1, cutoff)
        drain[q1, q1 - np.arange(reachable)] = services[:reachable]
        drain[q1, q1 - reachable] += services[reachable:].sum()

    return fill @ drain


def stationary_distribution(spec: ChainSpec) -> np.ndarray:
    """Stationary vector by power iteration started from the empty queue."""
    matrix = sparse.csr_matrix(transition_matrix(spec)).T.tocsr()
    pi = np.zeros(spec.B + 1)
    pi[0] = 1.0
    for iteration in range(1, MAX_POWER_ITERATIONS + 1):
        updated = matrix @ pi
        updated /= updated.sum()
        if np.max(np.abs(updated - pi)) < CONVERGENCE_TOL:
            logger.debug(f"power iteration converged after {iteration} iterations for {spec}")
            return updated
        pi = updated
    message = f"power iteration did not converge within {MAX_POWER_ITERATIONS} iterations for {spec}"
    logger.error(message)
    raise NumericError(message)


def expected_overflow(B: int, rate: float, start: np.ndarray) -> np.ndarray:
    """E[max(0, q + A - B)] for A ~ Poisson(rate), evaluated at every q in ``start``."""
    start = np.asarray(start, dtype=np.int64)
    result = start + rate - B
    for idx, q in enumerate(start):
        a = np.arange(max(0, B - q))
        result[idx] += np.sum((B - q - a) * poisson.pmf(a, rate)) if rate > 0 else (B - q)
    return np.maximum(result, 0.0)


def stationary_drop_rate(spec: ChainSpec) -> float:
    """Expected drops per epoch in steady state."""
    if spec.arrival_rate_into_queue == 0:
        return 0.0
    if spec.service_rate == 0:
        message = f"chain is not irreducible without service: {spec}"
        logger.error(message)
        raise ContractError(message)
    pi = stationary_distribution(spec)
    overflow = expected_overflow(spec.B, spec.arrival_rate_into_queue, np.arange(spec.B + 1))
    return max(0.0, float(pi @ overflow))


def chain_specs_for_fixed_policy(config: EnvConfig, fractions: np.ndarray) -> List[ChainSpec]:
    """
    Per-queue chains of a network whose schedulers use fixed fractions.

    A Poisson stream thinned by fixed fractions stays Poisson, so each queue sees
    Poisson(eta * delta_t * sum of the fractions routed to it) arrivals.
    """
    fractions = np.asarray(fractions, dtype=np.float64)
    access_map = config.resolved_access_map()
    if fractions.shape != access_map.shape:
        raise ContractError(f"fractions shape {fractions.shape} does not match access map {access_map.shape}")
    rates = np.zeros(config.S)
    np.add.at(rates, access_map, config.eta * config.delta_t * fractions)
    return [ChainSpec(config.B, float(rate), config.beta * config.delta_t) for rate in rates]


def network_drop_rate(config: EnvConfig, fractions: np.ndarray) -> float:
    """Expected drops per epoch summed over all queues of a fixed-fraction network."""
    return float(sum(stationary_drop_rate(spec) for spec in chain_specs_for_fixed_policy(config, fractions)))
