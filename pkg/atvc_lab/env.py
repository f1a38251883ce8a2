# atvc_lab/env.py
"""
Discrete-time simulator of M schedulers dispatching into S finite-buffer queues.

Every epoch each scheduler forwards the jobs it accumulated during the last
delta_t to its d accessible queues, split per packet according to its
allocation fractions. Packets that do not fit into a queue are dropped; the
shared reward is minus the number of drops. Schedulers observe their queues
with one-epoch staleness, entry by entry, without being told which entries are
stale.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from atvc_lab.errors import ConfigurationError, ContractError, SchedulerIndexError

logger = logging.getLogger(__name__)

FRACTION_TOLERANCE = 1e-9


def default_access_map(M: int, S: int, d: int) -> List[List[int]]:
    """Ring assignment: scheduler i reaches queues (i + k) mod S for k < d."""
    if not 1 <= d <= S:
        raise ConfigurationError("d", f"must satisfy 1 <= d <= S, got d={d}, S={S}")
    return [[(i + k) % S for k in range(d)] for i in range(M)]


@dataclass
class EnvConfig:
    M: int = 3
    S: int = 3
    d: int = 2
    eta: float = 0.9
    beta: float = 1.0
    B: int = 5
    delta_t: float = 1.0
    episode_len: int = 100
    p_stale: float = 0.5
    access_map: Optional[List[List[int]]] = None
    seed: int = 0

    def validate(self) -> None:
        def fail(name: str, message: str):
            logger.error(f"Invalid environment configuration: {name}: {message}")
            raise ConfigurationError(name, message)

        if self.M < 1:
            fail("M", f"must be >= 1, got {self.M}")
        if self.S < 1:
            fail("S", f"must be >= 1, got {self.S}")
        if not 1 <= self.d <= self.S:
            fail("d", f"must satisfy 1 <= d <= S, got d={self.d}, S={self.S}")
        if self.B < 1:
            fail("B", f"must be >= 1, got {self.B}")
        if not self.eta > 0:
            fail("eta", f"must be > 0, got {self.eta}")
        if not self.beta > 0:
            fail("beta", f"must be > 0, got {self.beta}")
        if not self.delta_t > 0:
            fail("delta_t", f"must be > 0, got {self.delta_t}")
        if self.episode_len < 1:
            fail("episode_len", f"must be >= 1, got {self.episode_len}")
        if not 0.0 <= self.p_stale <= 1.0:
            fail("p_stale", f"must lie in [0, 1], got {self.p_stale}")
        if self.access_map is not None:
            if len(self.access_map) != self.M:
                fail("access_map", f"needs one row per scheduler ({self.M}), got {len(self.access_map)}")
            for i, row in enumerate(self.access_map):
                if len(row) != self.d or len(set(row)) != self.d:
                    fail("access_map", f"row {i} must hold {self.d} distinct queue indices, got {row}")
                if any(not 0 <= int(q) < self.S for q in row):
                    fail("access_map", f"row {i} has a queue index outside [0, {self.S}): {row}")

    def resolved_access_map(self) -> np.ndarray:
        rows = self.access_map if self.access_map is not None else default_access_map(self.M, self.S, self.d)
        return np.asarray(rows, dtype=np.int64)


@dataclass
class QueueNetworkState:
    lengths: np.ndarray
    prev_lengths: np.ndarray
    epoch: int = 0


@dataclass
class Observation:
    scheduler_id: int
    entries: List[Tuple[int, int]]
    arrival_count: int = 0

    @property
    def lengths(self) -> np.ndarray:
        return np.array([length for _, length in self.entries], dtype=np.int64)


@dataclass
class AllocationAction:
    scheduler_id: int
    raw_logits: np.ndarray
    fractions: np.ndarray

    @classmethod
    def from_logits(cls, scheduler_id: int, raw_logits: Sequence[float]) -> "AllocationAction":
        logits = np.asarray(raw_logits, dtype=np.float64)
        shifted = np.exp(logits - np.max(logits))
        return cls(scheduler_id, logits, shifted / shifted.sum())


@dataclass
class StepOutcome:
    drops_per_queue: np.ndarray
    departures_per_queue: np.ndarray
    reward: float
    arrivals: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    incoming_per_queue: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


class QueueNetworkEnv:
    def __init__(self, config: EnvConfig):
        config.validate()
        self.config = config
        self.access_map = config.resolved_access_map()
        self.rng = np.random.default_rng(config.seed)
        self.state = QueueNetworkState(np.zeros(config.S, dtype=np.int64),
                                       np.zeros(config.S, dtype=np.int64), 0)
        self.pending_arrivals = self.sample_arrivals()

    @property
    def episode_done(self) -> bool:
        return self.state.epoch >= self.config.episode_len

    def reset(self, seed: Optional[int] = None) -> None:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.state = QueueNetworkState(np.zeros(self.config.S, dtype=np.int64),
                                       np.zeros(self.config.S, dtype=np.int64), 0)
        self.pending_arrivals = self.sample_arrivals()

    def sample_arrivals(self) -> np.ndarray:
        rate = self.config.eta * self.config.delta_t
        return self.rng.poisson(rate, size=self.config.M).astype(np.int64)

    def _check_scheduler(self, scheduler_id: int) -> None:
        if not 0 <= scheduler_id < self.config.M:
            message = f"scheduler_id {scheduler_id} outside [0, {self.config.M})"
            logger.error(message)
            raise SchedulerIndexError(message)

    def observe(self, scheduler_id: int) -> Observation:
        self._check_scheduler(scheduler_id)
        queues = self.access_map[scheduler_id]
        stale = self.rng.random(len(queues)) < self.config.p_stale
        values = np.where(stale, self.state.prev_lengths[queues], self.state.lengths[queues])
        return Observation(scheduler_id,
                           [(int(q), int(v)) for q, v in zip(queues, values)],
                           int(self.pending_arrivals[scheduler_id]))

    def observe_all(self) -> np.ndarray:
        """Observed lengths of every scheduler's queues, shape (M, d)."""
        stale = self.rng.random(self.access_map.shape) < self.config.p_stale
        return np.where(stale, self.state.prev_lengths[self.access_map],
                        self.state.lengths[self.access_map])

    def true_accessible_lengths(self) -> np.ndarray:
        return self.state.lengths[self.access_map].copy()

    def step(self, actions: Sequence[AllocationAction]) -> StepOutcome:
        M, d = self.config.M, self.config.d
        if len(actions) != M:
            message = f"step expects {M} actions, got {len(actions)}"
            logger.error(message)
            raise ContractError(message)
        fractions = np.zeros((M, d))
        for i, action in enumerate(actions):
            if action.scheduler_id != i:
                message = f"action {i} belongs to scheduler {action.scheduler_id}"
                logger.error(message)
                raise ContractError(message)
            values = np.asarray(action.fractions, dtype=np.float64).reshape(-1)
            if values.shape != (d,):
                message = f"action {i} has {values.size} fractions, expected {d}"
                logger.error(message)
                raise ContractError(message)
            fractions[i] = values
        return self.step_fractions(fractions)

    def step_fractions(self, fractions: np.ndarray) -> StepOutcome:
        """Advance one epoch given an (M, d) array of allocation fractions."""
        config = self.config
        fractions = np.asarray(fractions, dtype=np.float64)
        if fractions.shape != (config.M, config.d):
            message = f"fractions must have shape {(config.M, config.d)}, got {fractions.shape}"
            logger.error(message)
            raise ContractError(message)
        if (not np.all(np.isfinite(fractions)) or np.any(fractions < 0)
                or np.any(np.abs(fractions.sum(axis=1) - 1.0) > FRACTION_TOLERANCE)):
            message = f"fractions must lie on the simplex, got {fractions.tolist()}"
            logger.error(message)
            raise ContractError(message)

        arrivals = self.pending_arrivals
        incoming = np.zeros(config.S, dtype=np.int64)
        for i in range(config.M):
            pvals = fractions[i] / fractions[i].sum()
            dispatched = self.rng.multinomial(arrivals[i], pvals)
            np.add.at(incoming, self.access_map[i], dispatched)

        before = self.state.lengths
        filled = before + incoming
        drops = np.maximum(0, filled - config.B)
        after_dispatch = np.minimum(config.B, filled)
        served = self.rng.poisson(config.beta * config.delta_t, size=config.S)
        departures = np.minimum(after_dispatch, served).astype(np.int64)

        self.state = QueueNetworkState(after_dispatch - departures, before.copy(), self.state.epoch + 1)
        self.pending_arrivals = self.sample_arrivals()
        reward = -float(drops.sum())
        logger.debug(f"epoch {self.state.epoch}: incoming={incoming.tolist()} drops={drops.tolist()} "
                     f"lengths={self.state.lengths.tolist()}")
        return StepOutcome(drops.astype(np.int64), departures, reward, arrivals.copy(), incoming)


def create_env(config: EnvConfig) -> QueueNetworkEnv:
    return QueueNetworkEnv(config)


def sample_arrivals(env: QueueNetworkEnv) -> np.ndarray:
    return env.sample_arrivals()


def observe(env: QueueNetworkEnv, scheduler_id: int) -> Observation:
    return env.observe(scheduler_id)


def step(env: QueueNetworkEnv, actions: Sequence[AllocationAction]) -> StepOutcome:
    return env.step(actions)
