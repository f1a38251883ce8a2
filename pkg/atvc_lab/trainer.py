# atvc_lab/trainer.py
"""
Centralised training with one parameter set shared by every scheduler, and the
decentralised evaluation path.

Rollouts run the agents exactly as they would be deployed, except that fusion
is soft (every candidate weighted by its attention weight) and the trainer
records the true accessible queue lengths as the decoder target. The loss is
the PPO clipped surrogate with an adaptive KL penalty, a clipped value loss and
the VAE loss, combined into one scalar and differentiated in one backward pass.
"""

import logging
import math
import multiprocessing
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import jsonlines
import numpy as np
import pandas as pd
from tqdm import tqdm

from atvc_lab import atvc, nn
from atvc_lab.atvc import CandidateTable, FusionMode, ModelConfig
from atvc_lab.baselines import PolicyKind, baseline_actions
from atvc_lab.env import EnvConfig, QueueNetworkEnv
from atvc_lab.errors import CompatibilityError, ConfigurationError, ContractError, NumericError
from atvc_lab.nn import ParamStore, Tensor
from atvc_lab.serialization import load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

TRAIN_STREAM = 0
EVAL_STREAM = 1
SHUFFLE_STREAM = 2
ADVANTAGE_EPS = 1e-8

METRICS_FILENAME = "metrics.csv"
BASELINES_FILENAME = "baselines.csv"
DIAGNOSTICS_FILENAME = "diagnostics.jsonl"
CHECKPOINT_FILENAME = "checkpoint.atvc"
CHECKPOINT_DIR = "checkpoints"
METRICS_COLUMNS = ["iteration", "mean_reward", "drop_rate", "comm_ratio",
                   "policy_loss", "value_loss", "vae_loss", "kl"]


# --- configuration ------------------------------------------------------------------

def _fail(field_name: str, message: str):
    logger.error(f"Invalid configuration: {field_name}: {message}")
    raise ConfigurationError(field_name, message)


@dataclass
class PPOConfig:
    lambda_gae: float = 1.0
    kl_init_coeff: float = 0.2
    train_batch: int = 4000
    minibatch: int = 128
    lr: float = 5e-5
    clip: float = 0.3
    value_clip: float = 10.0
    kappa: float = 0.1
    beta_kl: float = 1.0
    discount: float = 1.0
    epochs_per_batch: int = 8
    kl_target: float = 0.01
    value_coeff: float = 0.5
    episodes_per_iteration: int = 50
    rollout_workers: int = 1
    reward_scale: float = 1.0

    def validate(self) -> None:
        if not 0.0 < self.clip < 1.0:
            _fail("clip", f"must lie in (0, 1), got {self.clip}")
        if self.minibatch < 1:
            _fail("minibatch", f"must be >= 1, got {self.minibatch}")
        if self.minibatch > self.train_batch:
            _fail("minibatch", f"must not exceed train_batch ({self.train_batch}), got {self.minibatch}")
        # lr = 0 is allowed: it freezes the parameters while still producing metrics.
        if self.lr < 0:
            _fail("lr", f"must be >= 0, got {self.lr}")
        if self.kappa < 0:
            _fail("kappa", f"must be >= 0, got {self.kappa}")
        if not 0.0 <= self.lambda_gae <= 1.0:
            _fail("lambda_gae", f"must lie in [0, 1], got {self.lambda_gae}")
        if not 0.0 < self.discount <= 1.0:
            _fail("discount", f"must lie in (0, 1], got {self.discount}")
        for name in ("kl_init_coeff", "beta_kl", "value_coeff"):
            if getattr(self, name) < 0:
                _fail(name, f"must be >= 0, got {getattr(self, name)}")
        for name in ("value_clip", "kl_target", "reward_scale"):
            if not getattr(self, name) > 0:
                _fail(name, f"must be > 0, got {getattr(self, name)}")
        for name in ("epochs_per_batch", "episodes_per_iteration", "rollout_workers"):
            if getattr(self, name) < 1:
                _fail(name, f"must be >= 1, got {getattr(self, name)}")


@dataclass
class ExperimentConfig:
    seed: int
    iterations: int = 300
    eval_episodes: int = 1000
    baseline_episodes: int = 100
    output_dir: str = "runs"
    checkpoint_every: int = 50
    delta_t_values: List[float] = field(default_factory=lambda: [1.0, 2.0, 3.0, 4.0])
    agent_values: List[int] = field(default_factory=lambda: [3, 6, 9, 12])
    heatmap_samples: int = 1000
    workers: int = 1
    policy: str = PolicyKind.ATVC.value

    def validate(self) -> None:
        if self.seed is None:
            _fail("seed", "is mandatory")
        if self.iterations < 0:
            _fail("iterations", f"must be >= 0, got {self.iterations}")
        for name in ("eval_episodes", "heatmap_samples", "workers", "checkpoint_every"):
            if getattr(self, name) < 1:
                _fail(name, f"must be >= 1, got {getattr(self, name)}")
        if self.baseline_episodes < 0:
            _fail("baseline_episodes", f"must be >= 0, got {self.baseline_episodes}")
        if not self.delta_t_values or any(not v > 0 for v in self.delta_t_values):
            _fail("delta_t_values", f"must be a non-empty list of positive values, got {self.delta_t_values}")
        if not self.agent_values or any(v < 1 for v in self.agent_values):
            _fail("agent_values", f"must be a non-empty list of counts >= 1, got {self.agent_values}")
        if self.policy.lower() != "all":
            try:
                PolicyKind.parse(self.policy)
            except ValueError as e:
                _fail("policy", str(e))


@dataclass
class RunConfig:
    env: EnvConfig
    ppo: PPOConfig
    model: ModelConfig
    experiment: ExperimentConfig
    log_level: str = "INFO"

    def validate(self) -> None:
        self.env.validate()
        self.ppo.validate()
        self.model.validate()
        self.experiment.validate()
        if self.ppo.train_batch < self.env.episode_len:
            _fail("train_batch", f"must be >= episode_len ({self.env.episode_len}), got {self.ppo.train_batch}")


# --- rollouts ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    """Per epoch and per scheduler rollout record; axis 0 is time, axis 1 the scheduler."""
    observed: np.ndarray
    true_lengths: np.ndarray
    fused_mu: np.ndarray
    fused_var: np.ndarray
    noise: np.ndarray
    z: np.ndarray
    raw_logits: np.ndarray
    action_mean: np.ndarray
    log_std: np.ndarray
    log_prob: np.ndarray
    value: np.ndarray
    alphas: np.ndarray
    selected: np.ndarray
    reward: np.ndarray
    drops: np.ndarray
    arrivals: np.ndarray
    done: np.ndarray

    def __post_init__(self):
        steps = self.reward.shape[0]
        for name, array in _trajectory_fields(self).items():
            if array.shape[0] != steps:
                raise ContractError(f"Trajectory.{name} has {array.shape[0]} steps, expected {steps}")
        if np.any(self.reward > 0):
            raise ContractError("Trajectory rewards must be <= 0")

    @property
    def steps(self) -> int:
        return self.reward.shape[0]

    @property
    def episodes(self) -> int:
        return int(self.done.sum())

    @classmethod
    def concat(cls, parts: Sequence["Trajectory"]) -> "Trajectory":
        if not parts:
            raise ContractError("Trajectory.concat needs at least one trajectory")
        names = _trajectory_fields(parts[0]).keys()
        return cls(**{name: np.concatenate([getattr(p, name) for p in parts]) for name in names})


def _trajectory_fields(trajectory: Trajectory) -> Dict[str, np.ndarray]:
    return {name: getattr(trajectory, name) for name in trajectory.__dataclass_fields__}


@dataclass
class EpisodeStats:
    reward: float = 0.0
    drops: int = 0
    arrivals: int = 0
    selected_messages: int = 0
    candidate_messages: int = 0
    decoder_hits: int = 0
    decoder_total: int = 0


@dataclass
class EpisodeTask:
    env_config: EnvConfig
    store: Optional[ParamStore]
    policy: PolicyKind
    mode: Optional[FusionMode]
    gamma: float
    seed_sequence: np.random.SeedSequence
    record: bool = False
    with_decoder: bool = False


def play_episode(task: EpisodeTask) -> Tuple[EpisodeStats, Optional[Trajectory]]:
    """Run one episode on a fresh environment owned by the caller's process."""
    env = QueueNetworkEnv(task.env_config)
    env_seq, agent_seq = task.seed_sequence.spawn(2)
    env.reset(seed=int(env_seq.generate_state(1)[0]))
    rng = np.random.default_rng(agent_seq)
    config = env.config
    table = atvc.candidate_table(atvc.comm_groups(env.access_map)) if task.policy.uses_model else None

    stats = EpisodeStats()
    records: Dict[str, list] = {}

    def keep(**columns):
        for key, value in columns.items():
            records.setdefault(key, []).append(value)

    while not env.episode_done:
        true_lengths = env.true_accessible_lengths()
        if task.policy.uses_model:
            observed = env.observe_all()
            step = atvc.infer(task.store, observed, table, config.B, rng, task.mode, task.gamma,
                              with_decoder=task.with_decoder)
            outcome = env.step_fractions(step.fractions)
            selected, candidates = step.communication_counts(table)
            stats.selected_messages += selected
            stats.candidate_messages += candidates
            if task.with_decoder:
                stats.decoder_hits += int(np.sum(np.argmax(step.decoder_logits, axis=-1) == true_lengths))
                stats.decoder_total += true_lengths.size
            if task.record:
                keep(observed=observed, true_lengths=true_lengths, fused_mu=step.fused_mu,
                     fused_var=step.fused_var, noise=step.noise, z=step.z, raw_logits=step.raw_logits,
                     action_mean=step.action_mean, log_std=np.broadcast_to(step.log_std, step.raw_logits.shape),
                     log_prob=step.log_prob, value=step.value, alphas=step.alphas, selected=step.selected)
        else:
            outcome = env.step(baseline_actions(task.policy, env))
        stats.reward += outcome.reward
        stats.drops += int(outcome.drops_per_queue.sum())
        stats.arrivals += int(outcome.arrivals.sum())
        if task.record:
            keep(reward=outcome.reward, drops=int(outcome.drops_per_queue.sum()),
                 arrivals=int(outcome.arrivals.sum()), done=env.episode_done)

    if not task.record:
        return stats, None
    trajectory = Trajectory(**{key: np.asarray(values) for key, values in records.items()})
    return stats, trajectory


def run_tasks(tasks: Sequence[EpisodeTask], workers: int = 1, desc: str = "episodes",
              progress: bool = False) -> List[Tuple[EpisodeStats, Optional[Trajectory]]]:
    """Play episodes in task order, optionally on a process pool."""
    if workers <= 1 or len(tasks) <= 1:
        return [play_episode(task) for task in tqdm(tasks, desc=desc, leave=False, disable=not progress)]
    with multiprocessing.Pool(processes=workers) as pool:
        return list(tqdm(pool.imap(play_episode, tasks), total=len(tasks), desc=desc,
                         leave=False, disable=not progress))


def episodes_for(steps: int, episode_len: int, min_episodes: int) -> int:
    return max(min_episodes, math.ceil(steps / episode_len))


def collect_rollouts(env_config: EnvConfig, store: ParamStore, steps: int, seed: int, iteration: int = 0,
                     min_episodes: int = 1, gamma: float = 0.3, workers: int = 1,
                     progress: bool = False) -> Tuple[Trajectory, List[EpisodeStats]]:
    """
    Play whole episodes with soft fusion until at least ``steps`` epochs are collected.

    Episode e of an iteration draws its random numbers from (seed, iteration, e),
    so the result does not depend on the number of workers.
    """
    if steps < env_config.episode_len:
        message = f"collect_rollouts needs steps >= episode_len ({env_config.episode_len}), got {steps}"
        logger.error(message)
        raise ContractError(message)
    count = episodes_for(steps, env_config.episode_len, min_episodes)
    snapshot = store.frozen_copy() if workers > 1 else store
    tasks = [EpisodeTask(env_config, snapshot, PolicyKind.ATVC, FusionMode.SOFT, gamma,
                         np.random.SeedSequence([seed, TRAIN_STREAM, iteration, episode]), record=True)
             for episode in range(count)]
    results = run_tasks(tasks, workers, desc=f"rollouts {iteration + 1}", progress=progress)
    trajectory = Trajectory.concat([trajectory for _, trajectory in results])
    logger.debug(f"collected {trajectory.steps} steps in {count} episodes")
    return trajectory, [stats for stats, _ in results]


# --- advantage estimation and losses ------------------------------------------------------------

def gae(rewards, values, lambda_gae: float = 1.0, discount: float = 1.0,
        dones: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Generalized advantage estimation over concatenated finite episodes.

    ``dones[t]`` marks the last epoch of an episode; nothing is bootstrapped past it.
    Rewards of shape (T,) are shared by every column of ``values`` (T, ...).

    Returns:
        (advantages, value_targets) with the shape of ``values``.
    """
    values = np.asarray(values, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    rewards = rewards.reshape(rewards.shape + (1,) * (values.ndim - rewards.ndim))
    steps = values.shape[0]
    if dones is None:
        dones = np.zeros(steps, dtype=bool)
        dones[-1] = True
    advantages = np.zeros_like(values)
    next_value = np.zeros_like(values[0])
    running = np.zeros_like(values[0])
    for t in reversed(range(steps)):
        if dones[t]:
            next_value = np.zeros_like(values[0])
            running = np.zeros_like(values[0])
        delta = rewards[t] + discount * next_value - values[t]
        running = delta + discount * lambda_gae * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


def normalize_advantages(advantages: np.ndarray) -> np.ndarray:
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size < 2:
        return advantages.copy()
    return (advantages - advantages.mean()) / (advantages.std() + ADVANTAGE_EPS)


def policy_loss(log_prob_new, log_prob_old, advantages, eps: float,
                kl=None, kl_coeff: float = 0.0) -> Tensor:
    """Negated clipped surrogate, plus ``kl_coeff`` times the mean KL(old || new) when given."""
    ratio = nn.exp(nn.as_tensor(log_prob_new) - np.asarray(log_prob_old, dtype=np.float64))
    advantages = np.asarray(advantages, dtype=np.float64)
    surrogate = nn.minimum(ratio * advantages, nn.clip(ratio, 1.0 - eps, 1.0 + eps) * advantages)
    loss = -nn.reduce_mean(surrogate)
    if kl is not None:
        loss = loss + nn.reduce_mean(kl) * kl_coeff
    return loss


def update_kl_coeff(kl_coeff: float, measured_kl: float, kl_target: float) -> float:
    if measured_kl > 2.0 * kl_target:
        return kl_coeff * 2.0
    if measured_kl < 0.5 * kl_target:
        return kl_coeff * 0.5
    return kl_coeff


def value_loss(values_new, values_old, targets, delta: float) -> Tensor:
    values_new = nn.as_tensor(values_new)
    values_old = np.asarray(values_old, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    clipped = nn.add(values_old, nn.clip(values_new - values_old, -delta, delta))
    return nn.reduce_mean(nn.maximum(nn.square(values_new - targets), nn.square(clipped - targets)))


def prior_kl(mu, var) -> Tensor:
    """KL(N(mu, var) || N(0, I)) summed over the last axis."""
    mu, var = nn.as_tensor(mu), nn.as_tensor(var)
    return nn.reduce_sum((var + nn.square(mu) - 1.0 - nn.log(var)) * 0.5, axis=-1)


def vae_loss(decoder_logits, true_states, fused_mu, fused_var, beta_kl: float = 1.0) -> Tensor:
    """Mean per-queue cross-entropy of the decoder plus ``beta_kl`` times the KL to the prior."""
    logits = nn.as_tensor(decoder_logits)
    true_states = np.asarray(true_states, dtype=np.int64)
    levels = logits.shape[-1]
    if np.any(true_states < 0) or np.any(true_states >= levels):
        message = f"vae_loss: true states must lie in [0, {levels - 1}]"
        logger.error(message)
        raise ContractError(message)
    targets = np.eye(levels)[true_states]
    cross_entropy = -nn.reduce_mean(nn.reduce_sum(nn.log_softmax(logits, axis=-1) * targets, axis=-1))
    return cross_entropy + nn.reduce_mean(prior_kl(fused_mu, fused_var)) * beta_kl


def total_loss(policy_term, value_term, vae_term, kappa: float, value_coeff: float = 0.5) -> Tensor:
    return nn.as_tensor(policy_term) + nn.as_tensor(value_term) * value_coeff + nn.as_tensor(vae_term) * kappa


# --- minibatch forward ---------------------------------------------------------------------------

@dataclass
class SampleBatch:
    """Flattened (epoch, scheduler) samples with the candidate observations each one fused."""
    candidate_observed: np.ndarray
    candidate_mask: np.ndarray
    true_lengths: np.ndarray
    noise: np.ndarray
    raw_logits: np.ndarray
    old_mean: np.ndarray
    old_log_std: np.ndarray
    old_log_prob: np.ndarray
    old_value: np.ndarray
    advantages: np.ndarray
    value_targets: np.ndarray

    @property
    def size(self) -> int:
        return self.old_log_prob.shape[0]

    def subset(self, index: np.ndarray) -> "SampleBatch":
        return SampleBatch(**{name: getattr(self, name)[index] for name in self.__dataclass_fields__})


def build_samples(trajectory: Trajectory, table: CandidateTable, advantages: np.ndarray,
                  value_targets: np.ndarray) -> SampleBatch:
    steps, agents, d = trajectory.observed.shape
    count = steps * agents
    candidate_observed = trajectory.observed[:, table.indices].reshape(count, table.width, d)
    candidate_mask = np.broadcast_to(table.mask, (steps, agents, table.width)).reshape(count, table.width)
    return SampleBatch(
        candidate_observed=candidate_observed,
        candidate_mask=candidate_mask,
        true_lengths=trajectory.true_lengths.reshape(count, d),
        noise=trajectory.noise.reshape(count, -1),
        raw_logits=trajectory.raw_logits.reshape(count, d),
        old_mean=trajectory.action_mean.reshape(count, d),
        old_log_std=trajectory.log_std.reshape(count, d),
        old_log_prob=trajectory.log_prob.reshape(count),
        old_value=trajectory.value.reshape(count),
        advantages=np.asarray(advantages).reshape(count),
        value_targets=np.asarray(value_targets).reshape(count),
    )


@dataclass
class LossTerms:
    total: float
    policy: float
    value: float
    vae: float
    kl: float


def minibatch_loss(store: ParamStore, batch: SampleBatch, ppo: PPOConfig, kl_coeff: float,
                   B: int) -> Tuple[Tensor, LossTerms]:
    """
    Recompute every sample under the current parameters and return the total loss.

    Candidate messages are re-encoded from the stored observations and fused
    softly, and the stored noise is replayed so z moves only with the parameters.
    """
    d = batch.raw_logits.shape[-1]
    mu, var = atvc.encoder_forward(store, atvc.one_hot_observations(batch.candidate_observed, B))
    alphas = atvc.attention_forward(atvc.attention_params(store), mu, var, batch.candidate_mask)
    fused_mu, fused_var = atvc.weighted_poe_forward(mu, var, alphas, include_prior=True)
    z, _ = nn.reparam_sample(fused_mu, nn.sqrt(fused_var), noise=batch.noise)

    mean, log_std = atvc.policy_forward(store, z)
    log_prob = atvc.gaussian_log_prob(batch.raw_logits, mean, log_std)
    kl = atvc.gaussian_kl(batch.old_mean, batch.old_log_std, mean, log_std)
    values = atvc.value_forward(store, z)
    decoder_logits = atvc.decoder_forward(store, z, d)

    policy_term = policy_loss(log_prob, batch.old_log_prob, batch.advantages, ppo.clip, kl, kl_coeff)
    value_term = value_loss(values, batch.old_value, batch.value_targets, ppo.value_clip)
    vae_term = vae_loss(decoder_logits, batch.true_lengths, fused_mu, fused_var, ppo.beta_kl)
    loss = total_loss(policy_term, value_term, vae_term, ppo.kappa, ppo.value_coeff)
    terms = LossTerms(loss.item(), policy_term.item(), value_term.item(), vae_term.item(),
                      float(np.mean(kl.data)))
    return loss, terms


# --- diagnostics and checkpoints -------------------------------------------------------------------

def _finite_or_none(value: float) -> Optional[float]:
    return float(value) if np.isfinite(value) else None


def write_diagnostics(filename: str, store: ParamStore, terms: Dict[str, float]) -> str:
    """One JSON record for the offending loss terms, then one per parameter tensor."""
    with jsonlines.open(filename, mode="w") as writer:
        writer.write({"kind": "loss_terms", **{k: _finite_or_none(v) for k, v in terms.items()}})
        for name, tensor in store.items():
            data = tensor.data
            finite = data[np.isfinite(data)]
            writer.write({
                "kind": "parameter",
                "name": name,
                "shape": list(data.shape),
                "finite": bool(finite.size == data.size),
                "grad_finite": None if tensor.grad is None else bool(np.all(np.isfinite(tensor.grad))),
                "min": _finite_or_none(finite.min()) if finite.size else None,
                "max": _finite_or_none(finite.max()) if finite.size else None,
                "mean": _finite_or_none(finite.mean()) if finite.size else None,
            })
    logger.info(f"Diagnostics written to {filename}")
    return filename


def checkpoint_meta(model: ModelConfig, d: int, B: int, iteration: int, kl_coeff: float) -> Dict[str, float]:
    meta = {key: float(value) for key, value in asdict(model).items()}
    meta.update({"d": d, "B": B, "iteration": iteration, "kl_coeff": kl_coeff})
    return meta


def model_config_from_meta(meta: Dict[str, float]) -> ModelConfig:
    defaults = ModelConfig()
    values = {}
    for key, default in asdict(defaults).items():
        if key in meta:
            values[key] = type(default)(meta[key])
    return ModelConfig(**values)


def check_compatibility(store: ParamStore, env_config: EnvConfig) -> None:
    d, B, _ = atvc.model_dimensions(store)
    if d != env_config.d or B != env_config.B:
        message = (f"checkpoint was trained for d={d}, B={B} but the environment has "
                   f"d={env_config.d}, B={env_config.B}")
        logger.error(message)
        raise CompatibilityError(message)


def load_model(filename: str) -> Tuple[ParamStore, Dict[str, float]]:
    return load_checkpoint(filename)


# --- evaluation ------------------------------------------------------------------------------------

@dataclass
class EvaluationResult:
    policy: str
    episodes: int
    mean_reward: float
    drop_rate: float
    comm_ratio: float
    decoder_accuracy: float

    def as_row(self) -> Dict[str, Union[str, int, float]]:
        return asdict(self)


def summarize(policy: PolicyKind, stats: Sequence[EpisodeStats]) -> EvaluationResult:
    drops = sum(s.drops for s in stats)
    arrivals = sum(s.arrivals for s in stats)
    selected = sum(s.selected_messages for s in stats)
    candidates = sum(s.candidate_messages for s in stats)
    hits = sum(s.decoder_hits for s in stats)
    decoded = sum(s.decoder_total for s in stats)
    return EvaluationResult(
        policy=policy.value,
        episodes=len(stats),
        mean_reward=-drops / len(stats),
        drop_rate=drops / arrivals if arrivals else 0.0,
        comm_ratio=selected / candidates if candidates else 0.0,
        decoder_accuracy=hits / decoded if decoded else float("nan"),
    )


def evaluate(store: Optional[ParamStore], env_config: EnvConfig, episodes: int, gamma: float = 0.3,
             policy: Union[PolicyKind, str] = PolicyKind.ATVC, seed: int = 0, workers: int = 1,
             progress: bool = False) -> EvaluationResult:
    """
    Decentralised execution over ``episodes`` episodes.

    ATVC fuses only candidates whose attention weight exceeds ``gamma``; the two
    ablations fuse everything or nothing. JSQ and Random need no model.
    """
    policy = PolicyKind.parse(policy) if isinstance(policy, str) else policy
    env_config.validate()
    if episodes < 1:
        raise ContractError(f"evaluate needs episodes >= 1, got {episodes}")
    if policy.uses_model:
        if store is None:
            raise ContractError(f"{policy.value} needs a trained model")
        check_compatibility(store, env_config)
    snapshot = store.frozen_copy() if (store is not None and workers > 1) else store
    tasks = [EpisodeTask(env_config, snapshot, policy, policy.fusion_mode, gamma,
                         np.random.SeedSequence([seed, EVAL_STREAM, episode]),
                         record=False, with_decoder=policy.uses_model)
             for episode in range(episodes)]
    results = run_tasks(tasks, workers, desc=f"eval {policy.value}", progress=progress)
    result = summarize(policy, [stats for stats, _ in results])
    logger.info(f"{result.policy}: mean_reward={result.mean_reward:.4f} drop_rate={result.drop_rate:.4f} "
                f"comm_ratio={result.comm_ratio:.4f} over {episodes} episodes")
    return result


# --- training ----------------------------------------------------------------------------------------

@dataclass
class TrainResult:
    store: ParamStore
    metrics: pd.DataFrame
    checkpoint_path: str
    kl_coeff: float


def _optimise(store: ParamStore, samples: SampleBatch, ppo: PPOConfig, kl_coeff: float, B: int,
              rng: np.random.Generator, diagnostics_path: str) -> Dict[str, float]:
    totals = {"policy_loss": 0.0, "value_loss": 0.0, "vae_loss": 0.0, "kl": 0.0}
    updates = 0
    for epoch in range(ppo.epochs_per_batch):
        order = rng.permutation(samples.size)
        for start in range(0, samples.size, ppo.minibatch):
            batch = samples.subset(order[start:start + ppo.minibatch])
            loss, terms = minibatch_loss(store, batch, ppo, kl_coeff, B)
            if not np.isfinite(terms.total):
                write_diagnostics(diagnostics_path, store, asdict(terms))
                message = f"non-finite loss in epoch {epoch}: {terms}"
                logger.error(message)
                raise NumericError(message, diagnostics_path)
            nn.backward(loss)
            nn.adam_step(store, ppo.lr)
            logger.debug(f"epoch {epoch} minibatch {start // ppo.minibatch}: {terms}")
            totals["policy_loss"] += terms.policy
            totals["value_loss"] += terms.value
            totals["vae_loss"] += terms.vae
            totals["kl"] += terms.kl
            updates += 1
    return {key: value / max(updates, 1) for key, value in totals.items()}


def previous_metrics(resume_from: str, iteration: int) -> List[Dict[str, float]]:
    """Metrics rows 1..``iteration`` of the run that wrote the checkpoint ``resume_from``."""
    directory = os.path.dirname(os.path.abspath(resume_from))
    if os.path.basename(directory) == CHECKPOINT_DIR:
        directory = os.path.dirname(directory)
    path = os.path.join(directory, METRICS_FILENAME)
    if not os.path.exists(path):
        logger.warning(f"No {METRICS_FILENAME} next to {resume_from}; metrics start at iteration {iteration + 1}")
        return []
    frame = pd.read_csv(path, float_precision="round_trip")
    frame = frame[frame["iteration"] <= iteration]
    logger.info(f"Carrying {len(frame)} metrics rows over from {path}")
    return frame[METRICS_COLUMNS].to_dict("records")


def train(run_config: RunConfig, run_dir: str, resume_from: Optional[str] = None,
          progress: bool = False) -> TrainResult:
    """
    PPO training loop: collect, estimate advantages, optimise, log, checkpoint.

    Writes metrics.csv (one row per iteration), baselines.csv, periodic
    checkpoints under checkpoints/ and the final checkpoint.atvc into ``run_dir``.
    A resumed run starts its metrics.csv with the earlier run's rows up to the
    checkpoint's iteration.
    """
    run_config.validate()
    env_config, ppo, experiment = run_config.env, run_config.ppo, run_config.experiment
    os.makedirs(run_dir, exist_ok=True)
    access_map = env_config.resolved_access_map()
    table = atvc.candidate_table(atvc.comm_groups(access_map))
    gamma = run_config.model.gamma
    model_config = run_config.model

    if resume_from:
        store, meta = load_model(resume_from)
        check_compatibility(store, env_config)
        model_config = model_config_from_meta(meta)
        start_iteration = int(meta.get("iteration", 0))
        kl_coeff = float(meta.get("kl_coeff", ppo.kl_init_coeff))
        logger.info(f"Resuming from {resume_from} at iteration {start_iteration + 1}")
    else:
        store = atvc.init_params(model_config, env_config.d, env_config.B, experiment.seed)
        start_iteration = 0
        kl_coeff = ppo.kl_init_coeff

    if experiment.baseline_episodes > 0 and not resume_from:
        rows = [evaluate(None, env_config, experiment.baseline_episodes, gamma, kind, experiment.seed,
                         experiment.workers, progress).as_row()
                for kind in (PolicyKind.JSQ, PolicyKind.RANDOM)]
        pd.DataFrame(rows).to_csv(os.path.join(run_dir, BASELINES_FILENAME), index=False)

    metrics_path = os.path.join(run_dir, METRICS_FILENAME)
    diagnostics_path = os.path.join(run_dir, DIAGNOSTICS_FILENAME)
    rows: List[Dict[str, float]] = previous_metrics(resume_from, start_iteration) if resume_from else []
    checkpoint_path = os.path.join(run_dir, CHECKPOINT_FILENAME)

    for iteration in tqdm(range(start_iteration, experiment.iterations), desc="train", disable=not progress):
        trajectory, stats = collect_rollouts(env_config, store, ppo.train_batch, experiment.seed, iteration,
                                             ppo.episodes_per_iteration, gamma, ppo.rollout_workers)
        # value head and targets live in reward_scale units; metrics stay in drops
        advantages, targets = gae(trajectory.reward * ppo.reward_scale, trajectory.value, ppo.lambda_gae,
                                  ppo.discount, trajectory.done)
        samples = build_samples(trajectory, table, normalize_advantages(advantages), targets)
        shuffle_rng = np.random.default_rng([experiment.seed, SHUFFLE_STREAM, iteration])
        losses = _optimise(store, samples, ppo, kl_coeff, env_config.B, shuffle_rng, diagnostics_path)
        kl_coeff = update_kl_coeff(kl_coeff, losses["kl"], ppo.kl_target)

        summary = summarize(PolicyKind.ATVC, stats)
        row = {"iteration": iteration + 1, "mean_reward": summary.mean_reward, "drop_rate": summary.drop_rate,
               "comm_ratio": summary.comm_ratio, **losses}
        rows.append(row)
        pd.DataFrame(rows, columns=METRICS_COLUMNS).to_csv(metrics_path, index=False)
        logger.info(f"iteration {iteration + 1}/{experiment.iterations}: reward={summary.mean_reward:.3f} "
                    f"drop_rate={summary.drop_rate:.4f} comm_ratio={summary.comm_ratio:.3f} "
                    f"kl={losses['kl']:.5f} kl_coeff={kl_coeff:.4f}")

        meta = checkpoint_meta(model_config, env_config.d, env_config.B, iteration + 1, kl_coeff)
        if (iteration + 1) % experiment.checkpoint_every == 0:
            save_checkpoint(store, meta, os.path.join(run_dir, CHECKPOINT_DIR, f"iteration_{iteration + 1:04d}.atvc"))

    final_meta = checkpoint_meta(model_config, env_config.d, env_config.B,
                                 max(start_iteration, experiment.iterations), kl_coeff)
    save_checkpoint(store, final_meta, checkpoint_path)
    if not rows:
        pd.DataFrame(columns=METRICS_COLUMNS).to_csv(metrics_path, index=False)
    return TrainResult(store, pd.DataFrame(rows, columns=METRICS_COLUMNS), checkpoint_path, kl_coeff)
