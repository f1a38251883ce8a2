# atvc_lab/atvc.py
"""
The communicating scheduler agent.

Each scheduler encodes its (possibly stale) observation into a diagonal
Gaussian message. Schedulers that share at least one queue form a
communication group; an attention scorer weighs the messages of a group and a
weighted product of experts fuses them with a standard-normal prior into one
belief. A latent drawn from that belief feeds three heads: the allocation
policy, the value estimate and a decoder that reconstructs the true lengths of
the accessible queues.

``GaussianMessage.sigma`` and every ``var`` tensor below hold diagonal
variances; precisions are their reciprocals.
"""

import enum
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

from atvc_lab import nn
from atvc_lab.errors import ConfigurationError, ContractError
from atvc_lab.nn import ParamStore, Tensor

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-4
SIGMA_MAX = 1e4
LOG_2PI = float(np.log(2.0 * np.pi))
PARAMETER_GROUPS = ("encoder", "attention", "policy", "value", "decoder")


@dataclass
class ModelConfig:
    latent_dim: int = 16
    encoder_hidden: int = 64
    encoder_layers: int = 2
    head_hidden: int = 64
    attention_dim: int = 16
    gamma: float = 0.3
    init_log_std: float = 0.0

    def validate(self) -> None:
        for name in ("latent_dim", "encoder_hidden", "encoder_layers", "head_hidden", "attention_dim"):
            if getattr(self, name) < 1:
                logger.error(f"Invalid model configuration: {name}={getattr(self, name)}")
                raise ConfigurationError(name, f"must be >= 1, got {getattr(self, name)}")
        if not 0.0 <= self.gamma <= 1.0:
            logger.error(f"Invalid model configuration: gamma={self.gamma}")
            raise ConfigurationError("gamma", f"must lie in [0, 1], got {self.gamma}")


class FusionMode(str, enum.Enum):
    SOFT = "soft"            # weighted PoE over every candidate (training)
    THRESHOLD = "threshold"  # keep candidates with alpha > gamma, owner always kept
    FULL = "full"            # execution without thresholding
    NONE = "none"            # own message and prior only


@dataclass
class GaussianMessage:
    sender_id: int
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        message = None
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            message = f"GaussianMessage: mu {self.mu.shape} and sigma {self.sigma.shape} must be equal 1-D"
        elif not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.sigma)) and np.all(self.sigma > 0)):
            message = f"GaussianMessage from {self.sender_id}: mu must be finite and sigma positive and finite"
        if message:
            logger.error(message)
            raise ContractError(message)


@dataclass
class CommGroup:
    owner_id: int
    candidate_ids: List[int]


@dataclass
class AttentionParams:
    W: Tensor
    b: Tensor
    u_g: Tensor


@dataclass
class FusedBelief:
    mu: np.ndarray
    sigma: np.ndarray
    selected_mask: np.ndarray
    alphas: np.ndarray


@dataclass
class CandidateTable:
    """Padded candidate ids per scheduler; column 0 is always the owner."""
    indices: np.ndarray
    mask: np.ndarray

    @property
    def width(self) -> int:
        return self.indices.shape[1]


# --- communication groups ---------------------------------------------------------

def comm_groups(access_map: Sequence[Sequence[int]]) -> List[CommGroup]:
    """Candidates are the schedulers two hops away in the scheduler/queue graph."""
    graph = nx.Graph()
    for scheduler, queues in enumerate(access_map):
        graph.add_node(("scheduler", scheduler))
        for queue in queues:
            graph.add_edge(("scheduler", scheduler), ("queue", int(queue)))
    groups = []
    for scheduler in range(len(access_map)):
        reachable = nx.single_source_shortest_path_length(graph, ("scheduler", scheduler), cutoff=2)
        others = sorted(node[1] for node in reachable if node[0] == "scheduler" and node[1] != scheduler)
        groups.append(CommGroup(scheduler, [scheduler] + others))
    return groups


def candidate_table(groups: Sequence[CommGroup]) -> CandidateTable:
    width = max(len(group.candidate_ids) for group in groups)
    indices = np.zeros((len(groups), width), dtype=np.int64)
    mask = np.zeros((len(groups), width), dtype=bool)
    for row, group in enumerate(groups):
        ids = group.candidate_ids
        indices[row, :] = group.owner_id
        indices[row, :len(ids)] = ids
        mask[row, :len(ids)] = True
    return CandidateTable(indices, mask)


# --- parameters ------------------------------------------------------------------------

def _add_dense(store: ParamStore, rng: np.random.Generator, name: str, fan_in: int, fan_out: int,
               scale: float = 1.0) -> None:
    store.add(f"{name}/W", rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out)))
    store.add(f"{name}/b", np.zeros(fan_out))


def init_params(config: ModelConfig, d: int, B: int, seed: int = 0) -> ParamStore:
    """Shared parameters of all five components, used by every scheduler."""
    config.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    L, H = config.latent_dim, config.encoder_hidden

    fan_in = d * (B + 1)
    for layer in range(config.encoder_layers):
        _add_dense(store, rng, f"encoder/hidden{layer}", fan_in, H)
        fan_in = H
    _add_dense(store, rng, "encoder/out", fan_in, 2 * L)

    _add_dense(store, rng, "attention/proj", 2 * L, config.attention_dim)
    store.add("attention/u_g", rng.normal(0.0, 1.0 / np.sqrt(config.attention_dim), size=config.attention_dim))

    _add_dense(store, rng, "policy/hidden", L, config.head_hidden)
    _add_dense(store, rng, "policy/out", config.head_hidden, d, scale=0.01)
    store.add("policy/log_std", np.full(d, config.init_log_std))

    _add_dense(store, rng, "value/hidden", L, config.head_hidden)
    _add_dense(store, rng, "value/out", config.head_hidden, 1)

    _add_dense(store, rng, "decoder/hidden", L, config.head_hidden)
    _add_dense(store, rng, "decoder/out", config.head_hidden, d * (B + 1))
    logger.debug(f"initialised {len(store)} parameter tensors (d={d}, B={B}, L={L})")
    return store


def model_dimensions(store: ParamStore) -> Tuple[int, int, int]:
    """(d, B, latent_dim) implied by the parameter shapes."""
    d = store["policy/log_std"].shape[0]
    observation_width = store["encoder/hidden0/W"].shape[0]
    latent_dim = store["encoder/out/W"].shape[1] // 2
    return d, observation_width // d - 1, latent_dim


def attention_params(store: ParamStore) -> AttentionParams:
    return AttentionParams(store["attention/proj/W"], store["attention/proj/b"], store["attention/u_g"])


# --- batched forward passes ---------------------------------------------------------------

def one_hot_observations(lengths: np.ndarray, B: int) -> np.ndarray:
    """Concatenate one one-hot vector of size B+1 per observed queue."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 0) or np.any(lengths > B):
        message = f"observed lengths must lie in [0, {B}], got {lengths.tolist()}"
        logger.error(message)
        raise ContractError(message)
    encoded = np.eye(B + 1)[lengths]
    return encoded.reshape(*lengths.shape[:-1], lengths.shape[-1] * (B + 1))


def _mlp_head(store: ParamStore, prefix: str, z: Tensor) -> Tensor:
    hidden = nn.tanh(nn.dense(z, store[f"{prefix}/hidden/W"], store[f"{prefix}/hidden/b"]))
    return nn.dense(hidden, store[f"{prefix}/out/W"], store[f"{prefix}/out/b"])


def encoder_forward(store: ParamStore, x) -> Tuple[Tensor, Tensor]:
    """Observation features (N, d*(B+1)) -> message mean and variance (N, L)."""
    h = nn.as_tensor(x)
    layer = 0
    while f"encoder/hidden{layer}/W" in store:
        h = nn.tanh(nn.dense(h, store[f"encoder/hidden{layer}/W"], store[f"encoder/hidden{layer}/b"]))
        layer += 1
    out = nn.dense(h, store["encoder/out/W"], store["encoder/out/b"])
    L = out.shape[-1] // 2
    mu = out[..., :L]
    log_var = nn.clip(out[..., L:], np.log(SIGMA_MIN), np.log(SIGMA_MAX))
    return mu, nn.exp(log_var)


def attention_forward(params: AttentionParams, mu: Tensor, var: Tensor,
                      mask: Optional[np.ndarray] = None) -> Tensor:
    """alpha_k = softmax_k(tanh(W [mu_k, sigma_k] + b) . u_g) over the candidate axis."""
    u = nn.tanh(nn.dense(nn.concat([mu, var], axis=-1), params.W, params.b))
    scores = nn.reduce_sum(u * params.u_g, axis=-1)
    return nn.softmax(scores, axis=-1, mask=mask)


def weighted_poe_forward(mu: Tensor, var: Tensor, alphas, include_prior: bool = True) -> Tuple[Tensor, Tensor]:
    """
    Closed-form weighted product of Gaussian experts along axis -2.

    precision = sum_k alpha_k / var_k (+ 1 for the N(0, I) prior),
    mean = sum_k alpha_k mu_k / var_k / precision.
    """
    alphas = nn.as_tensor(alphas)
    weighted_precision = nn.reshape(alphas, alphas.shape + (1,)) / var
    total = nn.reduce_sum(weighted_precision, axis=-2)
    if include_prior:
        total = total + 1.0
    if np.any(~(total.data > 0)):
        message = "weighted_poe: total precision is zero; at least one expert needs positive weight"
        logger.error(message)
        raise ContractError(message)
    fused_mu = nn.reduce_sum(weighted_precision * mu, axis=-2) / total
    return fused_mu, 1.0 / total


def policy_forward(store: ParamStore, z: Tensor) -> Tuple[Tensor, Tensor]:
    return _mlp_head(store, "policy", z), store["policy/log_std"]


def value_forward(store: ParamStore, z: Tensor) -> Tensor:
    out = _mlp_head(store, "value", z)
    return nn.reshape(out, out.shape[:-1])


def decoder_forward(store: ParamStore, z: Tensor, d: int) -> Tensor:
    out = _mlp_head(store, "decoder", z)
    return nn.reshape(out, out.shape[:-1] + (d, out.shape[-1] // d))


def gaussian_log_prob(x, mean: Tensor, log_std: Tensor) -> Tensor:
    """Log-density of a diagonal Gaussian summed over the last axis."""
    standardized = (nn.as_tensor(x) - mean) / nn.exp(log_std)
    per_dim = nn.square(standardized) * -0.5 - log_std - 0.5 * LOG_2PI
    return nn.reduce_sum(per_dim, axis=-1)


def gaussian_kl(mean_p, log_std_p, mean_q, log_std_q) -> Tensor:
    """KL(p || q) between diagonal Gaussians, summed over the last axis."""
    mean_p, log_std_p = nn.as_tensor(mean_p), nn.as_tensor(log_std_p)
    var_ratio = nn.exp((log_std_p - log_std_q) * 2.0)
    mean_term = nn.square(mean_p - mean_q) / nn.exp(log_std_q * 2.0)
    per_dim = (log_std_q - log_std_p) + (var_ratio + mean_term) * 0.5 - 0.5
    return nn.reduce_sum(per_dim, axis=-1)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return shifted / shifted.sum(axis=-1, keepdims=True)


# --- single-agent operations ---------------------------------------------------------------

def encode(store: ParamStore, observation, B: int) -> GaussianMessage:
    """Message of one scheduler for one ``env.Observation``."""
    features = one_hot_observations(observation.lengths[None, :], B)
    with nn.no_grad():
        mu, var = encoder_forward(store, features)
    return GaussianMessage(observation.scheduler_id, mu.data[0], var.data[0])


def attention_weights(params: AttentionParams, messages: Sequence[GaussianMessage]) -> np.ndarray:
    if not messages:
        raise ContractError("attention_weights needs at least one message")
    mu = np.stack([m.mu for m in messages])[None]
    var = np.stack([m.sigma for m in messages])[None]
    with nn.no_grad():
        return attention_forward(params, nn.Tensor(mu), nn.Tensor(var)).data[0]


def select_messages(alphas: np.ndarray, gamma: float, owner_index: int = 0) -> np.ndarray:
    """Keep candidates with alpha > gamma; the owner's own message always survives."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
    mask = np.asarray(alphas) > gamma
    mask[..., owner_index] = True
    return mask


def weighted_poe(messages: Sequence[GaussianMessage], alphas: Sequence[float],
                 include_prior: bool = True) -> FusedBelief:
    alphas = np.asarray(alphas, dtype=np.float64)
    if len(messages) != alphas.shape[0] or np.any(alphas < 0):
        raise ContractError(f"weighted_poe: need one nonnegative weight per message, got {alphas.tolist()}")
    mu = np.stack([m.mu for m in messages])
    var = np.stack([m.sigma for m in messages])
    with nn.no_grad():
        fused_mu, fused_var = weighted_poe_forward(nn.Tensor(mu), nn.Tensor(var), alphas, include_prior)
    return FusedBelief(fused_mu.data, fused_var.data, alphas > 0, alphas)


def act(store: ParamStore, z: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, float]:
    """Sample pre-softmax logits; returns (raw_logits, fractions, log_prob)."""
    with nn.no_grad():
        mean, log_std = policy_forward(store, nn.Tensor(np.asarray(z)[None]))
        raw = mean.data[0] + np.exp(log_std.data) * rng.standard_normal(mean.shape[-1])
        log_prob = gaussian_log_prob(raw[None], mean, log_std).data[0]
    return raw, softmax_rows(raw), float(log_prob)


def value(store: ParamStore, z: np.ndarray) -> float:
    with nn.no_grad():
        return float(value_forward(store, nn.Tensor(np.asarray(z)[None])).data[0])


def decode(store: ParamStore, z: np.ndarray) -> np.ndarray:
    d, _, _ = model_dimensions(store)
    with nn.no_grad():
        return decoder_forward(store, nn.Tensor(np.asarray(z)[None]), d).data[0]


# --- joint inference over the whole network ---------------------------------------------------

@dataclass
class StepInference:
    message_mu: np.ndarray
    message_var: np.ndarray
    alphas: np.ndarray
    selected: np.ndarray
    fused_mu: np.ndarray
    fused_var: np.ndarray
    noise: np.ndarray
    z: np.ndarray
    raw_logits: np.ndarray
    action_mean: np.ndarray
    log_std: np.ndarray
    fractions: np.ndarray
    log_prob: np.ndarray
    value: np.ndarray
    decoder_logits: Optional[np.ndarray] = None

    def communication_counts(self, table: CandidateTable) -> Tuple[int, int]:
        """(selected non-self messages, candidate non-self messages)."""
        others = table.mask.copy()
        others[:, 0] = False
        return int(np.sum(self.selected & others)), int(np.sum(others))


def fusion_weights(alphas: np.ndarray, table: CandidateTable, mode: FusionMode,
                   gamma: float) -> Tuple[np.ndarray, np.ndarray]:
    """(weights fed to the PoE, selection mask) for a batch of candidate rows."""
    mode = FusionMode(mode)
    if mode is FusionMode.NONE:
        selected = np.zeros_like(table.mask)
        selected[:, 0] = True
        return selected.astype(np.float64), selected
    if mode is FusionMode.FULL:
        return alphas, table.mask.copy()
    selected = select_messages(alphas, gamma) & table.mask
    if mode is FusionMode.SOFT:
        return alphas, selected
    return alphas * selected, selected


def infer(store: ParamStore, observed: np.ndarray, table: CandidateTable, B: int,
          rng: np.random.Generator, mode: FusionMode = FusionMode.SOFT, gamma: float = 0.3,
          with_decoder: bool = False) -> StepInference:
    """Decentralised forward pass of all M schedulers for one epoch."""
    d = observed.shape[-1]
    with nn.no_grad():
        msg_mu, msg_var = encoder_forward(store, one_hot_observations(observed, B))
        cand_mu = nn.Tensor(msg_mu.data[table.indices])
        cand_var = nn.Tensor(msg_var.data[table.indices])
        alphas = attention_forward(attention_params(store), cand_mu, cand_var, table.mask).data
        weights, selected = fusion_weights(alphas, table, mode, gamma)
        fused_mu, fused_var = weighted_poe_forward(cand_mu, cand_var, weights, include_prior=True)
        z, noise = nn.reparam_sample(fused_mu, nn.sqrt(fused_var), rng)
        mean, log_std = policy_forward(store, z)
        raw = mean.data + np.exp(log_std.data) * rng.standard_normal(mean.shape)
        log_prob = gaussian_log_prob(raw, mean, log_std).data
        values = value_forward(store, z).data
        decoded = decoder_forward(store, z, d).data if with_decoder else None
    return StepInference(
        message_mu=msg_mu.data, message_var=msg_var.data, alphas=alphas, selected=selected,
        fused_mu=fused_mu.data, fused_var=fused_var.data, noise=noise, z=z.data,
        raw_logits=raw, action_mean=mean.data, log_std=log_std.data.copy(),
        fractions=softmax_rows(raw), log_prob=log_prob, value=values, decoder_logits=decoded,
    )
