# atvc_lab/experiments.py
"""
Experiment suite: delta_t and agent-count sweeps, the allocation heatmap and
run-directory handling. Every sweep returns a pandas DataFrame whose columns
are documented in SCHEMA.md.
"""

import logging
import os
from dataclasses import replace
from datetime import datetime
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from atvc_lab import atvc, nn
from atvc_lab.atvc import FusionMode
from atvc_lab.baselines import PolicyKind
from atvc_lab.env import EnvConfig
from atvc_lab.errors import ContractError, UnsupportedError
from atvc_lab.nn import ParamStore
from atvc_lab.trainer import check_compatibility, evaluate

logger = logging.getLogger(__name__)

UTILIZATION = 0.9
HEATMAP_STREAM = 3
SWEEP_COLUMNS = ["policy", "episodes", "mean_reward", "drop_rate", "comm_ratio", "decoder_accuracy"]


def make_run_dir(output_dir: str, command: str) -> str:
    """Create ``<output_dir>/<YYYYmmdd-HHMMSS>-<command>``, suffixed if it already exists."""
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    base = os.path.join(output_dir, f"{stamp}-{command}")
    path, suffix = base, 1
    while os.path.exists(path):
        path = f"{base}-{suffix}"
        suffix += 1
    os.makedirs(path)
    logger.info(f"Run directory: {path}")
    return path


def policies_for(store: Optional[ParamStore], policies: Optional[Sequence[PolicyKind]] = None) -> List[PolicyKind]:
    """Requested policies, or every policy the available model supports."""
    if policies is not None:
        return [PolicyKind.parse(p) if isinstance(p, str) else p for p in policies]
    return [kind for kind in PolicyKind if store is not None or not kind.uses_model]


def _sweep(store: Optional[ParamStore], configs: Sequence[EnvConfig], column: str, values: Sequence,
           episodes: int, gamma: float, seed: int, policies: Optional[Sequence[PolicyKind]],
           workers: int, progress: bool) -> pd.DataFrame:
    rows = []
    for kind in policies_for(store, policies):
        for value, config in zip(values, configs):
            result = evaluate(store if kind.uses_model else None, config, episodes, gamma, kind, seed,
                              workers, progress)
            row = result.as_row()
            row[column] = value
            rows.append(row)
            logger.info(f"{kind.value} {column}={value}: drop_rate={result.drop_rate:.4f}")
    columns = ["policy", column] + [c for c in SWEEP_COLUMNS if c != "policy"]
    return pd.DataFrame(rows)[columns]


def sweep_delta_t(store: Optional[ParamStore], env_config: EnvConfig, values: Sequence[float], episodes: int,
                  gamma: float = 0.3, seed: int = 0, policies: Optional[Sequence[PolicyKind]] = None,
                  workers: int = 1, progress: bool = False) -> pd.DataFrame:
    """Drop rate of every policy at each synchronisation interval."""
    configs = [replace(env_config, delta_t=float(value)) for value in values]
    return _sweep(store, configs, "delta_t", list(values), episodes, gamma, seed, policies, workers, progress)


def scaled_env_config(env_config: EnvConfig, agents: int) -> EnvConfig:
    """S = M queues on a ring, with eta chosen so that M * eta / (S * beta) stays at 0.9."""
    queues = agents
    eta = UTILIZATION * env_config.beta * (queues / agents)
    config = replace(env_config, M=agents, S=queues, eta=eta, access_map=None)
    config.validate()
    return config


def sweep_agents(store: Optional[ParamStore], env_config: EnvConfig, values: Sequence[int], episodes: int,
                 gamma: float = 0.3, seed: int = 0, policies: Optional[Sequence[PolicyKind]] = None,
                 workers: int = 1, progress: bool = False) -> pd.DataFrame:
    """Evaluate the once-trained model at several agent counts without retraining."""
    configs = [scaled_env_config(env_config, int(value)) for value in values]
    return _sweep(store, configs, "agents", [int(v) for v in values], episodes, gamma, seed, policies,
                  workers, progress)


def heatmap(store: ParamStore, env_config: EnvConfig, samples: int = 1000, gamma: float = 0.3,
            seed: int = 0) -> np.ndarray:
    """
    P(send to queue 2) of scheduler 0 for every pair of true lengths (b1, b2).

    Observations are fresh. Queues outside scheduler 0's access stay empty;
    the fraction sent to its second queue is averaged over ``samples`` draws
    of the latent and the action.

    Returns:
        (B+1, B+1) array indexed [b1, b2].
    """
    d, B, _ = atvc.model_dimensions(store)
    if d != 2:
        message = f"heatmap is defined for d=2 models only, got d={d}"
        logger.error(message)
        raise UnsupportedError(message)
    if samples < 1:
        raise ContractError(f"heatmap needs samples >= 1, got {samples}")
    check_compatibility(store, env_config)
    access_map = env_config.resolved_access_map()
    table = atvc.candidate_table(atvc.comm_groups(access_map))
    own_queues = access_map[0]
    rng = np.random.default_rng([seed, HEATMAP_STREAM])
    params = atvc.attention_params(store)
    grid = np.zeros((B + 1, B + 1))

    with nn.no_grad():
        for b1 in range(B + 1):
            for b2 in range(B + 1):
                lengths = np.zeros(env_config.S, dtype=np.int64)
                lengths[own_queues] = (b1, b2)
                observed = lengths[access_map]
                mu, var = atvc.encoder_forward(store, atvc.one_hot_observations(observed, B))
                cand_mu = nn.Tensor(mu.data[table.indices[:1]])
                cand_var = nn.Tensor(var.data[table.indices[:1]])
                alphas = atvc.attention_forward(params, cand_mu, cand_var, table.mask[:1]).data
                own_table = atvc.CandidateTable(table.indices[:1], table.mask[:1])
                weights, _ = atvc.fusion_weights(alphas, own_table, FusionMode.THRESHOLD, gamma)
                fused_mu, fused_var = atvc.weighted_poe_forward(cand_mu, cand_var, weights)
                z = fused_mu.data + np.sqrt(fused_var.data) * rng.standard_normal((samples, fused_mu.shape[-1]))
                mean, log_std = atvc.policy_forward(store, nn.Tensor(z))
                raw = mean.data + np.exp(log_std.data) * rng.standard_normal(mean.shape)
                grid[b1, b2] = float(np.mean(atvc.softmax_rows(raw)[:, 1]))
    return grid


def heatmap_frame(grid: np.ndarray) -> pd.DataFrame:
    """Long-format grid: one row per (b1, b2)."""
    b1, b2 = np.meshgrid(np.arange(grid.shape[0]), np.arange(grid.shape[1]), indexing="ij")
    return pd.DataFrame({"b1": b1.reshape(-1), "b2": b2.reshape(-1), "p_queue2": grid.reshape(-1)})


def heatmap_trend(grid: np.ndarray) -> pd.DataFrame:
    """Spearman correlation between b2 and P(send to queue 2), one row per fixed b1."""
    rows = []
    b2 = np.arange(grid.shape[1])
    for b1 in range(grid.shape[0]):
        row = grid[b1]
        rho = float("nan") if np.allclose(row, row[0]) else float(spearmanr(b2, row)[0])
        rows.append({"b1": b1, "spearman": rho})
    return pd.DataFrame(rows)
