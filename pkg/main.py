import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from config_loader import load_config, save_command_snapshot, save_config_snapshot
from atvc_lab.baselines import PolicyKind
from atvc_lab.errors import ConfigurationError, ContractError, NumericError
from atvc_lab.experiments import (heatmap, heatmap_frame, heatmap_trend, make_run_dir, policies_for,
                                  sweep_agents, sweep_delta_t)
from atvc_lab.oracle import ChainSpec, chain_specs_for_fixed_policy, stationary_drop_rate
from atvc_lab.plotting import plot_comm_ratio, plot_heatmap, plot_sweep, plot_training
from atvc_lab.trainer import (BASELINES_FILENAME, METRICS_FILENAME, RunConfig, evaluate, load_model, train)

# Initialize a logger for the main script
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def setup_logging(log_level_str: str = "INFO"):
    """Configures root logger based on string level."""
    numeric_level = getattr(logging, log_level_str.upper(), None)
    if not isinstance(numeric_level, int):
        logging.warning(f"Invalid log level: {log_level_str}. Defaulting to INFO.")
        numeric_level = logging.INFO

    if logging.getLogger().handlers:  # already configured: only adjust the level
        logging.getLogger().setLevel(numeric_level)
    else:
        logging.basicConfig(level=numeric_level,
                            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
                            handlers=[logging.StreamHandler(sys.stdout)])
    logger.debug(f"Root logger configured with level {log_level_str.upper()}.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Train and evaluate communicating schedulers on a queueing network.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default="config.yaml", help="Path to the YAML run configuration.")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one configuration value; may be repeated.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train", parents=[common], help="Train the shared agent model.")
    train_parser.add_argument("--resume", default=None, help="Checkpoint to continue training from.")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="Evaluate one policy or all of them.")
    eval_parser.add_argument("--checkpoint", default=None, help="Trained checkpoint (needed for ATVC policies).")
    eval_parser.add_argument("--policy", default=None,
                             help="JSQ, Random, ATVC, ATVC-FullComm, ATVC-NoComm or all.")
    eval_parser.add_argument("--episodes", type=int, default=None)
    eval_parser.add_argument("--gamma", type=float, default=None, help="Attention threshold at execution.")

    for name, help_text in (("sweep-delta-t", "Drop rate of every policy across delta_t values."),
                            ("sweep-agents", "Drop rate of every policy across agent counts at 90% utilization.")):
        sweep_parser = subparsers.add_parser(name, parents=[common], help=help_text)
        sweep_parser.add_argument("--checkpoint", default=None,
                                  help="Trained checkpoint; without it only JSQ and Random are swept.")
        sweep_parser.add_argument("--episodes", type=int, default=None)

    heatmap_parser = subparsers.add_parser("heatmap", parents=[common], help="Allocation heatmap of a d=2 model.")
    heatmap_parser.add_argument("--checkpoint", required=True)
    heatmap_parser.add_argument("--samples", type=int, default=None)

    oracle_parser = subparsers.add_parser("oracle", parents=[common],
                                          help="Exact stationary drop rates for a fixed-fraction policy.")
    oracle_parser.add_argument("--fractions", default=None,
                               help="YAML list of per-scheduler fractions; uniform when omitted.")
    oracle_parser.add_argument("--arrival-rate", type=float, default=None,
                               help="Analyse one queue with this Poisson rate per epoch instead of the network.")
    oracle_parser.add_argument("--service-rate", type=float, default=None,
                               help="Service rate per epoch of the single queue; defaults to beta * delta_t.")
    oracle_parser.add_argument("--buffer", type=int, default=None,
                               help="Capacity of the single queue; defaults to env.B.")
    return parser


def _load_store(checkpoint: Optional[str], required: bool):
    if checkpoint is None:
        if required:
            raise ConfigurationError("checkpoint", "a trained checkpoint is required for this policy")
        return None
    store, _ = load_model(checkpoint)
    return store


def _parse_policies(name: str) -> List[PolicyKind]:
    if name.lower() == "all":
        return list(PolicyKind)
    try:
        return [PolicyKind.parse(name)]
    except ValueError as e:
        raise ConfigurationError("policy", str(e)) from None


def _write_csv(frame: pd.DataFrame, run_dir: str, filename: str) -> str:
    path = os.path.join(run_dir, filename)
    frame.to_csv(path, index=False)
    logger.info(f"Results written to {path}:\n{frame.to_string(index=False)}")
    return path


def run_train(args, run_config: RunConfig, run_dir: str) -> None:
    result = train(run_config, run_dir, resume_from=args.resume, progress=True)
    metrics_path = os.path.join(run_dir, METRICS_FILENAME)
    plot_training(metrics_path, os.path.join(run_dir, "reward.svg"), os.path.join(run_dir, BASELINES_FILENAME))
    plot_comm_ratio(metrics_path, os.path.join(run_dir, "comm_ratio.svg"))
    logger.info(f"Training finished; checkpoint at {result.checkpoint_path}")


def run_eval(args, run_config: RunConfig, run_dir: str) -> None:
    experiment = run_config.experiment
    policies = _parse_policies(experiment.policy)
    store = _load_store(args.checkpoint, required=any(p.uses_model for p in policies))
    rows = []
    for kind in policies:
        result = evaluate(store if kind.uses_model else None, run_config.env, experiment.eval_episodes,
                          run_config.model.gamma, kind, experiment.seed, experiment.workers, progress=True)
        rows.append(result.as_row())
    _write_csv(pd.DataFrame(rows), run_dir, "eval.csv")


def run_sweep(args, run_config: RunConfig, run_dir: str) -> None:
    experiment = run_config.experiment
    store = _load_store(args.checkpoint, required=False)
    episodes = experiment.eval_episodes
    policies = policies_for(store)
    if args.command == "sweep-delta-t":
        frame = sweep_delta_t(store, run_config.env, experiment.delta_t_values, episodes, run_config.model.gamma,
                              experiment.seed, policies, experiment.workers, progress=True)
        column, filename = "delta_t", "sweep_delta_t.csv"
    else:
        frame = sweep_agents(store, run_config.env, experiment.agent_values, episodes, run_config.model.gamma,
                             experiment.seed, policies, experiment.workers, progress=True)
        column, filename = "agents", "sweep_agents.csv"
    path = _write_csv(frame, run_dir, filename)
    plot_sweep(path, column, os.path.join(run_dir, filename.replace(".csv", ".svg")))


def run_heatmap(args, run_config: RunConfig, run_dir: str) -> None:
    store = _load_store(args.checkpoint, required=True)
    samples = run_config.experiment.heatmap_samples
    grid = heatmap(store, run_config.env, samples, run_config.model.gamma, run_config.experiment.seed)
    path = _write_csv(heatmap_frame(grid), run_dir, "heatmap.csv")
    _write_csv(heatmap_trend(grid), run_dir, "heatmap_trend.csv")
    plot_heatmap(path, os.path.join(run_dir, "heatmap.svg"))


def run_oracle(args, run_config: RunConfig, run_dir: str) -> None:
    env_config = run_config.env
    if args.arrival_rate is not None:
        service_rate = env_config.beta * env_config.delta_t if args.service_rate is None else args.service_rate
        try:
            spec = ChainSpec(env_config.B if args.buffer is None else args.buffer, args.arrival_rate, service_rate)
        except ContractError as e:
            raise ConfigurationError("oracle", str(e)) from None
        frame = pd.DataFrame([{"queue": 0, "arrival_rate": spec.arrival_rate_into_queue,
                               "service_rate": spec.service_rate, "drop_rate": stationary_drop_rate(spec)}])
        _write_csv(frame, run_dir, "oracle.csv")
        return
    if args.fractions is None:
        fractions = np.full((env_config.M, env_config.d), 1.0 / env_config.d)
    else:
        try:
            fractions = np.asarray(yaml.safe_load(args.fractions), dtype=np.float64)
        except (yaml.YAMLError, ValueError, TypeError) as e:
            raise ConfigurationError("fractions", f"cannot parse {args.fractions!r}: {e}") from None
    try:
        specs = chain_specs_for_fixed_policy(env_config, fractions)
    except ContractError as e:
        raise ConfigurationError("fractions", str(e)) from None
    rows = []
    for queue, spec in enumerate(specs):
        rows.append({"queue": queue, "arrival_rate": spec.arrival_rate_into_queue,
                     "service_rate": spec.service_rate, "drop_rate": stationary_drop_rate(spec)})
    frame = pd.DataFrame(rows)
    _write_csv(frame, run_dir, "oracle.csv")
    logger.info(f"Expected drops per epoch over the network: {frame['drop_rate'].sum():.6f}")


def apply_cli_flags(args, run_config: RunConfig) -> RunConfig:
    """Fold command-line flags that shadow configuration keys into the run configuration."""
    experiment, model = run_config.experiment, run_config.model
    if getattr(args, "policy", None) is not None:
        experiment = replace(experiment, policy=args.policy)
    if getattr(args, "episodes", None) is not None:
        experiment = replace(experiment, eval_episodes=args.episodes)
    if getattr(args, "samples", None) is not None:
        experiment = replace(experiment, heatmap_samples=args.samples)
    if getattr(args, "gamma", None) is not None:
        model = replace(model, gamma=args.gamma)
    folded = replace(run_config, experiment=experiment, model=model)
    folded.validate()
    return folded


def _cli_flags(args) -> Dict[str, Any]:
    return {key: value for key, value in vars(args).items() if key not in ("command", "config", "overrides")}


COMMANDS = {
    "train": run_train,
    "eval": run_eval,
    "sweep-delta-t": run_sweep,
    "sweep-agents": run_sweep,
    "heatmap": run_heatmap,
    "oracle": run_oracle,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging("INFO")

    # Load configuration
    try:
        run_config = load_config(args.config, args.overrides)
        setup_logging(run_config.log_level)
        run_config = apply_cli_flags(args, run_config)
    except (FileNotFoundError, yaml.YAMLError, ConfigurationError) as e:
        logger.error(f"Critical error loading configuration: {e}")
        return EXIT_USAGE

    run_dir = make_run_dir(run_config.experiment.output_dir, args.command)
    save_config_snapshot(run_config, run_dir)
    save_command_snapshot(args.command, sys.argv[1:] if argv is None else argv, _cli_flags(args), run_dir)
    logger.info(f"Starting '{args.command}' in {run_dir}")

    try:
        COMMANDS[args.command](args, run_config, run_dir)
    except ConfigurationError as e:
        logger.error(f"Invalid usage: {e}")
        return EXIT_USAGE
    except NumericError as e:
        logger.error(f"Aborted on non-finite numerics: {e}. Diagnostics: {e.diagnostics_path}")
        return EXIT_NUMERIC
    except Exception as e:
        logger.error(f"Error during '{args.command}': {e}", exc_info=True)
        return EXIT_FAILURE

    logger.info("Processing finished.")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
