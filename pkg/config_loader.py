import yaml
import logging
import os
from dataclasses import asdict
from typing import Any, Dict, List, Optional, Sequence, TypedDict, Union, get_args, get_origin, get_type_hints

from atvc_lab.atvc import ModelConfig
from atvc_lab.env import EnvConfig
from atvc_lab.errors import ConfigurationError
from atvc_lab.trainer import ExperimentConfig, PPOConfig, RunConfig

logger = logging.getLogger(__name__)

# TypedDicts describe every section of the YAML file. Their annotations double
# as the key/type schema used to reject unknown keys and coerce values.

class EnvSection(TypedDict, total=False):
    M: int
    S: int
    d: int
    eta: float
    beta: float
    B: int
    delta_t: float
    episode_len: int
    p_stale: float
    access_map: Optional[List[List[int]]]
    seed: int

class PPOSection(TypedDict, total=False):
    lambda_gae: float
    kl_init_coeff: float
    train_batch: int
    minibatch: int
    lr: float
    clip: float
    value_clip: float
    kappa: float
    beta_kl: float
    discount: float
    epochs_per_batch: int
    kl_target: float
    value_coeff: float
    episodes_per_iteration: int
    rollout_workers: int
    reward_scale: float

class ModelSection(TypedDict, total=False):
    latent_dim: int
    encoder_hidden: int
    encoder_layers: int
    head_hidden: int
    attention_dim: int
    gamma: float
    init_log_std: float

class ExperimentSection(TypedDict, total=False):
    seed: int
    iterations: int
    eval_episodes: int
    baseline_episodes: int
    output_dir: str
    checkpoint_every: int
    delta_t_values: List[float]
    agent_values: List[int]
    heatmap_samples: int
    workers: int
    policy: str

class SettingsSection(TypedDict, total=False):
    log_level: str

class AppConfig(TypedDict, total=False):
    env: EnvSection
    ppo: PPOSection
    model: ModelSection
    experiment: ExperimentSection
    settings: SettingsSection

SECTION_TYPES = {
    "env": EnvSection,
    "ppo": PPOSection,
    "model": ModelSection,
    "experiment": ExperimentSection,
    "settings": SettingsSection,
}
REQUIRED_SECTIONS = ["env", "ppo", "model", "experiment"]

DEFAULT_CONFIG_FILE = "config.yaml"
SNAPSHOT_FILENAME = "config.yaml"
COMMAND_FILENAME = "command.yaml"


def _coerce(value: Any, hint: Any, field: str) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        if value is None:
            return None
        inner = [arg for arg in get_args(hint) if arg is not type(None)][0]
        return _coerce(value, inner, field)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(field, f"expected a list, got {value!r}")
        (inner,) = get_args(hint)
        return [_coerce(item, inner, f"{field}[{i}]") for i, item in enumerate(value)]
    if hint in (int, float) and isinstance(value, str):
        # PyYAML reads exponent forms such as 1e-5 as strings
        try:
            value = float(value)
        except ValueError:
            raise ConfigurationError(field, f"expected a number, got {value!r}") from None
    if hint is int:
        if isinstance(value, bool) or not (
                isinstance(value, int) or (isinstance(value, float) and value.is_integer())):
            raise ConfigurationError(field, f"expected an integer, got {value!r}")
        return int(value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(field, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, (str, int, float)) or isinstance(value, bool):
            raise ConfigurationError(field, f"expected a string, got {value!r}")
        return str(value)
    raise ConfigurationError(field, f"unsupported type {hint}")


def parse_override(override: str) -> Sequence[Any]:
    """Split ``section.key=value``; the value is parsed as YAML."""
    if "=" not in override:
        raise ConfigurationError(override, "override must look like section.key=value")
    path, text = override.split("=", 1)
    if path.count(".") != 1:
        raise ConfigurationError(path, "override key must look like section.key")
    section, key = path.strip().split(".")
    try:
        value = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(path, f"cannot parse override value {text!r}: {e}") from None
    return section, key, value


def apply_overrides(raw_config: Dict[str, Any], overrides: Optional[Sequence[str]]) -> Dict[str, Any]:
    for override in overrides or []:
        section, key, value = parse_override(override)
        if section not in SECTION_TYPES:
            msg = f"Unknown configuration section '{section}' in override '{override}'."
            logger.error(msg)
            raise ConfigurationError(section, msg)
        raw_config.setdefault(section, {})
        raw_config[section][key] = value
        logger.info(f"Override applied: {section}.{key}={value!r}")
    return raw_config


def validate_sections(raw_config: Dict[str, Any], source: str) -> AppConfig:
    """Reject unknown sections/keys, require the four main sections and coerce every value."""
    for section in raw_config:
        if section not in SECTION_TYPES:
            msg = f"Unknown configuration section '{section}' in {source}."
            logger.error(msg)
            raise ConfigurationError(section, msg)
    for section in REQUIRED_SECTIONS:
        if section not in raw_config:
            msg = f"Missing essential configuration section '{section}' in {source}."
            logger.error(msg)
            raise ConfigurationError(section, msg)
    config: Dict[str, Dict[str, Any]] = {}
    for section, values in raw_config.items():
        if values is None:
            values = {}
        if not isinstance(values, dict):
            msg = f"Configuration section '{section}' must be a mapping in {source}."
            logger.error(msg)
            raise ConfigurationError(section, msg)
        hints = get_type_hints(SECTION_TYPES[section])
        coerced = {}
        for key, value in values.items():
            if key not in hints:
                msg = f"Unknown key '{key}' in section '{section}' of {source}."
                logger.error(msg)
                raise ConfigurationError(f"{section}.{key}", msg)
            coerced[key] = _coerce(value, hints[key], f"{section}.{key}")
        config[section] = coerced
    if "seed" not in config["experiment"]:
        msg = f"experiment.seed is mandatory in {source}."
        logger.error(msg)
        raise ConfigurationError("experiment.seed", msg)
    return AppConfig(**config)  # type: ignore


def build_run_config(config: AppConfig) -> RunConfig:
    run_config = RunConfig(
        env=EnvConfig(**config["env"]),
        ppo=PPOConfig(**config["ppo"]),
        model=ModelConfig(**config["model"]),
        experiment=ExperimentConfig(**config["experiment"]),
        log_level=config.get("settings", {}).get("log_level", "INFO"),
    )
    run_config.validate()
    return run_config


def apply_log_level(log_level_str: str) -> None:
    log_level_str = log_level_str.upper()
    if hasattr(logging, log_level_str) and isinstance(getattr(logging, log_level_str), int):
        logging.getLogger().setLevel(getattr(logging, log_level_str))
        logger.info(f"Root logger level set to {log_level_str} from config.")
    else:
        logger.warning(f"Invalid log_level '{log_level_str}' in config. Using default INFO.")
        logging.getLogger().setLevel(logging.INFO)


def load_config(config_path: str = DEFAULT_CONFIG_FILE, overrides: Optional[Sequence[str]] = None) -> RunConfig:
    """
    Loads the run configuration from a YAML file.

    Args:
        config_path (str): Path to the YAML configuration file.
        overrides: ``section.key=value`` strings applied before validation.

    Returns:
        RunConfig: the validated configuration.

    Raises:
        FileNotFoundError: If the config file is not found.
        yaml.YAMLError: If there's an error parsing the YAML file.
        ConfigurationError: If sections or keys are missing, unknown or invalid.
    """
    logger.info(f"Attempting to load configuration from: {config_path}")
    try:
        with open(config_path, 'r', encoding='utf-8') as f:
            raw_config = yaml.safe_load(f)
    except FileNotFoundError:
        logger.error(f"Configuration file not found: {config_path}")
        raise
    except yaml.YAMLError as e:
        logger.error(f"Error parsing YAML configuration file {config_path}: {e}")
        raise

    if not raw_config or not isinstance(raw_config, dict):
        logger.error(f"Configuration file {config_path} is empty or invalid.")
        raise ConfigurationError(config_path, "configuration file is empty or invalid")

    raw_config = apply_overrides(raw_config, overrides)
    run_config = build_run_config(validate_sections(raw_config, config_path))
    logger.info(f"Configuration loaded successfully from {config_path}.")
    apply_log_level(run_config.log_level)
    return run_config


def config_as_dict(run_config: RunConfig) -> AppConfig:
    return AppConfig(
        env=asdict(run_config.env),
        ppo=asdict(run_config.ppo),
        model=asdict(run_config.model),
        experiment=asdict(run_config.experiment),
        settings={"log_level": run_config.log_level},
    )


def save_config_snapshot(run_config: RunConfig, run_dir: str) -> str:
    """Write the fully resolved configuration (defaults and overrides included) into ``run_dir``."""
    path = os.path.join(run_dir, SNAPSHOT_FILENAME)
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(dict(config_as_dict(run_config)), f, sort_keys=False)
    logger.info(f"Configuration snapshot written to {path}")
    return path


def save_command_snapshot(command: str, argv: Sequence[str], flags: Dict[str, Any], run_dir: str) -> str:
    """Write the invoked command, its argv and the parsed command-line flags into ``run_dir``."""
    path = os.path.join(run_dir, COMMAND_FILENAME)
    record = {"command": command, "argv": list(argv), "flags": dict(flags)}
    with open(path, 'w', encoding='utf-8') as f:
        yaml.safe_dump(record, f, sort_keys=False)
    logger.info(f"Command snapshot written to {path}")
    return path
