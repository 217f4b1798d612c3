"""Utility functions for seqguard-cli."""

import copy
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

import psutil
import yaml

logger = logging.getLogger(__name__)

DEFAULT_CONFIG: Dict[str, Any] = {
    "model": {
        "embed_dim": 64,
        "layers": 3,
        "heads": 4,
        "ffn_dim": None,  # 4 * embed_dim
        "dropout": 0.1,
        "max_seq_len": 64,
    },
    "train": {
        "epochs": 300,
        "no_mask_epochs": 5,
        "mask_ratio": 0.4,
        "batch_size": 64,
        "learning_rate": 0.001,
        "patience": 10,
        "mask_strategy": "ldms",
        "unk_loss": None,  # current maximum of the loss vector
    },
    "scoring": {"mu": 0.1, "quantile": 0.95, "length_normalize": True},
    "ablation": {"ldms": True, "ttpe": True, "nwrl": True},
    "data": {
        "format": "jsonl",
        "window": 10,
        "stride": 2,  # training and calibration windows overlap
        "timezone": "UTC",
        "duration_cap": 1440,
        "days": 60,
        "noise_rate": 0.05,
        "anomalies_per_category": 50,
        "split": [0.7, 0.1, 0.2],
        "start": "2022-02-28T00:00:00Z",
    },
    "paths": {"output_dir": "seqguard_runs", "run_id": "run"},
    "seed": 42,
}

MASK_STRATEGIES = ("ldms", "none", "random", "topk")


class ConfigError(ValueError):
    """Raised for unknown or invalid configuration keys."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def setup_logging(verbose: bool = False) -> None:
    """Set up logging configuration.

    Args:
        verbose: Enable verbose logging
    """
    log_level = logging.DEBUG if verbose else logging.INFO

    formatter = logging.Formatter(
        "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)

    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)

    console_handler = logging.StreamHandler()
    console_handler.setLevel(log_level)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    # pandas pulls this in and logs thread counts at INFO
    logging.getLogger("numexpr").setLevel(logging.WARNING)


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """Load configuration from file and validate it.

    Args:
        config_path: Path to a YAML or JSON configuration file

    Returns:
        Configuration dictionary merged over the defaults

    Raises:
        ConfigError: If the file holds unknown keys or invalid values
    """
    default_config = copy.deepcopy(DEFAULT_CONFIG)

    if not config_path:
        possible_paths = [
            "seqguard.yaml",
            "seqguard.yml",
            "~/.seqguard.yaml",
            "~/.seqguard.yml",
        ]

        for path in possible_paths:
            expanded_path = Path(path).expanduser()
            if expanded_path.exists():
                config_path = str(expanded_path)
                break

    if not config_path:
        return default_config

    if not os.path.exists(config_path):
        raise FileNotFoundError(f"Config file not found: {config_path}")

    with open(config_path, encoding="utf-8") as f:
        try:
            if config_path.endswith((".yaml", ".yml")):
                user_config = yaml.safe_load(f) or {}
            else:
                user_config = json.load(f)
        except (yaml.YAMLError, json.JSONDecodeError) as e:
            raise ConfigError("<file>", f"could not parse {config_path}: {e}")

    if not isinstance(user_config, dict):
        raise ConfigError("<file>", "top level must be a mapping")

    logger.debug(f"Loaded configuration from {config_path}")
    merged_config = deep_merge(default_config, user_config)
    validate_config(merged_config)
    return merged_config


def deep_merge(
    base_dict: Dict[str, Any], update_dict: Dict[str, Any]
) -> Dict[str, Any]:
    """Deep merge two dictionaries.

    Args:
        base_dict: Base dictionary
        update_dict: Dictionary with updates

    Returns:
        Merged dictionary
    """
    result = base_dict.copy()

    for key, value in update_dict.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = deep_merge(result[key], value)
        else:
            result[key] = value

    return result


def apply_overrides(config: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply ``section.key=value`` overrides to a configuration.

    Values are parsed as YAML scalars, so ``0.2``, ``true`` and ``null`` keep
    their types.

    Args:
        config: Configuration dictionary
        overrides: Override expressions

    Returns:
        New, validated configuration dictionary
    """
    updated = copy.deepcopy(config)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        dotted, raw = item.split("=", 1)
        parts = dotted.strip().split(".")
        node = updated
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(dotted, "unknown key")
            node = node[part]
        node[parts[-1]] = yaml.safe_load(raw)
    validate_config(updated)
    return updated


def _check_keys(config: Dict[str, Any], schema: Dict[str, Any], prefix: str) -> None:
    for key, value in config.items():
        dotted = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(dotted, "unknown key")
        if isinstance(schema[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(dotted, "expected a mapping")
            _check_keys(value, schema[key], f"{dotted}.")


def _require(condition: bool, key: str, message: str) -> None:
    if not condition:
        raise ConfigError(key, message)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _integer(config: Dict[str, Any], dotted: str, optional: bool = False) -> Optional[int]:
    """Check an integer setting and store it back as ``int``."""
    *path, key = dotted.split(".")
    node = config
    for part in path:
        node = node[part]
    value = node[key]
    if value is None and optional:
        return None
    if isinstance(value, float) and value.is_integer():
        value = int(value)
    _require(isinstance(value, int) and not isinstance(value, bool), dotted, "must be an integer")
    node[key] = value
    return value


def _number(config: Dict[str, Any], dotted: str, optional: bool = False) -> Optional[float]:
    """Check a numeric setting and store it back as ``float``."""
    *path, key = dotted.split(".")
    node = config
    for part in path:
        node = node[part]
    value = node[key]
    if value is None and optional:
        return None
    _require(_is_number(value), dotted, "must be a number")
    node[key] = float(value)
    return float(value)


def _flag(config: Dict[str, Any], dotted: str) -> bool:
    section, key = dotted.split(".")
    value = config[section][key]
    _require(isinstance(value, bool), dotted, "must be true or false")
    return value


def validate_config(config: Dict[str, Any]) -> None:
    """Validate a merged configuration.

    Numeric values are type-checked; integer settings given as whole floats
    (``10.0``) are stored back as ``int``.

    Raises:
        ConfigError: Naming the offending key
    """
    _check_keys(config, DEFAULT_CONFIG, "")

    embed_dim = _integer(config, "model.embed_dim")
    _require(embed_dim > 0, "model.embed_dim", "must be positive")
    _require(embed_dim % 2 == 0, "model.embed_dim", "must be even")
    heads = _integer(config, "model.heads")
    _require(heads >= 1, "model.heads", "must be >= 1")
    _require(embed_dim % heads == 0, "model.heads", "must divide model.embed_dim")
    _require(_integer(config, "model.layers") >= 1, "model.layers", "must be >= 1")
    ffn_dim = _integer(config, "model.ffn_dim", optional=True)
    _require(ffn_dim is None or ffn_dim >= 1, "model.ffn_dim", "must be >= 1")
    _require(0.0 <= _number(config, "model.dropout") < 1.0, "model.dropout", "must be in [0, 1)")
    max_seq_len = _integer(config, "model.max_seq_len")
    _require(max_seq_len >= 1, "model.max_seq_len", "must be >= 1")

    train = config["train"]
    _require(
        0.0 <= _number(config, "train.mask_ratio") <= 1.0, "train.mask_ratio", "must be in [0, 1]"
    )
    no_mask_epochs = _integer(config, "train.no_mask_epochs")
    _require(no_mask_epochs >= 0, "train.no_mask_epochs", "must be >= 0")
    _require(_integer(config, "train.patience") >= 1, "train.patience", "must be >= 1")
    _require(_integer(config, "train.epochs") >= 1, "train.epochs", "must be >= 1")
    _require(_integer(config, "train.batch_size") >= 1, "train.batch_size", "must be >= 1")
    _require(_number(config, "train.learning_rate") >= 0.0, "train.learning_rate", "must be >= 0")
    _number(config, "train.unk_loss", optional=True)
    _require(
        train["mask_strategy"] in MASK_STRATEGIES,
        "train.mask_strategy",
        f"must be one of {', '.join(MASK_STRATEGIES)}",
    )
    _require(
        train["mask_strategy"] != "ldms" or no_mask_epochs >= 1,
        "train.no_mask_epochs",
        "must be >= 1 with ldms masking",
    )

    _require(_number(config, "scoring.mu") > 0.0, "scoring.mu", "must be positive")
    _require(
        0.0 < _number(config, "scoring.quantile") <= 1.0, "scoring.quantile", "must be in (0, 1]"
    )
    _flag(config, "scoring.length_normalize")
    for switch in ("ldms", "ttpe", "nwrl"):
        _flag(config, f"ablation.{switch}")

    data = config["data"]
    _require(data["format"] in ("jsonl", "csv"), "data.format", "must be jsonl or csv")
    window = _integer(config, "data.window")
    _require(window >= 1, "data.window", "must be >= 1")
    _require(window <= max_seq_len, "data.window", "must not exceed model.max_seq_len")
    _require(_integer(config, "data.stride") >= 1, "data.stride", "must be >= 1")
    _require(isinstance(data["timezone"], str), "data.timezone", "must be a timezone name")
    _require(_integer(config, "data.duration_cap") >= 0, "data.duration_cap", "must be >= 0")
    _require(_integer(config, "data.days") >= 1, "data.days", "must be >= 1")
    _require(
        0.0 <= _number(config, "data.noise_rate") <= 0.5, "data.noise_rate", "must be in [0, 0.5]"
    )
    _require(
        _integer(config, "data.anomalies_per_category") >= 1,
        "data.anomalies_per_category",
        "must be >= 1",
    )
    split = data["split"]
    _require(
        isinstance(split, (list, tuple))
        and len(split) == 3
        and all(_is_number(x) and x > 0 for x in split),
        "data.split",
        "must be three positive fractions",
    )
    _require(abs(sum(float(x) for x in split) - 1.0) < 1e-6, "data.split", "must sum to 1")
    _require(
        isinstance(data["start"], str)
        or (isinstance(data["start"], int) and not isinstance(data["start"], bool)),
        "data.start",
        "must be an ISO-8601 timestamp or epoch seconds",
    )
    _integer(config, "seed")


def ensure_data_directory(data_dir: str) -> str:
    """Ensure data directory exists.

    Args:
        data_dir: Data directory path

    Returns:
        Absolute path to data directory
    """
    data_path = Path(data_dir).expanduser().resolve()
    data_path.mkdir(parents=True, exist_ok=True)
    return str(data_path)


def format_duration(seconds: float) -> str:
    """Format duration in human-readable format.

    Args:
        seconds: Duration in seconds

    Returns:
        Formatted duration string
    """
    if seconds >= 3600:
        hours = seconds // 3600
        minutes = (seconds % 3600) // 60
        return f"{int(hours)}h {int(minutes)}m"
    elif seconds >= 60:
        minutes = seconds // 60
        secs = seconds % 60
        return f"{int(minutes)}m {int(secs)}s"
    else:
        return f"{seconds:.1f}s"


def worker_count() -> int:
    """Number of worker processes allowed for parallel grid runs.

    ``SEQGUARD_THREADS`` caps the count; otherwise the physical core count is
    used.
    """
    cores = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    env_value = os.environ.get("SEQGUARD_THREADS")
    if env_value:
        try:
            return max(1, min(cores, int(env_value)))
        except ValueError:
            logger.warning(f"Ignoring non-integer SEQGUARD_THREADS={env_value!r}")
    return max(1, cores)


def create_sample_config() -> str:
    """Create a sample configuration file.

    Returns:
        Sample configuration content
    """
    header = "# seqguard configuration\n# Unknown keys are rejected.\n\n"
    return header + yaml.safe_dump(DEFAULT_CONFIG, sort_keys=False)


def save_sample_config(output_path: str = "seqguard.yaml") -> str:
    """Save sample configuration to file.

    Args:
        output_path: Output file path

    Returns:
        Path to saved config file
    """
    with open(output_path, "w", encoding="utf-8") as f:
        f.write(create_sample_config())

    return output_path
