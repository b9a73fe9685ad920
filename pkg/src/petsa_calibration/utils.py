import contextlib
import copy
import hashlib
import os
import tempfile
from collections.abc import Sequence
from pathlib import Path

import platformdirs
import yaml
from loguru import logger

from petsa_calibration.exceptions import UsageError

DATA_DIR_ENV_VAR = "PETSA_DATA_DIR"
DEFAULT_CONFIG_FILEPATH = Path(__file__).resolve().parent / "default_calibration_config.yaml"


def get_data_dir() -> Path:
    return Path(platformdirs.user_data_dir("petsa"))


def resolve_dataset_path(path: os.PathLike | str) -> Path:
    """Resolve a dataset path.

    Relative paths are looked up under ``$PETSA_DATA_DIR`` when it is set, then
    relative to the working directory, then under the user data directory.
    """
    path = Path(path)
    if path.is_absolute():
        return path
    if data_root := os.environ.get(DATA_DIR_ENV_VAR):
        return Path(data_root) / path
    if path.exists():
        return path
    return get_data_dir() / path


def calculate_sha256(filepath: os.PathLike, block_size: int = 65536):
    """Calculates the SHA-256 hash of a file."""
    sha256_hash = hashlib.sha256()
    with open(filepath, "rb") as f:
        for byte_block in iter(lambda: f.read(block_size), b""):
            sha256_hash.update(byte_block)
    return sha256_hash.hexdigest()


def atomic_write_bytes(path: os.PathLike, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    logger.trace(f"Wrote {path}")


def atomic_write_text(path: os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _merge_with_defaults(user_config, default_config: dict) -> dict:
    """Merge default values into user's config"""
    if not isinstance(user_config, dict):
        return user_config
    merged = copy.deepcopy(default_config)
    for key, val in user_config.items():
        if key in merged and isinstance(merged[key], dict):
            merged[key] = _merge_with_defaults(val, merged[key])
        else:
            merged[key] = val
    return merged


def _apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as YAML."""
    config = copy.deepcopy(config)
    for override in overrides:
        dotted, sep, raw_value = override.partition("=")
        section, dot, key = dotted.strip().partition(".")
        if not sep or not dot or not key:
            raise UsageError(f"Override {override!r} is not of the form section.key=value")
        if section not in config or not isinstance(config[section], dict):
            raise UsageError(f"Unknown config section {section!r} in override {override!r}")
        if key not in config[section]:
            raise UsageError(f"Unknown config key {section}.{key}")
        value = yaml.safe_load(raw_value)
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a sign or dot ("1e-3") as strings
            with contextlib.suppress(ValueError):
                value = float(value)
        config[section][key] = value
        logger.debug(f"Config override {section}.{key} = {config[section][key]!r}")
    return config


def _load_config(config_filepath: os.PathLike | None = None, overrides: Sequence[str] = ()) -> dict:
    with open(DEFAULT_CONFIG_FILEPATH) as f:
        default_config = yaml.safe_load(f)
    if config_filepath is None:
        config = default_config
    elif not Path(config_filepath).exists():
        raise UsageError(f"Config file {config_filepath} not found.")
    else:
        with open(config_filepath) as f:
            config = _merge_with_defaults(yaml.safe_load(f) or {}, default_config)
    return _apply_overrides(config, overrides)
