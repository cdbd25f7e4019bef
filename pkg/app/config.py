"""
Run configuration loading.

Sources, lowest to highest precedence:
    1. RunConfig defaults
    2. config file: `dotted.key = value` lines, `#` comments
    3. environment: LAFR_<DOTTED_KEY with dots as underscores>, e.g. LAFR_STAGE1_BATCH_SIZE
    4. explicit overrides (CLI `--set key=value`)

Values are parsed as JSON when possible (numbers, booleans, lists) and
kept as strings otherwise; pydantic does the final coercion.
"""
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Mapping, Optional, Union

from dotenv import load_dotenv
from pydantic import ValidationError

from app.schemas.config import RunConfig
from app.utils.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "LAFR_"
SNAPSHOT_NAME = "config.resolved.txt"


def flatten(data: Mapping[str, Any], prefix: str = "") -> Dict[str, Any]:
    """Nested dict → {dotted.key: value}"""
    flat: Dict[str, Any] = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(flatten(value, prefix=f"{dotted}."))
        else:
            flat[dotted] = value
    return flat


def unflatten(flat: Mapping[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for dotted, value in flat.items():
        node = nested
        *parents, leaf = dotted.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def known_keys() -> Dict[str, Any]:
    """Every valid dotted key with its default value"""
    return flatten(RunConfig().model_dump())


def parse_value(raw: str) -> Any:
    text = raw.strip()
    if text.lower() in ("none", "null"):
        return None
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def format_value(value: Any) -> str:
    if isinstance(value, str):
        return value
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    values: Dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'dotted.key = value', got {line!r}")
        values[key.strip()] = parse_value(raw)
    return values


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Any]:
    """Collect LAFR_* variables, mapping each back to its dotted key"""
    environ = os.environ if environ is None else environ
    by_env_name = {
        ENV_PREFIX + key.upper().replace(".", "_"): key for key in known_keys()
    }
    values: Dict[str, Any] = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        if name not in by_env_name:
            raise ConfigError(f"Unknown configuration environment variable {name}")
        values[by_env_name[name]] = parse_value(raw)
    return values


def _check_keys(values: Mapping[str, Any], source: str, allowed: Iterable[str]) -> None:
    allowed = set(allowed)
    unknown = sorted(key for key in values if key not in allowed)
    if unknown:
        raise ConfigError(f"Unknown configuration key(s) from {source}: {', '.join(unknown)}")


def build_config(
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
    use_dotenv: bool = True,
) -> RunConfig:
    """
    Resolve a RunConfig from defaults, file, environment and overrides.

    Raises:
        ConfigError: unknown key or a value pydantic rejects
    """
    if use_dotenv and environ is None:
        load_dotenv()

    defaults = known_keys()
    merged: Dict[str, Any] = dict(defaults)

    if config_file is not None:
        path = Path(config_file)
        file_values = parse_config_text(path.read_text(encoding="utf-8"), source=str(path))
        _check_keys(file_values, str(path), defaults)
        merged.update(file_values)

    env_values = env_overrides(environ)
    merged.update(env_values)

    if overrides:
        parsed = {
            key: parse_value(value) if isinstance(value, str) else value
            for key, value in overrides.items()
        }
        _check_keys(parsed, "overrides", defaults)
        merged.update(parsed)

    try:
        return RunConfig.model_validate(unflatten(merged))
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}") from e


def with_overrides(config: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Copy of a resolved config with dotted-key overrides applied"""
    flat = flatten(config.model_dump())
    parsed = {
        key: parse_value(value) if isinstance(value, str) else value
        for key, value in overrides.items()
    }
    _check_keys(parsed, "overrides", flat)
    flat.update(parsed)
    try:
        return RunConfig.model_validate(unflatten(flat))
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration override: {e}") from e


def config_to_text(config: RunConfig) -> str:
    flat = flatten(config.model_dump())
    return "".join(f"{key} = {format_value(flat[key])}\n" for key in sorted(flat))


def write_snapshot(config: RunConfig, directory: Union[str, Path]) -> Path:
    """Write the resolved config next to a run's outputs"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / SNAPSHOT_NAME
    path.write_text(config_to_text(config), encoding="utf-8")
    return path
