"""
Config Service
Strict parsing and canonical emission of problem files, and the
CLI > environment > file > default precedence for run parameters.
"""
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Union
import logging

from pydantic import TypeAdapter, ValidationError

from app.core.config import Settings
from app.core.exceptions import ConfigError, MissingRequired, TypeMismatch, UnknownKey
from app.schemas.config import Command, RunConfig

logger = logging.getLogger(__name__)

LIST_KEYS = {"epsilons", "psi_amplitudes", "active_coords"}
OVERRIDABLE = ("seed", "tol", "threads", "out_dir")

REQUIRED_BY_COMMAND = {
    Command.SOLVE_GEODESIC: ("epsilon",),
    Command.SWEEP_EPS: ("epsilons",),
    Command.VERIFY: ("epsilon", "solution_dir"),
}

_ADAPTERS = {
    name: TypeAdapter(field.annotation)
    for name, field in RunConfig.model_fields.items()
}


def _raw_value(key: str, value: str) -> Any:
    if key in LIST_KEYS:
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def parse_config(text: str) -> RunConfig:
    """Parse ``key = value`` text; the first error is reported with its line number."""
    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            logger.error(f"Line {lineno}: expected 'key = value'")
            raise TypeMismatch(f"line {lineno}: expected 'key = value', got '{line}'", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _ADAPTERS:
            logger.error(f"Line {lineno}: unknown key '{key}'")
            raise UnknownKey(f"line {lineno}: unknown key '{key}'", key=key, line=lineno)
        if key in lines:
            raise ConfigError(
                f"line {lineno}: key '{key}' already set on line {lines[key]}", key=key, line=lineno
            )
        try:
            values[key] = _ADAPTERS[key].validate_python(_raw_value(key, value))
        except ValidationError as e:
            message = e.errors()[0]["msg"]
            logger.error(f"Line {lineno}: bad value for '{key}': {message}")
            raise TypeMismatch(f"line {lineno}: bad value for '{key}': {message}", key=key, line=lineno)
        lines[key] = lineno

    if "command" not in values:
        raise MissingRequired("missing required key 'command'", key="command")
    for key in REQUIRED_BY_COMMAND.get(values["command"], ()):
        if values.get(key) is None:
            raise MissingRequired(
                f"command '{values['command'].value}' requires key '{key}'", key=key
            )

    try:
        return RunConfig(**values)
    except ValidationError as e:
        error = e.errors()[0]
        key = str(error["loc"][0]) if error["loc"] else None
        raise TypeMismatch(
            f"invalid configuration: {error['msg']}", key=key, line=lines.get(key)
        )


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"problem file {path} does not exist")
    return parse_config(path.read_text(encoding="utf-8"))


def _format(value: Any) -> str:
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format(v) for v in value)
    return str(value)


def emit_config(config: RunConfig) -> str:
    """Canonical ``key = value`` lines in field order; unset optional keys are omitted."""
    lines = []
    for name in RunConfig.model_fields:
        value = getattr(config, name)
        if value is None:
            continue
        lines.append(f"{name} = {_format(value)}")
    return "\n".join(lines) + "\n"


def apply_overrides(
    config: RunConfig,
    cli: Optional[Dict[str, Any]] = None,
    env: Optional[Settings] = None,
) -> RunConfig:
    """Layer environment values and then CLI flags over the file configuration."""
    env = env or Settings()
    cli = cli or {}
    update: Dict[str, Any] = {}
    for key in OVERRIDABLE:
        env_value = getattr(env, key.upper())
        if env_value is not None:
            update[key] = env_value
        if cli.get(key) is not None:
            update[key] = cli[key]
    if not update:
        return config
    logger.info(f"Overriding {sorted(update)} from environment/CLI")
    try:
        return RunConfig(**{**config.model_dump(), **update})
    except ValidationError as e:
        error = e.errors()[0]
        raise TypeMismatch(f"invalid override: {error['msg']}", key=str(error["loc"][0]) if error["loc"] else None)
