from __future__ import annotations

import copy
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from functools import lru_cache
from pathlib import Path
from typing import Any, Iterable

from pydantic import ValidationError

from errors import ConfigError
from schemas import RunConfig

DEFAULT_CONFIG_PATH = Path(__file__).parent / "data" / "default_run.toml"


@lru_cache(maxsize=1)
def _default_payload() -> dict[str, Any]:
    try:
        with DEFAULT_CONFIG_PATH.open("rb") as handle:
            return tomllib.load(handle)
    except (FileNotFoundError, tomllib.TOMLDecodeError):
        # model defaults carry the same values
        return {}


def _merge(base: dict[str, Any], update: dict[str, Any]) -> dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> tuple[list[str], Any]:
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"Override {text!r} must look like section.field=value")
    try:
        value = tomllib.loads(f"value = {raw.strip()}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.split("."), value


def apply_overrides(payload: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    result = copy.deepcopy(payload)
    for text in overrides:
        path, value = parse_override(text)
        target = result
        for part in path[:-1]:
            node = target.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"Override {text!r}: {part!r} is not a section")
            target = node
        target[path[-1]] = value
    return result


def load_run_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    payload = _default_payload()
    if path is not None:
        try:
            with Path(path).open("rb") as handle:
                payload = _merge(payload, tomllib.load(handle))
        except FileNotFoundError:
            raise ConfigError(f"Config file {path} does not exist") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"Config file {path} is not valid TOML: {exc}") from None
    payload = apply_overrides(payload, overrides)
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"Invalid run configuration: {problems}") from None
