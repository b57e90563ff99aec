"""
backend/config.py
Load RunConfig from flat ``section.field = value`` files plus overrides.

    # comments and blank lines are ignored
    net.depth = 2
    train.epochs = 50
    segment.method = components

Values stay strings until pydantic coerces them; ``none`` maps to None.
"""

import logging
import os
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import ValidationError

from backend.errors import ConfigError
from schemas.config import RunConfig

logger = logging.getLogger(__name__)

# Skip the repository .env inside containers so platform variables win.
if not os.path.exists("/.dockerenv"):
    load_dotenv()

CONFIG_ENV_VAR = "CELLSEG_CONFIG"
RESOLVED_NAME = "config.resolved.txt"

PathLike = Union[str, Path]


def parse_assignment(line: str, where: str = "") -> Tuple[str, str]:
    if "=" not in line:
        raise ConfigError(f"{where}expected 'section.field = value', got '{line}'")
    key, value = (part.strip() for part in line.split("=", 1))
    if key.count(".") != 1 or not all(key.split(".")):
        raise ConfigError(f"{where}key '{key}' must look like section.field")
    return key, value


def read_flat_file(path: PathLike) -> Dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: Dict[str, str] = {}
    for number, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = parse_assignment(line, where=f"{path}:{number}: ")
        values[key] = value
    return values


def _nest(flat: Dict[str, str]) -> Dict[str, Dict[str, Optional[str]]]:
    nested: Dict[str, Dict[str, Optional[str]]] = {}
    for key, value in flat.items():
        section, name = key.split(".")
        nested.setdefault(section, {})[name] = None if value.lower() == "none" else value
    return nested


def build_config(flat: Dict[str, str]) -> RunConfig:
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in exc.errors())
        raise ConfigError(f"invalid configuration: {problems}") from exc


def load_config(path: Optional[PathLike] = None, overrides: Iterable[str] = ()) -> RunConfig:
    """File (explicit path, else $CELLSEG_CONFIG, else defaults) then overrides."""
    path = path or os.getenv(CONFIG_ENV_VAR)
    flat: Dict[str, str] = {}
    if path:
        flat.update(read_flat_file(path))
        logger.info(f"Loaded config from {path}")
    for item in overrides:
        key, value = parse_assignment(item, where="--set: ")
        flat[key] = value
    return build_config(flat)


def _render(value) -> str:
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(config: RunConfig) -> str:
    """Fully resolved config in the flat file format, sections in field order."""
    lines = [f"{section}.{name} = {_render(value)}"
             for section, model in config
             for name, value in model.model_dump().items()]
    return "\n".join(lines) + "\n"


def write_resolved(config: RunConfig, out_dir: PathLike) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / RESOLVED_NAME
    target.write_text(dump_config(config), encoding="utf-8")
    return target
