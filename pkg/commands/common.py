"""
commands/common.py
Helpers shared by the subcommands: input discovery and run bookkeeping.
"""

import logging
from pathlib import Path
from typing import Iterable, List

from backend.config import write_resolved
from backend.errors import DataError
from schemas.config import RunConfig

logger = logging.getLogger(__name__)

RASTER_SUFFIXES = (".tif", ".tiff")


def expand_inputs(items: Iterable[str]) -> List[Path]:
    """Files as given; directories expand to their TIFFs in name order."""
    paths: List[Path] = []
    for item in items:
        path = Path(item)
        if path.is_dir():
            paths.extend(sorted(p for p in path.iterdir() if p.suffix.lower() in RASTER_SUFFIXES))
        elif path.is_file():
            paths.append(path)
        else:
            raise DataError(f"input not found: {path}")
    if not paths:
        raise DataError("no input images found")
    return paths


def prepare_out(out_dir: str, config: RunConfig) -> Path:
    """Create the output directory and echo the resolved config into it."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(config, out)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    return out
