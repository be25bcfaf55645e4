"""
CSV and JSON artifact writers.

CSV files carry a header row, ',' separators and '%.16e' floats (17 significant
digits), so identical runs produce byte-identical files. Every write goes to a
temporary sibling first and is moved into place with os.replace.
"""

import csv
import io
import json
import logging
import os
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.16e"
VERSIONED_PACKAGES = ("crn-hierarchy", "numpy", "scipy", "sympy", "pydantic", "python-dotenv")


def format_cell(value) -> str:
    if isinstance(value, (str, bytes)):
        return value if isinstance(value, str) else value.decode("utf-8")
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return FLOAT_FORMAT % float(value)


def _atomic_write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)
    return path


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    """
    Write rows under `header`; numeric cells use FLOAT_FORMAT, strings pass through.

    Args:
        path: Target file
        header: Column names
        rows: Iterable of rows (a 2D numpy array works)

    Returns:
        The written path

    Raises:
        ValueError: a row whose length differs from the header
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(list(header))
    count = 0
    for row in rows:
        row = list(row)
        if len(row) != len(header):
            raise ValueError(f"row {count} has {len(row)} cells, header has {len(header)}")
        writer.writerow([format_cell(v) for v in row])
        count += 1
    path = _atomic_write(path, buffer.getvalue())
    logger.debug("Wrote %s (%d rows)", path, count)
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        # JSON has no inf/nan
        return value if np.isfinite(value) else str(value)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, payload: Dict[str, Any]) -> Path:
    text = json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"
    path = _atomic_write(path, text)
    logger.debug("Wrote %s", path)
    return path


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in VERSIONED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "not installed"
    return versions


def write_metadata(out_dir, state, config_echo: Dict[str, Any]) -> Path:
    """metadata.json: command, config echo, seed, versions, audits and artifacts."""
    payload = {
        "command": state["command"],
        "model": state.get("model"),
        "config_path": state.get("config_path"),
        "config": config_echo,
        "seed": state["seed"],
        "versions": package_versions(),
        "audits": state.get("audits", {}),
        "artifacts": sorted(state.get("artifacts", [])),
        "detailed_balance": state.get("detailed_balance"),
        "error": state.get("error"),
        "error_kind": state.get("error_kind"),
        "messages": state.get("messages", []),
    }
    return write_json(Path(out_dir) / "metadata.json", payload)
