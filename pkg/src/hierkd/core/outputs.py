"""Output files that carry the resolved config that produced them.

JSON documents hold it under ``header.config``. CSV tables stay plain and get a
sidecar ``<name>.header.json``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import pandas as pd
from pydantic import ValidationError

from hierkd.config import RunConfig
from hierkd.core.errors import ConfigError

PathLike = Union[str, Path]


def header_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".header.json")


def write_json(path: PathLike, payload: Mapping[str, Any], config: RunConfig) -> None:
    document = {"header": {"config": config.model_dump(mode="json")}, **payload}
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_json(path: PathLike) -> Tuple[Optional[RunConfig], Dict[str, Any]]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read {path}", detail=str(e)) from e
    header = document.pop("header", None) or {}
    return _config_from(header.get("config"), path), document


def write_frame(path: PathLike, frame: pd.DataFrame, config: RunConfig) -> None:
    frame.to_csv(path, index=False)
    header_path(path).write_text(
        json.dumps({"config": config.model_dump(mode="json")}, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def read_frame(path: PathLike) -> Tuple[Optional[RunConfig], pd.DataFrame]:
    frame = pd.read_csv(path)
    sidecar = header_path(path)
    if not sidecar.exists():
        return None, frame
    header = json.loads(sidecar.read_text(encoding="utf-8"))
    return _config_from(header.get("config"), path), frame


def _config_from(raw: Optional[Dict[str, Any]], source: PathLike) -> Optional[RunConfig]:
    if raw is None:
        return None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid config header in {source}", detail=str(e)) from e
