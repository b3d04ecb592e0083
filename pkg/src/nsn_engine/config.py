# src/nsn_engine/config.py
"""
Frozen defaults and global option resolution.

Constants (frozen):
  - difficulty: tau_ts = 16x16 px^2, tau_lc = 10, tau_bc = 10, background factor 1.5
  - curriculum: tau_min = 0.25 (detector default confidence cut), tau_max = 0.75
  - augmentation: J = 3 pastes, 25 placement retries, overlap IoU limit 0.3
  - training: 30 epochs per adaptation period, 50 for source training,
    lr 0.002 adaptive / 0.01 source, alpha = beta = 1.0

Precedence for global options: explicit flag > config file > environment > default.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from nsn_engine.errors import ConfigurationError

DEFAULT_TAU_TS = 256.0
DEFAULT_TAU_LC = 10.0
DEFAULT_TAU_BC = 10.0
DEFAULT_BG_FACTOR = 1.5

DEFAULT_TAU_MIN = 0.25
DEFAULT_TAU_MAX = 0.75

DEFAULT_PASTES = 3
DEFAULT_RETRIES = 25
DEFAULT_OVERLAP_IOU = 0.3

DEFAULT_EPOCHS = 30
DEFAULT_SOURCE_EPOCHS = 50
DEFAULT_LR_ADAPT = 0.002
DEFAULT_LR_SOURCE = 0.01
DEFAULT_ALPHA = 1.0
DEFAULT_BETA = 1.0

DEFAULT_CG_TOL = 1e-4
DEFAULT_IOU_THRESHOLD = 0.5
CROP_SOURCE_MIN_WIDTH = 50

DEFAULT_SEED = 0
DEFAULT_JOBS = 1
DEFAULT_WORKDIR = "nsn_work"

ENV_WORKDIR = "NSN_WORKDIR"
ENV_JOBS = "NSN_JOBS"
ENV_SEED = "NSN_SEED"


@dataclass(frozen=True)
class GlobalOptions:
    config: Path | None
    seed: int
    verbosity: int
    jobs: int
    workdir: Path

    def __post_init__(self) -> None:
        if self.jobs < 1:
            raise ConfigurationError("jobs must be >= 1")
        if self.verbosity < 0:
            raise ConfigurationError("verbosity must be >= 0")


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {p} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {p} must hold a JSON object")
    return data


def _env_int(environ: Mapping[str, str], name: str) -> int | None:
    raw = environ.get(name)
    if raw is None or raw.strip() == "":
        return None
    try:
        return int(raw)
    except ValueError as e:
        raise ConfigurationError(f"{name} must be an integer, got {raw!r}") from e


def resolve_global_options(
    *,
    config: str | Path | None = None,
    seed: int | None = None,
    verbosity: int | None = None,
    jobs: int | None = None,
    workdir: str | Path | None = None,
    environ: Mapping[str, str] | None = None,
) -> GlobalOptions:
    env = os.environ if environ is None else environ
    file_cfg = load_config_file(config)

    def pick(flag: Any, key: str, env_value: Any, default: Any) -> Any:
        if flag is not None:
            return flag
        if key in file_cfg and file_cfg[key] is not None:
            return file_cfg[key]
        if env_value is not None:
            return env_value
        return default

    return GlobalOptions(
        config=Path(config) if config is not None else None,
        seed=int(pick(seed, "seed", _env_int(env, ENV_SEED), DEFAULT_SEED)),
        verbosity=int(pick(verbosity, "verbosity", None, 0)),
        jobs=int(pick(jobs, "jobs", _env_int(env, ENV_JOBS), DEFAULT_JOBS)),
        workdir=Path(pick(workdir, "workdir", env.get(ENV_WORKDIR) or None, DEFAULT_WORKDIR)),
    )
