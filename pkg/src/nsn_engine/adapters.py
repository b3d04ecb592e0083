# src/nsn_engine/adapters.py
"""
External detector / trainer processes.

Detector:  <cmd> infer --request <file>
    request {"model", "images": [{"path", "prediction"}], "output_dir"}
    writes one confidence-suffixed label file per image at output_dir/<prediction>, exits 0.
Trainer:   <cmd> train --request <file>
    request {"base_model", "model_role", "train_manifest", "label_provenance_dir",
             "freeze": "except-norm"|"none", "epochs", "alpha", "beta", "lr", "seed", "output_model"}
    writes {"model": <path>} to <request>.result.json, exits 0.
"""

from __future__ import annotations

import json
import logging
import shlex
import subprocess
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

from nsn_engine.errors import ConfigurationError, StageFailure
from nsn_engine.schema_versions import ADAPTER_PROTOCOL_VERSION

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdapterCommand:
    argv: tuple[str, ...]
    timeout: float | None = None

    @classmethod
    def parse(cls, spec: str | Sequence[str], timeout: float | None = None) -> "AdapterCommand":
        argv = shlex.split(spec) if isinstance(spec, str) else list(spec)
        if not argv:
            raise ConfigurationError("adapter command is empty")
        return cls(tuple(str(a) for a in argv), timeout)


@dataclass(frozen=True)
class AdapterRun:
    returncode: int
    stdout: str
    stderr: str
    seconds: float


def write_request(path: Path, payload: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"protocol_version": ADAPTER_PROTOCOL_VERSION, **payload}
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def invoke(command: AdapterCommand, verb: str, request: Path, stage: str) -> AdapterRun:
    argv = [*command.argv, verb, "--request", str(request)]
    logger.info("stage %s: running %s", stage, " ".join(shlex.quote(a) for a in argv))
    t0 = time.perf_counter()
    try:
        r = subprocess.run(argv, capture_output=True, text=True, timeout=command.timeout)
    except FileNotFoundError as e:
        raise StageFailure(stage, f"adapter executable not found: {e}") from e
    except subprocess.TimeoutExpired as e:
        raise StageFailure(stage, f"adapter timed out after {command.timeout}s",
                           str(e.stdout or ""), str(e.stderr or "")) from e
    run = AdapterRun(r.returncode, r.stdout, r.stderr, time.perf_counter() - t0)
    logger.info("stage %s: adapter %s exited %d after %.2fs", stage, verb, run.returncode, run.seconds)
    if run.returncode != 0:
        tail = (run.stderr or run.stdout or "no output").strip()[-500:]
        raise StageFailure(stage, f"adapter {verb} exited {run.returncode}: {tail}", run.stdout, run.stderr)
    return run


def result_path(request: Path) -> Path:
    return request.with_name(request.name + ".result.json")


def read_train_result(request: Path, stage: str, run: AdapterRun) -> Path:
    rp = result_path(request)
    if not rp.exists():
        raise StageFailure(stage, f"trainer wrote no result file {rp.name}", run.stdout, run.stderr)
    try:
        model = Path(json.loads(rp.read_text(encoding="utf-8"))["model"])
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise StageFailure(stage, f"malformed trainer result {rp.name}: {e}", run.stdout, run.stderr) from e
    if not model.exists():
        raise StageFailure(stage, f"trainer reported a model that does not exist: {model}", run.stdout, run.stderr)
    return model
