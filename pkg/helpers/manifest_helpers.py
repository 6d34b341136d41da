# helpers/manifest_helpers.py

import hashlib
import json
import logging
import os
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Type, TypeVar

from pydantic import BaseModel, ValidationError

from config import TOOL_VERSION
from errors import BadRecord, UsageError
from models import ArtifactInfo, RunManifest

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)

MANIFEST_SUFFIX = ".manifest.json"


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    """Write to a temp file in the target directory, then rename over `path`."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp_path, target)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise


def write_json(path: str, payload: Any) -> None:
    if isinstance(payload, BaseModel):
        text = payload.model_dump_json(indent=2)
    else:
        text = json.dumps(payload, indent=2, sort_keys=True)
    atomic_write_text(path, text + "\n")


def write_jsonl(path: str, records: Iterable[BaseModel]) -> int:
    lines = [record.model_dump_json(exclude_none=True) for record in records]
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def read_jsonl(path: str, model_cls: Type[ModelT]) -> List[ModelT]:
    """Blank lines are skipped; any other malformed line is a BadRecord naming its line number."""
    if not os.path.exists(path):
        raise UsageError(f"input file not found: {path}")
    records: List[ModelT] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(model_cls.model_validate_json(line))
            except ValidationError as e:
                first = e.errors()[0]
                raise BadRecord(f"{path}:{line_no}: {first.get('loc')} {first.get('msg')}") from e
    return records


class RunRecorder:
    """Collects inputs and artifacts of one command and writes its RunManifest at the end."""

    def __init__(self, command: str, argv: List[str], config: Dict[str, Any], out_dir: str, seed: Optional[int] = None):
        self.command = command
        self.argv = list(argv)
        self.config = config
        self.out_dir = out_dir
        self.seed = seed
        self.input_digests: Dict[str, str] = {}
        self.artifacts: Dict[str, ArtifactInfo] = {}
        self.started_at = datetime.now(timezone.utc).isoformat()
        self._t0 = time.monotonic()

    def add_input(self, path: str) -> None:
        self.input_digests[str(path)] = sha256_file(path)

    def add_artifact(self, name: str, path: str) -> None:
        self.artifacts[name] = ArtifactInfo(path=str(path), sha256=sha256_file(path))

    def finish(self) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            argv=self.argv,
            config=self.config,
            seed=self.seed,
            input_digests=self.input_digests,
            artifacts=self.artifacts,
            started_at=self.started_at,
            wall_clock_seconds=round(time.monotonic() - self._t0, 3),
            tool_version=TOOL_VERSION,
        )
        path = os.path.join(self.out_dir, f"{self.command}{MANIFEST_SUFFIX}")
        write_json(path, manifest)
        logger.info(f"Manifest: {self.command} run recorded at {path} ({len(self.artifacts)} artifacts).")
        return manifest
