"""Per-command run manifests: hashes that make pipelines refuse stale inputs.

Every pipeline command writes ``<workdir>/<command>.manifest.json`` when it
finishes: the configuration-section hashes it ran under, the hashes of the
files it read and wrote, the tool version, and wall-clock timing. A
downstream command checks the manifests of the commands whose artifacts it
consumes and refuses to run when the recorded section hashes disagree with
its own configuration, unless told to proceed anyway. Timing lives here and
only here, so the artifacts themselves stay replay-exact.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .errors import ConfigError, DataContractError

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1

# Which config sections each command's behavior depends on. A consumer
# requires agreement on exactly the producer's sections: anything else may
# legitimately differ (e.g. re-evaluating one dataset under several scoring
# configurations).
COMMAND_SECTIONS: dict[str, tuple[str, ...]] = {
    "gen-data": ("data",),
    "build-dict": ("data", "dictionary"),
    "train": ("data", "dictionary", "training"),
    "index": ("data", "dictionary", "training", "index"),
    "eval": ("data", "dictionary", "training", "index", "scoring"),
}


def sha256_file(path: str | os.PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    command: str
    tool_version: str
    config: dict[str, str]
    inputs: dict[str, str] = field(default_factory=dict)
    artifacts: dict[str, str] = field(default_factory=dict)
    timing_seconds: float = 0.0
    manifest_version: int = MANIFEST_VERSION


def write_manifest(path: str | os.PathLike, manifest: RunManifest) -> None:
    """Serialize atomically so an interrupted run never leaves a half manifest."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(asdict(manifest), fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def read_manifest(path: str | os.PathLike) -> RunManifest:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise DataContractError(f"manifest {path} is not valid JSON: {err}") from None
    if not isinstance(doc, dict):
        raise DataContractError(f"manifest {path} must be a JSON object")
    version = doc.get("manifest_version")
    if version != MANIFEST_VERSION:
        raise DataContractError(
            f"manifest {path} has unsupported version {version!r}")
    try:
        return RunManifest(**doc)
    except TypeError as err:
        raise DataContractError(f"manifest {path} is malformed: {err}") from None


def check_upstream(workdir_manifest: Path, upstream_command: str,
                   current_hashes: Mapping[str, str],
                   allow_mismatch: bool) -> None:
    """Refuse to consume artifacts built under a different configuration.

    Missing manifests pass silently (hand-placed artifacts carry no claim to
    verify); present ones must agree with the current configuration on every
    section the upstream command depends on.
    """
    if not workdir_manifest.is_file():
        return
    recorded = read_manifest(workdir_manifest)
    mismatched = [
        section for section in COMMAND_SECTIONS[upstream_command]
        if recorded.config.get(section) != current_hashes.get(section)
    ]
    if not mismatched:
        return
    detail = ", ".join(
        f"{s}: recorded {recorded.config.get(s, 'none')[:12]} vs "
        f"current {current_hashes.get(s, 'none')[:12]}" for s in mismatched)
    message = (f"artifacts from '{upstream_command}' were built under a "
               f"different configuration ({detail}); rerun the upstream "
               f"command or pass --allow-hash-mismatch to proceed anyway")
    if allow_mismatch:
        logger.warning("%s (proceeding as requested)", message)
        return
    raise ConfigError(message)


def hash_files(paths: Sequence[Path], root: Path) -> dict[str, str]:
    """Map workdir-relative names to content hashes, in sorted-name order."""
    out: dict[str, str] = {}
    for path in sorted(paths, key=lambda p: str(p)):
        name = os.path.relpath(path, root)
        out[name] = sha256_file(path)
    return out
