"""Reproducibility manifests and seed derivation for CLI runs.

Every CLI invocation writes ``<output>.manifest.json`` beside each file it
produces, recording the resolved configuration, the seeds actually used,
sha256 digests of every input file, and the toolkit version. Manifests
contain no timestamps or durations: two runs configured identically have
identical manifests, and identical manifests promise identical outputs
(byte-exact for binary formats, value-exact for JSON). The execution-only
``--threads`` knob is deliberately excluded: results do not depend on it.

Each stochastic stage draws its own sub-seed, a sha256 hash of the master
seed and the stage name, so any single stage can be reproduced without
replaying the stages before it.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import __version__
from .errors import IoFailure


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                digest.update(chunk)
    except OSError as exc:
        raise IoFailure(f"cannot digest {path!r}: {exc}") from exc
    return digest.hexdigest()


def derive_seed(master: int, stage: str) -> int:
    """Stable 63-bit sub-seed for one named pipeline stage."""
    blob = hashlib.sha256(f"{master}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(blob[:8], "little") & (2**63 - 1)


def build_manifest(command: str, config: dict, inputs: dict, outputs: list) -> dict:
    return {
        "tool": "knnfuse",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": sha256_file(p)} for name, p in inputs.items()},
        "outputs": [str(o) for o in outputs],
    }


def write_manifests(command: str, config: dict, inputs: dict, outputs: list) -> dict:
    """Write one manifest copy beside every output file; returns the dict."""
    data = build_manifest(command, config, inputs, outputs)
    payload = json.dumps(data, indent=2, sort_keys=True) + "\n"
    for out in outputs:
        target = Path(str(out) + ".manifest.json")
        try:
            target.write_text(payload, encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot write {target}: {exc}") from exc
    return data
