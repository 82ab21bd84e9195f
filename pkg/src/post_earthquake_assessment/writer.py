"""Write command outputs and the run manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
from dataclasses import InitVar, asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__

logger = logging.getLogger(__name__)

MANIFEST_NAME = "run_manifest.json"


def _default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"cannot serialise {type(value).__name__}")


def write_json(data: dict, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(data, indent=2, ensure_ascii=False, default=_default) + "\n",
        encoding="utf-8",
    )
    logger.info("  Wrote %s", path.name)
    return path


def write_csv(header: list[str], rows: np.ndarray, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, np.atleast_2d(rows), delimiter=",", header=",".join(header),
               comments="", fmt="%.10g")
    logger.info("  Wrote %s (%d rows)", path.name, len(rows))
    return path


def sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _key(path: Path, root: Path | None) -> str:
    path = Path(path).resolve()
    if root is not None and path.is_relative_to(Path(root).resolve()):
        return path.relative_to(Path(root).resolve()).as_posix()
    return Path(os.path.relpath(path)).as_posix()


@dataclass
class RunManifest:
    """Inputs, settings and output hashes of one command run.

    Files are keyed by their path relative to ``input_root`` (inputs) or
    ``output_root`` (outputs), or to the working directory for files outside
    those roots. No timestamps or absolute paths, so repeated runs with the
    same seed and inputs give identical manifests.
    """

    command: str
    seed: int | None
    settings: dict = field(default_factory=dict)
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    versions: dict[str, str] = field(
        default_factory=lambda: {
            "post-earthquake-assessment": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        }
    )

    input_root: InitVar[Path | None] = None
    output_root: InitVar[Path | None] = None

    def __post_init__(self, input_root: Path | None, output_root: Path | None) -> None:
        self._input_root = input_root
        self._output_root = output_root

    def add_input(self, path: Path) -> None:
        self.inputs[_key(path, self._input_root)] = sha256(Path(path))

    def add_output(self, path: Path) -> None:
        self.outputs[_key(path, self._output_root)] = sha256(Path(path))

    def save(self, out_dir: Path) -> Path:
        return write_json(asdict(self), out_dir / MANIFEST_NAME)
