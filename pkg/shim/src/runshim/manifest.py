"""Artifact manifest: what one experiment execution left behind.

Field names are bit-exact with what the orchestrator's executor expects:
metrics (name/path/length triples), figures, warnings, exit_class. Metric
lengths come from parsing the NPY header directly, so the shim needs no
numpy at runtime.
"""

from __future__ import annotations

import ast
import json
import math
import os
import struct
from dataclasses import dataclass, field

NPY_MAGIC = b"\x93NUMPY"

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".gif", ".svg", ".pdf")

EXIT_OK = "ok"
EXIT_ERROR = "error"

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["metrics", "figures", "warnings", "exit_class"],
    "additionalProperties": False,
    "properties": {
        "metrics": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "path", "length"],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "path": {"type": "string", "minLength": 1},
                    "length": {"type": "integer", "minimum": 0},
                },
            },
        },
        "figures": {"type": "array", "items": {"type": "string", "minLength": 1}},
        "warnings": {"type": "array", "items": {"type": "string"}},
        "exit_class": {"enum": [EXIT_OK, EXIT_ERROR]},
    },
}


@dataclass
class ShimManifest:
    metrics: list[dict] = field(default_factory=list)
    figures: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    exit_class: str = EXIT_OK

    def to_dict(self) -> dict:
        return {
            "metrics": self.metrics,
            "figures": self.figures,
            "warnings": self.warnings,
            "exit_class": self.exit_class,
        }

    def write(self, workspace: str) -> str:
        path = os.path.join(workspace, "manifest.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def npy_array_length(path: str) -> int:
    """Flat element count of an NPY file, from its header alone.

    Raises ValueError when the file is not a well-formed NPY array.
    """
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != NPY_MAGIC:
            raise ValueError("bad NPY magic")
        version = fh.read(2)
        if len(version) != 2:
            raise ValueError("truncated NPY version")
        major = version[0]
        if major == 1:
            raw = fh.read(2)
            if len(raw) != 2:
                raise ValueError("truncated NPY header length")
            (header_len,) = struct.unpack("<H", raw)
        else:
            raw = fh.read(4)
            if len(raw) != 4:
                raise ValueError("truncated NPY header length")
            (header_len,) = struct.unpack("<I", raw)
        header = fh.read(header_len)
        if len(header) != header_len:
            raise ValueError("truncated NPY header")
    try:
        meta = ast.literal_eval(header.decode("latin1").strip())
        shape = meta["shape"]
    except (ValueError, SyntaxError, KeyError, TypeError) as exc:
        raise ValueError(f"unparseable NPY header: {exc}") from exc
    if not isinstance(shape, tuple):
        raise ValueError("NPY shape is not a tuple")
    return int(math.prod(shape)) if shape else 1


def scan_workspace(workspace: str, exit_class: str) -> ShimManifest:
    """Census of metrics/ and figures/ after the script finished."""
    manifest = ShimManifest(exit_class=exit_class)
    metrics_dir = os.path.join(workspace, "metrics")
    if os.path.isdir(metrics_dir):
        for name in sorted(os.listdir(metrics_dir)):
            if not name.endswith(".npy"):
                continue
            full = os.path.join(metrics_dir, name)
            try:
                length = npy_array_length(full)
            except (OSError, ValueError) as exc:
                manifest.warnings.append(f"unparseable metric file metrics/{name}: {exc}")
                continue
            manifest.metrics.append(
                {"name": name[: -len(".npy")], "path": f"metrics/{name}", "length": length}
            )
    figures_dir = os.path.join(workspace, "figures")
    if os.path.isdir(figures_dir):
        manifest.figures = [
            f"figures/{name}"
            for name in sorted(os.listdir(figures_dir))
            if name.lower().endswith(IMAGE_EXTENSIONS)
        ]
    return manifest
