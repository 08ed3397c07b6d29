"""Shim contract acceptance: success, exception, and partial-output
fixture scripts all leave a schema-valid manifest listing exactly the
produced artifacts; seed injection is observed by an echo fixture."""

from __future__ import annotations

import json
import time

import jsonschema

from runshim.manifest import MANIFEST_SCHEMA
from runshim.runner import shim_run

SUCCESS_FIXTURE = """import os
import numpy as np

SEED = 0

os.makedirs("metrics", exist_ok=True)
os.makedirs("figures", exist_ok=True)
np.save("metrics/val_accuracy.npy", np.array([0.5, 0.8]))
np.save("metrics/val_loss.npy", np.array([0.9, 0.4, 0.2]))
with open("figures/summary.png", "wb") as fh:
    fh.write(bytes([137, 80, 78, 71, 13, 10, 26, 10]) + b"img")
"""

EXCEPTION_FIXTURE = """SEED = 0

raise ValueError("fixture failure before any output")
"""

PARTIAL_FIXTURE = """import os
import numpy as np

SEED = 0

os.makedirs("metrics", exist_ok=True)
np.save("metrics/val_loss.npy", np.array([0.7]))
raise RuntimeError("failed after writing one metric")
"""

SEED_ECHO_FIXTURE = """SEED = 0

with open("observed_seed.txt", "w") as fh:
    fh.write(str(SEED))
"""


def run_fixture(tmp_path, name, text, seed=None):
    script = tmp_path / f"{name}.py"
    script.write_text(text)
    workspace = tmp_path / f"{name}_ws"
    workspace.mkdir()
    manifest, status = shim_run(str(script), str(workspace), seed=seed)
    on_disk = json.load(open(workspace / "manifest.json"))
    jsonschema.validate(on_disk, MANIFEST_SCHEMA)
    assert on_disk == manifest.to_dict()
    return on_disk, status, workspace


def test_shim_contract(tmp_path):
    started = time.monotonic()

    success, status, _ws = run_fixture(tmp_path, "success", SUCCESS_FIXTURE)
    assert status == 0
    assert success["exit_class"] == "ok"
    assert success["metrics"] == [
        {"name": "val_accuracy", "path": "metrics/val_accuracy.npy", "length": 2},
        {"name": "val_loss", "path": "metrics/val_loss.npy", "length": 3},
    ]
    assert success["figures"] == ["figures/summary.png"]
    assert success["warnings"] == []

    failed, status, ws = run_fixture(tmp_path, "exception", EXCEPTION_FIXTURE)
    assert status != 0
    assert failed["exit_class"] == "error"
    assert failed["metrics"] == [] and failed["figures"] == []
    stderr_log = open(ws / "stderr.log").read()
    assert "fixture failure before any output" in stderr_log
    assert stderr_log.startswith("Traceback")

    partial, status, _ws = run_fixture(tmp_path, "partial", PARTIAL_FIXTURE)
    assert status != 0
    assert partial["exit_class"] == "error"
    assert partial["metrics"] == [
        {"name": "val_loss", "path": "metrics/val_loss.npy", "length": 1}
    ]
    assert partial["figures"] == []

    _echo, status, ws = run_fixture(tmp_path, "seed_echo", SEED_ECHO_FIXTURE, seed=101)
    assert status == 0
    assert open(ws / "observed_seed.txt").read() == "101"

    elapsed = time.monotonic() - started
    print(f"ACCEPTANCE PASS: shim contract (success/exception/partial + seed echo) "
          f"({elapsed:.2f}s / budget 10s)")
    assert elapsed < 10.0
