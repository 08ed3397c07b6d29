from __future__ import annotations

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from runshim.manifest import EXIT_ERROR, EXIT_OK, npy_array_length, scan_workspace
from runshim.runner import inject_seed, shim_run

SUCCESS_SCRIPT = """import os
import numpy as np

SEED = 0

os.makedirs("metrics", exist_ok=True)
os.makedirs("figures", exist_ok=True)
np.save("metrics/val_loss.npy", np.array([0.9, 0.5, 0.4]))
with open("figures/plot.png", "wb") as fh:
    fh.write(bytes([137, 80, 78, 71, 13, 10, 26, 10]) + b"payload")
print("experiment ok")
"""

SEED_ECHO_SCRIPT = """SEED = 0

with open("observed_seed.txt", "w") as fh:
    fh.write(str(SEED))
import os
os.makedirs("metrics", exist_ok=True)
import numpy as np
np.save("metrics/seed_value.npy", np.array([float(SEED)]))
"""


def write_script(tmp_path, text, name="script.py") -> str:
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def make_workspace(tmp_path, name="ws") -> str:
    workspace = tmp_path / name
    workspace.mkdir()
    return str(workspace)


class TestSeedInjection:
    def test_replaces_existing_line(self):
        assert inject_seed("SEED = 0\nx = SEED\n", 101) == "SEED = 101\nx = SEED\n"

    def test_inserts_when_absent(self):
        assert inject_seed("x = 1\n", 7).startswith("SEED = 7\n")

    def test_only_first_line_rewritten(self):
        text = "SEED = 0\nother = 'SEED = 9'\n"
        assert inject_seed(text, 3).count("SEED = 3") == 1

    def test_seed_observed_by_running_script(self, tmp_path):
        script = write_script(tmp_path, SEED_ECHO_SCRIPT)
        workspace = make_workspace(tmp_path)
        manifest, status = shim_run(script, workspace, seed=101)
        assert status == 0
        assert open(os.path.join(workspace, "observed_seed.txt")).read() == "101"
        assert manifest.metrics[0]["name"] == "seed_value"


class TestNpyHeader:
    def test_length_matches_numpy(self, tmp_path):
        for shape in [(3,), (2, 4), (5, 1, 2), ()]:
            path = tmp_path / "a.npy"
            np.save(path, np.zeros(shape))
            expected = int(np.zeros(shape).reshape(-1).shape[0])
            assert npy_array_length(str(path)) == expected

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.npy"
        path.write_bytes(b"not an npy file")
        with pytest.raises(ValueError):
            npy_array_length(str(path))

    def test_truncated_header_rejected(self, tmp_path):
        path = tmp_path / "trunc.npy"
        path.write_bytes(b"\x93NUMPY\x01")
        with pytest.raises(ValueError):
            npy_array_length(str(path))


class TestScan:
    def test_corrupt_metric_becomes_warning(self, tmp_path):
        workspace = make_workspace(tmp_path)
        metrics = os.path.join(workspace, "metrics")
        os.makedirs(metrics)
        np.save(os.path.join(metrics, "good.npy"), np.array([1.0]))
        with open(os.path.join(metrics, "broken.npy"), "wb") as fh:
            fh.write(b"\x93NUMPYgarbage")
        manifest = scan_workspace(workspace, EXIT_OK)
        assert [m["name"] for m in manifest.metrics] == ["good"]
        assert any("broken.npy" in w for w in manifest.warnings)

    def test_non_image_files_ignored_in_figures(self, tmp_path):
        workspace = make_workspace(tmp_path)
        figures = os.path.join(workspace, "figures")
        os.makedirs(figures)
        open(os.path.join(figures, "plot.png"), "wb").write(b"x")
        open(os.path.join(figures, "notes.txt"), "w").write("x")
        manifest = scan_workspace(workspace, EXIT_OK)
        assert manifest.figures == ["figures/plot.png"]


class TestShimRun:
    def test_missing_workspace_raises(self, tmp_path):
        script = write_script(tmp_path, SUCCESS_SCRIPT)
        with pytest.raises(FileNotFoundError):
            shim_run(script, str(tmp_path / "missing"))

    def test_missing_script_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            shim_run(str(tmp_path / "absent.py"), make_workspace(tmp_path))

    def test_system_exit_zero_is_ok(self, tmp_path):
        script = write_script(
            tmp_path,
            "import os\nimport numpy as np\nos.makedirs('metrics', exist_ok=True)\n"
            "np.save('metrics/m.npy', np.array([1.0]))\nraise SystemExit(0)\n",
        )
        manifest, status = shim_run(script, make_workspace(tmp_path))
        assert status == 0
        assert manifest.exit_class == EXIT_OK

    def test_nonzero_system_exit_is_error(self, tmp_path):
        script = write_script(tmp_path, "raise SystemExit(3)\n")
        workspace = make_workspace(tmp_path)
        manifest, status = shim_run(script, workspace)
        assert status == 3
        assert manifest.exit_class == EXIT_ERROR

    def test_non_interference_no_extra_artifacts(self, tmp_path):
        script = write_script(tmp_path, SUCCESS_SCRIPT)
        workspace = make_workspace(tmp_path)
        manifest, _ = shim_run(script, workspace)
        assert [m["path"] for m in manifest.metrics] == ["metrics/val_loss.npy"]
        assert manifest.figures == ["figures/plot.png"]
        produced = set()
        for root, _dirs, files in os.walk(workspace):
            for name in files:
                produced.add(os.path.relpath(os.path.join(root, name), workspace))
        assert produced == {
            "script.py",
            "manifest.json",
            "metrics/val_loss.npy",
            "figures/plot.png",
        }

    def test_cwd_restored_after_run(self, tmp_path):
        script = write_script(tmp_path, "raise ValueError('x')\n")
        before = os.getcwd()
        shim_run(script, make_workspace(tmp_path))
        assert os.getcwd() == before


class TestCli:
    def test_module_invocation_writes_manifest(self, tmp_path):
        script = write_script(tmp_path, SUCCESS_SCRIPT)
        workspace = make_workspace(tmp_path)
        result = subprocess.run(
            [sys.executable, "-m", "runshim", script, "--workspace", workspace],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0
        assert "experiment ok" in result.stdout
        manifest = json.load(open(os.path.join(workspace, "manifest.json")))
        assert manifest["exit_class"] == "ok"

    def test_cli_seed_flag(self, tmp_path):
        script = write_script(tmp_path, SEED_ECHO_SCRIPT)
        workspace = make_workspace(tmp_path)
        result = subprocess.run(
            [sys.executable, "-m", "runshim", script, "--workspace", workspace, "--seed", "44"],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 0
        assert open(os.path.join(workspace, "observed_seed.txt")).read() == "44"

    def test_missing_workspace_is_usage_error(self, tmp_path):
        script = write_script(tmp_path, SUCCESS_SCRIPT)
        result = subprocess.run(
            [sys.executable, "-m", "runshim", script, "--workspace", str(tmp_path / "none")],
            capture_output=True,
            text=True,
        )
        assert result.returncode == 2
        assert "workspace" in result.stderr


class TestExecutorIntegration:
    """The orchestrator's executor can route execution through the shim."""

    def test_executor_consumes_shim_manifest(self, tmp_path):
        labtree = pytest.importorskip("labtree")
        from labtree.executor import SandboxConfig, run_experiment, read_metrics
        from labtree.tree import NodeKind, TreeNode

        node = TreeNode(
            id=1, parent_id=None, kind=NodeKind.DRAFT, stage=1,
            plan="p", script=SUCCESS_SCRIPT,
        )
        sandbox = SandboxConfig(
            workspace_root=str(tmp_path / "ws"),
            timeout_seconds=30,
            shim_command=(sys.executable, "-m", "runshim"),
        )
        outcome = run_experiment(node, sandbox)
        assert outcome.exit_class == "ok"
        assert read_metrics(outcome) == {"val_loss": [0.9, 0.5, 0.4]}
        manifest = json.load(open(os.path.join(outcome.workspace, "manifest.json")))
        assert manifest["exit_class"] == "ok"
        assert manifest["metrics"][0] == {
            "name": "val_loss", "path": "metrics/val_loss.npy", "length": 3,
        }
