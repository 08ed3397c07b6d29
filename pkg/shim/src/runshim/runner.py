"""Script launch, seed injection, and crash-only manifest emission."""

from __future__ import annotations

import os
import re
import runpy
import sys
import traceback
from typing import Optional

from .manifest import EXIT_ERROR, EXIT_OK, ShimManifest, scan_workspace

# Designated seed-injection region: one module-level assignment near the
# top of the script, rewritten in place. Matches the orchestrator's
# convention byte for byte.
_SEED_LINE_RE = re.compile(r"^SEED\s*=\s*.+$", re.MULTILINE)


def inject_seed(script_text: str, seed: int) -> str:
    line = f"SEED = {seed}"
    if _SEED_LINE_RE.search(script_text):
        return _SEED_LINE_RE.sub(line, script_text, count=1)
    if not script_text:
        return line + "\n"
    return line + "\n" + script_text


def _materialize_script(script_path: str, workspace: str, seed: Optional[int]) -> str:
    with open(script_path, encoding="utf-8") as fh:
        text = fh.read()
    if seed is not None:
        text = inject_seed(text, seed)
    target = os.path.join(workspace, os.path.basename(script_path))
    with open(target, "w", encoding="utf-8") as fh:
        fh.write(text)
    return target


def shim_run(script_path: str, workspace: str, seed: Optional[int] = None) -> tuple[ShimManifest, int]:
    """Run one experiment script inside the workspace.

    Whatever the script does (success, exception, partial output), a valid
    manifest.json exists afterwards; only an outright kill (the executor's
    timeout) can prevent that. Returns the manifest and the exit status.
    """
    if not os.path.isdir(workspace):
        raise FileNotFoundError(f"workspace does not exist: {workspace}")
    if not os.path.isfile(script_path):
        raise FileNotFoundError(f"script not found: {script_path}")

    target = _materialize_script(script_path, workspace, seed)
    previous_cwd = os.getcwd()
    exit_class = EXIT_OK
    status = 0
    failure_trace = ""
    os.chdir(workspace)
    try:
        try:
            runpy.run_path(target, run_name="__main__")
        except SystemExit as exc:
            code = exc.code if exc.code is not None else 0
            if code not in (0,):
                exit_class = EXIT_ERROR
                status = code if isinstance(code, int) else 1
                failure_trace = f"SystemExit: script exited with status {code}\n"
        except BaseException:
            exit_class = EXIT_ERROR
            status = 1
            failure_trace = traceback.format_exc()
            sys.stderr.write(failure_trace)
    finally:
        os.chdir(previous_cwd)
        if failure_trace:
            with open(os.path.join(workspace, "stderr.log"), "w", encoding="utf-8") as fh:
                fh.write(failure_trace)
        manifest = scan_workspace(workspace, exit_class)
        manifest.write(workspace)
    return manifest, status
