"""Isolated execution of node scripts plus the evidence pipeline.

Each node runs in its own fresh workspace with a wall-clock limit; the
process group is killed outright on a breach. Afterwards the workspace is
scanned for the metric-file contract (metrics/<name>.npy), the plotting
phase renders figures, and the vision model reviews them. A node becomes
non-buggy only when execution, plotting, and the visual review all pass.

Runtimes are recorded at whole-second granularity so that checkpointed
trees replay byte-identically across resumes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import shutil
import signal
import subprocess
import sys
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    NoMetrics,
    PlottingFailure,
    SandboxSetupFailure,
)
from .gateway import ModelGateway, ModelRole, last_fenced_block
from .prompts import render
from .scoring import summarize_metrics
from .tree import NodeKind, NodeStatus, TreeNode

logger = logging.getLogger(__name__)

EXIT_OK = "ok"
EXIT_ERROR = "error"
EXIT_TIMEOUT = "timeout"

_IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".gif", ".svg", ".pdf")

# Review phrases that count as a flagged issue for the gate decision.
_REVIEW_ISSUE_PHRASES = (
    "missing legend",
    "no legend",
    "unclear",
    "misleading",
    "mismatch",
    "illegible",
    "no meaningful",
    "empty plot",
    "no figures produced",
)

_BASE_ENV_KEYS = ("PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "TEMP", "TMP")


@dataclass
class SandboxConfig:
    workspace_root: str
    interpreter: tuple[str, ...] = (sys.executable,)
    timeout_seconds: float = 3600.0
    allow_network: bool = False
    env_allowlist: tuple[str, ...] = ()
    output_cap_bytes: int = 200_000
    shim_command: Optional[tuple[str, ...]] = None

    def workspace_for(self, node_id: int) -> str:
        return os.path.join(self.workspace_root, f"node_{node_id}")


@dataclass
class ExecutionOutcome:
    exit_class: str
    runtime_seconds: float
    error_trace: Optional[str] = None
    metric_files: list[str] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    workspace: str = ""
    stdout_tail: str = ""


@dataclass
class FigureRecord:
    path: str
    content_digest: str
    caption_hint: Optional[str] = None
    vlm_review: Optional[dict] = None


@dataclass
class GateDecision:
    passed: bool
    feedback: str
    reviews: list[FigureRecord] = field(default_factory=list)


def combine_gate(exec_ok: bool, plotting_ok: bool, vlm_passed: bool) -> NodeStatus:
    """Final status from the three evidence gates."""
    if exec_ok and plotting_ok and vlm_passed:
        return NodeStatus.NON_BUGGY
    return NodeStatus.BUGGY


def _build_env(sandbox: SandboxConfig) -> dict[str, str]:
    env = {key: os.environ[key] for key in _BASE_ENV_KEYS if key in os.environ}
    for key in sandbox.env_allowlist:
        if key in os.environ:
            env[key] = os.environ[key]
    env["PYTHONHASHSEED"] = "0"
    if not sandbox.allow_network:
        # Best-effort denial: point HTTP clients at a black hole and flip
        # the common offline switches. Process isolation only; not a VM.
        blackhole = "http://127.0.0.1:9"
        env.update(
            {
                "http_proxy": blackhole,
                "https_proxy": blackhole,
                "HTTP_PROXY": blackhole,
                "HTTPS_PROXY": blackhole,
                "HF_HUB_OFFLINE": "1",
                "TRANSFORMERS_OFFLINE": "1",
            }
        )
    return env


def _truncate_tail(text: str, cap: int) -> str:
    if len(text) <= cap:
        return text
    return f"[... truncated to final {cap} bytes ...]\n" + text[-cap:]


def _extract_traceback(stderr_text: str) -> str:
    marker = "Traceback (most recent call last):"
    index = stderr_text.rfind(marker)
    if index >= 0:
        return stderr_text[index:].strip()
    return stderr_text.strip()


def normalize_trace(trace: str, workspace: str) -> str:
    """Strip machine-specific workspace prefixes so traces replay stably."""
    normalized = trace.replace(workspace + os.sep, "").replace(workspace, ".")
    return normalized


def kill_process_tree(process: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(process.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        try:
            process.kill()
        except ProcessLookupError:
            pass


def _run_subprocess(
    command: Sequence[str],
    cwd: str,
    sandbox: SandboxConfig,
    timeout: float,
) -> tuple[int, str, str, float, bool]:
    """Run one sandboxed command; returns (code, stdout, stderr, runtime, timed_out)."""
    started = time.monotonic()
    try:
        process = subprocess.Popen(
            list(command),
            cwd=cwd,
            env=_build_env(sandbox),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            start_new_session=True,
        )
    except OSError as exc:
        raise SandboxSetupFailure(f"cannot launch interpreter: {exc}") from exc
    try:
        stdout, stderr = process.communicate(timeout=timeout)
        timed_out = False
    except subprocess.TimeoutExpired:
        kill_process_tree(process)
        stdout, stderr = process.communicate()
        timed_out = True
    elapsed = time.monotonic() - started
    cap = sandbox.output_cap_bytes
    return (
        process.returncode,
        _truncate_tail(stdout or "", cap),
        _truncate_tail(stderr or "", cap),
        elapsed,
        timed_out,
    )


def _scan_metric_files(workspace: str) -> tuple[list[str], list[dict], list[str]]:
    """Returns (parseable paths, manifest entries, warnings)."""
    metrics_dir = os.path.join(workspace, "metrics")
    paths: list[str] = []
    entries: list[dict] = []
    warnings: list[str] = []
    if not os.path.isdir(metrics_dir):
        return paths, entries, warnings
    for name in sorted(os.listdir(metrics_dir)):
        if not name.endswith(".npy"):
            continue
        full = os.path.join(metrics_dir, name)
        try:
            array = np.load(full, allow_pickle=False)
            length = int(np.asarray(array).reshape(-1).shape[0])
        except (ValueError, OSError, EOFError) as exc:
            warnings.append(f"unparseable metric file metrics/{name}: {exc}")
            continue
        paths.append(full)
        entries.append({"name": name[: -len(".npy")], "path": f"metrics/{name}", "length": length})
    return paths, entries, warnings


def _scan_figures(workspace: str) -> list[str]:
    figures_dir = os.path.join(workspace, "figures")
    if not os.path.isdir(figures_dir):
        return []
    return [
        os.path.join(figures_dir, name)
        for name in sorted(os.listdir(figures_dir))
        if name.lower().endswith(_IMAGE_EXTENSIONS)
    ]


def _write_manifest(workspace: str, exit_class: str, entries: list[dict], warnings: list[str]) -> dict:
    manifest = {
        "metrics": entries,
        "figures": [
            os.path.relpath(p, workspace) for p in _scan_figures(workspace)
        ],
        "warnings": warnings,
        "exit_class": EXIT_OK if exit_class == EXIT_OK else EXIT_ERROR,
    }
    with open(os.path.join(workspace, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def prepare_workspace(sandbox: SandboxConfig, node_id: int) -> str:
    workspace = os.path.abspath(sandbox.workspace_for(node_id))
    try:
        if os.path.exists(workspace):
            shutil.rmtree(workspace)
        os.makedirs(os.path.join(workspace, "metrics"))
        os.makedirs(os.path.join(workspace, "figures"))
    except OSError as exc:
        raise SandboxSetupFailure(f"cannot prepare workspace {workspace}: {exc}") from exc
    interpreter = sandbox.interpreter[0]
    if not (os.path.exists(interpreter) or shutil.which(interpreter)):
        raise SandboxSetupFailure(f"interpreter not found: {interpreter}")
    return workspace


def run_experiment(node: TreeNode, sandbox: SandboxConfig) -> ExecutionOutcome:
    """Execute a drafted node's script in a fresh isolated workspace."""
    workspace = prepare_workspace(sandbox, node.id)
    script_path = os.path.join(workspace, "script.py")
    with open(script_path, "w", encoding="utf-8") as fh:
        fh.write(node.script)

    if sandbox.shim_command:
        command = list(sandbox.shim_command) + [script_path, "--workspace", workspace]
        if node.seed is not None:
            command += ["--seed", str(node.seed)]
    else:
        command = list(sandbox.interpreter) + [script_path]

    code, stdout, stderr, elapsed, timed_out = _run_subprocess(
        command, workspace, sandbox, sandbox.timeout_seconds
    )
    with open(os.path.join(workspace, "stdout.log"), "w", encoding="utf-8") as fh:
        fh.write(stdout)
    with open(os.path.join(workspace, "stderr.log"), "w", encoding="utf-8") as fh:
        fh.write(stderr)

    metric_paths, entries, warnings = _scan_metric_files(workspace)
    stdout_tail = "\n".join(stdout.strip().splitlines()[-3:])

    if timed_out:
        runtime = float(sandbox.timeout_seconds)
        manifest = _write_manifest(workspace, EXIT_TIMEOUT, entries, warnings)
        return ExecutionOutcome(
            exit_class=EXIT_TIMEOUT,
            runtime_seconds=runtime,
            error_trace=f"experiment exceeded the {sandbox.timeout_seconds:g}s limit and was killed",
            metric_files=metric_paths,
            manifest=manifest,
            workspace=workspace,
            stdout_tail=stdout_tail,
        )

    runtime = float(math.floor(elapsed))
    if code != 0:
        trace = normalize_trace(_extract_traceback(stderr), workspace)
        manifest = _write_manifest(workspace, EXIT_ERROR, entries, warnings)
        return ExecutionOutcome(
            exit_class=EXIT_ERROR,
            runtime_seconds=runtime,
            error_trace=trace or f"process exited with status {code}",
            metric_files=metric_paths,
            manifest=manifest,
            workspace=workspace,
            stdout_tail=stdout_tail,
        )
    if not metric_paths:
        # Outputs contract violated: a clean exit must leave metric files.
        detail = "; ".join(warnings) if warnings else "metrics/ held no parseable .npy file"
        manifest = _write_manifest(workspace, EXIT_ERROR, entries, warnings)
        return ExecutionOutcome(
            exit_class=EXIT_ERROR,
            runtime_seconds=runtime,
            error_trace=f"experiment exited 0 but saved no usable metrics ({detail})",
            metric_files=[],
            manifest=manifest,
            workspace=workspace,
            stdout_tail=stdout_tail,
        )
    manifest = _write_manifest(workspace, EXIT_OK, entries, warnings)
    return ExecutionOutcome(
        exit_class=EXIT_OK,
        runtime_seconds=runtime,
        error_trace=None,
        metric_files=metric_paths,
        manifest=manifest,
        workspace=workspace,
        stdout_tail=stdout_tail,
    )


def read_metrics(outcome: ExecutionOutcome) -> dict[str, list[float]]:
    """Parse the metric files of a successful execution into named series."""
    metrics: dict[str, list[float]] = {}
    for path in outcome.metric_files:
        name = os.path.basename(path)[: -len(".npy")]
        try:
            array = np.asarray(np.load(path, allow_pickle=False), dtype=float).reshape(-1)
        except (ValueError, OSError, EOFError) as exc:
            outcome.manifest.setdefault("warnings", []).append(
                f"unparseable metric file metrics/{os.path.basename(path)}: {exc}"
            )
            continue
        metrics[name] = [float(x) for x in array]
    if not metrics:
        raise NoMetrics("no parseable metric series in the workspace")
    return metrics


def run_plotting(
    node: TreeNode, sandbox: SandboxConfig, workspace: Optional[str] = None
) -> list[FigureRecord]:
    """Run the node's visualization script and census the produced images."""
    if not node.viz_script:
        raise PlottingFailure("node has no visualization script")
    workspace = os.path.abspath(workspace or sandbox.workspace_for(node.id))
    if not os.path.isdir(workspace):
        workspace = prepare_workspace(sandbox, node.id)
    os.makedirs(os.path.join(workspace, "figures"), exist_ok=True)
    viz_path = os.path.join(workspace, "viz.py")
    with open(viz_path, "w", encoding="utf-8") as fh:
        fh.write(node.viz_script)
    command = list(sandbox.interpreter) + [viz_path]
    code, _stdout, stderr, _elapsed, timed_out = _run_subprocess(
        command, workspace, sandbox, sandbox.timeout_seconds
    )
    if timed_out:
        raise PlottingFailure(
            "plotting phase timed out",
            trace=f"visualization exceeded the {sandbox.timeout_seconds:g}s limit",
        )
    if code != 0:
        trace = normalize_trace(_extract_traceback(stderr), workspace)
        raise PlottingFailure("plotting phase crashed", trace=trace)

    records = []
    for path in _scan_figures(workspace):
        with open(path, "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        stem = os.path.splitext(os.path.basename(path))[0]
        records.append(
            FigureRecord(
                path=path,
                content_digest=digest,
                caption_hint=f"Recorded series: {stem.replace('_', ' ')}",
            )
        )
    return records


def review_flags_issue(review: dict) -> bool:
    """Whether a structured review flags a problem with figure or caption."""
    text = " ".join(
        str(review.get(key, "")) for key in ("Img_review", "Caption_review")
    ).lower()
    return any(phrase in text for phrase in _REVIEW_ISSUE_PHRASES)


def vlm_gate(
    figures: list[FigureRecord],
    node_context: str,
    gateway: ModelGateway,
    seed: Optional[int] = None,
) -> GateDecision:
    """Review every figure; any flagged issue (or no figures) fails the node."""
    if not figures:
        return GateDecision(passed=False, feedback="no figures produced", reviews=[])
    issues = []
    for record in figures:
        with open(record.path, "rb") as fh:
            image = fh.read()
        review = gateway.review_image(
            image,
            caption=record.caption_hint or "",
            figrefs=[],
            abstract=node_context,
            seed=seed,
        )
        record.vlm_review = review
        if review_flags_issue(review):
            name = os.path.basename(record.path)
            issues.append(f"{name}: {review['Img_review']} / {review['Caption_review']}")
    if issues:
        return GateDecision(passed=False, feedback="\n".join(issues), reviews=figures)
    return GateDecision(passed=True, feedback="all figures approved", reviews=figures)


# --- full node execution cycle (what a worker runs) -------------------------


@dataclass(frozen=True)
class WorkItem:
    """Read-only slice of a node handed to a worker; no tree reference."""

    node_id: int
    kind: NodeKind
    stage: int
    plan: str
    script: str
    viz_script: Optional[str] = None
    seed: Optional[int] = None
    request_seed: Optional[int] = None
    plot_only: bool = False


@dataclass
class CycleResult:
    node_id: int
    status: NodeStatus
    runtime_seconds: float = 0.0
    error_trace: Optional[str] = None
    metrics: dict[str, list[float]] = field(default_factory=dict)
    figure_paths: list[str] = field(default_factory=list)
    viz_script: Optional[str] = None
    exec_feedback: Optional[str] = None
    vlm_feedback: Optional[str] = None


def _node_from_item(item: WorkItem, viz_script: Optional[str] = None) -> TreeNode:
    return TreeNode(
        id=item.node_id,
        parent_id=None,
        kind=item.kind,
        stage=item.stage,
        plan=item.plan,
        script=item.script,
        viz_script=viz_script if viz_script is not None else item.viz_script,
        seed=item.seed,
    )


def _generate_viz_script(
    item: WorkItem, metric_names: list[str], gateway: ModelGateway
) -> str:
    prompt = render(
        "viz",
        script=item.script,
        metric_files="\n".join(f"- metrics/{name}.npy" for name in metric_names),
    )
    completion = gateway.ask(
        ModelRole.CODE_GENERATION, prompt, seed=item.request_seed
    )
    return last_fenced_block(completion, "python")


def run_cycle(item: WorkItem, sandbox: SandboxConfig, gateway: ModelGateway) -> CycleResult:
    """Execute one node end to end: run, read metrics, plot, review.

    Exactly the (execution ok, plotting ok, review pass) = (T, T, T) path
    yields a non-buggy result; every other combination is buggy evidence.
    """
    exec_ok = False
    plotting_ok = False
    vlm_passed = False
    metrics: dict[str, list[float]] = {}
    figures: list[FigureRecord] = []
    viz_script = item.viz_script
    runtime = 0.0
    trace: Optional[str] = None
    feedback: Optional[str] = None
    vlm_feedback: Optional[str] = None
    stdout_tail = "(no experiment process ran)"

    if item.plot_only:
        exec_ok = True  # aggregation nodes never run a new experiment
    else:
        outcome = run_experiment(_node_from_item(item), sandbox)
        runtime = outcome.runtime_seconds
        stdout_tail = outcome.stdout_tail or "(empty)"
        if outcome.exit_class == EXIT_OK:
            exec_ok = True
            metrics = read_metrics(outcome)
        else:
            trace = outcome.error_trace

    if exec_ok:
        try:
            if viz_script is None:
                viz_script = _generate_viz_script(item, sorted(metrics), gateway)
            records = run_plotting(
                _node_from_item(item, viz_script), sandbox
            )
            plotting_ok = True
            figures = records
        except PlottingFailure as exc:
            trace = exc.trace or str(exc)

    if plotting_ok:
        gate = vlm_gate(
            figures,
            node_context=item.plan,
            gateway=gateway,
            seed=item.request_seed,
        )
        vlm_passed = gate.passed
        vlm_feedback = gate.feedback
        if not gate.passed:
            trace = f"visual review failed:\n{gate.feedback}"

    status = combine_gate(exec_ok, plotting_ok, vlm_passed)
    if status is NodeStatus.NON_BUGGY:
        prompt = render(
            "exec_review",
            plan=item.plan,
            metrics_summary=summarize_metrics(metrics),
            stdout_tail=stdout_tail,
        )
        feedback = gateway.ask(ModelRole.FEEDBACK_AGENT, prompt, seed=item.request_seed)

    return CycleResult(
        node_id=item.node_id,
        status=status,
        runtime_seconds=runtime,
        error_trace=trace if status is NodeStatus.BUGGY else None,
        metrics=metrics if status is NodeStatus.NON_BUGGY else {},
        figure_paths=[f.path for f in figures],
        viz_script=viz_script,
        exec_feedback=feedback,
        vlm_feedback=vlm_feedback,
    )
