"""The per-run coordinator.

Owns the tree, the stage states, and the selection RNG; dispatches node
execution to a bounded worker pool and applies completions in node-id
order so runs are batch-deterministic. Checkpoints are written at every
stage completion and after every few node terminations; a checkpoint plus
the run config is enough to resume bit-exactly under the mock backend.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

from .config import RunConfig, RunRecord
from .errors import (
    EmptyCompletion,
    InsufficientReplicas,
    MissingCheckpoint,
    NoViableNode,
    WallClockExceeded,
)
from .executor import CycleResult, SandboxConfig, WorkItem, run_cycle
from .gateway import (
    FixtureLiteratureStore,
    GatewaySettings,
    HttpBackend,
    HttpLiteratureClient,
    ModelGateway,
    SynthesizedLiteratureClient,
)
from .ideation import Idea
from .mock_backend import MockBackend
from .policy import (
    StageContext,
    extract_config_fingerprint,
    is_duplicate_config,
    propose_child,
    select_candidates,
)
from .stages import (
    ESCALATION_HINT_TEXT,
    STAGE_LABELS,
    StageDecision,
    StageState,
    aggregate,
    build_stage_summary,
    check_stage_complete,
    promote_best,
    runtime_escalation,
    spawn_replications,
)
from .scoring import dataset_of, has_converged, primary_metric_score
from .tree import (
    ExecutionEvidence,
    ExperimentTree,
    NodeKind,
    NodeStatus,
    SEARCH_KINDS,
)
from .writeup import WriteupSettings, run_writeup

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1

PHASE_STAGE = "stage"
PHASE_WRITEUP = "writeup"
PHASE_DONE = "done"


class HaltRequested(Exception):
    """Internal control flow for tests that kill a run after a checkpoint."""


def build_gateway(config: RunConfig) -> ModelGateway:
    if config.backend == "mock":
        backend = MockBackend(config.mock_scenario)
        settings = GatewaySettings(backoff_seconds=0.05)
    else:
        backend = HttpBackend(config.backend_base_url, config.credential_env)
        settings = GatewaySettings()
    if config.literature_fixture_dir:
        literature = FixtureLiteratureStore(config.literature_fixture_dir)
    elif config.backend == "real":
        literature = HttpLiteratureClient(
            "https://api.semanticscholar.org/graph/v1",
            credential_env=config.credential_env,
        )
    else:
        literature = SynthesizedLiteratureClient()
    return ModelGateway(
        backend,
        role_configs=config.model_roles,
        literature=literature,
        settings=settings,
    )


def run_id_for(idea: Idea, config: RunConfig) -> str:
    return f"{idea.name}-s{config.seed}"


def _rng_state_to_json(rng: random.Random) -> list:
    version, internal, gauss_next = rng.getstate()
    return [version, list(internal), gauss_next]


def _rng_state_from_json(data: list) -> tuple:
    return (data[0], tuple(data[1]), data[2])


class Orchestrator:
    """Drives one idea through the four stages and the writeup."""

    def __init__(
        self,
        config: RunConfig,
        idea: Idea,
        run_dir: Optional[str] = None,
        halt_after_checkpoints: Optional[int] = None,
        _resuming: bool = False,
    ):
        config.validate()
        self.config = config
        self.idea = idea
        # absolute so sandbox workspaces and subprocess cwds agree no
        # matter where the coordinator process was started
        self.run_dir = os.path.abspath(
            run_dir or os.path.join(config.output_dir, run_id_for(idea, config))
        )
        self.halt_after_checkpoints = halt_after_checkpoints
        self.gateway = build_gateway(config)
        self.sandbox = SandboxConfig(
            workspace_root=os.path.join(self.run_dir, "workspaces"),
            timeout_seconds=config.budget.per_node_timeout,
        )
        self.tree = ExperimentTree()
        self.stage_states: dict[int, StageState] = {}
        self.current_stage = 1
        self.phase = PHASE_STAGE
        self.rng = random.Random(config.seed * 100_003 + config.policy.rng_seed)
        self.record = RunRecord(run_id=run_id_for(idea, config))
        self.stage_decisions: dict[int, StageDecision] = {}
        self._terminations_since_checkpoint = 0
        self._checkpoints_written = 0
        self._consumed_wall_clock = 0.0
        self._started: Optional[float] = None
        self._suppress_checkpoints = False

        if not _resuming:
            self._init_run_dir()

    # --- setup / persistence -------------------------------------------------

    def _init_run_dir(self) -> None:
        for sub in ("checkpoints", "workspaces", "summaries", "figures", "manuscript", "ideas"):
            os.makedirs(os.path.join(self.run_dir, sub), exist_ok=True)
        self.config.save(os.path.join(self.run_dir, "config.json"))
        idea_path = os.path.join(self.run_dir, "ideas", f"{self.idea.name}.json")
        with open(idea_path, "w", encoding="utf-8") as fh:
            json.dump(self.idea.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        root_id = self.tree.add_node(
            parent_id=None,
            kind=NodeKind.DRAFT,
            plan=self.idea.experiments,
            script="",
            stage=1,
        )
        logger.info("run %s initialized with root node %d", self.record.run_id, root_id)
        self.stage_states[1] = StageState(stage=1, node_budget=self.config.stage_budgets[0])
        self.record.advance("stage1")
        self._save_record()

    def _save_record(self) -> None:
        self.record.save(os.path.join(self.run_dir, "run.json"))

    def checkpoint_dir(self) -> str:
        return os.path.join(self.run_dir, "checkpoints")

    def _write_checkpoint(self) -> str:
        if self._suppress_checkpoints:
            return ""
        payload = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "tree": self.tree.to_dict(),
            "stages": [
                self.stage_states[k].to_dict() for k in sorted(self.stage_states)
            ],
            "rng_state": _rng_state_to_json(self.rng),
            "budget": self.config.budget.to_dict(),
            "policy": self.config.policy.to_dict(),
            "current_stage": self.current_stage,
            "phase": self.phase,
            "status": self.record.status,
            "seed": self.config.seed,
            "consumed_wall_clock": math.floor(self._elapsed()),
            "idea": self.idea.to_dict(),
        }
        self._checkpoints_written += 1
        path = os.path.join(
            self.checkpoint_dir(), f"checkpoint_{self._checkpoints_written:04d}.json"
        )
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        self._terminations_since_checkpoint = 0
        self.record.checkpoint_path = path
        self._save_record()
        if (
            self.halt_after_checkpoints is not None
            and self._checkpoints_written >= self.halt_after_checkpoints
        ):
            raise HaltRequested(f"halted after checkpoint {self._checkpoints_written}")
        return path

    @staticmethod
    def latest_checkpoint(run_dir: str) -> str:
        directory = os.path.join(run_dir, "checkpoints")
        if not os.path.isdir(directory):
            raise MissingCheckpoint(f"no checkpoints directory under {run_dir}")
        names = sorted(n for n in os.listdir(directory) if n.endswith(".json"))
        if not names:
            raise MissingCheckpoint(f"no checkpoint files under {directory}")
        return os.path.join(directory, names[-1])

    @classmethod
    def resume(
        cls,
        run_dir: str,
        halt_after_checkpoints: Optional[int] = None,
    ) -> "Orchestrator":
        """Rebuild a coordinator from the latest checkpoint in a run dir."""
        config = RunConfig.from_file(os.path.join(run_dir, "config.json"))
        checkpoint_path = cls.latest_checkpoint(run_dir)
        with open(checkpoint_path, encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise MissingCheckpoint(
                f"unsupported checkpoint format {payload.get('format_version')!r}"
            )
        idea = Idea.from_dict(payload["idea"])
        self = cls(
            config,
            idea,
            run_dir=run_dir,
            halt_after_checkpoints=halt_after_checkpoints,
            _resuming=True,
        )
        self.tree = ExperimentTree.from_dict(payload["tree"])
        self.stage_states = {
            s["stage"]: StageState.from_dict(s) for s in payload["stages"]
        }
        self.rng.setstate(_rng_state_from_json(payload["rng_state"]))
        self.current_stage = payload["current_stage"]
        self.phase = payload["phase"]
        self.record = RunRecord.load(os.path.join(run_dir, "run.json"))
        self._consumed_wall_clock = float(payload["consumed_wall_clock"])
        existing = sorted(os.listdir(self.checkpoint_dir()))
        self._checkpoints_written = len(existing)
        running = [
            n.id for n in self.tree.nodes.values() if n.status is NodeStatus.RUNNING
        ]
        if running:
            raise MissingCheckpoint(
                f"checkpoint holds running nodes {running}; cannot resume"
            )
        return self

    # --- time accounting -------------------------------------------------------

    def _elapsed(self) -> float:
        live = time.monotonic() - self._started if self._started is not None else 0.0
        return self._consumed_wall_clock + live

    def _check_wall_clock(self) -> None:
        if self._elapsed() > self.config.budget.max_wall_clock:
            raise WallClockExceeded(
                f"run exceeded its {self.config.budget.max_wall_clock:g}s wall clock"
            )

    # --- main entry --------------------------------------------------------------

    def run(self) -> RunRecord:
        """Execute until done; on abort a checkpoint and diagnostics remain."""
        self._started = time.monotonic()
        try:
            while self.phase == PHASE_STAGE:
                state = self.stage_states[self.current_stage]
                self.record.advance(f"stage{self.current_stage}")
                self._save_record()
                self._run_stage_loop(state)
                self._finish_stage(state)
            if self.phase == PHASE_WRITEUP:
                self.record.advance("writeup")
                self._save_record()
                self._check_wall_clock()
                self._run_writeup_phase()
                self.phase = PHASE_DONE
                self._write_checkpoint()
            self._export_tree()
            self.record.advance("done")
            self._save_record()
        except HaltRequested as exc:
            logger.info("run halted on request: %s", exc)
            self._save_record()
        except NoViableNode as exc:
            self._abort(str(exc), diagnostic=True)
            raise
        except WallClockExceeded as exc:
            self._abort(str(exc), diagnostic=False)
            raise
        return self.record

    def _abort(self, reason: str, diagnostic: bool) -> None:
        logger.error("aborting run: %s", reason)
        self._suppress_checkpoints = False
        halt = self.halt_after_checkpoints
        self.halt_after_checkpoints = None
        try:
            self._write_checkpoint()
        finally:
            self.halt_after_checkpoints = halt
        if diagnostic:
            buggy_leaves = [
                n
                for n in self.tree.leaves()
                if n.status is NodeStatus.BUGGY
            ]
            report = {
                "reason": reason,
                "stage": self.current_stage,
                "buggy_leaves": [
                    {"id": n.id, "kind": n.kind.value, "error_trace": n.error_trace}
                    for n in sorted(buggy_leaves, key=lambda n: n.id)
                ],
            }
            path = os.path.join(self.run_dir, "diagnostic_report.json")
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(report, fh, indent=2, sort_keys=True)
                fh.write("\n")
        self.record.advance("aborted")
        self._save_record()
        self._export_tree()

    def _export_tree(self) -> None:
        with open(os.path.join(self.run_dir, "tree.json"), "w", encoding="utf-8") as fh:
            fh.write(self.tree.to_json())

    # --- the stage loop -------------------------------------------------------------

    def _run_stage_loop(self, state: StageState) -> None:
        while True:
            self._check_wall_clock()
            decision = check_stage_complete(
                state,
                self.tree,
                self.config.budget,
                self.config.escalation_fraction,
                stage2_min_datasets=self.config.stage2_min_datasets,
            )
            self.stage_decisions[state.stage] = decision
            if decision is not StageDecision.CONTINUE:
                return
            if state.nodes_used >= state.node_budget:
                # Stage 1 can exhaust its budget without a prototype; the
                # promotion step then raises NoViableNode.
                return
            slots = min(
                self.config.policy.parallelism, state.node_budget - state.nodes_used
            )
            candidates = select_candidates(
                self.tree, state.stage, self.config.policy, self.rng, slots
            )
            if not candidates:
                return
            spawned = []
            for parent_id in candidates:
                child = self._spawn_child(state, parent_id)
                if child is not None:
                    spawned.append(child)
            if not spawned:
                logger.warning(
                    "stage %d iteration spawned no nodes; ending stage loop",
                    state.stage,
                )
                return
            results = self._execute_batch(spawned)
            self._apply_results(state, results)

    def _stage_fingerprints(self, stage: int) -> set[str]:
        return {
            n.config_fingerprint
            for n in self.tree.stage_nodes(stage)
            if n.config_fingerprint is not None
        }

    def _child_kind(self, state: StageState, parent_id: int) -> NodeKind:
        parent = self.tree.node(parent_id)
        if parent.status is NodeStatus.BUGGY:
            return NodeKind.DEBUG
        if state.stage == 1:
            root = self.tree.stage_roots.get(1)
            return NodeKind.DRAFT if parent_id == root else NodeKind.REFINE
        if state.stage == 2:
            return NodeKind.HYPERPARAMETER
        if state.stage == 4:
            return NodeKind.ABLATION
        return NodeKind.REFINE

    def _spawn_child(self, state: StageState, parent_id: int) -> Optional[int]:
        parent = self.tree.node(parent_id)
        kind = self._child_kind(state, parent_id)
        hint = ""
        if state.stage == 3 and runtime_escalation(
            state, self.tree, self.config.budget, self.config.escalation_fraction
        ):
            hint = ESCALATION_HINT_TEXT
        fingerprints = tuple(sorted(self._stage_fingerprints(state.stage)))
        context = StageContext(
            stage=state.stage,
            stage_label=STAGE_LABELS[state.stage],
            goal=self.idea.to_markdown(),
            tested_fingerprints=fingerprints,
            escalation_hint=hint,
            seed=self.config.seed,
        )
        try:
            plan, script = propose_child(parent, kind, context, self.gateway)
        except EmptyCompletion as exc:
            logger.warning("proposal for parent %d discarded: %s", parent_id, exc)
            return None
        fingerprint = None
        if kind in (NodeKind.HYPERPARAMETER, NodeKind.ABLATION):
            fingerprint = extract_config_fingerprint(plan)
            if fingerprint is None:
                digest = hashlib.sha256(script.encode()).hexdigest()[:12]
                fingerprint = f"script_sha={digest}"
            if is_duplicate_config(self._stage_fingerprints(state.stage), fingerprint):
                logger.info(
                    "duplicate %s configuration %r skipped", kind.value, fingerprint
                )
                return None
        return self.tree.add_node(
            parent_id=parent_id,
            kind=kind,
            plan=plan,
            script=script,
            stage=state.stage,
            config_fingerprint=fingerprint,
            max_debug_depth=self.config.policy.max_debug_depth,
        )

    def _execute_batch(self, node_ids: list[int]) -> list[CycleResult]:
        items = []
        for node_id in sorted(node_ids):
            self.tree.transition(node_id, NodeStatus.RUNNING)
            node = self.tree.node(node_id)
            items.append(
                WorkItem(
                    node_id=node.id,
                    kind=node.kind,
                    stage=node.stage,
                    plan=node.plan,
                    script=node.script,
                    viz_script=node.viz_script,
                    seed=node.seed,
                    request_seed=self.config.seed,
                    plot_only=node.kind is NodeKind.AGGREGATION,
                )
            )
        workers = max(1, self.config.policy.parallelism)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda item: run_cycle(item, self.sandbox, self.gateway), items)
            )
        return sorted(results, key=lambda r: r.node_id)

    def _apply_results(self, state: StageState, results: list[CycleResult]) -> None:
        for result in results:
            evidence = ExecutionEvidence(
                error_trace=result.error_trace,
                runtime_seconds=result.runtime_seconds,
                metrics=result.metrics or None,
                exec_feedback=result.exec_feedback,
                viz_script=result.viz_script,
                figure_paths=[
                    os.path.relpath(p, self.run_dir) for p in result.figure_paths
                ]
                or None,
                vlm_feedback=result.vlm_feedback,
            )
            node = self.tree.transition(result.node_id, result.status, evidence)
            if node.kind in SEARCH_KINDS:
                state.nodes_used += 1
            if node.status is NodeStatus.NON_BUGGY and state.stage == 2:
                for name in node.metrics:
                    dataset = dataset_of(name)
                    if dataset:
                        state.datasets_succeeded.add(dataset)
            self._terminations_since_checkpoint += 1
        if state.stage == 2:
            self._update_convergence(state)
        if self._terminations_since_checkpoint >= self.config.checkpoint_every:
            self._write_checkpoint()

    def _update_convergence(self, state: StageState) -> None:
        candidates = [
            n
            for n in self.tree.stage_nodes(state.stage)
            if n.status is NodeStatus.NON_BUGGY
        ]
        if not candidates:
            return
        best = max(candidates, key=lambda n: (primary_metric_score(n.metrics), -n.id))
        series = _validation_loss_series(best.metrics)
        if series is not None and has_converged(
            series,
            window=self.config.convergence_window,
            tolerance=self.config.convergence_tolerance,
        ):
            state.convergence_flag = True

    # --- stage end -------------------------------------------------------------------

    def _finish_stage(self, state: StageState) -> None:
        self._suppress_checkpoints = True
        try:
            best_id = promote_best(state, self.tree, self.gateway, seed=self.config.seed)
            best = self.tree.node(best_id)
            if (
                state.stage in self.config.replicate_stages
                and self.config.budget.replication_count > 0
            ):
                replica_ids = spawn_replications(
                    self.tree,
                    best,
                    self.config.budget.replication_count,
                    base_seed=self.config.seed,
                )
                replica_results = self._execute_batch(replica_ids)
                self._apply_results(state, replica_results)
                good = [
                    self.tree.node(i)
                    for i in replica_ids
                    if self.tree.node(i).status is NodeStatus.NON_BUGGY
                ]
                if good:
                    try:
                        agg_id = aggregate(
                            self.tree, good, self.gateway, seed=self.config.seed
                        )
                    except InsufficientReplicas as exc:
                        logger.warning("aggregation skipped: %s", exc)
                    else:
                        agg_results = self._execute_batch([agg_id])
                        self._apply_results(state, agg_results)
                else:
                    logger.warning(
                        "stage %d: no non-buggy replicas; aggregation skipped",
                        state.stage,
                    )
            summary = build_stage_summary(
                state, self.tree, self.gateway, seed=self.config.seed
            )
            path = os.path.join(
                self.run_dir, "summaries", f"stage_{state.stage}.json"
            )
            with open(path, "w", encoding="utf-8") as fh:
                json.dump(summary, fh, indent=2, sort_keys=True)
                fh.write("\n")
            if state.stage < 4:
                next_stage = state.stage + 1
                self.tree.add_node(
                    parent_id=None,
                    kind=NodeKind.DRAFT,
                    plan=best.plan,
                    script=best.script,
                    stage=next_stage,
                )
                self.stage_states[next_stage] = StageState(
                    stage=next_stage,
                    node_budget=self.config.stage_budgets[next_stage - 1],
                )
                self.current_stage = next_stage
            else:
                self.phase = PHASE_WRITEUP
        finally:
            self._suppress_checkpoints = False
        self._write_checkpoint()

    # --- writeup -----------------------------------------------------------------------

    def _run_writeup_phase(self) -> None:
        summaries = []
        summaries_dir = os.path.join(self.run_dir, "summaries")
        for name in sorted(os.listdir(summaries_dir)):
            if name.endswith(".json"):
                with open(os.path.join(summaries_dir, name), encoding="utf-8") as fh:
                    summaries.append(json.load(fh))
        settings = WriteupSettings(
            max_figures=self.config.max_figures,
            page_limit=self.config.page_limit,
            max_reflection_rounds=self.config.writeup_reflection_rounds,
        )
        run_writeup(
            self.idea,
            summaries,
            self.run_dir,
            self.gateway,
            self.sandbox,
            settings=settings,
            seed=self.config.seed,
        )


def _validation_loss_series(metrics: dict[str, list[float]]) -> Optional[list[float]]:
    if "val_loss" in metrics:
        return metrics["val_loss"]
    for name in sorted(metrics):
        if "val" in name and "loss" in name:
            return metrics[name]
    return None
