"""Experiment tree data model.

One tree holds every candidate experiment produced during a run. Each
stage of the run has its own root; children are created by expanding
existing nodes (drafting, debugging, refining, varying hyperparameters,
ablating, replicating, aggregating). Nodes move through a strict status
lifecycle, and all mutation goes through ExperimentTree methods so the
structural invariants hold at every step.

Single-writer: mutations happen on the coordinator only. Workers get
read-only snapshots of individual nodes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Mapping, Optional

from .errors import (
    DuplicateStageRoot,
    IllegalTransition,
    KindMismatch,
    MaxDebugDepthExceeded,
    UnknownNode,
    UnknownParent,
)

DEFAULT_MAX_DEBUG_DEPTH = 3

# Designated seed-injection region: a single module-level assignment that
# the orchestrator rewrites when spawning replication nodes. Keeping it to
# one line makes the byte-identity invariant directly checkable.
_SEED_LINE_RE = re.compile(r"^SEED\s*=\s*.+$", re.MULTILINE)


class NodeKind(str, Enum):
    DRAFT = "draft"
    DEBUG = "debug"
    REFINE = "refine"
    HYPERPARAMETER = "hyperparameter"
    ABLATION = "ablation"
    REPLICATION = "replication"
    AGGREGATION = "aggregation"


class NodeStatus(str, Enum):
    DRAFTED = "drafted"
    RUNNING = "running"
    BUGGY = "buggy"
    NON_BUGGY = "non_buggy"

    @property
    def terminal(self) -> bool:
        return self in (NodeStatus.BUGGY, NodeStatus.NON_BUGGY)


_LEGAL_TRANSITIONS = {
    NodeStatus.DRAFTED: {NodeStatus.RUNNING},
    NodeStatus.RUNNING: {NodeStatus.BUGGY, NodeStatus.NON_BUGGY},
    NodeStatus.BUGGY: set(),
    NodeStatus.NON_BUGGY: set(),
}

# Kinds produced by expanding the search (count against stage budgets),
# as opposed to the stage-end replication/aggregation bookkeeping.
SEARCH_KINDS = frozenset(
    {
        NodeKind.DRAFT,
        NodeKind.DEBUG,
        NodeKind.REFINE,
        NodeKind.HYPERPARAMETER,
        NodeKind.ABLATION,
    }
)


def inject_seed(script: str, seed: int) -> str:
    """Rewrite the designated seed line, or insert one at the top."""
    line = f"SEED = {seed}"
    if _SEED_LINE_RE.search(script):
        return _SEED_LINE_RE.sub(line, script, count=1)
    if not script:
        return line + "\n"
    return line + "\n" + script


def strip_seed_region(script: str) -> str:
    """Remove the seed-injection line (with its newline) if present."""
    match = _SEED_LINE_RE.search(script)
    if match is None:
        return script
    end = match.end()
    if end < len(script) and script[end] == "\n":
        end += 1
    return script[: match.start()] + script[end:]


def parse_seed(script: str) -> Optional[int]:
    match = _SEED_LINE_RE.search(script)
    if match is None:
        return None
    value = match.group(0).split("=", 1)[1].strip()
    try:
        return int(value)
    except ValueError:
        return None


def scripts_equal_modulo_seed(a: str, b: str) -> bool:
    return strip_seed_region(a) == strip_seed_region(b)


def canonical_fingerprint(config: Mapping[str, object]) -> str:
    """Canonical sorted key=value rendering of a configuration."""
    return ",".join(f"{k}={config[k]}" for k in sorted(config))


def canonicalize_fingerprint(fingerprint: str) -> str:
    """Re-canonicalize a key=value,key=value string (sorts the pairs)."""
    parts = [p.strip() for p in fingerprint.split(",") if p.strip()]
    return ",".join(sorted(parts))


@dataclass
class TreeNode:
    """One candidate experiment: plan, script, and execution evidence."""

    id: int
    parent_id: Optional[int]
    kind: NodeKind
    stage: int
    plan: str
    script: str
    status: NodeStatus = NodeStatus.DRAFTED
    error_trace: Optional[str] = None
    runtime_seconds: float = 0.0
    metrics: dict[str, list[float]] = field(default_factory=dict)
    exec_feedback: Optional[str] = None
    viz_script: Optional[str] = None
    figure_paths: list[str] = field(default_factory=list)
    vlm_feedback: Optional[str] = None
    seed: Optional[int] = None
    config_fingerprint: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "parent_id": self.parent_id,
            "kind": self.kind.value,
            "stage": self.stage,
            "plan": self.plan,
            "script": self.script,
            "status": self.status.value,
            "error_trace": self.error_trace,
            "runtime_seconds": self.runtime_seconds,
            "metrics": {k: list(v) for k, v in self.metrics.items()},
            "exec_feedback": self.exec_feedback,
            "viz_script": self.viz_script,
            "figure_paths": list(self.figure_paths),
            "vlm_feedback": self.vlm_feedback,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TreeNode":
        return cls(
            id=data["id"],
            parent_id=data["parent_id"],
            kind=NodeKind(data["kind"]),
            stage=data["stage"],
            plan=data["plan"],
            script=data["script"],
            status=NodeStatus(data["status"]),
            error_trace=data["error_trace"],
            runtime_seconds=data["runtime_seconds"],
            metrics={k: list(v) for k, v in data["metrics"].items()},
            exec_feedback=data["exec_feedback"],
            viz_script=data["viz_script"],
            figure_paths=list(data["figure_paths"]),
            vlm_feedback=data["vlm_feedback"],
            seed=data["seed"],
            config_fingerprint=data["config_fingerprint"],
        )


@dataclass
class ExecutionEvidence:
    """Fields merged into a node on a status transition.

    error_trace accompanies a transition to buggy; metrics and figures
    accompany a transition to non_buggy. Absent fields leave the node
    untouched.
    """

    error_trace: Optional[str] = None
    runtime_seconds: Optional[float] = None
    metrics: Optional[dict[str, list[float]]] = None
    exec_feedback: Optional[str] = None
    viz_script: Optional[str] = None
    figure_paths: Optional[list[str]] = None
    vlm_feedback: Optional[str] = None


class ExperimentTree:
    """Id-indexed node store plus the stage-root map.

    Node ids are assigned from a strictly increasing counter, so creation
    order always equals id order, and serialization preserves it.
    """

    def __init__(self) -> None:
        self.nodes: dict[int, TreeNode] = {}
        self.stage_roots: dict[int, int] = {}
        self._next_id = 0

    def __contains__(self, node_id: int) -> bool:
        return node_id in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)

    def node(self, node_id: int) -> TreeNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no node with id {node_id}") from None

    def children(self, node_id: int) -> list[TreeNode]:
        return [n for n in self.nodes.values() if n.parent_id == node_id]

    def stage_nodes(self, stage: int) -> list[TreeNode]:
        return [n for n in self.nodes.values() if n.stage == stage]

    def leaves(self) -> Iterator[TreeNode]:
        with_children = {n.parent_id for n in self.nodes.values() if n.parent_id is not None}
        for node in self.nodes.values():
            if node.id not in with_children:
                yield node

    def add_node(
        self,
        parent_id: Optional[int],
        kind: NodeKind,
        plan: str,
        script: str,
        stage: int,
        *,
        seed: Optional[int] = None,
        config_fingerprint: Optional[str] = None,
        max_debug_depth: int = DEFAULT_MAX_DEBUG_DEPTH,
    ) -> int:
        """Create a drafted node and return its fresh id.

        Raises UnknownParent, DuplicateStageRoot, KindMismatch, or
        MaxDebugDepthExceeded; on any raise the tree is unchanged.
        """
        kind = NodeKind(kind)
        parent: Optional[TreeNode] = None
        if parent_id is not None:
            if parent_id not in self.nodes:
                raise UnknownParent(f"parent {parent_id} does not exist")
            parent = self.nodes[parent_id]
        else:
            if stage in self.stage_roots:
                raise DuplicateStageRoot(f"stage {stage} already has a root")

        if kind is NodeKind.DEBUG:
            if parent is None:
                raise KindMismatch("debug node requires a parent")
            if parent.status is not NodeStatus.BUGGY:
                raise KindMismatch(
                    f"debug child requires a buggy parent, got {parent.status.value}"
                )
            if self.debug_depth(parent.id) + 1 > max_debug_depth:
                raise MaxDebugDepthExceeded(
                    f"debug chain would exceed depth {max_debug_depth}"
                )

        if kind is NodeKind.REPLICATION:
            if parent is None:
                raise KindMismatch("replication node requires a parent")
            if seed is None:
                raise KindMismatch("replication node requires a seed")
            if not scripts_equal_modulo_seed(script, parent.script):
                raise KindMismatch(
                    "replication script must be byte-identical to its parent "
                    "outside the seed line"
                )
            if parse_seed(script) != seed:
                raise KindMismatch("replication script seed line must match seed")
        elif seed is not None:
            raise KindMismatch(f"{kind.value} node must not carry a seed")

        if kind is NodeKind.AGGREGATION:
            if parent is None:
                raise KindMismatch("aggregation node requires a parent")
            inputs = [
                c for c in self.children(parent.id) if c.kind is NodeKind.REPLICATION
            ]
            if not inputs:
                raise KindMismatch(
                    "aggregation node requires replication siblings to consume"
                )

        if kind in (NodeKind.HYPERPARAMETER, NodeKind.ABLATION):
            if config_fingerprint is None:
                raise KindMismatch(f"{kind.value} node requires a config fingerprint")
        elif config_fingerprint is not None:
            raise KindMismatch(
                f"{kind.value} node must not carry a config fingerprint"
            )

        if parent is not None and stage < parent.stage:
            raise KindMismatch("child stage may not precede its parent's stage")

        node_id = self._next_id
        self._next_id += 1
        self.nodes[node_id] = TreeNode(
            id=node_id,
            parent_id=parent_id,
            kind=kind,
            stage=stage,
            plan=plan,
            script=script,
            seed=seed,
            config_fingerprint=config_fingerprint,
        )
        if parent_id is None:
            self.stage_roots[stage] = node_id
        return node_id

    def transition(
        self,
        node_id: int,
        new_status: NodeStatus,
        evidence: Optional[ExecutionEvidence] = None,
    ) -> TreeNode:
        """Move a node along the lifecycle and merge execution evidence."""
        node = self.node(node_id)
        new_status = NodeStatus(new_status)
        if new_status not in _LEGAL_TRANSITIONS[node.status]:
            raise IllegalTransition(
                f"node {node_id}: {node.status.value} -> {new_status.value}"
            )
        if evidence is not None:
            if new_status is NodeStatus.NON_BUGGY and evidence.error_trace is not None:
                raise IllegalTransition(
                    "non_buggy transition cannot carry an error trace"
                )
            if evidence.error_trace is not None:
                node.error_trace = evidence.error_trace
            if evidence.runtime_seconds is not None:
                node.runtime_seconds = evidence.runtime_seconds
            if evidence.metrics is not None:
                node.metrics = {k: list(v) for k, v in evidence.metrics.items()}
            if evidence.exec_feedback is not None:
                node.exec_feedback = evidence.exec_feedback
            if evidence.viz_script is not None:
                node.viz_script = evidence.viz_script
            if evidence.figure_paths is not None:
                node.figure_paths = list(evidence.figure_paths)
            if evidence.vlm_feedback is not None:
                node.vlm_feedback = evidence.vlm_feedback
        node.status = new_status
        return node

    def debug_depth(self, node_id: int) -> int:
        """Consecutive debug ancestors ending at node_id (self included)."""
        node = self.node(node_id)
        depth = 0
        current: Optional[TreeNode] = node
        while current is not None and current.kind is NodeKind.DEBUG:
            depth += 1
            current = (
                self.nodes[current.parent_id]
                if current.parent_id is not None
                else None
            )
        return depth

    def aggregation_inputs(self, node_id: int) -> list[TreeNode]:
        """Replication nodes an aggregation node consolidates (its siblings)."""
        node = self.node(node_id)
        if node.kind is not NodeKind.AGGREGATION or node.parent_id is None:
            return []
        return [
            c for c in self.children(node.parent_id) if c.kind is NodeKind.REPLICATION
        ]

    # --- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        ordered = sorted(self.nodes.values(), key=lambda n: n.id)
        return {
            "nodes": [n.to_dict() for n in ordered],
            "stage_roots": {str(k): v for k, v in sorted(self.stage_roots.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentTree":
        tree = cls()
        for node_data in data["nodes"]:
            node = TreeNode.from_dict(node_data)
            tree.nodes[node.id] = node
        tree.stage_roots = {int(k): v for k, v in data["stage_roots"].items()}
        tree._next_id = max(tree.nodes) + 1 if tree.nodes else 0
        tree.validate()
        return tree

    @classmethod
    def from_json(cls, text: str) -> "ExperimentTree":
        return cls.from_dict(json.loads(text))

    def snapshot(self) -> "ExperimentTree":
        """Deep read-only copy safe to hand to worker threads."""
        clone = ExperimentTree()
        for node_id, node in self.nodes.items():
            clone.nodes[node_id] = replace(
                node,
                metrics={k: list(v) for k, v in node.metrics.items()},
                figure_paths=list(node.figure_paths),
            )
        clone.stage_roots = dict(self.stage_roots)
        clone._next_id = self._next_id
        return clone

    # --- invariants ---------------------------------------------------------

    def validate(self, max_debug_depth: int = DEFAULT_MAX_DEBUG_DEPTH) -> None:
        """Check every structural invariant; raises TreeError on violation."""
        for node_id, node in self.nodes.items():
            if node_id != node.id:
                raise UnknownNode(f"id index corrupt at {node_id} -> {node.id}")
        roots = {nid for nid, n in self.nodes.items() if n.parent_id is None}
        if set(self.stage_roots.values()) != roots:
            raise DuplicateStageRoot(
                "parentless nodes and stage_roots disagree: "
                f"{sorted(roots)} vs {sorted(self.stage_roots.values())}"
            )
        for stage, root_id in self.stage_roots.items():
            root = self.node(root_id)
            if root.stage != stage:
                raise KindMismatch(f"stage {stage} root {root_id} has stage {root.stage}")
        for node in self.nodes.values():
            if node.parent_id is not None:
                if node.parent_id not in self.nodes:
                    raise UnknownParent(f"node {node.id} parent missing")
                parent = self.nodes[node.parent_id]
                if parent.id >= node.id:
                    raise UnknownParent(
                        f"node {node.id} precedes its parent {parent.id}"
                    )
                if node.stage < parent.stage:
                    raise KindMismatch(f"node {node.id} stage precedes parent")
            if node.error_trace is not None and node.status not in (
                NodeStatus.BUGGY,
                NodeStatus.RUNNING,
            ):
                raise IllegalTransition(
                    f"node {node.id} carries an error trace with status "
                    f"{node.status.value}"
                )
            if node.kind is NodeKind.DEBUG and self.debug_depth(node.id) > max_debug_depth:
                raise MaxDebugDepthExceeded(f"node {node.id} exceeds debug depth")
            if node.kind is NodeKind.REPLICATION:
                if node.seed is None:
                    raise KindMismatch(f"replication node {node.id} has no seed")
                parent = self.nodes[node.parent_id]  # type: ignore[index]
                if not scripts_equal_modulo_seed(node.script, parent.script):
                    raise KindMismatch(
                        f"replication node {node.id} diverges from parent script"
                    )
            if node.kind is NodeKind.AGGREGATION and not self.aggregation_inputs(node.id):
                raise KindMismatch(f"aggregation node {node.id} has no replication inputs")
        # Acyclicity follows from parent.id < node.id, checked above.
