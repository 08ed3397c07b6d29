"""Four-stage experiment lifecycle: budgets, stopping criteria, promotion,
replication, and aggregation.

Stage 1 establishes a working prototype, stage 2 tunes hyperparameters
until training curves converge on at least two datasets (or the budget
runs out), and stages 3 and 4 spend their full allocation on the research
agenda and ablations. Between stages the best node is chosen by the
evaluator model and seeds the next stage's root.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .errors import InsufficientReplicas, KindMismatch, NoCandidates, NoViableNode
from .gateway import ModelGateway, ModelRole, last_fenced_block
from .policy import rank_non_buggy
from .prompts import render
from .scoring import primary_metric_score
from .tree import ExperimentTree, NodeKind, NodeStatus, TreeNode, inject_seed

STAGE_LABELS = {
    1: "preliminary_investigation",
    2: "hyperparameter_tuning",
    3: "research_agenda",
    4: "ablation_studies",
}

DEFAULT_STAGE_BUDGETS = (21, 12, 12, 12)
DEFAULT_ESCALATION_FRACTION = 0.25

# Hint appended to stage-3 prompt context when runs finish well under the
# per-node allocation; advisory only.
ESCALATION_HINT_TEXT = (
    "Observation: recent runs finished well under the per-node time "
    "allocation; consider increasing the scale or complexity of the "
    "experiment."
)


class StageDecision(str, Enum):
    CONTINUE = "continue"
    COMPLETE = "complete"
    COMPLETE_WITH_ESCALATION_HINT = "complete_with_escalation_hint"


@dataclass
class StageState:
    stage: int
    node_budget: int
    label: str = ""
    nodes_used: int = 0
    datasets_succeeded: set[str] = field(default_factory=set)
    convergence_flag: bool = False
    best_node: Optional[int] = None

    def __post_init__(self) -> None:
        if not self.label:
            self.label = STAGE_LABELS.get(self.stage, f"stage_{self.stage}")
        if self.node_budget < 1:
            raise ValueError("node_budget must be positive")
        if self.nodes_used > self.node_budget:
            raise ValueError("nodes_used exceeds node_budget")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "label": self.label,
            "node_budget": self.node_budget,
            "nodes_used": self.nodes_used,
            "datasets_succeeded": sorted(self.datasets_succeeded),
            "convergence_flag": self.convergence_flag,
            "best_node": self.best_node,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StageState":
        return cls(
            stage=data["stage"],
            node_budget=data["node_budget"],
            label=data["label"],
            nodes_used=data["nodes_used"],
            datasets_succeeded=set(data["datasets_succeeded"]),
            convergence_flag=data["convergence_flag"],
            best_node=data["best_node"],
        )


@dataclass
class RunBudget:
    max_wall_clock: float = 15 * 3600.0
    per_node_timeout: float = 3600.0
    replication_count: int = 3

    def __post_init__(self) -> None:
        if self.per_node_timeout > self.max_wall_clock:
            raise ValueError("per_node_timeout must not exceed max_wall_clock")
        if self.replication_count < 0:
            raise ValueError("replication_count must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "max_wall_clock": self.max_wall_clock,
            "per_node_timeout": self.per_node_timeout,
            "replication_count": self.replication_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunBudget":
        return cls(**data)


def _non_buggy_runtimes(state: StageState, tree: ExperimentTree) -> list[float]:
    return [
        n.runtime_seconds
        for n in tree.stage_nodes(state.stage)
        if n.status is NodeStatus.NON_BUGGY
    ]


def runtime_escalation(
    state: StageState,
    tree: ExperimentTree,
    budget: RunBudget,
    fraction: float = DEFAULT_ESCALATION_FRACTION,
) -> bool:
    """Median non-buggy runtime sits under fraction * per-node timeout."""
    runtimes = _non_buggy_runtimes(state, tree)
    if not runtimes:
        return False
    return statistics.median(runtimes) < fraction * budget.per_node_timeout


def check_stage_complete(
    state: StageState,
    tree: ExperimentTree,
    budget: RunBudget,
    escalation_fraction: float = DEFAULT_ESCALATION_FRACTION,
    stage2_min_datasets: int = 2,
) -> StageDecision:
    """Stopping criterion for the current stage (a pure decision)."""
    if state.stage == 1:
        prototype = any(
            n.status is NodeStatus.NON_BUGGY for n in tree.stage_nodes(1)
        )
        return StageDecision.COMPLETE if prototype else StageDecision.CONTINUE
    if state.stage == 2:
        # When fewer datasets are reachable the criterion stays open and
        # the stage ends on budget exhaustion instead.
        stabilized = (
            state.convergence_flag
            and len(state.datasets_succeeded) >= stage2_min_datasets
        )
        exhausted = state.nodes_used >= state.node_budget
        return (
            StageDecision.COMPLETE
            if stabilized or exhausted
            else StageDecision.CONTINUE
        )
    # Stages 3 and 4 run until the allocated budget is spent.
    if state.nodes_used < state.node_budget:
        return StageDecision.CONTINUE
    if state.stage == 3 and runtime_escalation(state, tree, budget, escalation_fraction):
        return StageDecision.COMPLETE_WITH_ESCALATION_HINT
    return StageDecision.COMPLETE


def promote_best(
    state: StageState,
    tree: ExperimentTree,
    gateway: ModelGateway,
    seed: Optional[int] = None,
) -> int:
    """Record and return the stage's best node per the evaluator model."""
    try:
        ranked = rank_non_buggy(tree, state.stage, gateway, seed=seed)
    except NoCandidates as exc:
        raise NoViableNode(
            f"stage {state.stage} ended with zero non-buggy nodes"
        ) from exc
    best = ranked[0].node_id
    state.best_node = best
    return best


def spawn_replications(
    tree: ExperimentTree,
    best: TreeNode,
    n: int,
    base_seed: int,
) -> list[int]:
    """Create n replication children of the best node, seeds base_seed+1.."""
    if best.status is not NodeStatus.NON_BUGGY:
        raise KindMismatch("only a non-buggy node can be replicated")
    ids = []
    for offset in range(1, n + 1):
        seed = base_seed + offset
        ids.append(
            tree.add_node(
                parent_id=best.id,
                kind=NodeKind.REPLICATION,
                plan=f"Replicate node {best.id} with seed {seed}.",
                script=inject_seed(best.script, seed),
                stage=best.stage,
                seed=seed,
            )
        )
    return ids


def aggregate_statistics(
    replicas: Sequence[TreeNode],
) -> tuple[dict[str, float], dict[str, float]]:
    """Mean and sample standard deviation of each shared metric's final value.

    With fewer than two replicas the std map is empty (undefined sample
    std); callers flag the omission.
    """
    usable = [r for r in replicas if r.metrics]
    if not usable:
        raise InsufficientReplicas("no replica carries metrics to aggregate")
    shared = set(usable[0].metrics)
    for replica in usable[1:]:
        shared &= set(replica.metrics)
    shared = {name for name in shared if all(len(r.metrics[name]) for r in usable)}
    if not shared:
        raise InsufficientReplicas("replicas share no metric name")
    means: dict[str, float] = {}
    stds: dict[str, float] = {}
    for name in sorted(shared):
        finals = [float(r.metrics[name][-1]) for r in usable]
        means[name] = statistics.fmean(finals)
        if len(finals) >= 2:
            stds[name] = statistics.stdev(finals)
    return means, stds


def aggregate(
    tree: ExperimentTree,
    replicas: Sequence[TreeNode],
    gateway: ModelGateway,
    seed: Optional[int] = None,
) -> int:
    """Create the aggregation node that consolidates replication results.

    The node's metrics hold <name>_mean and <name>_std series computed
    here; its script only renders figures from those values and never runs
    a new experiment. With a single usable replica the std is omitted and
    the omission is flagged on the node.
    """
    replicas = list(replicas)
    if not replicas:
        raise InsufficientReplicas("no replicas to aggregate")
    for replica in replicas:
        if replica.status is not NodeStatus.NON_BUGGY:
            raise KindMismatch("aggregation consumes non-buggy replicas only")
        if replica.kind is not NodeKind.REPLICATION:
            raise KindMismatch("aggregation inputs must be replication nodes")
    parents = {r.parent_id for r in replicas}
    if len(parents) != 1 or None in parents:
        raise KindMismatch("replicas must share one parent")
    parent_id = parents.pop()

    means, stds = aggregate_statistics(replicas)
    insufficient = len([r for r in replicas if r.metrics]) < 2

    replica_metrics = {
        str(r.id): {name: r.metrics[name][-1] for name in sorted(r.metrics)}
        for r in replicas
    }
    stats_payload = {
        "means": means,
        "stds": stds,
        "replica_count": len(replicas),
    }
    prompt = render(
        "aggregation_viz",
        replica_metrics=json.dumps(replica_metrics, indent=2, sort_keys=True),
        aggregate_stats=json.dumps(stats_payload, indent=2, sort_keys=True),
    )
    completion = gateway.ask(ModelRole.CODE_GENERATION, prompt, seed=seed)
    script = last_fenced_block(completion, "python")

    node_id = tree.add_node(
        parent_id=parent_id,
        kind=NodeKind.AGGREGATION,
        plan=(
            f"Consolidate {len(replicas)} replication results into mean and "
            "standard-deviation figures."
        ),
        script=script,
        stage=replicas[0].stage,
    )
    node = tree.node(node_id)
    node.viz_script = script
    metrics: dict[str, list[float]] = {}
    for name, value in means.items():
        metrics[f"{name}_mean"] = [value]
    for name, value in stds.items():
        metrics[f"{name}_std"] = [value]
    node.metrics = metrics
    if insufficient:
        node.exec_feedback = (
            "sample standard deviation omitted: fewer than two usable "
            "replicas (insufficient replicas)"
        )
    return node_id


def build_stage_summary(
    state: StageState,
    tree: ExperimentTree,
    gateway: ModelGateway,
    workspaces_prefix: str = "workspaces",
    seed: Optional[int] = None,
) -> dict:
    """Summary document a completed stage leaves behind for the writeup."""
    best = tree.node(state.best_node) if state.best_node is not None else None
    replication_ids = []
    aggregation: Optional[dict] = None
    if best is not None:
        for child in tree.children(best.id):
            if child.kind is NodeKind.REPLICATION:
                replication_ids.append(child.id)
            elif child.kind is NodeKind.AGGREGATION:
                aggregation = {
                    "node_id": child.id,
                    "metrics": {k: list(v) for k, v in sorted(child.metrics.items())},
                }
    npy_files = []
    for node_id in ([best.id] if best else []) + replication_ids:
        node = tree.node(node_id)
        for name in sorted(node.metrics):
            npy_files.append(f"{workspaces_prefix}/node_{node_id}/metrics/{name}.npy")
    narrative_prompt = (
        "Task: summarize a completed stage.\n\n"
        f"Stage {state.stage} ({state.label}) finished with "
        f"{state.nodes_used} of {state.node_budget} nodes used. Best plan:\n"
        f"{best.plan if best else '(none)'}\n\n"
        "Write a short narrative summary of the stage outcome."
    )
    narrative = gateway.ask(ModelRole.SUMMARY_REPORT, narrative_prompt, seed=seed)
    return {
        "stage": state.stage,
        "label": state.label,
        "nodes_used": state.nodes_used,
        "node_budget": state.node_budget,
        "datasets_succeeded": sorted(state.datasets_succeeded),
        "convergence_flag": state.convergence_flag,
        "best_node": {
            "id": best.id,
            "plan": best.plan,
            "metrics": {k: list(v) for k, v in sorted(best.metrics.items())},
            "score": primary_metric_score(best.metrics),
            "figures": sorted(p.rsplit("/", 1)[-1] for p in best.figure_paths),
        }
        if best
        else None,
        "replications": replication_ids,
        "aggregation": aggregation,
        "exp_results_npy_files": npy_files,
        "narrative": narrative,
    }
