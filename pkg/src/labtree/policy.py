"""Node selection and child proposal.

Each iteration the coordinator asks this module which nodes to expand.
With a configured probability a slot targets a debuggable buggy node
(uniformly among those under the debug-depth limit); otherwise it takes
the best-ranked non-buggy node not already chosen this iteration. All
randomness comes from an injected random source, and every function works
on a read-only tree snapshot, so calls are safe from any thread.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from typing import Mapping, Optional

from .errors import (
    EmptyCompletion,
    EmptyStage,
    EvaluatorUnavailable,
    GatewayError,
    KindMismatch,
    NoCandidates,
)
from .gateway import (
    ModelGateway,
    ModelRole,
    extract_fenced_blocks,
    last_fenced_block,
    text_before_last_block,
)
from .prompts import render
from .scoring import primary_metric_score, summarize_metrics
from .tree import (
    DEFAULT_MAX_DEBUG_DEPTH,
    ExperimentTree,
    NodeKind,
    NodeStatus,
    TreeNode,
    canonicalize_fingerprint,
)


@dataclass
class SelectionPolicy:
    debug_probability: float = 1.0
    max_debug_depth: int = DEFAULT_MAX_DEBUG_DEPTH
    parallelism: int = 3
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.debug_probability <= 1.0:
            raise ValueError("debug_probability must lie in [0, 1]")
        if self.max_debug_depth < 1:
            raise ValueError("max_debug_depth must be positive")
        if self.parallelism < 1:
            raise ValueError("parallelism must be at least 1")

    def to_dict(self) -> dict:
        return {
            "debug_probability": self.debug_probability,
            "max_debug_depth": self.max_debug_depth,
            "parallelism": self.parallelism,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SelectionPolicy":
        return cls(**data)


@dataclass
class NodeScore:
    node_id: int
    score: float
    rationale: str = ""


@dataclass
class StageContext:
    """Everything a child proposal may need beyond its parent node."""

    stage: int
    stage_label: str
    goal: str
    tested_fingerprints: tuple[str, ...] = ()
    escalation_hint: str = ""
    seed: Optional[int] = None


def _ranked_non_buggy_ids(
    tree: ExperimentTree,
    stage: int,
    scores: Optional[Mapping[int, float]] = None,
) -> list[int]:
    nodes = [n for n in tree.stage_nodes(stage) if n.status is NodeStatus.NON_BUGGY]
    if scores is None:
        scores = {n.id: primary_metric_score(n.metrics) for n in nodes}
    return [
        n.id
        for n in sorted(nodes, key=lambda n: (-scores.get(n.id, float("-inf")), n.id))
    ]


def select_candidates(
    tree: ExperimentTree,
    stage: int,
    policy: SelectionPolicy,
    rng: random.Random,
    k: int,
    scores: Optional[Mapping[int, float]] = None,
) -> list[int]:
    """Pick up to k distinct node ids to expand this iteration.

    `scores` optionally carries evaluator rankings for the non-buggy pool;
    without it nodes rank by their recorded primary validation metric,
    which matches what the mock evaluator reports.
    """
    stage_nodes = tree.stage_nodes(stage)
    if not stage_nodes:
        raise EmptyStage(f"stage {stage} has no nodes")

    eligible_buggy = sorted(
        n.id
        for n in stage_nodes
        if n.status is NodeStatus.BUGGY
        and tree.debug_depth(n.id) < policy.max_debug_depth
    )
    ranked_good = _ranked_non_buggy_ids(tree, stage, scores)

    if not eligible_buggy and not ranked_good:
        root_id = tree.stage_roots.get(stage)
        if root_id is not None and tree.node(root_id).status is NodeStatus.DRAFTED:
            return [root_id]
        return []

    chosen: list[int] = []
    for _ in range(k):
        prefer_buggy = rng.random() < policy.debug_probability
        buggy_pool = [i for i in eligible_buggy if i not in chosen]
        good_pool = [i for i in ranked_good if i not in chosen]
        use_buggy = prefer_buggy
        pool = buggy_pool if use_buggy else good_pool
        if not pool:
            use_buggy = not use_buggy
            pool = buggy_pool if use_buggy else good_pool
        if not pool:
            break
        if use_buggy:
            chosen.append(pool[rng.randrange(len(pool))])
        else:
            chosen.append(pool[0])
    return chosen


def rank_non_buggy(
    tree: ExperimentTree,
    stage: int,
    gateway: ModelGateway,
    seed: Optional[int] = None,
) -> list[NodeScore]:
    """Total order over the stage's non-buggy nodes, best first.

    The evaluator model sees each candidate's metrics and figure names;
    ties break toward the lower node id so replays are stable.
    """
    nodes = sorted(
        (n for n in tree.stage_nodes(stage) if n.status is NodeStatus.NON_BUGGY),
        key=lambda n: n.id,
    )
    if not nodes:
        raise NoCandidates(f"stage {stage} has no non-buggy nodes")
    candidates = [
        {
            "id": n.id,
            "metrics": {k: list(v) for k, v in sorted(n.metrics.items())},
            "figures": sorted(p.rsplit("/", 1)[-1] for p in n.figure_paths),
        }
        for n in nodes
    ]
    prompt = render(
        "evaluator",
        candidates=json.dumps({"candidates": candidates}, indent=2, sort_keys=True),
    )
    try:
        completion = gateway.ask(ModelRole.EVALUATOR, prompt, seed=seed)
    except GatewayError as exc:
        raise EvaluatorUnavailable(str(exc)) from exc

    scores: dict[int, float] = {}
    rationale = text_before_last_block(completion)
    blocks = extract_fenced_blocks(completion, "json")
    if blocks:
        try:
            payload = json.loads(blocks[-1])
            for key, value in payload.get("scores", {}).items():
                scores[int(key)] = float(value)
        except (json.JSONDecodeError, TypeError, ValueError):
            scores = {}
    ranked = sorted(nodes, key=lambda n: (-scores.get(n.id, float("-inf")), n.id))
    return [
        NodeScore(node_id=n.id, score=scores.get(n.id, float("-inf")), rationale=rationale)
        for n in ranked
    ]


_KIND_TEMPLATES = {
    NodeKind.DRAFT: "draft",
    NodeKind.DEBUG: "debug",
    NodeKind.REFINE: "refine",
    NodeKind.HYPERPARAMETER: "hyperparameter",
    NodeKind.ABLATION: "ablation",
}


def propose_child(
    parent: TreeNode,
    kind: NodeKind,
    context: StageContext,
    gateway: ModelGateway,
) -> tuple[str, str]:
    """Ask the code-generation model for a child's plan and script."""
    kind = NodeKind(kind)
    if kind not in _KIND_TEMPLATES:
        raise KindMismatch(f"cannot propose a {kind.value} child")
    if kind is NodeKind.DEBUG and parent.status is not NodeStatus.BUGGY:
        raise KindMismatch("debug children require a buggy parent")
    if kind is not NodeKind.DEBUG and parent.status is NodeStatus.BUGGY:
        raise KindMismatch(f"{kind.value} children require a non-buggy parent")

    contract = render("output_contract")
    values: dict[str, object] = {
        "stage": context.stage,
        "stage_label": context.stage_label,
        "plan": parent.plan or "(no plan recorded)",
        "output_contract": contract,
    }
    if kind is NodeKind.DRAFT:
        values["context"] = context.goal
        values["dataset_guidance"] = render("dataset_guidance")
    elif kind is NodeKind.DEBUG:
        values["script"] = parent.script
        values["error_trace"] = parent.error_trace or "(no trace recorded)"
    elif kind is NodeKind.REFINE:
        values["script"] = parent.script
        values["exec_feedback"] = parent.exec_feedback or "(none recorded)"
        values["metrics_summary"] = summarize_metrics(parent.metrics)
        values["escalation_hint"] = (
            f"\n{context.escalation_hint}\n" if context.escalation_hint else "\n"
        )
    else:  # hyperparameter / ablation
        values["script"] = parent.script
        values["tested_fingerprints"] = (
            "\n".join(f"- {f}" for f in context.tested_fingerprints)
            if context.tested_fingerprints
            else "(none yet)"
        )

    prompt = render(_KIND_TEMPLATES[kind], **values)
    completion = gateway.ask(ModelRole.CODE_GENERATION, prompt, seed=context.seed)
    script = last_fenced_block(completion, "python")
    if not script.strip():
        raise EmptyCompletion("proposal contained an empty code block")
    plan = text_before_last_block(completion)
    if not plan.strip():
        plan = "(plan not stated by the model)"
    return plan, script


def extract_config_fingerprint(plan: str) -> Optional[str]:
    """Canonical fingerprint from a proposal's CONFIG line, if present."""
    for line in plan.splitlines():
        stripped = line.strip()
        if stripped.startswith("CONFIG:"):
            rendered = stripped[len("CONFIG:") :].strip()
            if rendered:
                return canonicalize_fingerprint(rendered)
    return None


def is_duplicate_config(history: set[str], candidate: str) -> bool:
    """True iff the candidate configuration was already tested."""
    canonical = canonicalize_fingerprint(candidate)
    return canonical in {canonicalize_fingerprint(h) for h in history}
