from __future__ import annotations

import pytest

from labtree.gateway import GatewaySettings, ModelGateway
from labtree.ideation import Idea
from labtree.mock_backend import MockBackend, MockScenario
from labtree.tree import ExecutionEvidence, ExperimentTree, NodeKind, NodeStatus, inject_seed


def make_gateway(scenario="clean", **scenario_kwargs) -> ModelGateway:
    if scenario_kwargs:
        backend = MockBackend(MockScenario(name=scenario, **scenario_kwargs))
    else:
        backend = MockBackend(scenario)
    return ModelGateway(backend, settings=GatewaySettings(backoff_seconds=0.01))


@pytest.fixture
def gateway() -> ModelGateway:
    return make_gateway()


@pytest.fixture
def idea() -> Idea:
    return Idea(
        name="test_idea",
        title="A Small Study",
        short_hypothesis="A simple intervention changes validation dynamics.",
        related_work="Prior regularization studies.",
        abstract="We test one intervention on synthetic data.",
        experiments="Train a toy model, record val_accuracy and val_loss per epoch.",
        risk_factors_and_limitations="Synthetic data only.",
    )


BASE_SCRIPT = "SEED = 0\nvalue = SEED + 1\n"


def finish(
    tree: ExperimentTree,
    node_id: int,
    status: NodeStatus,
    metrics: dict | None = None,
    trace: str | None = None,
    runtime: float = 1.0,
) -> int:
    """Drive a drafted node to a terminal status with evidence."""
    tree.transition(node_id, NodeStatus.RUNNING)
    tree.transition(
        node_id,
        status,
        ExecutionEvidence(
            error_trace=trace if status is NodeStatus.BUGGY else None,
            metrics=metrics,
            runtime_seconds=runtime,
        ),
    )
    return node_id


def add_terminal(
    tree: ExperimentTree,
    parent_id: int | None,
    kind: NodeKind,
    stage: int,
    status: NodeStatus,
    metrics: dict | None = None,
    trace: str | None = None,
    script: str = BASE_SCRIPT,
    seed: int | None = None,
    runtime: float = 1.0,
    config_fingerprint: str | None = None,
) -> int:
    if kind is NodeKind.REPLICATION and seed is not None:
        script = inject_seed(tree.node(parent_id).script, seed)
    node_id = tree.add_node(
        parent_id,
        kind,
        plan=f"plan for {kind.value}",
        script=script,
        stage=stage,
        seed=seed,
        config_fingerprint=config_fingerprint,
    )
    return finish(tree, node_id, status, metrics=metrics, trace=trace, runtime=runtime)
