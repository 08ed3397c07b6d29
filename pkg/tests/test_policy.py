from __future__ import annotations

import hashlib
import random

import pytest

from labtree.errors import EmptyStage, EvaluatorUnavailable, KindMismatch, NoCandidates
from labtree.gateway import GatewaySettings, ModelGateway
from labtree.policy import (
    SelectionPolicy,
    StageContext,
    extract_config_fingerprint,
    is_duplicate_config,
    propose_child,
    rank_non_buggy,
    select_candidates,
)
from labtree.tree import ExperimentTree, NodeKind, NodeStatus

from conftest import BASE_SCRIPT, add_terminal


def one_buggy_one_good() -> ExperimentTree:
    tree = ExperimentTree()
    tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
    add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.BUGGY, trace="boom")
    add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY,
                 metrics={"val_accuracy": [0.7]})
    return tree


def context(stage=1) -> StageContext:
    return StageContext(stage=stage, stage_label="preliminary_investigation",
                        goal="Test a toy hypothesis.", seed=3)


class TestSelectCandidates:
    def test_probability_one_picks_the_buggy_node(self):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        buggy = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.BUGGY, trace="t")
        add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.2]})
        add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.9]})
        policy = SelectionPolicy(debug_probability=1.0)
        chosen = select_candidates(tree, 1, policy, random.Random(0), k=1)
        assert chosen == [buggy]

    def test_empty_buggy_pool_falls_back_to_best_ranked(self):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.2]})
        best = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.9]})
        add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.5]})
        policy = SelectionPolicy(debug_probability=1.0)
        chosen = select_candidates(tree, 1, policy, random.Random(0), k=1)
        assert chosen == [best]

    def test_selection_frequency_converges_to_debug_probability(self):
        # Monte Carlo oracle: 10 000 Bernoulli(0.5) draws; 3-sigma band is
        # 10000*0.5 +- 3*sqrt(10000*0.25) = 5000 +- 150.
        tree = one_buggy_one_good()
        policy = SelectionPolicy(debug_probability=0.5)
        rng = random.Random(1234)
        buggy_hits = sum(
            select_candidates(tree, 1, policy, rng, k=1) == [1] for _ in range(10_000)
        )
        assert 5000 - 150 <= buggy_hits <= 5000 + 150

    def test_depth_respect_never_selects_exhausted_chain(self):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        last = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.BUGGY, trace="t")
        for _ in range(3):
            last = add_terminal(tree, last, NodeKind.DEBUG, 1, NodeStatus.BUGGY, trace="t")
        add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.4]})
        policy = SelectionPolicy(debug_probability=1.0, max_debug_depth=3)
        rng = random.Random(0)
        for _ in range(50):
            for node_id in select_candidates(tree, 1, policy, rng, k=2):
                assert tree.debug_depth(node_id) < 3

    def test_empty_pools_return_drafted_root_alone(self):
        tree = ExperimentTree()
        root = tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        policy = SelectionPolicy()
        assert select_candidates(tree, 1, policy, random.Random(0), k=3) == [root]

    def test_empty_stage_raises(self):
        tree = ExperimentTree()
        with pytest.raises(EmptyStage):
            select_candidates(tree, 1, SelectionPolicy(), random.Random(0), k=1)

    def test_distinct_ids_per_iteration(self):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        for value in (0.1, 0.2, 0.3):
            add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY,
                         metrics={"val_accuracy": [value]})
        chosen = select_candidates(tree, 1, SelectionPolicy(debug_probability=0.0),
                                   random.Random(0), k=3)
        assert len(chosen) == len(set(chosen)) == 3

    def test_determinism_same_seed_same_selection(self):
        tree = one_buggy_one_good()
        policy = SelectionPolicy(debug_probability=0.5)
        first = [
            select_candidates(tree, 1, policy, random.Random(42), k=1) for _ in range(20)
        ]
        second = [
            select_candidates(tree, 1, policy, random.Random(42), k=1) for _ in range(20)
        ]
        assert first == second


class TestRankNonBuggy:
    def test_mock_ranking_sorts_by_validation_metric(self, gateway):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        a = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.7]})
        b = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.9]})
        ranked = rank_non_buggy(tree, 1, gateway)
        assert [s.node_id for s in ranked] == [b, a]

    def test_tie_breaks_by_lower_node_id(self, gateway):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        for _ in range(3):
            add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.BUGGY, trace="t")
        four = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.5]})
        add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.BUGGY, trace="t")
        add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.BUGGY, trace="t")
        seven = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.5]})
        assert (four, seven) == (4, 7)
        ranked = rank_non_buggy(tree, 1, gateway)
        assert [s.node_id for s in ranked] == [4, 7]

    def test_descending_permutation_matches_brute_force(self, gateway):
        scores = [0.2, 0.9, 0.4]
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        ids = [
            add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY,
                         metrics={"val_accuracy": [value]})
            for value in scores
        ]
        expected = [nid for _, nid in sorted(zip(scores, ids), key=lambda p: -p[0])]
        ranked = rank_non_buggy(tree, 1, gateway)
        assert [s.node_id for s in ranked] == expected

    def test_insertion_order_invariance(self, gateway):
        values = [0.3, 0.8, 0.1, 0.8]
        orderings = [values, list(reversed(values))]
        rankings = []
        for ordering in orderings:
            tree = ExperimentTree()
            tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
            by_value = {}
            for value in ordering:
                nid = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY,
                                   metrics={"val_accuracy": [value]})
                by_value.setdefault(value, []).append(nid)
            ranked = rank_non_buggy(tree, 1, gateway)
            rankings.append([tree.node(s.node_id).metrics["val_accuracy"][-1] for s in ranked])
        assert rankings[0] == rankings[1]

    def test_no_candidates(self, gateway):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.BUGGY, trace="t")
        with pytest.raises(NoCandidates):
            rank_non_buggy(tree, 1, gateway)

    def test_gateway_failure_surfaces_as_evaluator_unavailable(self):
        class DeadBackend:
            name = "dead"

            def complete(self, request, config):
                from labtree.gateway import TransientBackendError

                raise TransientBackendError("down")

        gateway = ModelGateway(DeadBackend(), settings=GatewaySettings(retry_attempts=2, backoff_seconds=0.0))
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY, metrics={"val_accuracy": [0.5]})
        with pytest.raises(EvaluatorUnavailable):
            rank_non_buggy(tree, 1, gateway)


class TestProposeChild:
    def test_debug_request_carries_mock_repair_marker_from_trace_hash(self, gateway):
        trace = "Traceback (most recent call last):\n  ...\nValueError: division by zero"
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        buggy = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.BUGGY, trace=trace)
        plan, script = propose_child(tree.node(buggy), NodeKind.DEBUG, context(), gateway)
        marker = hashlib.sha256(trace.encode()).hexdigest()[:8]
        assert marker in script
        assert plan

    def test_refine_returns_fresh_nonempty_plan(self, gateway):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        parent = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY,
                              metrics={"val_accuracy": [0.6]})
        plan, script = propose_child(tree.node(parent), NodeKind.REFINE, context(), gateway)
        assert plan.strip() and script.strip()
        assert plan != tree.node(parent).plan

    def test_same_request_and_seed_is_deterministic(self, gateway):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        parent = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY,
                              metrics={"val_accuracy": [0.6]})
        first = propose_child(tree.node(parent), NodeKind.REFINE, context(), gateway)
        second = propose_child(tree.node(parent), NodeKind.REFINE, context(), gateway)
        assert first == second

    def test_kind_incompatible_with_parent_status(self, gateway):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 1)
        buggy = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.BUGGY, trace="t")
        good = add_terminal(tree, 0, NodeKind.DRAFT, 1, NodeStatus.NON_BUGGY,
                            metrics={"val_accuracy": [0.6]})
        with pytest.raises(KindMismatch):
            propose_child(tree.node(good), NodeKind.DEBUG, context(), gateway)
        with pytest.raises(KindMismatch):
            propose_child(tree.node(buggy), NodeKind.REFINE, context(), gateway)

    def test_hyperparameter_proposal_carries_config_line(self, gateway):
        tree = ExperimentTree()
        tree.add_node(None, NodeKind.DRAFT, "root", BASE_SCRIPT, 2)
        parent = add_terminal(tree, 0, NodeKind.DRAFT, 2, NodeStatus.NON_BUGGY,
                              metrics={"val_accuracy": [0.6]})
        plan, _script = propose_child(
            tree.node(parent), NodeKind.HYPERPARAMETER, context(stage=2), gateway
        )
        fingerprint = extract_config_fingerprint(plan)
        assert fingerprint is not None
        assert "=" in fingerprint


class TestDuplicateConfig:
    def test_exact_membership(self):
        assert is_duplicate_config({"lr=0.001,epochs=10"}, "lr=0.001,epochs=10")

    def test_canonical_ordering_forced(self):
        assert is_duplicate_config({"lr=0.001,epochs=10"}, "epochs=10,lr=0.001")

    def test_empty_history(self):
        assert not is_duplicate_config(set(), "anything=1")

    def test_extract_config_fingerprint(self):
        plan = "Plan: vary things.\nCONFIG: lr=0.002,epochs=12\nmore text"
        assert extract_config_fingerprint(plan) == "epochs=12,lr=0.002"
        assert extract_config_fingerprint("no config here") is None
