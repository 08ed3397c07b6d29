"""labtree: agentic tree search over generated experiment code.

An autonomous research-experiment orchestrator: ideas come from a
tool-looped generation agent, experiments grow as a tree of candidate
scripts managed across four stages, figures pass a vision-model review
gate, and a reflective writeup pipeline produces the manuscript. The
deterministic mock backend makes whole runs reproducible offline.
"""

from .config import RunConfig, RunRecord
from .errors import LabTreeError
from .executor import ExecutionOutcome, FigureRecord, SandboxConfig
from .gateway import (
    LiteratureResult,
    ModelGateway,
    ModelRequest,
    ModelResponse,
    ModelRole,
    ModelRoleConfig,
)
from .ideation import Idea
from .mock_backend import MockBackend, MockScenario
from .orchestrator import Orchestrator
from .policy import NodeScore, SelectionPolicy
from .stages import RunBudget, StageDecision, StageState
from .tree import ExperimentTree, NodeKind, NodeStatus, TreeNode
from .writeup import FigureAuditReport, ManuscriptState

__version__ = "0.1.0"

__all__ = [
    "ExecutionOutcome",
    "ExperimentTree",
    "FigureAuditReport",
    "FigureRecord",
    "Idea",
    "LabTreeError",
    "LiteratureResult",
    "ManuscriptState",
    "MockBackend",
    "MockScenario",
    "ModelGateway",
    "ModelRequest",
    "ModelResponse",
    "ModelRole",
    "ModelRoleConfig",
    "NodeKind",
    "NodeScore",
    "NodeStatus",
    "Orchestrator",
    "RunBudget",
    "RunConfig",
    "RunRecord",
    "SandboxConfig",
    "SelectionPolicy",
    "StageDecision",
    "StageState",
    "TreeNode",
    "__version__",
]
