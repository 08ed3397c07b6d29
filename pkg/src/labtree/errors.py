"""Exception hierarchy for the orchestrator.

Every error raised by labtree derives from LabTreeError so callers can
distinguish orchestrator faults from bugs in generated experiment code
(the latter are evidence, not exceptions).
"""


class LabTreeError(Exception):
    """Base class for all orchestrator errors."""


# --- tree errors -----------------------------------------------------------


class TreeError(LabTreeError):
    pass


class UnknownNode(TreeError):
    pass


class UnknownParent(TreeError):
    pass


class DuplicateStageRoot(TreeError):
    """A stage tree already has a root; parentless nodes are roots."""


class MaxDebugDepthExceeded(TreeError):
    """Adding this debug node would extend a debug chain past the limit."""


class KindMismatch(TreeError):
    """Node kind incompatible with its parent or its payload."""


class IllegalTransition(TreeError):
    pass


# --- search / selection ----------------------------------------------------


class EmptyStage(LabTreeError):
    pass


class NoCandidates(LabTreeError):
    pass


class EvaluatorUnavailable(LabTreeError):
    pass


# --- stage management ------------------------------------------------------


class NoViableNode(LabTreeError):
    """A stage ended with zero non-buggy nodes; the run must abort."""


class InsufficientReplicas(LabTreeError):
    pass


# --- execution -------------------------------------------------------------


class ExecutorError(LabTreeError):
    pass


class SandboxSetupFailure(ExecutorError):
    """Workspace or interpreter unavailable; an orchestrator fault, not a
    buggy node."""


class PlottingFailure(ExecutorError):
    def __init__(self, message: str, trace: str = ""):
        super().__init__(message)
        self.trace = trace


class NoMetrics(ExecutorError):
    """Execution produced zero parseable metric series."""


# --- model gateway ---------------------------------------------------------


class GatewayError(LabTreeError):
    pass


class RateLimited(GatewayError):
    pass


class ImageNotAllowed(GatewayError):
    pass


class EmptyCompletion(GatewayError):
    """Completion contained no extractable fenced code block."""


class MalformedReview(GatewayError):
    """Image review response had no parseable review JSON."""


# --- ideation --------------------------------------------------------------


class UnknownAction(LabTreeError):
    pass


class MalformedArguments(LabTreeError):
    """Action arguments did not parse; signals a reprompt."""


class IdeationExhausted(LabTreeError):
    """Round budget spent without a valid finalized idea."""


# --- writeup ---------------------------------------------------------------


class AggregatorFailure(LabTreeError):
    def __init__(self, message: str, trace: str = ""):
        super().__init__(message)
        self.trace = trace


# --- shell -----------------------------------------------------------------


class ConfigError(LabTreeError):
    """Run configuration failed validation; message names the field."""


class MissingCheckpoint(LabTreeError):
    pass


class WallClockExceeded(LabTreeError):
    """Run hit its wall-clock budget and aborted cleanly."""
