"""Prompt template set.

Templates live as plain text files under templates/ and are rendered by
substituting only the placeholders the caller provides, so literal braces
(JSON examples, LaTeX) survive untouched. The leading "Task:" marker lines
identify the request type; the deterministic mock backend keys its
responses off them.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources

# Marker lines shared between templates and the mock backend.
MARKER_DRAFT = "Task: draft a baseline experiment script."
MARKER_DEBUG = "Task: debug a failing experiment script."
MARKER_REFINE = "Task: refine a working experiment script."
MARKER_HYPERPARAM = "Task: propose a hyperparameter variation."
MARKER_ABLATION = "Task: propose an ablation."
MARKER_VIZ = "Task: write a visualization script for a completed experiment."
MARKER_EXEC_REVIEW = "Task: review an experiment execution."
MARKER_EVALUATOR = "Task: rank candidate experiment nodes."
MARKER_AGG_VIZ = "Task: write an aggregation script for replicated experiment results."
MARKER_PLOT_AGG = "Task: write the final plot-aggregation script for a manuscript."
MARKER_WRITEUP = "Task: write the complete manuscript."
MARKER_REFLECTION = "Reflection round"
MARKER_IDEA_ROUND = "Round"

# Termination token for the manuscript reflection loop.
REFLECTION_DONE_TOKEN = "I am done"

# Tool names the ideation agent may invoke.
ACTION_SEARCH = "SearchSemanticScholar"
ACTION_FINALIZE = "FinalizeIdea"

# Keys of the idea JSON payload, in presentation order.
IDEA_JSON_KEYS = (
    "Name",
    "Title",
    "Short Hypothesis",
    "Related Work",
    "Abstract",
    "Experiments",
    "Risk Factors and Limitations",
)

# Required fields of a structured image review.
REVIEW_JSON_KEYS = (
    "Img_description",
    "Img_review",
    "Caption_review",
    "Figrefs_review",
)


@lru_cache(maxsize=None)
def load_template(name: str) -> str:
    path = resources.files(__package__).joinpath("templates", f"{name}.txt")
    return path.read_text(encoding="utf-8")


def render(template_name: str, **values: object) -> str:
    """Substitute {key} for each provided key; other braces are literal."""
    text = load_template(template_name)
    for key, value in values.items():
        text = text.replace("{" + key + "}", str(value))
    return text
