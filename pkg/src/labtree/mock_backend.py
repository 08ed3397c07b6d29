"""Deterministic mock model backend.

Every response is a pure function of (role, message digest, seed), so an
entire orchestrator run under the mock is reproducible from its run config
and seed, and concurrent requests need no locking. Scripted scenarios
(for example "the first stage-1 draft is buggy") are keyed on request
content, never on call order, to keep that purity.

Generated experiment scripts are real runnable Python: they write .npy
metric series, and the companion visualization scripts render small PNG
files with nothing beyond the standard library and numpy.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass

from . import prompts
from .gateway import (
    ModelRequest,
    ModelResponse,
    ModelRole,
    ModelRoleConfig,
    Usage,
    request_digest,
)
from .scoring import primary_metric_score

_TRACE_FENCE_RE = re.compile(r"```trace\n(.*?)```", re.DOTALL)
_LATEX_FENCE_RE = re.compile(r"```latex\n(.*?)```", re.DOTALL)
_PLOTS_FENCE_RE = re.compile(r"```plots\n(.*?)```", re.DOTALL)
_JSON_FENCE_RE = re.compile(r"```json\n(.*?)```", re.DOTALL)
_NPY_PATH_RE = re.compile(r"[\w][\w./\\-]*\.npy")
_REFLECTION_ROUND_RE = re.compile(r"Reflection round (\d+)/(\d+)")

# Marker the ideation module inserts in front of each literature hit; the
# mock finalizes only once at least one hit is visible in the prompt.
LITERATURE_HIT_MARKER = "[lit]"

SCENARIO_CLEAN = "clean"
SCENARIO_FIRST_DRAFT_BUGGY = "first_draft_buggy"
SCENARIO_ALL_BUGGY = "all_buggy"
SCENARIO_FINALIZE_BEFORE_SEARCH = "finalize_before_search"
SCENARIO_REFLECT_NEVER_DONE = "reflect_never_done"

KNOWN_SCENARIOS = (
    SCENARIO_CLEAN,
    SCENARIO_FIRST_DRAFT_BUGGY,
    SCENARIO_ALL_BUGGY,
    SCENARIO_FINALIZE_BEFORE_SEARCH,
    SCENARIO_REFLECT_NEVER_DONE,
)


@dataclass
class MockScenario:
    """Content-keyed behavior switches for scripted tests."""

    name: str = SCENARIO_CLEAN
    flagged_figure_digests: frozenset = frozenset()
    caption_mismatch_digests: frozenset = frozenset()
    reflect_done_round: int = 2

    @classmethod
    def from_name(cls, name: str) -> "MockScenario":
        if name not in KNOWN_SCENARIOS:
            raise ValueError(f"unknown mock scenario {name!r}")
        return cls(name=name)


_PNG_HELPER = '''
def _write_png(path, rgb):
    import struct
    import zlib

    width = height = 32
    row = bytes([0]) + bytes(rgb) * width
    raw = row * height

    def chunk(tag, payload):
        data = tag + payload
        crc = zlib.crc32(data) & 0xFFFFFFFF
        return struct.pack(">I", len(payload)) + data + struct.pack(">I", crc)

    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    blob = (
        bytes([137, 80, 78, 71, 13, 10, 26, 10])
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(raw))
        + chunk(b"IEND", b"")
    )
    with open(path, "wb") as fh:
        fh.write(blob)
'''

_EXPERIMENT_SCRIPT = '''import os

import numpy as np

SEED = 0

rng = np.random.default_rng(SEED)
os.makedirs("metrics", exist_ok=True)
lift = @LIFT@
steps = np.arange(6, dtype=float)
val_loss = 0.4 + 0.5 * np.exp(-2.0 * steps) + rng.normal(0.0, 0.001, 6)
val_accuracy = np.clip(0.55 + lift + rng.normal(0.0, 0.002, 6).cumsum(), 0.0, 1.0)
np.save("metrics/val_loss.npy", val_loss)
np.save("metrics/val_accuracy.npy", val_accuracy)
@DATASET_LINES@@REPAIR_LINE@print("experiment complete: variant @TAG@")
'''

_DATASET_LINES = '''for name, scale in (("synth_a", 1.0), ("synth_b", 1.08)):
    np.save("metrics/" + name + "__val_loss.npy", val_loss * scale)
'''

_BUGGY_SCRIPT = '''import os

SEED = 0

os.makedirs("metrics", exist_ok=True)
raise ValueError("injected defect @TAG@: tensor shape mismatch in the baseline draft")
'''

_VIZ_SCRIPT = '''import os

import numpy as np

SEED = 0

os.makedirs("figures", exist_ok=True)
@PNG_HELPER@
palette = @PALETTE@
names = sorted(n for n in os.listdir("metrics") if n.endswith(".npy"))
for index, name in enumerate(names):
    arr = np.load(os.path.join("metrics", name))
    tone = int(min(max(float(arr[-1]), 0.0), 1.0) * 255)
    _write_png(os.path.join("figures", name[:-4] + "_curve.png"), (palette[0], tone, palette[1]))
print("rendered", len(names), "figures")
'''

_AGG_VIZ_SCRIPT = '''import os

SEED = 0

os.makedirs("figures", exist_ok=True)
@PNG_HELPER@
_write_png("figures/aggregate_@TAG@.png", @RGB@)
print("aggregate figure written")
'''

_PLOT_AGG_SCRIPT = '''import os

import numpy as np

SEED = 0

paths = @PATHS@
os.makedirs("figures", exist_ok=True)
@PNG_HELPER@
values = []
for path in paths:
    arr = np.asarray(np.load(path)).reshape(-1)
    values.append(float(arr[-1]))
tone = int((sum(values) / len(values) % 1.0) * 255) if values else 64
_write_png("figures/aggregated_overview_@TAG@.png", (64, tone, 160))
_write_png("figures/aggregated_metrics_@TAG@.png", (tone, 96, 32))
print("aggregated", len(paths), "metric files")
'''

_MANUSCRIPT = r'''\begin{filecontents}{references.bib}
@article{ref_alpha_@TAG@,
  title={Baseline Observations @TAG@},
  author={Researcher, A.},
  journal={Synthetic Proceedings},
  year={2021}
}
@article{ref_beta_@TAG@,
  title={Follow-up Analysis @TAG@},
  author={Analyst, B.},
  journal={Synthetic Proceedings},
  year={2022}
}
\end{filecontents}
\documentclass{article}
\usepackage{graphicx}
\graphicspath{{figures/}}
\begin{document}
\title{An Automated Study of Variant @TAG@}
\author{Generated Pipeline}
\maketitle
\begin{abstract}
We report an automated investigation (variant @TAG@) with replicated runs
and aggregated figures~\cite{ref_alpha_@TAG@}.
\end{abstract}
\section{Introduction}
The study follows an iterative search over candidate experiments and
reports the aggregate outcome~\cite{ref_beta_@TAG@}.
\section{Experiments}
Aggregated results appear below.
@FIGURE_BLOCKS@
\section{Conclusion}
The recorded evidence supports the reported observations without
overstating them.
\bibliographystyle{plain}
\bibliography{references}
\end{document}
'''


def _tag_of(digest: str) -> str:
    return digest[:8]


def _sub(template: str, **tokens: str) -> str:
    out = template
    for key, value in tokens.items():
        out = out.replace(f"@{key.upper()}@", value)
    return out


def _fenced(body: str, language: str = "python") -> str:
    return f"```{language}\n{body}\n```"


class MockBackend:
    """Offline model backend with deterministic, content-keyed responses."""

    name = "mock"

    def __init__(self, scenario: "MockScenario | str" = SCENARIO_CLEAN):
        if isinstance(scenario, str):
            scenario = MockScenario.from_name(scenario)
        self.scenario = scenario

    # Backend protocol -------------------------------------------------------

    def complete(self, request: ModelRequest, config: ModelRoleConfig) -> ModelResponse:
        prompt = "\n\n".join(m.text for m in request.messages)
        digest = request_digest(request)
        handler = {
            ModelRole.CODE_GENERATION: self._code,
            ModelRole.FEEDBACK_AGENT: self._feedback,
            ModelRole.EVALUATOR: self._evaluate,
            ModelRole.VLM_FEEDBACK: self._review_image,
            ModelRole.SUMMARY_REPORT: self._summary_or_ideation,
            ModelRole.WRITEUP: self._writeup,
        }[request.role]
        text = handler(prompt, digest, request)
        return ModelResponse(
            text=text,
            usage=Usage(
                prompt_tokens=len(prompt) // 4,
                completion_tokens=len(text) // 4,
            ),
            backend=self.name,
        )

    # Role handlers -----------------------------------------------------------

    def _code(self, prompt: str, digest: str, request: ModelRequest) -> str:
        tag = _tag_of(digest)
        if prompts.MARKER_VIZ in prompt:
            return self._viz_script(tag)
        if prompts.MARKER_AGG_VIZ in prompt:
            return self._agg_viz_script(tag)
        if prompts.MARKER_PLOT_AGG in prompt:
            return self._plot_agg_script(prompt, tag)
        if prompts.MARKER_DEBUG in prompt:
            return self._debug_response(prompt, tag)
        if prompts.MARKER_HYPERPARAM in prompt or prompts.MARKER_ABLATION in prompt:
            return self._config_variant_response(prompt, digest)
        # draft and refine requests share the plain experiment template
        buggy = self.scenario.name == SCENARIO_ALL_BUGGY or (
            self.scenario.name == SCENARIO_FIRST_DRAFT_BUGGY
            and prompts.MARKER_DRAFT in prompt
            and "Stage 1 (" in prompt
        )
        plan = f"Plan ({tag}): implement the experiment end to end and record validation metrics."
        if buggy:
            return plan + "\n\n" + _fenced(_sub(_BUGGY_SCRIPT, tag=tag))
        return plan + "\n\n" + _fenced(self._experiment_script(digest))

    def _experiment_script(
        self, digest: str, datasets: bool = False, repair_marker: str = ""
    ) -> str:
        lift = (int(digest[:8], 16) / 0xFFFFFFFF) * 0.4
        repair_line = f"# repair {repair_marker}\n" if repair_marker else ""
        return _sub(
            _EXPERIMENT_SCRIPT,
            lift=f"{lift:.6f}",
            dataset_lines=_DATASET_LINES if datasets else "",
            repair_line=repair_line,
            tag=_tag_of(digest),
        )

    def _debug_response(self, prompt: str, tag: str) -> str:
        match = _TRACE_FENCE_RE.search(prompt)
        trace = match.group(1).strip("\n") if match else ""
        marker = hashlib.sha256(trace.encode()).hexdigest()[:8]
        digest = hashlib.sha256((tag + marker).encode()).hexdigest()
        plan = f"Plan ({tag}): fix the defect identified in the trace (repair {marker})."
        if self.scenario.name == SCENARIO_ALL_BUGGY:
            return plan + "\n\n" + _fenced(_sub(_BUGGY_SCRIPT, tag=tag))
        script = self._experiment_script(digest, repair_marker=marker)
        return plan + "\n\n" + _fenced(script)

    def _config_variant_response(self, prompt: str, digest: str) -> str:
        tag = _tag_of(digest)
        lr_step = int(digest[8:10], 16) % 9 + 1
        epochs = 10 + int(digest[10:12], 16) % 24
        config = f"epochs={epochs},lr=0.00{lr_step}"
        kind = "hyperparameter" if prompts.MARKER_HYPERPARAM in prompt else "ablation"
        if self.scenario.name == SCENARIO_ALL_BUGGY:
            body = _sub(_BUGGY_SCRIPT, tag=tag)
        else:
            body = self._experiment_script(digest, datasets=kind == "hyperparameter")
        plan = (
            f"Plan ({tag}): test one {kind} condition against the baseline.\n"
            f"CONFIG: {config}"
        )
        return plan + "\n\n" + _fenced(body)

    def _viz_script(self, tag: str) -> str:
        palette = (int(tag[:2], 16), int(tag[2:4], 16))
        script = _sub(
            _VIZ_SCRIPT,
            png_helper=_PNG_HELPER.strip("\n"),
            palette=repr(palette),
        )
        return f"Plotting plan ({tag}).\n\n" + _fenced(script)

    def _agg_viz_script(self, tag: str) -> str:
        rgb = (int(tag[:2], 16), int(tag[2:4], 16), int(tag[4:6], 16))
        script = _sub(
            _AGG_VIZ_SCRIPT,
            png_helper=_PNG_HELPER.strip("\n"),
            rgb=repr(rgb),
            tag=tag,
        )
        return f"Aggregation plotting plan ({tag}).\n\n" + _fenced(script)

    def _plot_agg_script(self, prompt: str, tag: str) -> str:
        paths = sorted(set(_NPY_PATH_RE.findall(prompt)))
        script = _sub(
            _PLOT_AGG_SCRIPT,
            paths=repr(paths),
            png_helper=_PNG_HELPER.strip("\n"),
            tag=tag,
        )
        return f"Final plot aggregation plan ({tag}).\n\n" + _fenced(script)

    def _feedback(self, prompt: str, digest: str, request: ModelRequest) -> str:
        tag = _tag_of(digest)
        return (
            f"Run review ({tag}): execution completed and the validation series "
            "moved in the expected direction; training dynamics look stable. "
            "Consider a longer schedule or a stronger baseline next."
        )

    def _evaluate(self, prompt: str, digest: str, request: ModelRequest) -> str:
        scores: dict[str, float] = {}
        match = _JSON_FENCE_RE.search(prompt)
        if match:
            try:
                payload = json.loads(match.group(1))
            except json.JSONDecodeError:
                payload = {}
            for candidate in payload.get("candidates", []):
                value = primary_metric_score(candidate.get("metrics", {}))
                if value == float("-inf"):
                    value = -1e12
                scores[str(candidate["id"])] = value
        body = json.dumps({"scores": scores}, sort_keys=True)
        return f"THOUGHT: ranked by recorded validation performance.\n\n```json\n{body}\n```"

    def _review_image(self, prompt: str, digest: str, request: ModelRequest) -> str:
        image_digest = ""
        for message in request.messages:
            for image in message.images:
                image_digest = hashlib.sha256(image).hexdigest()
        tag = _tag_of(digest)
        flagged = image_digest in self.scenario.flagged_figure_digests
        mismatch = image_digest in self.scenario.caption_mismatch_digests
        review = {
            "Img_description": (
                f"A summary plot (digest {image_digest[:8] or tag}) showing the "
                "recorded series across steps."
            ),
            "Img_review": (
                "missing legend: the series panel has no legend and the axis "
                "labels are unclear."
                if flagged
                else "Legends and axis labels are present and readable; the "
                "figure communicates the trend clearly."
            ),
            "Caption_review": (
                "caption mismatch: the caption describes content that does not "
                "appear in the figure."
                if mismatch
                else "The caption matches the plotted content and states the takeaway."
            ),
            "Figrefs_review": (
                "The main-text references describe the figure's purpose adequately."
            ),
        }
        body = json.dumps(review, indent=2, sort_keys=True)
        return f"THOUGHT:\nInspected the figure bytes.\n\nREVIEW JSON:\n```json\n{body}\n```"

    def _summary_or_ideation(self, prompt: str, digest: str, request: ModelRequest) -> str:
        if "ACTION:" in prompt:
            return self._ideation_action(prompt, digest)
        tag = _tag_of(digest)
        return (
            f"Stage summary ({tag}): the best candidate executed cleanly, its "
            "validation metrics improved over the stage, and the replicated "
            "runs agree within one standard deviation."
        )

    def _ideation_action(self, prompt: str, digest: str) -> str:
        tag = _tag_of(digest)
        searched = LITERATURE_HIT_MARKER in prompt
        initial_round = "Begin by proposing" in prompt
        finalize_early = (
            self.scenario.name == SCENARIO_FINALIZE_BEFORE_SEARCH and initial_round
        )
        if searched or finalize_early:
            idea = {
                "Name": f"mock_idea_{tag}",
                "Title": f"Probing Variant {tag} Behavior Under Distribution Shift",
                "Short Hypothesis": (
                    "A lightweight consistency constraint changes validation "
                    f"dynamics measurably (variant {tag})."
                ),
                "Related Work": (
                    "Prior studies of regularization and robustness, surveyed "
                    "via the literature search performed in this session."
                ),
                "Abstract": (
                    "We study a simple training-time intervention and measure "
                    "its effect on validation accuracy and loss across "
                    f"synthetic datasets (variant {tag})."
                ),
                "Experiments": (
                    "Train a small sequence model with and without the "
                    "intervention; record val_accuracy and val_loss per epoch; "
                    "compare across two synthetic datasets and replicate with "
                    "three seeds."
                ),
                "Risk Factors and Limitations": (
                    "Synthetic data only; small models; effects may not "
                    "transfer to real workloads."
                ),
            }
            payload = json.dumps({"idea": idea}, indent=2, sort_keys=True)
            return f"ACTION:\nFinalizeIdea\n\nARGUMENTS:\n{payload}"
        query = f"training dynamics regularization {tag}"
        payload = json.dumps({"query": query})
        return f"ACTION:\nSearchSemanticScholar\n\nARGUMENTS:\n{payload}"

    def _writeup(self, prompt: str, digest: str, request: ModelRequest) -> str:
        tag = _tag_of(digest)
        round_match = _REFLECTION_ROUND_RE.search(prompt)
        if round_match and prompts.MARKER_REFLECTION in prompt:
            round_number = int(round_match.group(1))
            if (
                self.scenario.name != SCENARIO_REFLECT_NEVER_DONE
                and round_number >= self.scenario.reflect_done_round
            ):
                return prompts.REFLECTION_DONE_TOKEN
            latex_match = _LATEX_FENCE_RE.search(prompt)
            if latex_match:
                revised = latex_match.group(1).strip("\n")
                return f"Revised after checks ({tag}).\n\n" + _fenced(revised, "latex")
        plots_match = _PLOTS_FENCE_RE.search(prompt)
        plots = []
        if plots_match:
            plots = [line.strip() for line in plots_match.group(1).splitlines() if line.strip()]
        blocks = []
        for index, name in enumerate(plots):
            blocks.append(
                "\\begin{figure}[h]\n"
                "\\centering\n"
                f"\\includegraphics[width=0.7\\textwidth]{{{name}}}\n"
                f"\\caption{{Aggregated view {index + 1} ({name}).}}\n"
                f"\\label{{fig:agg{index + 1}}}\n"
                "\\end{figure}"
            )
        manuscript = _sub(
            _MANUSCRIPT,
            tag=tag,
            figure_blocks="\n".join(blocks) if blocks else "% no figures were available",
        )
        return f"Manuscript draft ({tag}).\n\n" + _fenced(manuscript, "latex")
