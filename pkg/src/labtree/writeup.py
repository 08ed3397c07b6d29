"""Manuscript production: final-plot aggregation, a single-pass draft, and
a bounded reflection loop with figure audits and vision reviews.

The aggregator script is statically checked against the metric-file
whitelist from the summaries before it ever executes. Reflection rounds
feed audit findings, lint output, page information, and figure reviews
back to the model until it answers with the termination token or the
round budget runs out.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import AggregatorFailure, EmptyCompletion
from .executor import SandboxConfig, _run_subprocess, normalize_trace
from .gateway import ModelGateway, ModelRole, extract_fenced_blocks, last_fenced_block
from .ideation import Idea
from .prompts import REFLECTION_DONE_TOKEN, render

logger = logging.getLogger(__name__)

DEFAULT_MAX_FIGURES = 12
DEFAULT_PAGE_LIMIT = 4
DEFAULT_MAX_REFLECTION_ROUNDS = 5

# Characters of LaTeX body that roughly fill one single-column page; used
# when no typesetting toolchain is installed.
_CHARS_PER_PAGE = 3000

_NPY_PATH_RE = re.compile(r"[\w][\w./\\-]*\.npy")
_IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".gif", ".svg", ".pdf")


@dataclass
class ManuscriptState:
    latex_source: str
    references_bib: str
    figures_dir: str
    page_count: Optional[float] = None
    page_count_is_estimate: bool = True
    reflection_round: int = 0
    done_flag: bool = False


@dataclass
class FigureAuditReport:
    used: set[str] = field(default_factory=set)
    unused: set[str] = field(default_factory=set)
    invalid_refs: set[str] = field(default_factory=set)
    duplicates: set[tuple[str, str]] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "used": sorted(self.used),
            "unused": sorted(self.unused),
            "invalid_refs": sorted(self.invalid_refs),
            "duplicates": sorted(list(pair) for pair in self.duplicates),
        }


# --- aggregator generation ----------------------------------------------------


def metric_whitelist(summaries: Sequence[dict]) -> set[str]:
    paths: set[str] = set()
    for summary in summaries:
        for path in summary.get("exp_results_npy_files", []):
            paths.add(path)
    return paths


def referenced_npy_paths(script: str) -> set[str]:
    return set(_NPY_PATH_RE.findall(script))


def check_aggregator_paths(script: str, summaries: Sequence[dict]) -> None:
    """Static whitelist check: the script may read only listed metric files."""
    allowed = metric_whitelist(summaries)
    stray = referenced_npy_paths(script) - allowed
    if stray:
        raise AggregatorFailure(
            "aggregator references metric paths outside the summaries: "
            + ", ".join(sorted(stray))
        )


def generate_aggregator(
    summaries: Sequence[dict],
    idea: Idea,
    gateway: ModelGateway,
    max_figures: int = DEFAULT_MAX_FIGURES,
    seed: Optional[int] = None,
    failure_note: str = "",
) -> str:
    """Ask the model for the final plot-aggregation script and vet it."""
    prompt = render(
        "plot_aggregation",
        idea_text=idea.to_markdown(),
        summaries=json.dumps(list(summaries), indent=2, sort_keys=True),
        max_figures=max_figures,
    )
    if failure_note:
        prompt += (
            "\n\nYour previous script failed; fix the cause and return the "
            f"full corrected script.\n```trace\n{failure_note}\n```"
        )
    completion = gateway.ask(ModelRole.CODE_GENERATION, prompt, seed=seed)
    script = last_fenced_block(completion, "python")
    if not script.strip():
        raise EmptyCompletion("aggregator completion held no script")
    check_aggregator_paths(script, summaries)
    return script


def run_aggregator(
    script: str,
    run_dir: str,
    sandbox: SandboxConfig,
    name: str = "aggregate_plots.py",
) -> list[str]:
    """Execute the aggregator with the run directory as its cwd; returns the
    figure files present under figures/ afterwards."""
    run_dir = os.path.abspath(run_dir)
    script_path = os.path.join(run_dir, name)
    with open(script_path, "w", encoding="utf-8") as fh:
        fh.write(script)
    command = list(sandbox.interpreter) + [script_path]
    code, _stdout, stderr, _elapsed, timed_out = _run_subprocess(
        command, run_dir, sandbox, sandbox.timeout_seconds
    )
    if timed_out:
        raise AggregatorFailure("aggregator script timed out", trace="timeout")
    if code != 0:
        trace = normalize_trace(stderr, run_dir)
        raise AggregatorFailure("aggregator script crashed", trace=trace)
    figures_dir = os.path.join(run_dir, "figures")
    if not os.path.isdir(figures_dir):
        return []
    return sorted(
        name
        for name in os.listdir(figures_dir)
        if name.lower().endswith(_IMAGE_EXTENSIONS)
    )


# --- manuscript drafting --------------------------------------------------------


def extract_bibliography(latex_source: str) -> str:
    """Content of the embedded references filecontents block, or ''."""
    match = re.search(
        r"\\begin\{filecontents\}\{references\.bib\}(.*?)\\end\{filecontents\}",
        latex_source,
        re.DOTALL,
    )
    return match.group(1).strip() if match else ""


def measure_pages(latex_source: str, workdir: str) -> tuple[Optional[float], bool]:
    """(page count, is_estimate). Uses the typesetting toolchain when one is
    installed; degrades to a character-count heuristic otherwise."""
    pdflatex = shutil.which("pdflatex")
    if pdflatex:
        tex_path = os.path.join(workdir, "manuscript.tex")
        with open(tex_path, "w", encoding="utf-8") as fh:
            fh.write(latex_source)
        try:
            result = subprocess.run(
                [pdflatex, "-interaction=nonstopmode", "-halt-on-error", "manuscript.tex"],
                cwd=workdir,
                capture_output=True,
                text=True,
                timeout=120,
            )
            match = re.search(r"Output written on .* \((\d+) page", result.stdout)
            if match:
                return float(match.group(1)), False
        except (subprocess.SubprocessError, OSError):
            logger.warning("typesetting failed; falling back to page estimate")
    body = re.sub(r"\\begin\{filecontents\}.*?\\end\{filecontents\}", "", latex_source, flags=re.DOTALL)
    pages = max(1.0, math.ceil(len(body) / _CHARS_PER_PAGE))
    return pages, True


def _page_info_line(state: Optional[ManuscriptState], page_limit: int) -> str:
    if state is None or state.page_count is None:
        return "The current page count is not known yet."
    qualifier = "approximately " if state.page_count_is_estimate else ""
    return (
        f"The compiled manuscript is currently {qualifier}"
        f"{state.page_count:g} pages against the {page_limit}-page limit."
    )


def draft_manuscript(
    idea: Idea,
    summaries: Sequence[dict],
    aggregator_script: str,
    figures: Sequence[str],
    plot_descriptions: Sequence[str],
    page_limit: int,
    gateway: ModelGateway,
    figures_dir: str,
    seed: Optional[int] = None,
) -> ManuscriptState:
    """Single-pass full draft with the bibliography embedded."""
    if not figures:
        raise ValueError("cannot draft a manuscript without figures")
    prompt = render(
        "writeup",
        page_limit=page_limit,
        page_info=_page_info_line(None, page_limit),
        idea_text=idea.to_markdown(),
        summaries=json.dumps(list(summaries), indent=2, sort_keys=True),
        aggregator_code=aggregator_script,
        plot_list="\n".join(figures),
        plot_descriptions="\n".join(f"- {d}" for d in plot_descriptions) or "(none)",
    )
    completion = gateway.ask(ModelRole.WRITEUP, prompt, seed=seed)
    latex = last_fenced_block(completion, "latex")
    if not latex.strip():
        raise EmptyCompletion("manuscript completion held no LaTeX")
    state = ManuscriptState(
        latex_source=latex,
        references_bib=extract_bibliography(latex),
        figures_dir=figures_dir,
    )
    pages, estimate = measure_pages(latex, figures_dir_parent(figures_dir))
    state.page_count = pages
    state.page_count_is_estimate = estimate
    return state


def figures_dir_parent(figures_dir: str) -> str:
    parent = os.path.dirname(os.path.abspath(figures_dir))
    return parent or "."


# --- figure audit ---------------------------------------------------------------


def parse_figure_inclusions(latex_source: str) -> list[str]:
    """Figure files referenced via includegraphics, without regex.

    A deliberate character-scan implementation so tests can pit it against
    an independent regex parser.
    """
    command = "\\includegraphics"
    names = []
    index = 0
    while True:
        start = latex_source.find(command, index)
        if start < 0:
            break
        cursor = start + len(command)
        # optional [...] argument
        while cursor < len(latex_source) and latex_source[cursor].isspace():
            cursor += 1
        if cursor < len(latex_source) and latex_source[cursor] == "[":
            depth = 1
            cursor += 1
            while cursor < len(latex_source) and depth:
                if latex_source[cursor] == "[":
                    depth += 1
                elif latex_source[cursor] == "]":
                    depth -= 1
                cursor += 1
        while cursor < len(latex_source) and latex_source[cursor].isspace():
            cursor += 1
        if cursor >= len(latex_source) or latex_source[cursor] != "{":
            index = cursor
            continue
        depth = 1
        cursor += 1
        argument = []
        while cursor < len(latex_source) and depth:
            ch = latex_source[cursor]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if not depth:
                    break
            argument.append(ch)
            cursor += 1
        names.append("".join(argument).strip())
        index = cursor
    return [os.path.basename(n) for n in names if n]


def _figure_files(figures_dir: str) -> list[str]:
    if not os.path.isdir(figures_dir):
        return []
    return sorted(
        name
        for name in os.listdir(figures_dir)
        if name.lower().endswith(_IMAGE_EXTENSIONS)
    )


def audit_figures(
    manuscript: ManuscriptState,
    gateway: Optional[ModelGateway] = None,
    seed: Optional[int] = None,
) -> FigureAuditReport:
    """Cross-check referenced figures against the figures directory.

    Byte-identical files are reported as duplicates; when a gateway is
    supplied, figures whose vision descriptions coincide are added as
    advisory duplicate pairs.
    """
    referenced = set(parse_figure_inclusions(manuscript.latex_source))
    present = set(_figure_files(manuscript.figures_dir))
    report = FigureAuditReport(
        used=referenced & present,
        unused=present - referenced,
        invalid_refs=referenced - present,
    )
    by_digest: dict[str, list[str]] = {}
    for name in sorted(present):
        with open(os.path.join(manuscript.figures_dir, name), "rb") as fh:
            digest = hashlib.sha256(fh.read()).hexdigest()
        by_digest.setdefault(digest, []).append(name)
    for names in by_digest.values():
        for i in range(len(names)):
            for j in range(i + 1, len(names)):
                report.duplicates.add((names[i], names[j]))

    if gateway is not None:
        by_description: dict[str, list[str]] = {}
        for name in sorted(present):
            with open(os.path.join(manuscript.figures_dir, name), "rb") as fh:
                image = fh.read()
            review = gateway.review_image(
                image, caption=name, figrefs=[], abstract="", seed=seed
            )
            by_description.setdefault(review["Img_description"], []).append(name)
        for names in by_description.values():
            for i in range(len(names)):
                for j in range(i + 1, len(names)):
                    report.duplicates.add((names[i], names[j]))
    return report


# --- reflection loop -------------------------------------------------------------


def run_lint(latex_source: str, workdir: str) -> str:
    """Style-checker output when the tool exists; empty string otherwise."""
    chktex = shutil.which("chktex")
    if not chktex:
        return ""
    path = os.path.join(workdir, "lint_input.tex")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(latex_source)
    try:
        result = subprocess.run(
            [chktex, "-q", path], capture_output=True, text=True, timeout=60
        )
        return (result.stdout or "")[:4000]
    except (subprocess.SubprocessError, OSError):
        return ""


def reflect(
    manuscript: ManuscriptState,
    audit: FigureAuditReport,
    vlm_reviews: Sequence[str],
    lint_output: str,
    max_rounds: int,
    gateway: ModelGateway,
    page_limit: int = DEFAULT_PAGE_LIMIT,
    seed: Optional[int] = None,
) -> ManuscriptState:
    """Bounded revise-and-recheck loop over the manuscript.

    Stops when the completion carries the termination token or the round
    budget is exhausted; the returned state keeps the last good source.
    """
    state = manuscript
    current_audit = audit
    current_lint = lint_output
    current_reviews = list(vlm_reviews)
    while state.reflection_round < max_rounds:
        round_number = state.reflection_round + 1
        prompt = render(
            "writeup_reflection",
            current_round=round_number,
            max_rounds=max_rounds,
            unused_figs=_format_names(sorted(current_audit.unused)),
            invalid_figs=_format_names(sorted(current_audit.invalid_refs)),
            duplicate_figs=_format_pairs(sorted(current_audit.duplicates)),
            vlm_reviews="\n".join(current_reviews) or "(none)",
            page_info=_page_info_line(state, page_limit),
            lint_output=current_lint or "(style checker unavailable)",
            latex_source=state.latex_source,
            done_token=REFLECTION_DONE_TOKEN,
        )
        completion = gateway.ask(ModelRole.WRITEUP, prompt, seed=seed)
        state.reflection_round = round_number
        if REFLECTION_DONE_TOKEN in completion and not extract_fenced_blocks(
            completion, "latex"
        ):
            state.done_flag = True
            break
        blocks = extract_fenced_blocks(completion, "latex")
        if not blocks:
            logger.warning("reflection round %d returned no LaTeX; keeping source", round_number)
            continue
        state.latex_source = blocks[-1]
        state.references_bib = extract_bibliography(state.latex_source)
        pages, estimate = measure_pages(
            state.latex_source, figures_dir_parent(state.figures_dir)
        )
        state.page_count = pages
        state.page_count_is_estimate = estimate
        current_audit = audit_figures(state)
        current_lint = run_lint(state.latex_source, figures_dir_parent(state.figures_dir))
    return state


def _format_names(names: Sequence[str]) -> str:
    return "\n".join(f"- {n}" for n in names) or "(none)"


def _format_pairs(pairs: Sequence[tuple[str, str]]) -> str:
    return "\n".join(f"- {a} and {b}" for a, b in pairs) or "(none)"


# --- figure captions / references for the vision pass -----------------------------


def figure_contexts(latex_source: str) -> dict[str, tuple[str, list[str]]]:
    """Map figure filename -> (caption, main-text reference lines)."""
    contexts: dict[str, tuple[str, list[str]]] = {}
    env_re = re.compile(r"\\begin\{figure\}.*?\\end\{figure\}", re.DOTALL)
    caption_re = re.compile(r"\\caption\{([^{}]*)\}")
    label_re = re.compile(r"\\label\{([^{}]*)\}")
    body_without_figures = env_re.sub("", latex_source)
    lines = body_without_figures.splitlines()
    for env in env_re.finditer(latex_source):
        chunk = env.group(0)
        names = parse_figure_inclusions(chunk)
        caption_match = caption_re.search(chunk)
        caption = caption_match.group(1) if caption_match else ""
        label_match = label_re.search(chunk)
        refs: list[str] = []
        if label_match:
            needle = f"\\ref{{{label_match.group(1)}}}"
            refs = [line.strip() for line in lines if needle in line]
        for name in names:
            contexts[name] = (caption, refs)
    return contexts


def collect_vlm_reviews(
    manuscript: ManuscriptState,
    gateway: ModelGateway,
    abstract: str = "",
    seed: Optional[int] = None,
) -> list[str]:
    """Structured reviews of every used figure, rendered for the prompt."""
    contexts = figure_contexts(manuscript.latex_source)
    reviews = []
    for name in sorted(set(parse_figure_inclusions(manuscript.latex_source))):
        path = os.path.join(manuscript.figures_dir, name)
        if not os.path.exists(path):
            continue
        with open(path, "rb") as fh:
            image = fh.read()
        caption, figrefs = contexts.get(name, ("", []))
        review = gateway.review_image(
            image, caption=caption, figrefs=figrefs, abstract=abstract, seed=seed
        )
        reviews.append(
            f"{name}: {review['Img_review']} | caption: {review['Caption_review']} "
            f"| references: {review['Figrefs_review']}"
        )
    return reviews


# --- whole writeup phase -----------------------------------------------------------


@dataclass
class WriteupSettings:
    max_figures: int = DEFAULT_MAX_FIGURES
    page_limit: int = DEFAULT_PAGE_LIMIT
    max_reflection_rounds: int = DEFAULT_MAX_REFLECTION_ROUNDS


def run_writeup(
    idea: Idea,
    summaries: Sequence[dict],
    run_dir: str,
    gateway: ModelGateway,
    sandbox: SandboxConfig,
    settings: Optional[WriteupSettings] = None,
    seed: Optional[int] = None,
) -> ManuscriptState:
    """Aggregator, draft, reflections; writes the manuscript artifacts."""
    settings = settings or WriteupSettings()
    script = generate_aggregator(
        summaries, idea, gateway, max_figures=settings.max_figures, seed=seed
    )
    try:
        figures = run_aggregator(script, run_dir, sandbox)
    except AggregatorFailure as exc:
        logger.warning("aggregator failed (%s); regenerating once", exc)
        script = generate_aggregator(
            summaries,
            idea,
            gateway,
            max_figures=settings.max_figures,
            seed=seed,
            failure_note=exc.trace or str(exc),
        )
        figures = run_aggregator(script, run_dir, sandbox)
    if not figures:
        raise AggregatorFailure("aggregator produced no figures")

    figures_dir = os.path.join(run_dir, "figures")
    descriptions = []
    for name in figures:
        with open(os.path.join(figures_dir, name), "rb") as fh:
            review = gateway.review_image(
                fh.read(), caption=name, figrefs=[], abstract=idea.abstract, seed=seed
            )
        descriptions.append(f"{name}: {review['Img_description']}")

    state = draft_manuscript(
        idea,
        summaries,
        script,
        figures,
        descriptions,
        settings.page_limit,
        gateway,
        figures_dir,
        seed=seed,
    )
    audit = audit_figures(state)
    reviews = collect_vlm_reviews(state, gateway, abstract=idea.abstract, seed=seed)
    lint = run_lint(state.latex_source, run_dir)
    state = reflect(
        state,
        audit,
        reviews,
        lint,
        settings.max_reflection_rounds,
        gateway,
        page_limit=settings.page_limit,
        seed=seed,
    )

    manuscript_dir = os.path.join(run_dir, "manuscript")
    os.makedirs(manuscript_dir, exist_ok=True)
    with open(os.path.join(manuscript_dir, "manuscript.tex"), "w", encoding="utf-8") as fh:
        fh.write(state.latex_source)
    final_audit = audit_figures(state)
    with open(os.path.join(manuscript_dir, "audit_report.json"), "w", encoding="utf-8") as fh:
        json.dump(final_audit.to_dict(), fh, indent=2, sort_keys=True)
    return state
