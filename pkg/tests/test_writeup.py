from __future__ import annotations

import json
import os
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from labtree.errors import AggregatorFailure
from labtree.executor import SandboxConfig
from labtree.gateway import GatewaySettings, ModelGateway, Usage
from labtree.writeup import (
    FigureAuditReport,
    ManuscriptState,
    WriteupSettings,
    audit_figures,
    check_aggregator_paths,
    collect_vlm_reviews,
    draft_manuscript,
    extract_bibliography,
    figure_contexts,
    generate_aggregator,
    measure_pages,
    parse_figure_inclusions,
    reflect,
    run_aggregator,
    run_writeup,
)

from conftest import make_gateway

PNG_STUB = bytes([137, 80, 78, 71, 13, 10, 26, 10])

SUMMARIES = [
    {
        "stage": 3,
        "label": "research_agenda",
        "exp_results_npy_files": [
            "workspaces/node_7/metrics/val_accuracy.npy",
            "workspaces/node_8/metrics/val_accuracy.npy",
        ],
        "best_node": {"id": 7, "plan": "p", "metrics": {"val_accuracy": [0.9]}},
    }
]


class CannedGateway(ModelGateway):
    """Gateway whose completions come from a fixed list (for negative paths)."""

    def __init__(self, completions):
        class _Backend:
            name = "canned"

            def __init__(self, texts):
                self.texts = list(texts)
                self.calls = 0

            def complete(self, request, config):
                from labtree.gateway import ModelResponse

                text = self.texts[min(self.calls, len(self.texts) - 1)]
                self.calls += 1
                return ModelResponse(text=text, usage=Usage(), backend="canned")

        super().__init__(_Backend(completions), settings=GatewaySettings(backoff_seconds=0.0))


class RecordingGateway(ModelGateway):
    """Mock-backed gateway that records every outbound prompt."""

    def __init__(self, scenario="clean"):
        from labtree.mock_backend import MockBackend

        super().__init__(MockBackend(scenario), settings=GatewaySettings(backoff_seconds=0.0))
        self.prompts: list[str] = []

    def complete(self, request, config=None):
        self.prompts.append("\n\n".join(m.text for m in request.messages))
        return super().complete(request, config)


def write_figures(directory, names_to_payloads):
    os.makedirs(directory, exist_ok=True)
    for name, payload in names_to_payloads.items():
        with open(os.path.join(directory, name), "wb") as fh:
            fh.write(payload)


def manuscript_with(tmp_path, latex, figures):
    figures_dir = str(tmp_path / "figures")
    write_figures(figures_dir, figures)
    return ManuscriptState(
        latex_source=latex,
        references_bib=extract_bibliography(latex),
        figures_dir=figures_dir,
    )


class TestGenerateAggregator:
    def test_mock_script_creates_figures_directory(self, gateway, idea):
        script = generate_aggregator(SUMMARIES, idea, gateway)
        assert 'os.makedirs("figures", exist_ok=True)' in script

    def test_rendered_prompt_contains_max_figures(self, idea):
        gateway = RecordingGateway()
        generate_aggregator(SUMMARIES, idea, gateway, max_figures=12)
        assert "12 figures" in gateway.prompts[0]

    def test_script_loads_only_whitelisted_paths(self, gateway, idea):
        script = generate_aggregator(SUMMARIES, idea, gateway)
        check_aggregator_paths(script, SUMMARIES)

    def test_static_check_rejects_stray_path(self, idea):
        stray = (
            "plan\n\n```python\nimport numpy as np\n"
            'np.load("workspaces/node_99/metrics/other.npy")\n```'
        )
        gateway = CannedGateway([stray])
        with pytest.raises(AggregatorFailure) as excinfo:
            generate_aggregator(SUMMARIES, idea, gateway)
        assert "node_99" in str(excinfo.value)

    def test_crash_then_regeneration_with_trace(self, tmp_path, idea):
        crashing = "plan\n\n```python\nraise ValueError('agg crash')\n```"
        # regeneration path goes through run_writeup; exercise run_aggregator here
        gateway = CannedGateway([crashing])
        script = generate_aggregator(SUMMARIES, idea, gateway)
        sandbox = SandboxConfig(workspace_root=str(tmp_path / "ws"), timeout_seconds=10)
        with pytest.raises(AggregatorFailure) as excinfo:
            run_aggregator(script, str(tmp_path), sandbox)
        assert "agg crash" in excinfo.value.trace


class TestDraftManuscript:
    def test_structure_contains_documentclass_and_bibliography(self, gateway, idea, tmp_path):
        figures_dir = str(tmp_path / "figures")
        write_figures(figures_dir, {"plot_a.png": PNG_STUB + b"a"})
        state = draft_manuscript(
            idea, SUMMARIES, "# aggregator", ["plot_a.png"], ["plot_a.png: a plot"],
            page_limit=4, gateway=gateway, figures_dir=figures_dir,
        )
        assert "\\documentclass" in state.latex_source
        assert "references.bib" in state.latex_source
        assert state.references_bib.strip()
        assert state.page_count is not None

    def test_page_limit_rendered_into_prompt(self, idea, tmp_path):
        gateway = RecordingGateway()
        figures_dir = str(tmp_path / "figures")
        write_figures(figures_dir, {"plot_a.png": PNG_STUB})
        draft_manuscript(
            idea, SUMMARIES, "# aggregator", ["plot_a.png"], [],
            page_limit=4, gateway=gateway, figures_dir=figures_dir,
        )
        prompt = gateway.prompts[-1]
        assert "DO NOT USE MORE THAN 4 PAGES" in prompt

    def test_figure_references_resolve_or_audit_flags_them(self, gateway, idea, tmp_path):
        figures_dir = str(tmp_path / "figures")
        names = [f"plot_{i}.png" for i in range(6)]
        write_figures(figures_dir, {n: PNG_STUB + n.encode() for n in names})
        state = draft_manuscript(
            idea, SUMMARIES, "# aggregator", names, [],
            page_limit=4, gateway=gateway, figures_dir=figures_dir,
        )
        report = audit_figures(state)
        referenced = set(parse_figure_inclusions(state.latex_source))
        assert referenced == report.used | report.invalid_refs
        assert report.used <= set(names)

    def test_no_figures_rejected(self, gateway, idea, tmp_path):
        with pytest.raises(ValueError):
            draft_manuscript(idea, SUMMARIES, "#", [], [], 4, gateway, str(tmp_path))


def latex_referencing(*names: str) -> str:
    body = "\n".join(
        f"\\includegraphics[width=0.5\\textwidth]{{{name}}}" for name in names
    )
    return (
        "\\begin{filecontents}{references.bib}\n@article{x, title={T}}\n"
        "\\end{filecontents}\n\\documentclass{article}\n\\begin{document}\n"
        + body
        + "\n\\end{document}\n"
    )


class TestAuditFixtureCorpus:
    """Five documents with hand-computed ground truth."""

    def test_doc1_used_and_unused(self, tmp_path):
        state = manuscript_with(
            tmp_path, latex_referencing("fig_a.png"),
            {"fig_a.png": PNG_STUB + b"a", "fig_b.png": PNG_STUB + b"b"},
        )
        report = audit_figures(state)
        assert report.used == {"fig_a.png"}
        assert report.unused == {"fig_b.png"}
        assert report.invalid_refs == set()
        assert report.duplicates == set()

    def test_doc2_dangling_reference(self, tmp_path):
        state = manuscript_with(
            tmp_path, latex_referencing("ghost.png"), {"fig_a.png": PNG_STUB + b"a"}
        )
        report = audit_figures(state)
        assert report.invalid_refs == {"ghost.png"}
        assert report.unused == {"fig_a.png"}
        assert report.used == set()

    def test_doc3_byte_identical_duplicates(self, tmp_path):
        payload = PNG_STUB + b"same bytes"
        state = manuscript_with(
            tmp_path, latex_referencing("main.png", "appendix_copy.png"),
            {"main.png": payload, "appendix_copy.png": payload},
        )
        report = audit_figures(state)
        assert report.duplicates == {("appendix_copy.png", "main.png")}
        assert report.used == {"main.png", "appendix_copy.png"}

    def test_doc4_empty_directory_flags_all_references(self, tmp_path):
        state = manuscript_with(tmp_path, latex_referencing("x.png", "y.png"), {})
        report = audit_figures(state)
        assert report.invalid_refs == {"x.png", "y.png"}
        assert report.used == set() and report.unused == set()
        assert report.duplicates == set()

    def test_doc5_mixed_with_pathed_reference_and_duplicates(self, tmp_path):
        payload = PNG_STUB + b"dup"
        latex = latex_referencing("figures/fig_c.png", "dup_1.png", "missing.png")
        state = manuscript_with(
            tmp_path, latex,
            {
                "fig_c.png": PNG_STUB + b"c",
                "dup_1.png": payload,
                "dup_2.png": payload,
                "never_used.png": PNG_STUB + b"n",
            },
        )
        report = audit_figures(state)
        assert report.used == {"fig_c.png", "dup_1.png"}
        assert report.unused == {"dup_2.png", "never_used.png"}
        assert report.invalid_refs == {"missing.png"}
        assert report.duplicates == {("dup_1.png", "dup_2.png")}

    def test_used_and_unused_are_disjoint_everywhere(self, tmp_path):
        state = manuscript_with(
            tmp_path, latex_referencing("fig_a.png", "fig_a.png"),
            {"fig_a.png": PNG_STUB + b"a"},
        )
        report = audit_figures(state)
        assert not (report.used & report.unused)


def regex_parse_inclusions(latex: str) -> list[str]:
    """Independent oracle parser for the audit-soundness property."""
    pattern = re.compile(r"\\includegraphics\s*(?:\[[^\]]*\])?\s*\{([^{}]*)\}")
    return [os.path.basename(m.group(1).strip()) for m in pattern.finditer(latex) if m.group(1).strip()]


class TestParserEquivalence:
    CORPUS = [
        latex_referencing("a.png"),
        latex_referencing("a.png", "b.png", "c.pdf"),
        "no figures at all",
        "\\includegraphics{bare.png} tail",
        "\\includegraphics [width=3cm] {spaced.png}",
        "\\includegraphics[width=0.5\\textwidth,height=2cm]{two_options.png}",
        "prefix \\includegraphics{figures/deep/path.png} suffix",
    ]

    @pytest.mark.parametrize("latex", CORPUS)
    def test_scan_parser_matches_regex_oracle(self, latex):
        assert parse_figure_inclusions(latex) == regex_parse_inclusions(latex)

    @given(
        st.lists(
            st.sampled_from(["alpha.png", "beta.jpg", "gamma.pdf", "delta.png"]),
            min_size=0,
            max_size=6,
        ),
        st.sampled_from(["", "[width=0.9\\textwidth]", "[scale=0.5]"]),
    )
    @settings(max_examples=80, deadline=None)
    def test_property_equivalence_on_generated_docs(self, names, option):
        latex = "text\n" + "\n".join(
            f"\\includegraphics{option}{{{name}}}" for name in names
        )
        assert parse_figure_inclusions(latex) == regex_parse_inclusions(latex)


class TestReflect:
    def _state(self, tmp_path, gateway, idea):
        figures_dir = str(tmp_path / "figures")
        write_figures(figures_dir, {"plot_a.png": PNG_STUB + b"a"})
        return draft_manuscript(
            idea, SUMMARIES, "# aggregator", ["plot_a.png"], [],
            page_limit=4, gateway=gateway, figures_dir=figures_dir,
        )

    def test_termination_token_stops_loop_at_round_two(self, idea, tmp_path):
        gateway = make_gateway()  # mock replies "I am done" from round 2 on
        state = self._state(tmp_path, gateway, idea)
        audit = audit_figures(state)
        result = reflect(state, audit, [], "", max_rounds=5, gateway=gateway)
        assert result.reflection_round == 2
        assert result.done_flag

    def test_zero_round_budget_returns_input_unchanged(self, idea, tmp_path, gateway):
        state = self._state(tmp_path, gateway, idea)
        before = state.latex_source
        result = reflect(state, audit_figures(state), [], "", max_rounds=0, gateway=gateway)
        assert result.latex_source == before
        assert result.reflection_round == 0
        assert not result.done_flag

    def test_round_budget_exhaustion_without_token(self, idea, tmp_path):
        gateway = make_gateway("reflect_never_done")
        state = self._state(tmp_path, gateway, idea)
        result = reflect(state, audit_figures(state), [], "", max_rounds=3, gateway=gateway)
        assert result.reflection_round == 3
        assert not result.done_flag

    def test_bibliography_persists_across_rounds(self, idea, tmp_path):
        gateway = make_gateway("reflect_never_done")
        state = self._state(tmp_path, gateway, idea)
        result = reflect(state, audit_figures(state), [], "", max_rounds=4, gateway=gateway)
        assert result.references_bib.strip()
        assert "references.bib" in result.latex_source

    def test_round_one_prompt_lists_duplicate_pair(self, idea, tmp_path):
        gateway = RecordingGateway()
        state = self._state(tmp_path, gateway, idea)
        audit = FigureAuditReport(duplicates={("dup_a.png", "dup_b.png")})
        reflect(state, audit, [], "", max_rounds=1, gateway=gateway)
        round_one_prompt = gateway.prompts[-1]
        assert "dup_a.png and dup_b.png" in round_one_prompt
        assert "Reflection round 1/1" in round_one_prompt


class TestPageMeasurement:
    def test_estimate_flagged_when_no_toolchain(self, tmp_path, monkeypatch):
        import shutil as _shutil

        monkeypatch.setattr(_shutil, "which", lambda name: None)
        pages, estimate = measure_pages("\\documentclass{article}" + "x" * 7000, str(tmp_path))
        assert estimate is True
        assert pages >= 2


class TestFigureContexts:
    def test_collected_reviews_cover_used_figures(self, tmp_path, gateway):
        latex = latex_referencing("one.png")
        state = manuscript_with(tmp_path, latex, {"one.png": PNG_STUB + b"1"})
        reviews = collect_vlm_reviews(state, gateway, abstract="abstract text")
        assert len(reviews) == 1
        assert reviews[0].startswith("one.png:")

    def test_caption_and_reference_lines_extracted(self):
        latex = (
            "\\begin{filecontents}{references.bib}\n@misc{a, title={t}}\n\\end{filecontents}\n"
            "\\documentclass{article}\\begin{document}\n"
            "Figure~\\ref{fig:one} shows the trend clearly.\n"
            "\\begin{figure}\n\\includegraphics{one.png}\n"
            "\\caption{The first figure.}\n\\label{fig:one}\n\\end{figure}\n"
            "\\end{document}"
        )
        contexts = figure_contexts(latex)
        caption, refs = contexts["one.png"]
        assert caption == "The first figure."
        assert any("shows the trend" in line for line in refs)


class TestRunWriteup:
    def test_whole_phase_produces_manuscript_and_audit(self, idea, tmp_path, gateway):
        run_dir = str(tmp_path / "run")
        os.makedirs(os.path.join(run_dir, "workspaces", "node_7", "metrics"), exist_ok=True)
        import numpy as np

        np.save(os.path.join(run_dir, "workspaces", "node_7", "metrics", "val_accuracy.npy"),
                np.array([0.1, 0.9]))
        summaries = [
            {
                "stage": 3,
                "label": "research_agenda",
                "exp_results_npy_files": ["workspaces/node_7/metrics/val_accuracy.npy"],
                "best_node": {"id": 7, "plan": "p", "metrics": {"val_accuracy": [0.9]}},
            }
        ]
        sandbox = SandboxConfig(workspace_root=os.path.join(run_dir, "workspaces"), timeout_seconds=30)
        state = run_writeup(
            idea, summaries, run_dir, gateway, sandbox,
            settings=WriteupSettings(max_figures=6, page_limit=4, max_reflection_rounds=3),
            seed=3,
        )
        assert state.done_flag
        assert os.path.exists(os.path.join(run_dir, "manuscript", "manuscript.tex"))
        report = json.load(open(os.path.join(run_dir, "manuscript", "audit_report.json")))
        assert set(report) == {"used", "unused", "invalid_refs", "duplicates"}
        assert extract_bibliography(state.latex_source)
