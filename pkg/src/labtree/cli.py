"""Command-line front end: ideate, run, export.

Exit codes: 0 success, 1 validation error, 2 aborted run, 3 infrastructure
error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from .config import RunConfig
from .errors import (
    ConfigError,
    GatewayError,
    LabTreeError,
    MissingCheckpoint,
    NoViableNode,
    SandboxSetupFailure,
    WallClockExceeded,
)
from .ideation import Idea, generate_ideas
from .orchestrator import Orchestrator, build_gateway
from .tree import ExperimentTree

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_ABORTED = 2
EXIT_INFRASTRUCTURE = 3


def _load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        config = RunConfig()
        config.validate()
        return config
    return RunConfig.from_file(path)


def cmd_ideate(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if args.topic:
        config.topic_path = args.topic
    if args.seed is not None:
        config.seed = args.seed
    if args.count is not None:
        config.idea_count = args.count
    if args.out:
        config.output_dir = args.out
    if not os.path.exists(config.topic_path):
        print(f"error: topic file not found: {config.topic_path}", file=sys.stderr)
        return EXIT_VALIDATION
    with open(config.topic_path, encoding="utf-8") as fh:
        topic = fh.read()

    gateway = build_gateway(config)
    ideas = generate_ideas(
        topic,
        count=config.idea_count,
        reflection_rounds=config.ideation_reflection_rounds,
        gateway=gateway,
        seed=config.seed,
    )
    ideas_dir = os.path.join(config.output_dir, "ideas")
    os.makedirs(ideas_dir, exist_ok=True)
    paths = []
    for idea in ideas:
        path = os.path.join(ideas_dir, f"{idea.name}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(idea.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(path)

    print(f"generated {len(ideas)} idea(s):")
    for index, (idea, path) in enumerate(zip(ideas, paths)):
        print(f"  [{index}] {idea.name}: {idea.title}")
        print(f"      {path}")
    print("select ideas to run with: labtree run --config <config> --idea <file>")
    return EXIT_OK


def _selected_ideas(path: str, config: RunConfig) -> list[Idea]:
    """One idea file, or a directory filtered by config.idea_selection."""
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.endswith(".json"))
        if config.idea_selection != "all":
            indices = set(config.idea_selection)
            names = [n for i, n in enumerate(names) if i in indices]
        if not names:
            raise ConfigError(f"idea_selection matched no idea files under {path}")
        paths = [os.path.join(path, n) for n in names]
    else:
        paths = [path]
    ideas = []
    for idea_path in paths:
        with open(idea_path, encoding="utf-8") as fh:
            ideas.append(Idea.from_dict(json.load(fh)))
    return ideas


def _run_one(config: RunConfig, idea: Idea, resume: bool) -> int:
    if resume:
        run_dir = os.path.join(config.output_dir, f"{idea.name}-s{config.seed}")
        orchestrator = Orchestrator.resume(run_dir)
    else:
        orchestrator = Orchestrator(config, idea)
    try:
        record = orchestrator.run()
    except NoViableNode as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        print(
            f"diagnostics: {os.path.join(orchestrator.run_dir, 'diagnostic_report.json')}",
            file=sys.stderr,
        )
        return EXIT_ABORTED
    except WallClockExceeded as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    print(f"run {record.run_id} finished with status {record.status}")
    print(f"artifacts under {orchestrator.run_dir}")
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.output_dir = args.out
    worst = EXIT_OK
    for idea in _selected_ideas(args.idea, config):
        code = _run_one(config, idea, args.resume)
        worst = max(worst, code)
    return worst


def _tree_from_checkpoint(run_dir: str) -> ExperimentTree:
    path = Orchestrator.latest_checkpoint(run_dir)
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return ExperimentTree.from_dict(payload["tree"])


def export_dot(tree: ExperimentTree) -> str:
    """Graph-description rendering with one subgraph per stage."""
    lines = ["digraph experiment_tree {", "  rankdir=TB;", "  node [shape=box];"]
    stages = sorted({n.stage for n in tree.nodes.values()})
    for stage in stages:
        lines.append(f"  subgraph cluster_stage_{stage} {{")
        lines.append(f'    label="stage {stage}";')
        for node in sorted(tree.stage_nodes(stage), key=lambda n: n.id):
            label = f"{node.id}: {node.kind.value}\\n{node.status.value}"
            lines.append(f'    n{node.id} [label="{label}"];')
        lines.append("  }")
    for node in sorted(tree.nodes.values(), key=lambda n: n.id):
        if node.parent_id is not None:
            lines.append(f"  n{node.parent_id} -> n{node.id};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def cmd_export(args: argparse.Namespace) -> int:
    tree = _tree_from_checkpoint(args.run)
    if args.format == "json":
        rendered = tree.to_json()
        default_name = "tree_export.json"
    else:
        rendered = export_dot(tree)
        default_name = "tree_export.dot"
    out_path = args.out or os.path.join(args.run, default_name)
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(rendered)
    print(out_path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labtree",
        description=(
            "Autonomous research-experiment orchestrator: tree search over "
            "generated experiment code with staged progress management."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    ideate = sub.add_parser("ideate", help="generate research ideas from a topic file")
    ideate.add_argument("--topic", help="topic description file")
    ideate.add_argument("--count", type=int, help="number of ideas to generate")
    ideate.add_argument("--seed", type=int, help="run seed")
    ideate.add_argument("--config", help="run configuration JSON")
    ideate.add_argument("--out", help="output directory")
    ideate.set_defaults(func=cmd_ideate)

    run = sub.add_parser("run", help="run selected idea(s) through all stages and writeup")
    run.add_argument("--config", help="run configuration JSON")
    run.add_argument(
        "--idea",
        required=True,
        help="idea JSON file, or a directory of ideas filtered by idea_selection",
    )
    run.add_argument("--seed", type=int, help="run seed")
    run.add_argument("--out", help="output directory")
    run.add_argument("--resume", action="store_true", help="resume from the latest checkpoint")
    run.set_defaults(func=cmd_run)

    export = sub.add_parser("export", help="export the experiment tree")
    export.add_argument("--run", required=True, help="run directory")
    export.add_argument("--format", choices=("json", "dot"), default="json")
    export.add_argument("--out", help="output file")
    export.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=os.environ.get("LABTREE_LOG", "WARNING"),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MissingCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (SandboxSetupFailure, GatewayError) as exc:
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return EXIT_INFRASTRUCTURE
    except LabTreeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRASTRUCTURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFRASTRUCTURE


if __name__ == "__main__":
    sys.exit(main())
