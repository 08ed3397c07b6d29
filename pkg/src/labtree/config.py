"""Run configuration and the per-run record.

One JSON document configures a run; credentials stay in environment
variables. The stock defaults reproduce the reference operating point:
stage budgets 21/12/12/12, debug probability 1.0, debug depth 3, one hour
per node, fifteen hours per run, and the role temperature/token table.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional, Union

from .errors import ConfigError
from .gateway import ModelRole, ModelRoleConfig, default_role_configs
from .mock_backend import KNOWN_SCENARIOS
from .policy import SelectionPolicy
from .stages import DEFAULT_STAGE_BUDGETS, RunBudget

RUN_STATUSES = (
    "ideation",
    "stage1",
    "stage2",
    "stage3",
    "stage4",
    "writeup",
    "done",
    "aborted",
)


@dataclass
class RunConfig:
    topic_path: str = "topic.md"
    idea_selection: Union[str, list[int]] = "all"
    stage_budgets: tuple[int, int, int, int] = DEFAULT_STAGE_BUDGETS
    policy: SelectionPolicy = field(default_factory=SelectionPolicy)
    budget: RunBudget = field(default_factory=RunBudget)
    model_roles: dict[ModelRole, ModelRoleConfig] = field(
        default_factory=default_role_configs
    )
    backend: str = "mock"
    backend_base_url: str = ""
    credential_env: str = "LABTREE_API_KEY"
    seed: int = 0
    output_dir: str = "runs"
    idea_count: int = 3
    ideation_reflection_rounds: int = 3
    replicate_stages: tuple[int, ...] = (3, 4)
    checkpoint_every: int = 5
    convergence_window: int = 3
    convergence_tolerance: float = 0.05
    stage2_min_datasets: int = 2
    escalation_fraction: float = 0.25
    max_figures: int = 12
    page_limit: int = 4
    writeup_reflection_rounds: int = 5
    mock_scenario: str = "clean"
    literature_fixture_dir: Optional[str] = None

    def validate(self) -> None:
        if len(self.stage_budgets) != 4:
            raise ConfigError("stage_budgets: exactly four stage allocations required")
        if any(b < 1 for b in self.stage_budgets):
            raise ConfigError("stage_budgets: every allocation must be >= 1")
        if self.backend not in ("mock", "real"):
            raise ConfigError(f"backend: must be 'mock' or 'real', got {self.backend!r}")
        if self.backend == "real" and not self.backend_base_url:
            raise ConfigError("backend_base_url: required when backend is 'real'")
        if self.mock_scenario not in KNOWN_SCENARIOS:
            raise ConfigError(f"mock_scenario: unknown scenario {self.mock_scenario!r}")
        if self.idea_count < 1:
            raise ConfigError("idea_count: must be >= 1")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every: must be >= 1")
        if not 0 < self.convergence_tolerance < 1:
            raise ConfigError("convergence_tolerance: must lie in (0, 1)")
        if self.stage2_min_datasets < 1:
            raise ConfigError("stage2_min_datasets: must be >= 1")
        if not 0 < self.escalation_fraction <= 1:
            raise ConfigError("escalation_fraction: must lie in (0, 1]")
        if any(s not in (1, 2, 3, 4) for s in self.replicate_stages):
            raise ConfigError("replicate_stages: entries must be stages 1-4")
        if isinstance(self.idea_selection, str) and self.idea_selection != "all":
            raise ConfigError("idea_selection: 'all' or a list of indices")

    def to_dict(self) -> dict:
        return {
            "topic_path": self.topic_path,
            "idea_selection": self.idea_selection,
            "stage_budgets": list(self.stage_budgets),
            "policy": self.policy.to_dict(),
            "budget": self.budget.to_dict(),
            "model_roles": {
                role.value: {
                    "model_id": cfg.model_id,
                    "max_tokens": cfg.max_tokens,
                    "temperature": cfg.temperature,
                }
                for role, cfg in sorted(self.model_roles.items())
            },
            "backend": self.backend,
            "backend_base_url": self.backend_base_url,
            "credential_env": self.credential_env,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "idea_count": self.idea_count,
            "ideation_reflection_rounds": self.ideation_reflection_rounds,
            "replicate_stages": list(self.replicate_stages),
            "checkpoint_every": self.checkpoint_every,
            "convergence_window": self.convergence_window,
            "convergence_tolerance": self.convergence_tolerance,
            "stage2_min_datasets": self.stage2_min_datasets,
            "escalation_fraction": self.escalation_fraction,
            "max_figures": self.max_figures,
            "page_limit": self.page_limit,
            "writeup_reflection_rounds": self.writeup_reflection_rounds,
            "mock_scenario": self.mock_scenario,
            "literature_fixture_dir": self.literature_fixture_dir,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(sorted(unknown))}")
        kwargs: dict = dict(data)
        if "stage_budgets" in kwargs:
            kwargs["stage_budgets"] = tuple(kwargs["stage_budgets"])
        if "replicate_stages" in kwargs:
            kwargs["replicate_stages"] = tuple(kwargs["replicate_stages"])
        if "policy" in kwargs and isinstance(kwargs["policy"], dict):
            try:
                kwargs["policy"] = SelectionPolicy.from_dict(kwargs["policy"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"policy: {exc}") from exc
        if "budget" in kwargs and isinstance(kwargs["budget"], dict):
            try:
                kwargs["budget"] = RunBudget.from_dict(kwargs["budget"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"budget: {exc}") from exc
        if "model_roles" in kwargs and isinstance(kwargs["model_roles"], dict):
            roles = default_role_configs()
            for name, overrides in kwargs["model_roles"].items():
                try:
                    role = ModelRole(name)
                except ValueError as exc:
                    raise ConfigError(f"model_roles: unknown role {name!r}") from exc
                base = roles[role]
                roles[role] = ModelRoleConfig(
                    role=role,
                    model_id=overrides.get("model_id", base.model_id),
                    max_tokens=overrides.get("max_tokens", base.max_tokens),
                    temperature=overrides.get("temperature", base.temperature),
                )
            kwargs["model_roles"] = roles
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(
                    f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: "
                    f"{exc.msg}"
                ) from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class RunRecord:
    """Forward-only status record persisted in each run directory."""

    run_id: str
    status: str = "ideation"
    checkpoint_path: Optional[str] = None

    def advance(self, new_status: str) -> None:
        if new_status not in RUN_STATUSES:
            raise ConfigError(f"unknown run status {new_status!r}")
        if new_status == "aborted":
            self.status = new_status
            return
        if RUN_STATUSES.index(new_status) < RUN_STATUSES.index(self.status):
            raise ConfigError(
                f"run status may not move backwards: {self.status} -> {new_status}"
            )
        self.status = new_status

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "status": self.status,
            "checkpoint_path": self.checkpoint_path,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunRecord":
        return cls(
            run_id=data["run_id"],
            status=data["status"],
            checkpoint_path=data.get("checkpoint_path"),
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "RunRecord":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))
