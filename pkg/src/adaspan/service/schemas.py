"""Request and response bodies for the HTTP service.

Training configs travel as plain JSON objects (validated against the run
config on the server side) so that a request can carry either a full config,
a named profile, or a profile plus overrides.
"""
from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class HealthResponse(_Strict):
    status: Literal["ok"]
    version: str


class TrainRequest(_Strict):
    """Start a training run in the background.

    ``config`` is a file-style config object or a profile name; ``overrides``
    are dotted-path patches applied on top (e.g. ``{"optim.lr": 1e-3}``).
    """
    config: str | dict[str, Any] = "desk_catch_stable"
    overrides: dict[str, Any] = Field(default_factory=dict)
    seed: int | None = None
    deterministic: bool | None = None
    total_steps: int | None = None
    out_dir: str | None = None          # default: <runs_root>/<run_id>
    resume_from: str | None = None


class RunCreated(_Strict):
    run_id: str
    out_dir: str


class RunStatus(_Strict):
    run_id: str
    state: Literal["running", "finished", "failed", "stopped"]
    out_dir: str
    step: int
    total_steps: int
    summary: dict[str, Any] | None = None
    error: str | None = None


class RunList(_Strict):
    runs: list[RunStatus]


class MetricsResponse(_Strict):
    run_id: str
    records: list[dict[str, Any]]


class EvalRequest(_Strict):
    checkpoint: str
    episodes: int = 100
    seed: int = 0
    greedy: bool = True
    sampled: bool = True
    out_path: str | None = None


class EvalResult(_Strict):
    checkpoint: str
    episodes: int
    seed: int
    mean_return_greedy: float | None = None
    n_greedy: int | None = None
    mean_return_sampled: float | None = None
    n_sampled: int | None = None
    per_episode_file: str | None = None


class BenchRequest(_Strict):
    config: str | dict[str, Any] | None = None   # None: full-size reference setup
    spans: list[list[float]] | None = None
    reps: int = 3
    checkpoint: str | None = None


class BenchResult(_Strict):
    cost_model: dict[str, Any]
    wall: dict[str, Any]
    model: dict[str, Any]


class ReportRequest(_Strict):
    run_dir: str


class ReportResult(_Strict):
    run_dir: str
    files: list[str]
