"""FastAPI application wrapping training, evaluation, benchmarks and reports.

Training runs execute on background threads; everything else is synchronous.
Run state lives in process memory, while all durable artifacts (config,
metrics, checkpoints, summary) land in the run's output directory.
"""
from __future__ import annotations

import itertools
import threading
import traceback
from pathlib import Path
from typing import Any

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..config import ConfigError, RunConfig, parse_config, resolve_config
from ..metrics import read_metrics, write_reports
from ..runner import bench_attention, evaluate, run_training
from .schemas import (
    BenchRequest,
    BenchResult,
    EvalRequest,
    EvalResult,
    HealthResponse,
    MetricsResponse,
    ReportRequest,
    ReportResult,
    RunCreated,
    RunList,
    RunStatus,
    TrainRequest,
)


def apply_overrides(data: dict, overrides: dict[str, Any]) -> dict:
    """Set dotted-path keys in a nested config dict, e.g. ``optim.lr``."""
    for dotted, value in overrides.items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {}
            node = node[part]
        node[parts[-1]] = value
    return data


def build_run_config(spec: str | dict[str, Any],
                     overrides: dict[str, Any] | None = None,
                     seed: int | None = None,
                     deterministic: bool | None = None,
                     total_steps: int | None = None) -> RunConfig:
    """Resolve a request's config (profile name, file path, or inline object)
    and apply the common overrides."""
    if isinstance(spec, str):
        cfg = resolve_config(spec)
    else:
        cfg = parse_config(dict(spec), source="<request>")
    data = cfg.model_dump()
    apply_overrides(data, overrides or {})
    if seed is not None:
        data["seed"] = seed
    if deterministic is not None:
        data["deterministic"] = deterministic
    if total_steps is not None:
        data["total_steps"] = total_steps
    return parse_config(data, source="<request>")


class _Run:
    """One background training run and its live status."""

    def __init__(self, run_id: str, cfg: RunConfig, out_dir: Path):
        self.run_id = run_id
        self.cfg = cfg
        self.out_dir = out_dir
        self.stop_event = threading.Event()
        self.thread: threading.Thread | None = None
        self.lock = threading.Lock()
        self.step = 0
        self.state = "running"
        self.summary: dict | None = None
        self.error: str | None = None

    def on_progress(self, record: dict) -> None:
        self.step = record["step"]

    def run(self, resume_from: str | None) -> None:
        try:
            summary = run_training(self.cfg, self.out_dir,
                                   stop_event=self.stop_event,
                                   progress=self.on_progress,
                                   resume_from=resume_from)
            with self.lock:
                self.summary = summary
                self.state = "stopped" if summary.get("stopped_early") else "finished"
        except Exception as e:                  # surfaced via GET /runs/{id}
            with self.lock:
                self.error = f"{type(e).__name__}: {e}"
                self.state = "failed"
            traceback.print_exc()

    def status(self) -> RunStatus:
        with self.lock:
            return RunStatus(
                run_id=self.run_id,
                state=self.state,
                out_dir=str(self.out_dir),
                step=self.step,
                total_steps=self.cfg.total_steps,
                summary=self.summary,
                error=self.error,
            )


def create_app(runs_root: str | Path = "runs") -> FastAPI:
    app = FastAPI(title="adaspan", version=__version__)
    runs: dict[str, _Run] = {}
    order: list[str] = []
    registry_lock = threading.Lock()
    counter = itertools.count(1)
    root = Path(runs_root)

    @app.exception_handler(ConfigError)
    async def _config_error(request, exc: ConfigError):
        from fastapi.responses import JSONResponse
        return JSONResponse(status_code=422, content={"detail": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/runs", response_model=RunCreated, status_code=201)
    def start_run(req: TrainRequest) -> RunCreated:
        cfg = build_run_config(req.config, req.overrides, req.seed,
                               req.deterministic, req.total_steps)
        with registry_lock:
            run_id = f"run-{next(counter):04d}"
            out_dir = Path(req.out_dir) if req.out_dir else root / run_id
            run = _Run(run_id, cfg, out_dir)
            runs[run_id] = run
            order.append(run_id)
        run.thread = threading.Thread(
            target=run.run, args=(req.resume_from,), daemon=True,
            name=f"train-{run_id}")
        run.thread.start()
        return RunCreated(run_id=run_id, out_dir=str(out_dir))

    def _get(run_id: str) -> _Run:
        run = runs.get(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id!r}")
        return run

    @app.get("/runs", response_model=RunList)
    def list_runs() -> RunList:
        return RunList(runs=[runs[rid].status() for rid in order])

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: str) -> RunStatus:
        return _get(run_id).status()

    @app.post("/runs/{run_id}/stop", response_model=RunStatus)
    def stop_run(run_id: str) -> RunStatus:
        run = _get(run_id)
        run.stop_event.set()
        return run.status()

    @app.get("/runs/{run_id}/metrics", response_model=MetricsResponse)
    def run_metrics(run_id: str, after_step: int = 0) -> MetricsResponse:
        run = _get(run_id)
        records = read_metrics(run.out_dir / "metrics.jsonl")
        if after_step:
            records = [r for r in records if r["step"] > after_step]
        return MetricsResponse(run_id=run_id, records=records)

    @app.post("/eval", response_model=EvalResult)
    def eval_checkpoint(req: EvalRequest) -> EvalResult:
        if not Path(req.checkpoint).exists():
            raise HTTPException(status_code=404,
                                detail=f"no checkpoint at {req.checkpoint!r}")
        result = evaluate(req.checkpoint, episodes=req.episodes, seed=req.seed,
                          greedy=req.greedy, sampled=req.sampled,
                          out_path=req.out_path)
        return EvalResult(**result)

    @app.post("/bench", response_model=BenchResult)
    def bench(req: BenchRequest) -> BenchResult:
        cfg = None
        if req.config is not None:
            cfg = build_run_config(req.config)
        try:
            result = bench_attention(cfg=cfg, spans=req.spans, reps=req.reps,
                                     checkpoint_path=req.checkpoint)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e)) from None
        return BenchResult(**result)

    @app.post("/report", response_model=ReportResult)
    def report(req: ReportRequest) -> ReportResult:
        run_dir = Path(req.run_dir)
        if not run_dir.is_dir():
            raise HTTPException(status_code=404,
                                detail=f"no run directory at {req.run_dir!r}")
        files = write_reports(run_dir)
        return ReportResult(run_dir=str(run_dir), files=[str(f) for f in files])

    return app
