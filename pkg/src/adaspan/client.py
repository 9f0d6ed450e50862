"""Thin client for the HTTP service.

Talks to a remote server when given a base URL, otherwise spins up the
application in-process so the CLI works without a running server. Both paths
go through the same HTTP interface, so behavior is identical.
"""
from __future__ import annotations

import time
import warnings
from pathlib import Path
from typing import Any, Callable

import httpx


class ServiceError(RuntimeError):
    """Non-2xx response from the service, with the server's detail message."""


class ServiceClient:
    def __init__(self, server: str | None = None, app=None,
                 runs_root: str | Path = "runs"):
        if server is not None:
            # Long-running endpoints (bench at full size) rule out a default
            # read timeout.
            self._http = httpx.Client(base_url=server, timeout=httpx.Timeout(None))
        else:
            if app is None:
                from .service import create_app
                app = create_app(runs_root=runs_root)
            with warnings.catch_warnings():
                # This platform's starlette build warns about its own test
                # client import; nothing actionable on our side.
                warnings.filterwarnings("ignore", module="starlette.testclient")
                warnings.filterwarnings("ignore", message=".*httpx2.*")
                from fastapi.testclient import TestClient
            self._http = TestClient(app)

    def close(self) -> None:
        self._http.close()

    def __enter__(self) -> "ServiceClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _json(self, resp: httpx.Response) -> dict:
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail", resp.text)
            except Exception:
                detail = resp.text
            raise ServiceError(
                f"{resp.request.method} {resp.request.url.path} "
                f"-> {resp.status_code}: {detail}")
        return resp.json()

    def health(self) -> dict:
        return self._json(self._http.get("/health"))

    def train(self, config: str | dict, *, overrides: dict[str, Any] | None = None,
              seed: int | None = None, deterministic: bool | None = None,
              total_steps: int | None = None, out_dir: str | None = None,
              resume_from: str | None = None) -> dict:
        body = {"config": config, "overrides": overrides or {}}
        for key, val in (("seed", seed), ("deterministic", deterministic),
                         ("total_steps", total_steps), ("out_dir", out_dir),
                         ("resume_from", resume_from)):
            if val is not None:
                body[key] = val
        return self._json(self._http.post("/runs", json=body))

    def runs(self) -> list[dict]:
        return self._json(self._http.get("/runs"))["runs"]

    def run(self, run_id: str) -> dict:
        return self._json(self._http.get(f"/runs/{run_id}"))

    def stop(self, run_id: str) -> dict:
        return self._json(self._http.post(f"/runs/{run_id}/stop"))

    def metrics(self, run_id: str, after_step: int = 0) -> list[dict]:
        resp = self._http.get(f"/runs/{run_id}/metrics",
                              params={"after_step": after_step})
        return self._json(resp)["records"]

    def wait(self, run_id: str, poll_seconds: float = 0.5,
             on_record: Callable[[dict], None] | None = None) -> dict:
        """Block until the run leaves the running state, streaming new metrics
        records to ``on_record``. Returns the final status."""
        seen = 0
        while True:
            status = self.run(run_id)
            if on_record is not None:
                for rec in self.metrics(run_id, after_step=seen):
                    seen = max(seen, rec["step"])
                    on_record(rec)
            if status["state"] != "running":
                return status
            time.sleep(poll_seconds)

    def eval(self, checkpoint: str, *, episodes: int = 100, seed: int = 0,
             greedy: bool = True, sampled: bool = True,
             out_path: str | None = None) -> dict:
        body = {"checkpoint": checkpoint, "episodes": episodes, "seed": seed,
                "greedy": greedy, "sampled": sampled}
        if out_path is not None:
            body["out_path"] = out_path
        return self._json(self._http.post("/eval", json=body))

    def bench(self, *, config: str | dict | None = None,
              spans: list[list[float]] | None = None, reps: int = 3,
              checkpoint: str | None = None) -> dict:
        body: dict[str, Any] = {"reps": reps}
        if config is not None:
            body["config"] = config
        if spans is not None:
            body["spans"] = spans
        if checkpoint is not None:
            body["checkpoint"] = checkpoint
        return self._json(self._http.post("/bench", json=body))

    def report(self, run_dir: str) -> dict:
        return self._json(self._http.post("/report", json={"run_dir": run_dir}))
