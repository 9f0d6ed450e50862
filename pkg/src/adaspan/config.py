"""Run configuration: pydantic models, JSON loading with precise errors,
named profiles at desk and full scale."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator


class ConfigError(ValueError):
    """Bad run configuration; message carries the offending key and line."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CatchEnvConfig(_Strict):
    name: Literal["catch"] = "catch"
    width: int = 7
    height: int = 7


class NonMatchEnvConfig(_Strict):
    name: Literal["nonmatch"] = "nonmatch"
    n_objects: int = 4
    cue_len: int = 1
    delay: int = 8


EnvConfig = Union[CatchEnvConfig, NonMatchEnvConfig]


class ModelConfig(_Strict):
    kind: Literal["stable", "adaptive", "lstm"] = "stable"
    n_layers: int = 1
    d_model: int = 64
    n_heads: int = 2
    d_head: int = 32
    d_ff: int = 256
    mem_len: int = 32
    ramp: int = 8
    span_init_frac: float = 0.3
    dropout: float = 0.0
    lstm_hidden: int | None = None      # None: solve for parameter parity

    @model_validator(mode="after")
    def _check(self):
        if self.n_heads * self.d_head != self.d_model:
            raise ValueError(
                f"n_heads * d_head must equal d_model "
                f"({self.n_heads} * {self.d_head} != {self.d_model})")
        if self.d_model % 2 != 0:
            raise ValueError(f"d_model must be even, got {self.d_model}")
        if self.mem_len < 1:
            raise ValueError(f"mem_len must be >= 1, got {self.mem_len}")
        if self.ramp < 2:
            raise ValueError(f"ramp must be >= 2, got {self.ramp}")
        if not 0.0 <= self.span_init_frac <= 1.0:
            raise ValueError(f"span_init_frac must be in [0, 1], got {self.span_init_frac}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        return self


class PipelineConfig(_Strict):
    unroll_length: int = 64
    mini_batch: int = 16
    batch_size: int = 4
    n_actors: int = 4
    n_buffers: int = 6

    @model_validator(mode="after")
    def _check(self):
        if self.unroll_length % self.mini_batch != 0:
            raise ValueError(
                f"unroll_length must be divisible by mini_batch "
                f"({self.unroll_length} % {self.mini_batch} != 0)")
        for field in ("unroll_length", "mini_batch", "batch_size", "n_actors", "n_buffers"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be >= 1")
        return self


class LossConfig(_Strict):
    baseline_cost: float = 0.5
    entropy_cost: float = 0.01
    span_penalty: float = 0.0
    discount: float = 0.99
    reward_clip: float = 1.0
    grad_clip: float = 40.0
    rho_bar: float = 1.0
    c_bar: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must be in [0, 1], got {self.discount}")
        if not self.rho_bar >= self.c_bar > 0.0:
            raise ValueError(f"require rho_bar >= c_bar > 0, got {self.rho_bar}, {self.c_bar}")
        if self.span_penalty < 0.0:
            raise ValueError(f"span_penalty must be >= 0, got {self.span_penalty}")
        return self


class OptimConfig(_Strict):
    lr: float = 2e-3
    rmsprop_decay: float = 0.99
    rmsprop_eps: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    eps_in_sqrt: bool = False
    span_lr_scale: float = 10.0
    schedule_update_every: int = 10000
    min_lr: float = 0.0
    warmup_steps: int = 0


class RunConfig(_Strict):
    env: EnvConfig = Field(default_factory=CatchEnvConfig, discriminator="name")
    model: ModelConfig = Field(default_factory=ModelConfig)
    pipeline: PipelineConfig = Field(default_factory=PipelineConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    seed: int = 1
    total_steps: int = 500
    deterministic: bool = True
    metrics_every: int = 1
    checkpoint_every: int = 0       # 0: final checkpoint only

    @model_validator(mode="after")
    def _check(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.metrics_every < 1:
            raise ValueError(f"metrics_every must be >= 1, got {self.metrics_every}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.model.kind == "adaptive" and self.model.mem_len < self.model.ramp:
            raise ValueError(
                f"adaptive span needs mem_len >= ramp ({self.model.mem_len} < {self.model.ramp})")
        return self

    def resolved_json(self) -> str:
        return json.dumps(self.model_dump(), sort_keys=True, indent=2) + "\n"


def _find_key_line(raw: str, key: str) -> int | None:
    needle = f'"{key}"'
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if needle in line:
            return lineno
    return None


def parse_config(data: dict, raw: str = "", source: str = "<dict>") -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        msgs = []
        for err in e.errors():
            loc = ".".join(str(p) for p in err["loc"])
            if err["type"] == "extra_forbidden":
                key = str(err["loc"][-1])
                line = _find_key_line(raw, key)
                where = f" at line {line}" if line else ""
                msgs.append(f"unknown key '{loc}'{where}")
            else:
                msgs.append(f"{loc}: {err['msg']}")
        raise ConfigError(f"invalid config ({source}): " + "; ".join(msgs)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    raw = path.read_text()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}") from None
    return parse_config(data, raw, str(path))


def resolve_config(spec: str) -> RunConfig:
    """Accept either a JSON file path or a named profile."""
    if Path(spec).exists():
        return load_config(spec)
    profiles = named_profiles()
    if spec in profiles:
        return profiles[spec].model_copy(deep=True)
    raise ConfigError(
        f"config {spec!r} is neither a file nor a profile "
        f"(profiles: {', '.join(sorted(profiles))})")


def named_profiles() -> dict[str, RunConfig]:
    """Ready-made configurations. Desk profiles run in minutes on a laptop;
    the full-size profile exists for benchmarking and documentation."""
    desk_pipeline = PipelineConfig(unroll_length=64, mini_batch=16, batch_size=4,
                                   n_actors=4, n_buffers=6)
    profiles = {
        "desk_catch_stable": RunConfig(
            env=CatchEnvConfig(),
            model=ModelConfig(kind="stable", n_layers=1, mem_len=32),
            pipeline=desk_pipeline,
            loss=LossConfig(),
            optim=OptimConfig(),
            total_steps=600,
        ),
        "desk_catch_adaptive": RunConfig(
            env=CatchEnvConfig(),
            model=ModelConfig(kind="adaptive", n_layers=1, mem_len=32, ramp=8),
            pipeline=desk_pipeline,
            loss=LossConfig(span_penalty=0.025),
            optim=OptimConfig(),
            total_steps=2500,
        ),
        "desk_nonmatch_stable": RunConfig(
            env=NonMatchEnvConfig(delay=8),
            model=ModelConfig(kind="stable", n_layers=1, mem_len=32),
            pipeline=desk_pipeline,
            loss=LossConfig(),
            optim=OptimConfig(),
            total_steps=1500,
        ),
        "desk_nonmatch_adaptive": RunConfig(
            env=NonMatchEnvConfig(delay=8),
            model=ModelConfig(kind="adaptive", n_layers=1, mem_len=64, ramp=8),
            pipeline=desk_pipeline,
            loss=LossConfig(span_penalty=0.0),
            optim=OptimConfig(),
            total_steps=1500,
        ),
        "desk_nonmatch_d16_adaptive": RunConfig(
            env=NonMatchEnvConfig(delay=16),
            model=ModelConfig(kind="adaptive", n_layers=3, mem_len=32, ramp=8),
            pipeline=desk_pipeline,
            loss=LossConfig(span_penalty=0.025),
            optim=OptimConfig(),
            total_steps=3000,
        ),
        "desk_nonmatch_memoryless": RunConfig(
            env=NonMatchEnvConfig(delay=8),
            model=ModelConfig(kind="stable", n_layers=1, mem_len=1),
            pipeline=PipelineConfig(unroll_length=64, mini_batch=1, batch_size=4,
                                    n_actors=4, n_buffers=6),
            loss=LossConfig(),
            optim=OptimConfig(),
            total_steps=1500,
        ),
        "desk_nonmatch_lstm": RunConfig(
            env=NonMatchEnvConfig(delay=8),
            model=ModelConfig(kind="lstm", n_layers=1, mem_len=32),
            pipeline=desk_pipeline,
            loss=LossConfig(),
            optim=OptimConfig(),
            total_steps=1500,
        ),
        "full_nonmatch_adaptive": RunConfig(
            env=NonMatchEnvConfig(delay=60),
            model=ModelConfig(kind="adaptive", n_layers=3, d_model=256, n_heads=4,
                              d_head=64, d_ff=1024, mem_len=400, ramp=32),
            pipeline=PipelineConfig(unroll_length=400, mini_batch=100, batch_size=16,
                                    n_actors=32, n_buffers=40),
            loss=LossConfig(span_penalty=0.025),
            optim=OptimConfig(lr=4e-4, span_lr_scale=1.0),
            total_steps=937,
        ),
    }
    return profiles
