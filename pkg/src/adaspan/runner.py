"""Run orchestration: training loop (deterministic or threaded), evaluation,
and the attention-cost benchmark."""
from __future__ import annotations

import json
import os
import threading
import time
from pathlib import Path
from statistics import median

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, named_profiles
from .envs import make_env
from .learner import (Actor, LossWeights, ParamStore, Trajectory,
                      TrajectoryBuffers, chunked_learn_step, flop_ratio_now)
from .metrics import MetricsWriter
from .model import (LstmAgent, LstmConfig, StableBlockConfig, TransformerAgent,
                    lstm_hidden_for_parity)
from .optim import RMSProp, cosine_schedule
from .rng import Rng

THREADS_ENV_VAR = "ADASPAN_THREADS"


def build_env(cfg: RunConfig, seed: int):
    kwargs = cfg.env.model_dump()
    name = kwargs.pop("name")
    return make_env(name, seed, **kwargs)


def build_model(cfg: RunConfig, rng: Rng):
    probe_env = build_env(cfg, seed=0)
    obs_shape = probe_env.obs_shape
    n_actions = probe_env.n_actions
    m = cfg.model
    if m.kind in ("stable", "adaptive"):
        block = StableBlockConfig(
            d_model=m.d_model, n_heads=m.n_heads, d_head=m.d_head, d_ff=m.d_ff,
            adaptive=(m.kind == "adaptive"), ramp=m.ramp, max_span=m.mem_len,
            span_init_frac=m.span_init_frac, dropout=m.dropout)
        return TransformerAgent(obs_shape, n_actions, block, m.n_layers, m.mem_len, rng)
    reference = TransformerAgent(
        obs_shape, n_actions,
        StableBlockConfig(d_model=m.d_model, n_heads=m.n_heads, d_head=m.d_head,
                          d_ff=m.d_ff, adaptive=False, ramp=m.ramp, max_span=m.mem_len,
                          dropout=m.dropout),
        m.n_layers, m.mem_len, rng.spawn(999)).n_params()
    hidden = m.lstm_hidden or lstm_hidden_for_parity(
        reference, obs_shape, n_actions, m.d_model, m.n_layers)
    agent = LstmAgent(obs_shape, n_actions,
                      LstmConfig(d_model=m.d_model, hidden=hidden, n_layers=m.n_layers), rng)
    gap = abs(agent.n_params() - reference) / reference
    if gap > 0.10:
        raise ValueError(
            f"LSTM baseline has {agent.n_params()} parameters, reference transformer "
            f"{reference}: {gap:.1%} apart, parity requires <= 10%")
    return agent


def build_optimizer(cfg: RunConfig, model) -> RMSProp:
    o = cfg.optim
    scales = {}
    for name in model.parameters():
        if name.endswith("attn.z"):
            scales[name] = o.span_lr_scale
    return RMSProp(model.parameters(), lr=o.lr, decay=o.rmsprop_decay, eps=o.rmsprop_eps,
                   momentum=o.momentum, weight_decay=o.weight_decay,
                   eps_in_sqrt=o.eps_in_sqrt, lr_scales=scales)


def _loss_weights(cfg: RunConfig) -> LossWeights:
    l = cfg.loss
    return LossWeights(baseline_cost=l.baseline_cost, entropy_cost=l.entropy_cost,
                       span_penalty=l.span_penalty, discount=l.discount,
                       reward_clip=l.reward_clip, grad_clip=l.grad_clip,
                       rho_bar=l.rho_bar, c_bar=l.c_bar)


def _actor_cap(n_actors: int) -> int:
    raw = os.environ.get(THREADS_ENV_VAR, "")
    if not raw:
        return n_actors
    try:
        cap = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer, got {raw!r}") from None
    if cap < 1:
        raise ValueError(f"{THREADS_ENV_VAR} must be >= 1, got {cap}")
    return min(n_actors, cap)


class SyncDriver:
    """Deterministic single-threaded driver: actors share the learner's model
    and run round-robin, so every batch is a pure function of the seed."""

    def __init__(self, cfg: RunConfig, model, root_rng: Rng):
        self.batch_size = cfg.pipeline.batch_size
        self.actors = []
        for i in range(cfg.pipeline.n_actors):
            env = build_env(cfg, seed=0)
            self.actors.append(Actor(i, env, model,
                                     cfg.pipeline.unroll_length, root_rng.spawn(100 + i)))
        self._next = 0

    def get_batch(self) -> list[Trajectory]:
        batch = []
        for _ in range(self.batch_size):
            actor = self.actors[self._next % len(self.actors)]
            self._next += 1
            batch.append(actor.rollout())
        return batch

    def publish(self, params, version: int) -> None:
        pass

    def stop(self) -> None:
        pass

    def stats(self) -> dict:
        return {"mode": "sync", "actors": len(self.actors)}


class ThreadedDriver:
    """IMPALA-style driver: actor threads fill bounded buffers while the
    learner consumes; actors refresh parameters from the ParamStore between
    rollouts, so they may lag the learner by a few versions."""

    def __init__(self, cfg: RunConfig, model_factory, root_rng: Rng):
        n_actors = _actor_cap(cfg.pipeline.n_actors)
        self.buffers = TrajectoryBuffers(cfg.pipeline.n_buffers)
        self.store = ParamStore()
        self.batch_size = cfg.pipeline.batch_size
        self._stop = threading.Event()
        self._errors: list[BaseException] = []
        self.actors = []
        self.threads = []
        for i in range(n_actors):
            env = build_env(cfg, seed=0)
            actor = Actor(i, env, model_factory(), cfg.pipeline.unroll_length,
                          root_rng.spawn(100 + i))
            self.actors.append(actor)
            self.threads.append(threading.Thread(
                target=self._actor_loop, args=(actor,), daemon=True,
                name=f"actor-{i}"))

    def start(self) -> None:
        for t in self.threads:
            t.start()

    def _actor_loop(self, actor: Actor) -> None:
        while not self._stop.is_set():
            try:
                actor.sync_params(self.store)
                traj = actor.rollout()
            except BaseException as e:              # env failure stays on this actor
                self._errors.append(e)
                try:
                    actor.env.reset()
                    continue
                except BaseException:
                    return
            while not self._stop.is_set():
                try:
                    self.buffers.put(traj, timeout=0.2)
                    break
                except Exception:
                    continue

    def get_batch(self) -> list[Trajectory]:
        batch = []
        while len(batch) < self.batch_size:
            if self._stop.is_set():
                raise RuntimeError("driver stopped while waiting for trajectories")
            try:
                batch.append(self.buffers.get(timeout=0.5))
            except Exception:
                continue
        return batch

    def publish(self, params, version: int) -> None:
        self.store.publish(params, version)

    def stop(self) -> None:
        self._stop.set()
        for t in self.threads:
            t.join(timeout=2.0)

    def stats(self) -> dict:
        return {"mode": "threaded", "actors": len(self.actors),
                "produced": self.buffers.produced, "consumed": self.buffers.consumed,
                "in_flight": self.buffers.in_flight,
                "actor_errors": len(self._errors)}


def run_training(cfg: RunConfig, out_dir: str | Path,
                 stop_event: threading.Event | None = None,
                 progress=None, resume_from: str | None = None) -> dict:
    """Train per the config, writing config.json, metrics.jsonl, summary.json
    and checkpoint.bin into ``out_dir``. Returns the summary dict (plus wall
    time, which is not written to any compared file)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.resolved_json())

    root = Rng(cfg.seed)
    model = build_model(cfg, root.spawn(1))
    optimizer = build_optimizer(cfg, model)
    start_step = 0
    if resume_from:
        ckpt = load_checkpoint(resume_from)
        restore_model(model, optimizer, ckpt)
        start_step = ckpt.step
    weights = _loss_weights(cfg)
    learn_rng = root.spawn(2)

    if cfg.deterministic:
        driver = SyncDriver(cfg, model, root)
    else:
        # Each threaded actor owns a replica refreshed from the store.
        def model_factory():
            return build_model(cfg, root.spawn(1))
        driver = ThreadedDriver(cfg, model_factory, root)
        driver.publish(model.parameters(), version=0)
        driver.start()

    recent_returns: list[float] = []
    episodes_seen = 0
    frames = 0
    t_start = time.monotonic()
    stopped = False
    step = start_step - 1
    try:
        with MetricsWriter(out / "metrics.jsonl") as writer:
            for step in range(start_step, cfg.total_steps):
                if stop_event is not None and stop_event.is_set():
                    stopped = True
                    break
                batch = driver.get_batch()
                lr = cosine_schedule(step, cfg.optim.lr, cfg.total_steps,
                                     cfg.optim.schedule_update_every, cfg.optim.min_lr,
                                     cfg.optim.warmup_steps)
                try:
                    parts = chunked_learn_step(model, optimizer, batch, weights,
                                               cfg.pipeline.mini_batch, lr, rng=learn_rng)
                except Exception:
                    _dump_diagnostics(out, step, model)
                    raise
                driver.publish(model.parameters(), version=step + 1)

                for tr in batch:
                    recent_returns.extend(tr.completed_returns)
                    episodes_seen += len(tr.completed_returns)
                recent_returns = recent_returns[-100:]
                frames += parts.pop("frames")

                record = {
                    "step": step + 1,
                    "frames": frames,
                    "episodes": episodes_seen,
                    "mean_return_100": (float(np.mean(recent_returns))
                                        if recent_returns else None),
                    "spans": _span_lists(model),
                    "flops": flop_ratio_now(model, cfg.pipeline.mini_batch),
                    **parts,
                }
                if (step + 1) % cfg.metrics_every == 0 or step + 1 == cfg.total_steps:
                    writer.write(record)
                if progress is not None:
                    progress(record)
                if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                    _save(out / f"checkpoint_{step + 1:06d}.bin", step + 1, cfg,
                          model, optimizer)
    finally:
        driver.stop()

    final_step = step + 1 if not stopped else step
    _save(out / "checkpoint.bin", final_step, cfg, model, optimizer)
    summary = {
        "steps": final_step,
        "frames": frames,
        "episodes": episodes_seen,
        "mean_return_100": float(np.mean(recent_returns)) if recent_returns else None,
        "spans": _span_lists(model),
        "flops": flop_ratio_now(model, cfg.pipeline.mini_batch),
        "stopped_early": stopped,
        "driver": driver.stats(),
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    summary["elapsed_seconds"] = time.monotonic() - t_start
    return summary


def _span_lists(model) -> list[list[float]] | None:
    spans = model.span_values()
    if spans is None:
        return None
    return [[float(z) for z in layer] for layer in spans]


def _save(path: Path, step: int, cfg: RunConfig, model, optimizer) -> None:
    save_checkpoint(path, step, cfg.model_dump(),
                    {k: p.data for k, p in model.parameters().items()},
                    optimizer.state_arrays())


def _dump_diagnostics(out: Path, step: int, model) -> None:
    info = {"failed_at_step": step, "spans": _span_lists(model)}
    norms = {}
    for name, p in model.parameters().items():
        norms[name] = {
            "param_norm": float(np.sqrt((p.data ** 2).sum())),
            "grad_norm": (float(np.sqrt((p.grad ** 2).sum()))
                          if p.grad is not None else None),
            "finite": bool(np.isfinite(p.data).all()),
        }
    info["params"] = norms
    (out / "failure_diagnostics.json").write_text(json.dumps(info, indent=2, default=str) + "\n")


def evaluate(checkpoint_path: str, episodes: int = 100, seed: int = 0,
             greedy: bool = True, sampled: bool = True,
             out_path: str | None = None) -> dict:
    """Roll out a trained policy without learning; per-episode returns for the
    greedy (argmax) and/or sampled policy."""
    ckpt = load_checkpoint(checkpoint_path)
    from .config import parse_config
    cfg = parse_config(ckpt.config)
    model = build_model(cfg, Rng(cfg.seed).spawn(1))
    restore_model(model, None, ckpt)

    results: dict = {"checkpoint": str(checkpoint_path), "episodes": episodes, "seed": seed}
    records = []
    for mode in [m for m, on in (("greedy", greedy), ("sampled", sampled)) if on]:
        rng = Rng(seed).spawn(7 if mode == "greedy" else 8)
        env = build_env(cfg, seed=0)
        env.reset(seed=int(rng.integers(2 ** 31)))
        returns = []
        for ep in range(episodes):
            step = env.reset()
            state = model.initial_state()
            total = 0.0
            t = 0
            while not step.done:
                with T.no_grad():
                    out = model.step(step.observation[None], state, np.array([ep]))
                state = out.state
                logits = out.logits.data[0]
                if mode == "greedy":
                    action = int(np.argmax(logits))
                else:
                    from .learner import sample_action
                    action = sample_action(logits, rng)
                step = env.step(action)
                total += step.reward
                t += 1
            returns.append(total)
            records.append({"mode": mode, "episode": ep, "return": total, "length": t})
        results[f"mean_return_{mode}"] = float(np.mean(returns))
        results[f"n_{mode}"] = len(returns)
    if out_path:
        p = Path(out_path)
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        results["per_episode_file"] = str(p)
    return results


def bench_attention(cfg: RunConfig | None = None, spans: list[list[float]] | None = None,
                    reps: int = 3, checkpoint_path: str | None = None) -> dict:
    """Compare the adaptive model against a fixed-span model of the same size:
    analytic window cost plus measured learn-step wall time on synthetic data.
    """
    if cfg is None:
        cfg = named_profiles()["full_nonmatch_adaptive"].model_copy(deep=True)
    if cfg.model.kind != "adaptive":
        raise ValueError("bench needs an adaptive model config")
    m = cfg.model
    rng = Rng(cfg.seed).spawn(1)
    adaptive = build_model(cfg, rng)
    if checkpoint_path:
        restore_model(adaptive, None, load_checkpoint(checkpoint_path))
    if spans is not None:
        if len(spans) != m.n_layers:
            raise ValueError(f"{len(spans)} span rows for {m.n_layers} layers")
        for block, row in zip(adaptive.blocks, spans):
            row = list(row)
            if len(row) == 1:
                row = row * m.n_heads
            if len(row) != m.n_heads:
                raise ValueError(f"span row {row} does not cover {m.n_heads} heads")
            block.attn.spans.z.data[...] = np.asarray(row, dtype=np.float64)
            block.attn.spans.clamp_()

    fixed_cfg = cfg.model_copy(deep=True)
    fixed_cfg.model.kind = "stable"
    fixed = build_model(fixed_cfg, Rng(cfg.seed).spawn(1))

    from .attention import attention_flops
    span_values = adaptive.span_values()
    cost = attention_flops(span_values, m.n_layers, m.n_heads, m.d_head,
                           m.mem_len, cfg.pipeline.mini_batch, m.ramp).to_dict()

    def time_model(model) -> list[float]:
        data_rng = Rng(123)
        env = build_env(cfg, seed=0)
        T_len = cfg.pipeline.unroll_length
        n_act = env.n_actions
        # Prime the memory so the timed steps see a full mem_len window.
        state = model.initial_state()
        prime_obs = data_rng.uniform((max(T_len, m.mem_len),) + tuple(env.obs_shape))
        with T.no_grad():
            for c0 in range(0, prime_obs.shape[0], cfg.pipeline.mini_batch):
                chunk = prime_obs[c0:c0 + cfg.pipeline.mini_batch]
                out = model.step(chunk, state, np.zeros(len(chunk), dtype=np.int64))
                state = out.state
        traj = Trajectory(
            observations=data_rng.uniform((T_len + 1,) + tuple(env.obs_shape)),
            segments=np.zeros(T_len + 1, dtype=np.int64),
            actions=data_rng.integers(0, n_act, size=T_len).astype(np.int64),
            rewards=data_rng.uniform((T_len,), -1.0, 1.0),
            dones=np.zeros(T_len, dtype=bool),
            behavior_logits=data_rng.normal((T_len, n_act)),
            initial_state=state,
        )
        optim = build_optimizer(cfg, model)
        weights = _loss_weights(cfg)
        times = []
        for _ in range(reps + 1):
            t0 = time.monotonic()
            chunked_learn_step(model, optim, [traj], weights,
                               cfg.pipeline.mini_batch, lr=0.0, training_dropout=False)
            times.append(time.monotonic() - t0)
        return times[1:]                       # first rep warms caches

    wall_adaptive = time_model(adaptive)
    wall_fixed = time_model(fixed)
    return {
        "cost_model": cost,
        "wall": {
            "adaptive_median_s": median(wall_adaptive),
            "fixed_median_s": median(wall_fixed),
            "adaptive_all_s": wall_adaptive,
            "fixed_all_s": wall_fixed,
            "reps": reps,
            "speedup": median(wall_fixed) / median(wall_adaptive),
        },
        "model": {"d_model": m.d_model, "n_layers": m.n_layers, "n_heads": m.n_heads,
                  "mem_len": m.mem_len, "ramp": m.ramp,
                  "spans": _span_lists(adaptive)},
    }
