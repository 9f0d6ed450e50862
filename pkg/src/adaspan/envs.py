"""Toy environments: a reactive catch game and a delayed non-match task.

Both are deliberately tiny. Catch is fully observable and solvable without
memory; the non-match task hides its cue behind a delay, so any policy that
cannot remember the cue is stuck at zero expected return.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng


@dataclass
class EnvStep:
    observation: np.ndarray
    reward: float
    done: bool
    episode_step: int


@dataclass
class CatchConfig:
    width: int = 7
    height: int = 7

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(f"catch grid must be at least 2x2, got {self.width}x{self.height}")


class CatchEnv:
    """A ball falls one row per step; move the paddle to be under it.

    Observation: two binary planes [2, H, W] (ball, paddle). Actions: 0 left,
    1 stay, 2 right. The episode lasts height-1 steps and ends with reward +1
    if the paddle is under the ball, else -1. All other rewards are 0.
    """

    n_actions = 3
    obs_kind = "grid"

    def __init__(self, cfg: CatchConfig | None = None, seed: int = 0):
        self.cfg = cfg or CatchConfig()
        self.obs_shape = (2, self.cfg.height, self.cfg.width)
        self._rng = Rng(seed)
        self._done = True
        self._ball_row = 0
        self._ball_col = 0
        self._paddle_col = 0
        self._t = 0

    def reset(self, seed: int | None = None) -> EnvStep:
        if seed is not None:
            self._rng = Rng(seed)
        self._ball_row = 0
        self._ball_col = int(self._rng.integers(self.cfg.width))
        self._paddle_col = self.cfg.width // 2
        self._t = 0
        self._done = False
        return EnvStep(self._obs(), 0.0, False, 0)

    def step(self, action: int) -> EnvStep:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if action not in (0, 1, 2):
            raise ValueError(f"invalid action {action}, expected 0, 1 or 2")
        self._paddle_col = int(np.clip(self._paddle_col + (action - 1), 0, self.cfg.width - 1))
        self._ball_row += 1
        self._t += 1
        if self._ball_row == self.cfg.height - 1:
            self._done = True
            reward = 1.0 if self._paddle_col == self._ball_col else -1.0
            return EnvStep(self._obs(), reward, True, self._t)
        return EnvStep(self._obs(), 0.0, False, self._t)

    def _obs(self) -> np.ndarray:
        obs = np.zeros(self.obs_shape, dtype=np.float64)
        obs[0, self._ball_row, self._ball_col] = 1.0
        obs[1, self.cfg.height - 1, self._paddle_col] = 1.0
        return obs

    def oracle_action(self) -> int:
        """Privileged greedy policy: move toward the ball's column."""
        if self._ball_col < self._paddle_col:
            return 0
        if self._ball_col > self._paddle_col:
            return 2
        return 1


def catch_stationary_floor(width: int = 7) -> float:
    """Expected return of a paddle that never moves: the ball lands on its
    column with probability 1/W."""
    return (1.0 / width) * 1.0 + (1.0 - 1.0 / width) * (-1.0)


@dataclass
class NonMatchConfig:
    n_objects: int = 4
    cue_len: int = 1
    delay: int = 8

    def __post_init__(self):
        if self.n_objects < 2:
            raise ValueError(f"need at least 2 objects, got {self.n_objects}")
        if self.cue_len < 1 or self.delay < 0:
            raise ValueError(f"invalid cue_len={self.cue_len} or delay={self.delay}")


class NonMatchEnv:
    """Delayed non-match-to-sample. A cue object is shown, then hidden for
    ``delay`` steps, then two objects appear left/right (one is the cue); pick
    the one that does NOT match the cue.

    Observation (flat): phase one-hot (cue/delay/choice, 3) || cue object
    one-hot (K) || left object one-hot (K) || right object one-hot (K).
    Actions: 0 pick left, 1 pick right. Reward +1 for the non-matching object,
    -1 for the cue object, 0 otherwise; actions before the choice step are
    accepted and ignored. Episode length: cue_len + delay + 1.
    """

    n_actions = 2
    obs_kind = "vector"

    def __init__(self, cfg: NonMatchConfig | None = None, seed: int = 0):
        self.cfg = cfg or NonMatchConfig()
        self.obs_shape = (3 + 3 * self.cfg.n_objects,)
        self._rng = Rng(seed)
        self._done = True
        self._t = 0
        self._cue = 0
        self._other = 0
        self._cue_side = 0

    @property
    def episode_len(self) -> int:
        return self.cfg.cue_len + self.cfg.delay + 1

    def reset(self, seed: int | None = None) -> EnvStep:
        if seed is not None:
            self._rng = Rng(seed)
        k = self.cfg.n_objects
        self._cue = int(self._rng.integers(k))
        self._other = int((self._cue + 1 + self._rng.integers(k - 1)) % k)
        self._cue_side = int(self._rng.integers(2))
        self._t = 0
        self._done = False
        return EnvStep(self._obs(), 0.0, False, 0)

    def _phase(self, t: int) -> int:
        if t < self.cfg.cue_len:
            return 0
        if t < self.cfg.cue_len + self.cfg.delay:
            return 1
        return 2

    def _obs(self) -> np.ndarray:
        k = self.cfg.n_objects
        obs = np.zeros(self.obs_shape, dtype=np.float64)
        phase = self._phase(self._t)
        obs[phase] = 1.0
        if phase == 0:
            obs[3 + self._cue] = 1.0
        elif phase == 2:
            left, right = self._sides()
            obs[3 + k + left] = 1.0
            obs[3 + 2 * k + right] = 1.0
        return obs

    def _sides(self) -> tuple[int, int]:
        if self._cue_side == 0:
            return self._cue, self._other
        return self._other, self._cue

    def step(self, action: int) -> EnvStep:
        if self._done:
            raise RuntimeError("step() called on a finished episode; call reset()")
        if action not in (0, 1):
            raise ValueError(f"invalid action {action}, expected 0 or 1")
        at_choice = self._phase(self._t) == 2
        self._t += 1
        if at_choice:
            self._done = True
            picked_cue = (action == 0) == (self._cue_side == 0)
            return EnvStep(self._obs_terminal(), -1.0 if picked_cue else 1.0, True, self._t)
        return EnvStep(self._obs(), 0.0, False, self._t)

    def _obs_terminal(self) -> np.ndarray:
        return np.zeros(self.obs_shape, dtype=np.float64)

    def oracle_action(self) -> int:
        """Privileged policy: at the choice step, pick the non-matching side."""
        if self._phase(self._t) != 2:
            return 0
        return 1 if self._cue_side == 0 else 0


def nonmatch_memoryless_floor() -> float:
    """Best expected return without memory of the cue: the choice observation
    is symmetric in the two objects, so any cue-blind policy earns 0."""
    return 0.0


def make_env(name: str, seed: int, **kwargs):
    if name == "catch":
        return CatchEnv(CatchConfig(**kwargs), seed=seed)
    if name == "nonmatch":
        return NonMatchEnv(NonMatchConfig(**kwargs), seed=seed)
    raise ValueError(f"unknown environment {name!r}")
