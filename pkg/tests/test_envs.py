"""Environment rules, determinism, observation layout, and analytic floors."""
import numpy as np
import pytest

from adaspan.envs import (CatchConfig, CatchEnv, EnvStep, NonMatchConfig,
                          NonMatchEnv, catch_stationary_floor, make_env,
                          nonmatch_memoryless_floor)

# 99th percentile of chi-squared with 3 degrees of freedom, 95th with 6.
CHI2_3DOF = 11.345
CHI2_6DOF = 12.592


# -------------------------------------------------------------------- catch --

def test_catch_reset_layout():
    env = CatchEnv(CatchConfig(7, 7), seed=1)
    step = env.reset()
    obs = step.observation
    assert obs.shape == (2, 7, 7)
    assert obs[0].sum() == 1.0 and obs[0, 0].sum() == 1.0   # ball on top row
    assert obs[1].sum() == 1.0 and obs[1, 6, 3] == 1.0      # paddle bottom center
    assert step.reward == 0.0 and not step.done


def test_catch_episode_length_and_terminal_reward():
    env = CatchEnv(CatchConfig(5, 6), seed=2)
    env.reset()
    rewards = []
    for t in range(5):          # height - 1 steps
        s = env.step(1)
        rewards.append(s.reward)
        assert s.done == (t == 4)
    assert all(r == 0.0 for r in rewards[:-1])
    assert rewards[-1] in (1.0, -1.0)


def test_catch_success_iff_paddle_under_ball():
    env = CatchEnv(CatchConfig(7, 7), seed=3)
    for _ in range(30):
        env.reset()
        while True:
            s = env.step(env.oracle_action())
            if s.done:
                break
        assert s.reward == 1.0
        # ball and paddle share a column in the terminal observation
        ball_col = int(np.argmax(s.observation[0, -1]))
        paddle_col = int(np.argmax(s.observation[1, -1]))
        assert ball_col == paddle_col


def test_catch_paddle_clipped_at_walls():
    env = CatchEnv(CatchConfig(4, 8), seed=4)
    env.reset()
    for _ in range(5):
        s = env.step(0)
    assert np.argmax(s.observation[1, -1]) == 0
    env.reset()
    for _ in range(5):
        s = env.step(2)
    assert np.argmax(s.observation[1, -1]) == 3


def test_catch_ball_column_uniform():
    env = CatchEnv(CatchConfig(7, 7), seed=5)
    counts = np.zeros(7)
    n = 7000
    for _ in range(n):
        counts[int(np.argmax(env.reset().observation[0, 0]))] += 1
    expected = n / 7
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    assert chi2 < CHI2_6DOF, f"chi2={chi2}, counts={counts}"


def test_catch_seeded_reset_is_deterministic():
    a = CatchEnv(seed=0)
    b = CatchEnv(seed=0)
    cols_a = [int(np.argmax(a.reset().observation[0, 0])) for _ in range(20)]
    cols_b = [int(np.argmax(b.reset().observation[0, 0])) for _ in range(20)]
    assert cols_a == cols_b
    c = [int(np.argmax(a.reset(seed=42).observation[0, 0])) for _ in range(5)]
    d = [int(np.argmax(b.reset(seed=42).observation[0, 0])) for _ in range(5)]
    assert c == d


def test_catch_stationary_floor_value_and_empirical():
    assert catch_stationary_floor(7) == pytest.approx(2 / 7 - 1, abs=1e-15)
    env = CatchEnv(CatchConfig(7, 7), seed=6)
    total = 0.0
    n = 4000
    for _ in range(n):
        env.reset()
        while True:
            s = env.step(1)
            if s.done:
                total += s.reward
                break
    assert total / n == pytest.approx(catch_stationary_floor(7), abs=0.05)


def test_catch_errors():
    env = CatchEnv(seed=7)
    with pytest.raises(RuntimeError, match="reset"):
        env.step(1)
    env.reset()
    with pytest.raises(ValueError, match="invalid action"):
        env.step(5)
    with pytest.raises(ValueError, match="2x2"):
        CatchConfig(1, 7)


# ----------------------------------------------------------------- nonmatch --

def test_nonmatch_phase_progression_and_obs_layout():
    cfg = NonMatchConfig(n_objects=4, cue_len=1, delay=3)
    env = NonMatchEnv(cfg, seed=8)
    s = env.reset()
    assert env.episode_len == 5
    k = 4
    # cue phase: phase bit 0 plus exactly one cue bit
    assert s.observation[0] == 1.0
    assert s.observation[3:3 + k].sum() == 1.0
    assert s.observation[3 + k:].sum() == 0.0
    cue = int(np.argmax(s.observation[3:3 + k]))

    for t in range(3):          # delay phase: only the phase bit
        s = env.step(0)
        assert s.observation[1] == 1.0
        assert s.observation[3:].sum() == 0.0
        assert s.reward == 0.0 and not s.done

    s = env.step(0)             # arrive at the choice observation
    assert s.observation[2] == 1.0
    left = int(np.argmax(s.observation[3 + k:3 + 2 * k]))
    right = int(np.argmax(s.observation[3 + 2 * k:3 + 3 * k]))
    assert cue in (left, right)
    assert left != right

    final = env.step(0 if right == cue else 1)   # pick the non-matching side
    assert final.done
    assert final.reward == 1.0
    assert np.all(final.observation == 0.0)      # terminal observation is blank


def test_nonmatch_picking_cue_is_punished():
    env = NonMatchEnv(NonMatchConfig(4, 1, 2), seed=9)
    for _ in range(20):
        s = env.reset()
        cue = int(np.argmax(s.observation[3:7]))
        while s.observation[2] != 1.0:
            s = env.step(0)
        left = int(np.argmax(s.observation[7:11]))
        final = env.step(0 if left == cue else 1)
        assert final.reward == -1.0 and final.done


def test_nonmatch_oracle_always_wins():
    env = NonMatchEnv(NonMatchConfig(6, 2, 5), seed=10)
    for _ in range(25):
        s = env.reset()
        total = 0.0
        while not s.done:
            s = env.step(env.oracle_action())
            total += s.reward
        assert total == 1.0


def test_nonmatch_cue_and_side_uniform():
    env = NonMatchEnv(NonMatchConfig(4, 1, 0), seed=11)
    cue_counts = np.zeros(4)
    side_counts = np.zeros(2)
    n = 4000
    for _ in range(n):
        s = env.reset()
        cue = int(np.argmax(s.observation[3:7]))
        cue_counts[cue] += 1
        s = env.step(0)          # cue_len=1, delay=0: next obs is the choice
        left = int(np.argmax(s.observation[7:11]))
        side_counts[0 if left == cue else 1] += 1
    chi2_cue = float(((cue_counts - n / 4) ** 2 / (n / 4)).sum())
    assert chi2_cue < CHI2_3DOF, f"chi2={chi2_cue}"
    # a fair coin for which side carries the cue
    chi2_side = float(((side_counts - n / 2) ** 2 / (n / 2)).sum())
    assert chi2_side < CHI2_3DOF


def test_nonmatch_other_never_equals_cue():
    env = NonMatchEnv(NonMatchConfig(2, 1, 0), seed=12)
    for _ in range(50):
        s = env.reset()
        cue = int(np.argmax(s.observation[3:5]))
        s = env.step(0)
        left = int(np.argmax(s.observation[5:7]))
        right = int(np.argmax(s.observation[7:9]))
        assert {left, right} == {0, 1}
        assert cue in (left, right)


def test_nonmatch_actions_ignored_before_choice():
    env = NonMatchEnv(NonMatchConfig(4, 1, 4), seed=13)
    env.reset()
    rng = np.random.default_rng(0)
    for _ in range(4):
        s = env.step(int(rng.integers(2)))
        assert s.reward == 0.0 and not s.done


def test_nonmatch_memoryless_floor_is_zero():
    assert nonmatch_memoryless_floor() == 0.0
    # empirical: a cue-blind fixed policy (always pick left) earns ~0
    env = NonMatchEnv(NonMatchConfig(4, 1, 2), seed=14)
    total = 0.0
    n = 4000
    for _ in range(n):
        s = env.reset()
        while not s.done:
            s = env.step(0)
            total += s.reward
    assert abs(total / n) < 0.05


def test_nonmatch_errors():
    env = NonMatchEnv(seed=15)
    with pytest.raises(RuntimeError, match="reset"):
        env.step(0)
    env.reset()
    with pytest.raises(ValueError, match="invalid action"):
        env.step(3)
    with pytest.raises(ValueError, match="objects"):
        NonMatchConfig(n_objects=1)
    with pytest.raises(ValueError, match="cue_len"):
        NonMatchConfig(cue_len=0)


# ------------------------------------------------------------------ factory --

def test_make_env_dispatch():
    env = make_env("catch", seed=3, width=5, height=9)
    assert isinstance(env, CatchEnv) and env.obs_shape == (2, 9, 5)
    env = make_env("nonmatch", seed=3, n_objects=3, delay=12)
    assert isinstance(env, NonMatchEnv) and env.episode_len == 14
    with pytest.raises(ValueError, match="unknown environment"):
        make_env("pong", seed=0)


def test_env_step_dataclass_fields():
    s = EnvStep(np.zeros(3), 1.0, True, 9)
    assert s.reward == 1.0 and s.done and s.episode_step == 9
