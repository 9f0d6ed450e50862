"""Off-policy V-trace targets (numpy only; targets are treated as constants).

Given behavior and target policies, truncated importance ratios

    rho_t = min(rho_bar, pi(a_t)/mu(a_t))    c_t = min(c_bar, pi(a_t)/mu(a_t))

and temporal differences delta_t = rho_t (r_t + gamma_t V_{t+1} - V_t), the
corrected value targets follow the backward recursion

    vs_t = V_t + delta_t + gamma_t c_t (vs_{t+1} - V_{t+1})

with gamma_t zeroed at episode ends. Policy-gradient advantages use the
one-step-bootstrapped targets: pg_adv_t = rho_t (r_t + gamma_t vs_{t+1} - V_t).
When the two policies coincide and the clips are >= 1, vs reduces to the
on-policy n-step bootstrapped return.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class VTraceOutput:
    vs: np.ndarray               # [T] corrected value targets
    pg_advantages: np.ndarray    # [T]
    rhos: np.ndarray             # [T] truncated importance ratios
    cs: np.ndarray               # [T] truncated trace cutters


def _log_probs_of_actions(logits: np.ndarray, actions: np.ndarray) -> np.ndarray:
    c = logits.max(axis=-1, keepdims=True)
    ls = logits - c - np.log(np.exp(logits - c).sum(axis=-1, keepdims=True))
    return ls[np.arange(len(actions)), actions]


def vtrace(behavior_logits: np.ndarray, target_logits: np.ndarray, actions: np.ndarray,
           rewards: np.ndarray, dones: np.ndarray, values: np.ndarray,
           bootstrap_value: float, gamma: float,
           rho_bar: float = 1.0, c_bar: float = 1.0) -> VTraceOutput:
    """Compute V-trace targets for one trajectory of T transitions."""
    behavior_logits = np.asarray(behavior_logits, dtype=np.float64)
    target_logits = np.asarray(target_logits, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)

    T = rewards.shape[0]
    if not (behavior_logits.shape[0] == target_logits.shape[0] == actions.shape[0]
            == dones.shape[0] == values.shape[0] == T):
        raise ValueError(
            f"length mismatch: rewards {T}, behavior {behavior_logits.shape[0]}, "
            f"target {target_logits.shape[0]}, actions {actions.shape[0]}, "
            f"dones {dones.shape[0]}, values {values.shape[0]}")
    if behavior_logits.shape != target_logits.shape:
        raise ValueError(f"logit shapes differ: {behavior_logits.shape} vs {target_logits.shape}")
    if not (0.0 <= gamma <= 1.0):
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    if not (rho_bar >= c_bar > 0.0):
        raise ValueError(f"require rho_bar >= c_bar > 0, got {rho_bar}, {c_bar}")
    for name, arr in (("behavior_logits", behavior_logits), ("target_logits", target_logits),
                      ("rewards", rewards), ("values", values)):
        if not np.isfinite(arr).all():
            raise FloatingPointError(f"non-finite values in {name}")
    if not np.isfinite(bootstrap_value):
        raise FloatingPointError("non-finite bootstrap value")

    log_ratio = (_log_probs_of_actions(target_logits, actions)
                 - _log_probs_of_actions(behavior_logits, actions))
    ratio = np.exp(log_ratio)
    rhos = np.minimum(rho_bar, ratio)
    cs = np.minimum(c_bar, ratio)

    discounts = gamma * (1.0 - dones)
    values_tp1 = np.append(values[1:], float(bootstrap_value))
    deltas = rhos * (rewards + discounts * values_tp1 - values)

    vs_minus_v = np.zeros(T, dtype=np.float64)
    acc = 0.0
    for t in range(T - 1, -1, -1):
        acc = deltas[t] + discounts[t] * cs[t] * acc
        vs_minus_v[t] = acc
    vs = values + vs_minus_v

    vs_tp1 = np.append(vs[1:], float(bootstrap_value))
    pg_advantages = rhos * (rewards + discounts * vs_tp1 - values)
    return VTraceOutput(vs=vs, pg_advantages=pg_advantages, rhos=rhos, cs=cs)
