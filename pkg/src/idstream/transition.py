"""Adaptive prompt transition: cosine-scheduled blending of cross-attention conditioning."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class APTConfig:
    """Window bounds, delay and chunk size, all in latent frames."""

    w_min: int = 3
    w_max: int = 15
    d_delay: int = 3
    chunk_size: int = 3

    def __post_init__(self):
        if min(self.w_min, self.w_max, self.chunk_size) < 1 or self.d_delay < 0:
            raise ValueError("APT window, chunk size must be positive and delay non-negative")
        if self.w_min > self.w_max:
            raise ValueError("w_min must not exceed w_max")


@dataclass
class APTState:
    tau: int
    w_apt: int
    k_old: np.ndarray
    v_old: np.ndarray
    k_new: Optional[np.ndarray] = None
    v_new: Optional[np.ndarray] = None
    active: bool = True
    d_delay: int = 3

    @property
    def pending_target(self) -> bool:
        return self.k_new is None


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"embedding shapes differ: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero prompt embedding")
    return float(a @ b / (na * nb))


def window_length(old_embed, new_embed, config: Optional[APTConfig] = None) -> int:
    """Transition length grows linearly with prompt-embedding cosine distance."""
    config = config or APTConfig()
    delta = min(1.0, max(0.0, 1.0 - _cosine(old_embed, new_embed)))
    raw = config.w_min + delta * (config.w_max - config.w_min)
    snapped = config.chunk_size * math.floor(raw / config.chunk_size + 0.5)
    return int(min(config.w_max, max(config.w_min, snapped)))


def _ramp(tau: float, w_apt: int, d_delay: int) -> float:
    if w_apt < 1:
        raise ValueError("w_apt must be >= 1")
    if tau < d_delay:
        return 0.0
    if tau <= d_delay + w_apt:
        return 0.5 * (1.0 - math.cos(math.pi * (tau - d_delay) / w_apt))
    return 1.0


def alpha(tau: float, w_apt: int, config: Optional[APTConfig] = None) -> float:
    """Zero during the delay, half-cosine ramp over ``w_apt`` frames, then one."""
    return _ramp(tau, w_apt, (config or APTConfig()).d_delay)


def blend_kv(state: APTState, a: float) -> tuple[np.ndarray, np.ndarray]:
    if state.k_new is None or state.v_new is None:
        raise ValueError("transition target not initialized yet")
    if state.k_old.shape != state.k_new.shape or state.v_old.shape != state.v_new.shape:
        raise ValueError("old and new conditioning blocks differ in shape")
    if not 0.0 <= a <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if a == 0.0:
        return state.k_old.copy(), state.v_old.copy()
    if a == 1.0:
        return state.k_new.copy(), state.v_new.copy()
    return (1.0 - a) * state.k_old + a * state.k_new, (1.0 - a) * state.v_old + a * state.v_new


def begin_transition(
    current_kv: tuple[np.ndarray, np.ndarray],
    new_prompt_embed,
    old_prompt_embed,
    config: Optional[APTConfig] = None,
) -> APTState:
    """Snapshot the current (possibly already blended) conditioning as the old state.

    The new target stays empty until :func:`set_target` runs on the next
    forward pass.
    """
    config = config or APTConfig()
    k, v = current_kv
    return APTState(
        tau=0,
        w_apt=window_length(old_prompt_embed, new_prompt_embed, config),
        k_old=np.array(k, dtype=np.float64, copy=True),
        v_old=np.array(v, dtype=np.float64, copy=True),
        d_delay=config.d_delay,
    )


def set_target(state: APTState, k_new: np.ndarray, v_new: np.ndarray) -> None:
    state.k_new = np.asarray(k_new, dtype=np.float64)
    state.v_new = np.asarray(v_new, dtype=np.float64)


def current_alpha(state: APTState) -> float:
    return _ramp(state.tau, state.w_apt, state.d_delay)


def current_conditioning(state: APTState) -> tuple[np.ndarray, np.ndarray]:
    return blend_kv(state, current_alpha(state))


def advance(state: APTState, frames: int) -> None:
    state.tau += frames
    if state.tau > state.d_delay + state.w_apt:
        state.active = False
