"""Adaptive KL coefficient (proportional controller with clipped error)."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class KlControllerState:
    kl_coef: float
    target_kl: float
    horizon: int
    clip_width: float = 0.2

    def __post_init__(self):
        if self.kl_coef <= 0:
            raise ValueError("kl_coef must be > 0")
        if self.target_kl <= 0:
            raise ValueError("target_kl must be > 0")
        if self.horizon < 1:
            raise ValueError("horizon must be a positive integer")
        if not 0 < self.clip_width < 1:
            raise ValueError("clip_width must lie in (0, 1)")


def update_kl_coef(state: KlControllerState, observed_kl: float,
                   n_samples: int) -> KlControllerState:
    """Move ``kl_coef`` toward keeping ``observed_kl`` near ``target_kl``.

    The multiplier is ``1 + clip(observed/target - 1, +-clip_width) * n/horizon``.
    """
    if n_samples <= 0:
        raise ValueError("n_samples must be positive")
    if observed_kl < 0:
        raise ValueError("observed_kl must be >= 0")
    err = float(np.clip(observed_kl / state.target_kl - 1.0, -state.clip_width, state.clip_width))
    mult = 1.0 + err * n_samples / state.horizon
    if mult <= 0:
        raise ValueError("n_samples too large for horizon: coefficient would become non-positive")
    return replace(state, kl_coef=state.kl_coef * mult)
