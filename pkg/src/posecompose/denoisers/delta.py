"""Analytically exact denoiser for a point-mass data distribution.

If the clean image is known to be ``target``, the optimal noise prediction is
eps = (x_t - sqrt(abar_t) * target) / sqrt(1 - abar_t), which makes every
sampler identity provable in closed form. Exposes one composition site: its
output.
"""

from __future__ import annotations

import numpy as np

from ..diffusion import NoiseSchedule
from ..errors import DomainError
from .contract import DenoiserContract


class DeltaDenoiser(DenoiserContract):
    sites = [("output", 1)]

    def __init__(self, target: np.ndarray, sched: NoiseSchedule):
        self.target = np.asarray(target, dtype=np.float64)
        self.sched = sched

    def epsilon(self, x, t, tokens=None, pose_maps=None, hooks=None, control_levels=None):
        hooks = self.check_hooks(hooks)
        x = np.asarray(x, dtype=np.float64)
        a = self.sched.abar(int(t))
        if 1.0 - a == 0.0:
            raise DomainError("T_EDGE", f"1 - abar_t vanishes at t={t}")
        eps = (x - np.sqrt(a) * self.target) / np.sqrt(1.0 - a)
        hook = hooks.get("output")
        if hook is not None:
            eps = hook(eps)
        return eps


def delta_denoiser(target: np.ndarray, sched: NoiseSchedule) -> DeltaDenoiser:
    return DeltaDenoiser(target, sched)


class _StackedDelta(DenoiserContract):
    """Per-branch targets: batch slot i is denoised toward targets[i]."""

    sites = [("output", 1)]

    def __init__(self, targets: np.ndarray, sched: NoiseSchedule):
        self.targets = np.asarray(targets, dtype=np.float64)
        self.sched = sched

    def epsilon(self, x, t, tokens=None, pose_maps=None, hooks=None, control_levels=None):
        hooks = self.check_hooks(hooks)
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.targets.shape[0]:
            raise DomainError(
                "SHAPE_MISMATCH",
                f"batch {x.shape[0]} vs {self.targets.shape[0]} targets",
            )
        a = self.sched.abar(int(t))
        if 1.0 - a == 0.0:
            raise DomainError("T_EDGE", f"1 - abar_t vanishes at t={t}")
        eps = (x - np.sqrt(a) * self.targets) / np.sqrt(1.0 - a)
        hook = hooks.get("output")
        if hook is not None:
            eps = hook(eps)
        return eps


def stack_denoisers(deltas) -> _StackedDelta:
    """Combine per-instance delta denoisers into one batched contract."""
    deltas = list(deltas)
    if not deltas:
        raise DomainError("EMPTY_SCENE", "no denoisers to stack")
    sched = deltas[0].sched
    targets = np.stack([d.target for d in deltas], axis=0)
    return _StackedDelta(targets, sched)
