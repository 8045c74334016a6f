"""SGD with momentum, weight decay, one-cycle schedule and norm clipping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from robustmil.errors import ConfigError, DataError, NumericError


@dataclass
class OptimConfig:
    momentum: float = 0.9
    weight_decay: float = 0.02
    max_lr: float = 0.01
    total_updates: int = 20000
    clip_norm: float = 20.0
    warmup_fraction: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def validate(self) -> None:
        for name in ("max_lr", "clip_norm", "div_factor", "final_div_factor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"OptimConfig.{name} must be > 0")
        for name in ("momentum", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"OptimConfig.{name} must be >= 0")
        if self.total_updates < 3:
            raise ConfigError("OptimConfig.total_updates must be >= 3")
        if not 0 < self.warmup_fraction < 1:
            raise ConfigError("OptimConfig.warmup_fraction must be in (0, 1)")

    @property
    def peak_step(self) -> int:
        """Step at which the schedule reaches max_lr."""
        return min(max(1, round(self.warmup_fraction * self.total_updates)), self.total_updates - 2)


def _cos(start: float, end: float, pct: float) -> float:
    return end + 0.5 * (start - end) * (1.0 + math.cos(math.pi * pct))


def lr_at(step: int, cfg: OptimConfig) -> float:
    """Cosine one-cycle: max_lr/div_factor -> max_lr -> max_lr/final_div_factor."""
    if not 0 <= step < cfg.total_updates:
        raise ConfigError(f"step {step} outside [0, {cfg.total_updates})")
    peak = cfg.peak_step
    initial = cfg.max_lr / cfg.div_factor
    final = cfg.max_lr / cfg.final_div_factor
    if step <= peak:
        return _cos(initial, cfg.max_lr, step / peak)
    return _cos(cfg.max_lr, final, (step - peak) / (cfg.total_updates - 1 - peak))


def max_lr_increment(cfg: OptimConfig) -> float:
    """Upper bound on |lr_at(s + 1) - lr_at(s)| (steepest point of either cosine)."""
    peak = cfg.peak_step
    up = (cfg.max_lr - cfg.max_lr / cfg.div_factor) / peak
    down = (cfg.max_lr - cfg.max_lr / cfg.final_div_factor) / (cfg.total_updates - 1 - peak)
    return 0.5 * math.pi * max(up, down)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_gradients(
    grads: Mapping[str, np.ndarray], clip_norm: float, step: int | None = None, norm: float | None = None
) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so the global l2 norm is <= clip_norm.

    Returns float64 copies and the scale applied (1.0 when unclipped).
    ``norm`` may pass in an already computed :func:`global_norm` of ``grads``.
    """
    out = {k: np.asarray(g, dtype=np.float64) for k, g in grads.items()}
    for k, g in out.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {k}; training diverged", step)
    if norm is None:
        norm = global_norm(out)
    if norm > clip_norm:
        scale = clip_norm / norm
        out = {k: g * scale for k, g in out.items()}
        return out, scale
    return out, 1.0


def sgd_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    cfg: OptimConfig,
    decays: Callable[[str], bool] = lambda name: True,
) -> None:
    """In-place momentum SGD: v <- mu v + g ; p <- p - lr (v + wd p).

    Weight decay is applied only to parameters for which ``decays(name)``
    is true. Missing velocity entries start at zero.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros(p.shape, dtype=np.float64)
        elif v.shape != p.shape:
            raise DataError(f"velocity shape {v.shape} != parameter shape {p.shape} for {name}")
        v = cfg.momentum * v + g
        velocity[name] = v
        update = v + cfg.weight_decay * p if decays(name) else v
        params[name] = (p - lr * update).astype(p.dtype)
