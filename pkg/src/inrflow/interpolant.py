"""Linear (rectified-flow) interpolant between data at t=0 and noise at t=1.

All functions act elementwise on coordinate-value pairs and accept numpy
arrays or torch tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, SingularityError

T_MAX = 0.999


def _expand_t(t, like):
    """Broadcast per-row times of shape (B,) against ``like`` of shape (B, ...)."""
    if np.ndim(t) == 1 and like.ndim > 1:
        if t.shape[0] != like.shape[0]:
            raise ContractError(f"t has {t.shape[0]} rows but data has {like.shape[0]}")
        return t.reshape((-1,) + (1,) * (like.ndim - 1))
    return t


def _check_shapes(a, b, names):
    if tuple(a.shape) != tuple(b.shape):
        raise ContractError(f"{names[0]} {tuple(a.shape)} and {names[1]} {tuple(b.shape)} must match")


def forward_interpolate(f0, eps, t):
    """f_t = (1 - t) f0 + t eps."""
    _check_shapes(f0, eps, ("f0", "eps"))
    t = _expand_t(t, f0)
    return (1 - t) * f0 + t * eps


def target_velocity(ft, eps, t, t_max: float = T_MAX):
    """Conditional rectified-flow velocity (eps - f_t) / (1 - t).

    Singular at t = 1, so times beyond ``t_max`` are rejected.
    """
    _check_shapes(ft, eps, ("ft", "eps"))
    too_late = bool((t > t_max).any()) if isinstance(t, torch.Tensor) else bool(np.any(np.asarray(t) > t_max))
    if too_late:
        raise SingularityError(f"target velocity is singular near t = 1; got t > t_max={t_max}")
    t = _expand_t(t, ft)
    return (eps - ft) / (1 - t)


def sample_times(batch: int, rng: np.random.Generator, t_max: float = T_MAX) -> np.ndarray:
    """Draw ``batch`` i.i.d. times uniformly from [0, t_max)."""
    if batch < 1:
        raise ContractError("batch must be >= 1")
    return rng.uniform(0.0, t_max, size=batch)


@dataclass
class InterpolantBatch:
    f0_values: np.ndarray
    eps: np.ndarray
    t: np.ndarray
    ft_values: np.ndarray
    target_u: np.ndarray


def make_interpolant_batch(f0_values, rng: np.random.Generator, t_max: float = T_MAX) -> InterpolantBatch:
    """Draw one noise value per (sample, position, channel) and one time per sample.

    The regression target uses the closed form ``eps - f0``, which equals the
    quotient form on the path and has no cancellation near t = 1.
    """
    f0_values = np.asarray(f0_values)
    t = sample_times(len(f0_values), rng, t_max)
    eps = rng.standard_normal(f0_values.shape)
    ft = forward_interpolate(f0_values, eps, t)
    return InterpolantBatch(f0_values, eps, t, ft, eps - f0_values)
