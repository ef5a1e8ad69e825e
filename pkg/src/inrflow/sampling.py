"""Reverse-time generation from t=1 (noise) to t=0 (data).

The ``model`` argument of every sampler is any callable
``model(coords, values, query_coords, query_values, t, condition)`` returning
velocities of shape (B, M, d_out); :class:`inrflow.model.INRFlow` fits, and so
does a plain analytic function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError, ContractError, SamplingError

SAMPLER_KINDS = ("euler_ode", "euler_maruyama")
EXPORT_CLAMP = 1.5


@dataclass
class SamplerConfig:
    kind: str = "euler_ode"
    steps: int = 100
    cfg_scale: float = 1.0
    noise_scale: float = 0.0
    t_start: float = 1.0
    t_end: float = 0.0
    seed: int = 0

    def validate(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigError(f"sampler kind must be one of {SAMPLER_KINDS}, got {self.kind!r}")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.cfg_scale < 0 or self.noise_scale < 0:
            raise ConfigError("cfg_scale and noise_scale must be >= 0")
        if not self.t_start > self.t_end:
            raise ConfigError("t_start must exceed t_end")


@dataclass
class Trajectory:
    times: np.ndarray  # (steps + 1,), strictly decreasing
    values: np.ndarray  # (steps + 1, B, M, d_out)
    encoder_indices: Optional[np.ndarray] = None

    @property
    def final(self) -> np.ndarray:
        return self.values[-1]

    def export_values(self) -> np.ndarray:
        """Final sample clamped to the export range; the trajectory itself stays raw."""
        return np.clip(self.final, -EXPORT_CLAMP, EXPORT_CLAMP)


def cfg_velocity(v_cond, v_uncond, scale: float):
    if tuple(np.shape(v_cond)) != tuple(np.shape(v_uncond)):
        raise ContractError(f"v_cond {np.shape(v_cond)} and v_uncond {np.shape(v_uncond)} must match")
    return v_uncond + scale * (v_cond - v_uncond)


def grid_subsample(query_coords, encoder_resolution: int, seed: int = 0, layout: Optional[str] = None):
    """Fixed subset of query positions that feeds the encoder at every step.

    ``layout="grid"`` (default for square 2D query sets) keeps every k-th
    row and column of a row-major ``side x side`` grid; ``layout="points"``
    picks ``encoder_resolution`` positions uniformly without replacement
    from a seeded generator. Returns ``(indices, encoder_coords)``.
    """
    query_coords = np.asarray(query_coords)
    m, d = query_coords.shape
    if encoder_resolution < 1 or encoder_resolution > m:
        raise ConfigError(f"encoder_resolution must lie in [1, {m}], got {encoder_resolution}")
    if layout is None:
        layout = "grid" if d == 2 and math.isqrt(m) ** 2 == m else "points"
    if layout == "grid":
        side, enc_side = math.isqrt(m), math.isqrt(encoder_resolution)
        if side * side != m or enc_side * enc_side != encoder_resolution:
            raise ConfigError("grid subsampling needs square query and encoder resolutions")
        if side % enc_side:
            raise ConfigError(f"query grid side {side} is not a multiple of encoder side {enc_side}")
        keep = np.arange(0, side, side // enc_side)
        idx = (keep[:, None] * side + keep[None, :]).ravel()
    elif layout == "points":
        idx = np.sort(np.random.default_rng(seed).choice(m, encoder_resolution, replace=False))
    else:
        raise ConfigError(f"unknown subsample layout {layout!r}")
    return idx, query_coords[idx]


def _draw(streams, batch, m, d, first):
    """Standard normals for (batch, m, d).

    Positions ``first`` come from ``streams[0]`` and the rest from
    ``streams[1]``, so the draws at ``first`` match a run over only those
    positions with the same seed, at every step.
    """
    if first is None:
        return streams[0].standard_normal((batch, m, d))
    out = np.empty((batch, m, d))
    out[:, first] = streams[0].standard_normal((batch, len(first), d))
    rest = np.setdiff1d(np.arange(m), first)
    out[:, rest] = streams[1].standard_normal((batch, len(rest), d))
    return out


def _evaluate(model, coords, values, qcoords, qvalues, t, condition):
    if isinstance(model, torch.nn.Module):
        with torch.no_grad():
            out = model(coords, values, qcoords, qvalues, t, condition)
    else:
        out = model(coords, values, qcoords, qvalues, t, condition)
    if isinstance(out, torch.Tensor):
        out = out.detach().cpu().numpy()
    return np.asarray(out, dtype=np.float64)


def _guided_velocity(model, coords, values, qcoords, qvalues, t, condition, scale):
    if condition is None or scale == 1.0:
        return _evaluate(model, coords, values, qcoords, qvalues, t, condition)
    v_cond = _evaluate(model, coords, values, qcoords, qvalues, t, condition)
    null = np.full(len(t), -1, dtype=np.int64)
    v_uncond = _evaluate(model, coords, values, qcoords, qvalues, t, null)
    return cfg_velocity(v_cond, v_uncond, scale)


def _integrate(model, query_coords, condition, cfg, rng, num_samples, d_out, stochastic, encoder_idx=None):
    cfg.validate()
    query_coords = np.asarray(query_coords, dtype=np.float64)
    if query_coords.ndim != 2 or len(query_coords) < 1:
        raise ContractError("query_coords must be a non-empty (M, d_in) array")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if condition is not None:
        condition = np.broadcast_to(np.asarray(condition, dtype=np.int64), (num_samples,)).copy()
    m = len(query_coords)
    qcoords = np.broadcast_to(query_coords, (num_samples, m, query_coords.shape[1]))
    ecoords = qcoords if encoder_idx is None else qcoords[:, encoder_idx]

    times = np.linspace(cfg.t_start, cfg.t_end, cfg.steps + 1)
    streams = rng.spawn(2)
    y = _draw(streams, num_samples, m, d_out, encoder_idx)
    values = np.empty((cfg.steps + 1,) + y.shape)
    values[0] = y
    for k in range(cfg.steps):
        dt = times[k + 1] - times[k]
        t = np.full(num_samples, times[k])
        evalues = y if encoder_idx is None else y[:, encoder_idx]
        v = _guided_velocity(model, ecoords, evalues, qcoords, y, t, condition, cfg.cfg_scale)
        y = y + dt * v
        if stochastic:
            xi = _draw(streams, num_samples, m, d_out, encoder_idx)
            y = y + cfg.noise_scale * math.sqrt(abs(dt)) * xi
        if not np.all(np.isfinite(y)):
            raise SamplingError("non-finite values", step=k)
        values[k + 1] = y
    return Trajectory(times, values, encoder_idx)


def _output_dim(model, d_out):
    if d_out is not None:
        return d_out
    config = getattr(model, "config", None)
    if config is None:
        raise ContractError("d_out is required for models without a config")
    return config.d_out


def sample_ode(model, query_coords, condition=None, cfg: SamplerConfig = None, rng=None, num_samples=1, d_out=None):
    """Euler integration of the probability-flow ODE on a uniform time grid."""
    cfg = cfg or SamplerConfig()
    return _integrate(model, query_coords, condition, cfg, rng, num_samples, _output_dim(model, d_out), False)


def sample_sde(model, query_coords, condition=None, cfg: SamplerConfig = None, rng=None, num_samples=1, d_out=None):
    """Euler-Maruyama: y <- y + dt * v + noise_scale * sqrt(|dt|) * xi."""
    cfg = cfg or SamplerConfig(kind="euler_maruyama")
    return _integrate(model, query_coords, condition, cfg, rng, num_samples, _output_dim(model, d_out), True)


def sample_resolution_agnostic(model, hi_res_coords, encoder_resolution, condition=None, cfg: SamplerConfig = None,
                               rng=None, num_samples=1, d_out=None, layout=None):
    """Decode every position of ``hi_res_coords`` while the encoder only sees a fixed subset.

    Noise at the subset positions comes from its own generator stream, so
    those positions follow the same trajectory as a run over the subset
    alone with the same seed.
    """
    cfg = cfg or SamplerConfig()
    idx, _ = grid_subsample(hi_res_coords, encoder_resolution, seed=cfg.seed, layout=layout)
    return _integrate(model, hi_res_coords, condition, cfg, rng, num_samples, _output_dim(model, d_out),
                      cfg.kind == "euler_maruyama", encoder_idx=idx)


def sample(model, query_coords, condition=None, cfg: SamplerConfig = None, rng=None, num_samples=1,
           encoder_resolution=None, d_out=None):
    """Dispatch on ``cfg.kind``; a smaller ``encoder_resolution`` switches to resolution-agnostic mode."""
    cfg = cfg or SamplerConfig()
    if encoder_resolution is not None and encoder_resolution < len(query_coords):
        return sample_resolution_agnostic(model, query_coords, encoder_resolution, condition, cfg, rng,
                                          num_samples, d_out)
    fn = sample_sde if cfg.kind == "euler_maruyama" else sample_ode
    return fn(model, query_coords, condition, cfg, rng, num_samples, d_out)
