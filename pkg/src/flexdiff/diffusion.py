"""Forward perturbation, velocity targets, DDIM reverse sampling, ensembles.

The generative process is wrapped around an arbitrary velocity predictor,
a callable ``(t, z, context) -> v_hat`` returning a tensor of the same
shape as ``z``. Everything here is plain numpy; neural predictors adapt
themselves to this contract (see backbone.as_predictor).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import OrderingError, ParameterError, ShapeError
from .schedule import CosineSchedule

__all__ = [
    "NoisedSample",
    "EnsembleStats",
    "forward_perturb",
    "velocity_target",
    "ddim_step",
    "time_grid",
    "sample",
    "ensemble",
]

VelocityPredictor = Callable[[float, np.ndarray, object], np.ndarray]


@dataclass
class NoisedSample:
    """A residual perturbed to diffusion time t; eps retained for targets."""

    z: np.ndarray
    t: float
    eps: np.ndarray


@dataclass
class EnsembleStats:
    """Per-pixel statistics over diffusion ensemble members.

    std uses the population convention (denominator m). members holds the
    full (m, ...) stack.
    """

    mean: np.ndarray
    std: np.ndarray
    members: np.ndarray

    @property
    def n_members(self) -> int:
        return self.members.shape[0]


def _check_shapes(*arrays: np.ndarray):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def _coeff(value, like: np.ndarray):
    """Broadcast a scalar or per-item coefficient over trailing axes of like."""
    arr = np.asarray(value, dtype=like.dtype)
    if arr.ndim == 0:
        return arr
    return arr.reshape(arr.shape + (1,) * (like.ndim - arr.ndim))


def forward_perturb(r: np.ndarray, t, eps: np.ndarray,
                    schedule: CosineSchedule) -> NoisedSample:
    """z_t = alpha(t) r + sigma(t) eps. t may be scalar or per-item (leading axis)."""
    r = np.asarray(r)
    eps = np.asarray(eps)
    _check_shapes(r, eps)
    alpha, sigma = schedule.alpha_sigma(t)
    z = _coeff(alpha, r) * r + _coeff(sigma, r) * eps
    return NoisedSample(z=z.astype(r.dtype, copy=False), t=t, eps=eps)


def velocity_target(r: np.ndarray, t, eps: np.ndarray,
                    schedule: CosineSchedule) -> np.ndarray:
    """v(t, r) = alpha(t) eps - sigma(t) r."""
    r = np.asarray(r)
    eps = np.asarray(eps)
    _check_shapes(r, eps)
    alpha, sigma = schedule.alpha_sigma(t)
    v = _coeff(alpha, r) * eps - _coeff(sigma, r) * r
    return v.astype(r.dtype, copy=False)


def ddim_step(z: np.ndarray, t_from: float, t_to: float, v_hat: np.ndarray,
              schedule: CosineSchedule) -> np.ndarray:
    """One deterministic reverse update from t_from to t_to (< t_from).

    mean  = alpha(t_from) z - sigma(t_from) v_hat      (denoised estimate)
    eps   = alpha(t_from) v_hat + sigma(t_from) z      (implied noise)
    z_out = alpha(t_to) mean + sigma(t_to) eps
    """
    z = np.asarray(z)
    v_hat = np.asarray(v_hat)
    _check_shapes(z, v_hat)
    if not t_to < t_from:
        raise OrderingError(f"require t_to < t_from, got {t_to} >= {t_from}")
    a_from, s_from = schedule.alpha_sigma(t_from)
    a_to, s_to = schedule.alpha_sigma(t_to)
    mean = a_from * z - s_from * v_hat
    eps_hat = a_from * v_hat + s_from * z
    return (a_to * mean + s_to * eps_hat).astype(z.dtype, copy=False)


def time_grid(schedule: CosineSchedule, n_steps: int,
              kind: str = "uniform_t") -> np.ndarray:
    """Predictor evaluation times t_max = t_0 > ... > t_{n-1} = t_min.

    kind "uniform_t" spaces the grid uniformly in t, "uniform_lambda"
    uniformly in log-SNR. The sampler's final update maps the last grid
    point to t = 0, where only alpha and sigma are needed (both finite),
    so the returned prediction is the clean denoised estimate.
    """
    if n_steps < 1:
        raise ParameterError(f"n_steps must be >= 1, got {n_steps}")
    if n_steps == 1:
        return np.array([schedule.t_max])
    if kind == "uniform_t":
        return np.linspace(schedule.t_max, schedule.t_min, n_steps)
    if kind == "uniform_lambda":
        lams = np.linspace(schedule.log_snr(schedule.t_max),
                           schedule.log_snr(schedule.t_min), n_steps)
        # the roundtrip through atan/exp can land an ulp outside the clamps
        return np.clip(schedule.t_from_log_snr(lams),
                       schedule.t_min, schedule.t_max)
    raise ParameterError(f"unknown time grid kind {kind!r}")


def sample(predictor: VelocityPredictor, context, shape: Sequence[int],
           n_steps: int, schedule: CosineSchedule, seed: int, *,
           grid: str = "uniform_t", init_noise: np.ndarray | None = None,
           dtype=np.float32) -> np.ndarray:
    """Draw Z ~ N(0, I), run DDIM along the time grid, return the residual.

    Deterministic in (predictor, context, seed, n_steps). init_noise, when
    given, replaces the seeded draw (it must match shape).
    """
    ts = time_grid(schedule, n_steps, kind=grid)
    if init_noise is not None:
        z = np.asarray(init_noise, dtype=dtype)
        if z.shape != tuple(shape):
            raise ShapeError(f"init_noise shape {z.shape} != {tuple(shape)}")
        z = z.copy()
    else:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(tuple(shape), dtype=np.float32).astype(dtype, copy=False)
    for i, t_now in enumerate(ts):
        v_hat = np.asarray(predictor(float(t_now), z, context))
        if v_hat.shape != z.shape:
            raise ShapeError(
                f"predictor returned shape {v_hat.shape}, expected {z.shape}")
        t_next = float(ts[i + 1]) if i + 1 < len(ts) else 0.0
        z = ddim_step(z, float(t_now), t_next, v_hat.astype(dtype, copy=False), schedule)
    return z


def ensemble(predictor: VelocityPredictor, context, shape: Sequence[int],
             n_steps: int, m_members: int, schedule: CosineSchedule,
             seed: int, *, grid: str = "uniform_t") -> EnsembleStats:
    """Run m_members independent DDIM samples and reduce to pixel statistics.

    Member i draws its noise from seed XOR i, giving reproducible
    independent streams.
    """
    if m_members < 2:
        raise ParameterError("m_members must be >= 2 (std undefined otherwise)")
    members = np.stack([
        sample(predictor, context, shape, n_steps, schedule, seed ^ i, grid=grid)
        for i in range(m_members)
    ])
    mean = members.mean(axis=0, dtype=np.float64)
    std = members.std(axis=0, dtype=np.float64)  # population: denominator m
    return EnsembleStats(mean=mean, std=std, members=members)
