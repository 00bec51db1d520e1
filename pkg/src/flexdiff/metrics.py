"""Evaluation metrics: RFNE, Pearson correlation, vorticity spectra, pull stats."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ParameterError, ShapeError

__all__ = ["SpectrumBins", "rfne", "pcc", "vorticity_spectrum", "pull_stats",
           "autoregressive_rollout"]


@dataclass
class SpectrumBins:
    """Radially binned vorticity energy spectrum (unit-width annuli)."""

    k_centers: np.ndarray
    energy: np.ndarray
    n_modes_per_bin: np.ndarray


def rfne(pred: np.ndarray, truth: np.ndarray) -> float:
    """Relative Frobenius norm error ||pred - truth||_F / ||truth||_F."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"shape mismatch {pred.shape} vs {truth.shape}")
    denom = float(np.linalg.norm(truth))
    if denom == 0.0:
        raise ParameterError("RFNE undefined for zero-norm truth")
    return float(np.linalg.norm(pred - truth)) / denom


def pcc(pred: np.ndarray, truth: np.ndarray) -> float:
    """Pearson correlation coefficient over all grid points."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError("shape mismatch")
    dp = pred - pred.mean()
    dtv = truth - truth.mean()
    np_norm = float(np.linalg.norm(dp))
    nt_norm = float(np.linalg.norm(dtv))
    if np_norm == 0.0 or nt_norm == 0.0:
        raise ParameterError("PCC undefined for constant fields")
    return float(np.dot(dp, dtv) / (np_norm * nt_norm))


def vorticity_spectrum(omega: np.ndarray) -> SpectrumBins:
    """Radially averaged vorticity energy spectrum.

    Per-mode power is pi |omega_hat|^2 / [(Nx Ny)^2 sqrt(kx^2 + ky^2)],
    summed over unit-width annuli centered at integer k. The DC mode is
    excluded; corner modes beyond k = n/2 fold into the last bin so every
    mode lands in exactly one bin.
    """
    omega = np.asarray(omega)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise ShapeError(f"expected a square grid, got {omega.shape}")
    n = omega.shape[0]
    what = np.fft.fft2(omega)
    k1d = np.fft.fftfreq(n) * n
    kmag = np.hypot(k1d[:, None], k1d[None, :])
    power = np.zeros_like(kmag)
    nz = kmag > 0
    power[nz] = np.pi * np.abs(what[nz]) ** 2 / ((n * n) ** 2 * kmag[nz])

    n_bins = n // 2
    # nonzero modes have |k| >= 1; corners beyond n/2 fold into the last bin
    bin_idx = np.clip(np.rint(kmag).astype(int), 1, n_bins)
    energy = np.zeros(n_bins)
    counts = np.zeros(n_bins, dtype=int)
    np.add.at(energy, bin_idx[nz] - 1, power[nz])
    np.add.at(counts, bin_idx[nz] - 1, 1)
    return SpectrumBins(k_centers=np.arange(1, n_bins + 1, dtype=float),
                        energy=energy, n_modes_per_bin=counts)


def pull_stats(mean: np.ndarray, std: np.ndarray, truth: np.ndarray,
               std_floor: float = 1e-12) -> tuple[float, float]:
    """Mean and standard deviation of the pull (mean - truth) / std.

    Pixels with ensemble std at or below std_floor are excluded from the
    fit. A calibrated ensemble gives pull_std close to 1.
    """
    mean = np.asarray(mean)
    std = np.asarray(std)
    truth = np.asarray(truth)
    if not (mean.shape == std.shape == truth.shape):
        raise ShapeError("mean/std/truth shapes disagree")
    mask = std > std_floor
    if not np.any(mask):
        raise ParameterError("no pixels above the std floor")
    pull = (mean[mask] - truth[mask]) / std[mask]
    return float(pull.mean()), float(pull.std(ddof=1))


ResidualStep = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def autoregressive_rollout(residual_step: ResidualStep,
                           frame_prev: np.ndarray, frame_cur: np.ndarray,
                           truth: np.ndarray, horizon: int):
    """Recursive forecasting: predict a residual, add, shift the window.

    residual_step(frame_prev, frame_cur, k) returns the predicted update
    for rollout step k (1-based) in physical units. truth holds the ground
    truth frames for steps 1..horizon. Returns a list of (field, pcc).
    """
    if horizon < 1:
        raise ParameterError("horizon must be >= 1")
    truth = np.asarray(truth)
    if truth.shape[0] < horizon:
        raise ParameterError(f"need {horizon} truth frames, got {truth.shape[0]}")
    prev, cur = np.asarray(frame_prev), np.asarray(frame_cur)
    out = []
    for k in range(1, horizon + 1):
        delta = residual_step(prev, cur, k)
        nxt = cur + delta
        out.append((nxt, pcc(nxt, truth[k - 1])))
        prev, cur = cur, nxt
    return out
