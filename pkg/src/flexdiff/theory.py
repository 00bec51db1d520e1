"""Numerical checks of the residual-diffusion theory.

The optimal velocity field for a variance-preserving schedule is

    v*(t, z) = -(sigma/alpha) (z + d/dz log p_t(z)),

so its second moment under p_t equals (sigma/alpha)^2 times the Fisher
divergence between p_t and the standard normal. For Gaussian priors every
quantity has a closed form, which these routines verify against independent
quadrature and Monte Carlo estimates. The Fisher-divergence estimator (a
binned Gaussian-KDE score estimate) quantifies how close noised data or
residual samples are to N(0, 1) across diffusion time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, signal

from .errors import DataError, IterationError, ParameterError, ScheduleDomainError
from .schedule import CosineSchedule

__all__ = [
    "FisherCurve", "fisher_divergence_1d", "optimal_velocity_gaussian",
    "prop1_check", "fisher_curve", "hessian_covariance_check",
    "top_eigen_covariance", "silverman_bandwidth",
    "residual_scalar_samples", "patch_matrix",
]


# -- KDE-based Fisher divergence estimation ------------------------------------

def silverman_bandwidth(samples: np.ndarray) -> float:
    std = float(np.std(samples))
    q75, q25 = np.percentile(samples, [75, 25])
    iqr = float(q75 - q25)
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    if spread <= 0:
        raise ParameterError("degenerate samples: zero spread")
    return 0.9 * spread * len(samples) ** (-0.2)


def _kde_score_at_samples(x: np.ndarray, bandwidth: float,
                          n_grid: int = 8192) -> np.ndarray:
    """Score d/dx log p_hat at each sample, via a binned Gaussian KDE."""
    n = len(x)
    h = bandwidth
    lo, hi = float(x.min()) - 4 * h, float(x.max()) + 4 * h
    dx = (hi - lo) / (n_grid - 1)
    grid = lo + dx * np.arange(n_grid)

    # linear binning preserves first moments of the sample cloud
    pos = (x - lo) / dx
    i0 = np.floor(pos).astype(int)
    w = pos - i0
    counts = np.zeros(n_grid)
    np.add.at(counts, i0, 1.0 - w)
    np.add.at(counts, np.minimum(i0 + 1, n_grid - 1), w)

    radius = min(int(math.ceil(6 * h / dx)), n_grid - 1)
    offsets = dx * np.arange(-radius, radius + 1)
    kern = np.exp(-0.5 * (offsets / h) ** 2) / (math.sqrt(2 * math.pi) * h)
    kern_d = -offsets / (h * h) * kern
    dens = signal.fftconvolve(counts, kern, mode="same") / n
    dens_d = signal.fftconvolve(counts, kern_d, mode="same") / n

    floor = kern[radius] / (10.0 * n)  # a lone sample still has mass kern(0)/n
    score_grid = dens_d / np.maximum(dens, floor)
    return np.interp(x, grid, score_grid)


def fisher_divergence_1d(samples, bandwidth: float | None = None) -> float:
    """Estimate D_F(p || N(0,1)) = E_p[(score_p(x) + x)^2] from samples.

    The score of p is estimated with a Gaussian kernel density estimator
    (Silverman's bandwidth unless overridden).
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) < 100:
        raise DataError(f"need at least 100 samples, got {len(x)}")
    h = bandwidth if bandwidth is not None else silverman_bandwidth(x)
    if h <= 0:
        raise ParameterError("bandwidth must be > 0")
    score = _kde_score_at_samples(x, h)
    return float(np.mean((score + x) ** 2))


# -- Gaussian closed forms --------------------------------------------------------

def _sigma_over_alpha(schedule: CosineSchedule, t: float) -> float:
    if not schedule.t_min <= t <= schedule.t_max:
        raise ScheduleDomainError(
            f"t={t} outside the clamped interval; sigma/alpha would blow up")
    alpha, sigma = schedule.alpha_sigma(t)
    return sigma / alpha


def _smoothed_variance(schedule: CosineSchedule, t: float, prior_var: float) -> float:
    alpha, sigma = schedule.alpha_sigma(t)
    return alpha * alpha * prior_var + sigma * sigma


def optimal_velocity_gaussian(t: float, z, prior_var: float,
                              schedule: CosineSchedule):
    """Optimal velocity for a N(0, prior_var) data distribution.

    p_t = N(0, V) with V = alpha^2 prior_var + sigma^2, whose score is
    -z / V, giving v* = -(sigma/alpha) z (1 - 1/V).
    """
    if prior_var <= 0:
        raise ParameterError("prior_var must be > 0")
    ratio = _sigma_over_alpha(schedule, t)
    v_total = _smoothed_variance(schedule, t, prior_var)
    return -ratio * np.asarray(z) * (1.0 - 1.0 / v_total)


def gaussian_fisher_divergence(v_total: float) -> float:
    """Closed form D_F(N(0, V) || N(0, 1)) = (1 - 1/V)^2 V."""
    return (1.0 - 1.0 / v_total) ** 2 * v_total


@dataclass
class Prop1Report:
    rows: list[dict] = field(default_factory=list)
    max_rel_quad: float = 0.0
    max_rel_mc: float = 0.0


def prop1_check(prior_var: float, t_grid, schedule: CosineSchedule,
                n_mc: int = 0, seed: int = 0) -> Prop1Report:
    """Verify E_{p_t}[v*^2] = (sigma/alpha)^2 D_F(p_t || N(0,1)) per t.

    The left side is evaluated by adaptive quadrature of v*(z)^2 p_t(z)
    (and optionally by Monte Carlo over p_t draws); the right side uses the
    Gaussian closed form of the Fisher divergence.
    """
    rng = np.random.default_rng(seed)
    report = Prop1Report()
    for t in np.atleast_1d(np.asarray(t_grid, dtype=float)):
        ratio = _sigma_over_alpha(schedule, float(t))
        v_total = _smoothed_variance(schedule, float(t), prior_var)
        rhs = ratio ** 2 * gaussian_fisher_divergence(v_total)

        def integrand(z, _t=float(t)):
            v_star = optimal_velocity_gaussian(_t, z, prior_var, schedule)
            pdf = math.exp(-0.5 * z * z / v_total) / math.sqrt(2 * math.pi * v_total)
            return v_star ** 2 * pdf

        lhs_quad, _ = integrate.quad(integrand, -np.inf, np.inf)
        denom = max(abs(rhs), 1e-300)
        rel_quad = abs(lhs_quad - rhs) / denom

        lhs_mc = rel_mc = None
        if n_mc > 0:
            z = rng.normal(0.0, math.sqrt(v_total), size=n_mc)
            lhs_mc = float(np.mean(
                optimal_velocity_gaussian(float(t), z, prior_var, schedule) ** 2))
            rel_mc = abs(lhs_mc - rhs) / denom

        report.rows.append({"t": float(t), "lhs_quad": lhs_quad, "lhs_mc": lhs_mc,
                            "rhs": rhs, "rel_quad": rel_quad, "rel_mc": rel_mc})
        report.max_rel_quad = max(report.max_rel_quad, rel_quad)
        if rel_mc is not None:
            report.max_rel_mc = max(report.max_rel_mc, rel_mc)
    return report


# -- Fisher curves over diffusion time ----------------------------------------------

@dataclass
class FisherCurve:
    t_grid: np.ndarray
    d_f: np.ndarray
    scaled: np.ndarray              # tan^2(pi t / 2) * d_f
    source_label: str = "raw"
    n_samples: int = 0
    kde_bandwidth: float = 0.0      # 0: Silverman per point


def fisher_curve(samples, t_grid, schedule: CosineSchedule, *,
                 source_label: str = "raw", seed: int = 0,
                 bandwidth: float | None = None,
                 min_samples: int = 5000) -> FisherCurve:
    """D_F of schedule-noised scalar samples at each diffusion time.

    samples are treated as 1D draws (image patches enter flattened); each
    grid point noises them as alpha(t) x + sigma(t) eps with fresh noise.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) < min_samples:
        raise DataError(f"need at least {min_samples} samples, got {len(x)}")
    rng = np.random.default_rng(seed)
    t_grid = np.atleast_1d(np.asarray(t_grid, dtype=float))
    d_f = np.empty_like(t_grid)
    for i, t in enumerate(t_grid):
        alpha, sigma = schedule.alpha_sigma(float(t))
        z = alpha * x + sigma * rng.standard_normal(len(x))
        d_f[i] = fisher_divergence_1d(z, bandwidth=bandwidth)
    scaled = np.tan(0.5 * math.pi * t_grid) ** 2 * d_f
    return FisherCurve(t_grid=t_grid, d_f=d_f, scaled=scaled,
                       source_label=source_label, n_samples=len(x),
                       kde_bandwidth=bandwidth or 0.0)


# -- data preparation for curve / eigenvalue studies -------------------------------

def _mode_fields(snapshots: np.ndarray, mode: str, factor: int) -> np.ndarray:
    """Per-snapshot 2D fields for one data mode: raw values, super-resolution
    residuals, or one-step forecast residuals."""
    from .dataio import subsample, upsample

    snapshots = np.asarray(snapshots, dtype=np.float64)
    if snapshots.ndim != 3:
        raise DataError("snapshots must be (count, nx, ny)")
    if mode == "raw":
        return snapshots
    if mode == "sr_residual":
        return np.stack([s - upsample(subsample(s, factor), factor)
                         for s in snapshots])
    if mode == "fc_residual":
        if snapshots.shape[0] < 2:
            raise DataError("forecast residuals need at least 2 snapshots")
        return snapshots[1:] - snapshots[:-1]
    raise ParameterError(f"unknown mode {mode!r}")


def residual_scalar_samples(snapshots: np.ndarray, mode: str, *, factor: int = 4,
                            n_samples: int = 50_000, seed: int = 0) -> np.ndarray:
    """Flattened scalar samples of one data mode, subsampled reproducibly.

    Values come back unnormalized; divide by a common constant before
    comparing Fisher divergences across modes.
    """
    fields = _mode_fields(snapshots, mode, factor)
    flat = fields.ravel()
    rng = np.random.default_rng(seed)
    if len(flat) <= n_samples:
        return flat.copy()
    return flat[rng.choice(len(flat), size=n_samples, replace=False)]


def patch_matrix(snapshots: np.ndarray, mode: str, *, factor: int = 4,
                 patch: int = 8, n_patches: int = 4000, seed: int = 0) -> np.ndarray:
    """(N, patch*patch) matrix of random patches from one data mode."""
    fields = _mode_fields(snapshots, mode, factor)
    count, nx, ny = fields.shape
    if patch > nx or patch > ny:
        raise ParameterError(f"patch {patch} exceeds grid {nx}x{ny}")
    rng = np.random.default_rng(seed)
    ks = rng.integers(0, count, size=n_patches)
    xs = rng.integers(0, nx - patch + 1, size=n_patches)
    ys = rng.integers(0, ny - patch + 1, size=n_patches)
    out = np.empty((n_patches, patch * patch))
    for row, (k, i, j) in enumerate(zip(ks, xs, ys)):
        out[row] = fields[k, i:i + patch, j:j + patch].ravel()
    return out


# -- Hessian / covariance identities ---------------------------------------------------

@dataclass
class HessianReport:
    t: float
    prior_var: float
    v_total: float
    hessian_true: float
    posterior_cov: float
    hessian_corrected: float       # -1/sigma^2 + (alpha^2/sigma^4) Cov
    hessian_as_printed: float      # (alpha^2/sigma^4) Cov
    grad_v_star: float
    bound: float                   # sigma/alpha + (alpha/sigma^3) lambda_max(Cov)
    corrected_identity_error: float
    bound_holds: bool


def hessian_covariance_check(prior_var: float, t: float,
                             schedule: CosineSchedule) -> HessianReport:
    """Gaussian-prior check of the score-Hessian identity and gradient bound.

    For R ~ N(0, prior_var): the true Hessian of log p_t is -1/V; the
    posterior covariance of the clean sample given z is prior_var sigma^2/V.
    The identity -1/sigma^2 + (alpha^2/sigma^4) Cov reproduces the true
    Hessian exactly; the variant without the -1/sigma^2 term (as used to
    derive the gradient bound) is reported alongside for comparison.
    """
    if prior_var <= 0:
        raise ParameterError("prior_var must be > 0")
    ratio = _sigma_over_alpha(schedule, t)
    alpha, sigma = schedule.alpha_sigma(t)
    v_total = _smoothed_variance(schedule, t, prior_var)
    hessian_true = -1.0 / v_total
    cov = prior_var * sigma * sigma / v_total
    corrected = -1.0 / sigma ** 2 + (alpha ** 2 / sigma ** 4) * cov
    printed = (alpha ** 2 / sigma ** 4) * cov
    grad_v = -ratio * (1.0 - 1.0 / v_total)
    bound = ratio + (alpha / sigma ** 3) * cov
    return HessianReport(
        t=t, prior_var=prior_var, v_total=v_total, hessian_true=hessian_true,
        posterior_cov=cov, hessian_corrected=corrected,
        hessian_as_printed=printed, grad_v_star=grad_v, bound=bound,
        corrected_identity_error=abs(corrected - hessian_true),
        bound_holds=bound >= abs(grad_v))


# -- top covariance eigenvalue -----------------------------------------------------------

def top_eigen_covariance(samples: np.ndarray, tol: float = 1e-8,
                         max_iter: int = 1000, seed: int = 0) -> float:
    """lambda_max of the sample covariance via power iteration.

    The covariance is never materialized; iterations use matvecs against
    the centered data matrix (denominator N - 1).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ParameterError("samples must be (N, d) with N >= 2")
    n = x.shape[0]
    centered = x - x.mean(axis=0, keepdims=True)

    def matvec(v):
        return centered.T @ (centered @ v) / (n - 1)

    rng = np.random.default_rng(seed)
    v = rng.standard_normal(x.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = matvec(v)
        lam_new = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0
        v = w / norm
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    raise IterationError(f"power iteration did not converge in {max_iter} steps")
