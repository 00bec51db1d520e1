import numpy as np
import pytest

from flexdiff.errors import ParameterError, ShapeError
from flexdiff.metrics import (autoregressive_rollout, pcc, pull_stats, rfne,
                              vorticity_spectrum)


# -- RFNE ---------------------------------------------------------------------

def test_rfne_basic(rng):
    truth = rng.standard_normal((32, 32))
    assert rfne(truth, truth) == 0.0
    assert rfne(2 * truth, truth) == pytest.approx(1.0)
    assert rfne(np.zeros_like(truth), truth) == pytest.approx(1.0)
    with pytest.raises(ParameterError):
        rfne(truth, np.zeros_like(truth))
    with pytest.raises(ShapeError):
        rfne(truth, truth[:16])


# -- PCC -----------------------------------------------------------------------

def test_pcc_affine_invariance(rng):
    truth = rng.standard_normal((64, 64))
    assert pcc(3.0 * truth + 2.0, truth) == pytest.approx(1.0, abs=1e-12)
    assert pcc(-truth, truth) == pytest.approx(-1.0, abs=1e-12)


def test_pcc_independent_fields():
    r = np.random.default_rng(0)
    a = r.standard_normal(10 ** 6)
    b = r.standard_normal(10 ** 6)
    assert abs(pcc(a, b)) < 0.01


def test_pcc_constant_rejected():
    with pytest.raises(ParameterError):
        pcc(np.ones((8, 8)), np.random.default_rng(0).standard_normal((8, 8)))


# -- vorticity spectrum -----------------------------------------------------------

def test_spectrum_single_mode():
    n = 64
    x = np.arange(n) * 2 * np.pi / n
    omega = np.sin(5 * x)[:, None] * np.ones(n)[None, :]
    bins = vorticity_spectrum(omega)
    k5 = bins.energy[np.where(bins.k_centers == 5)[0][0]]
    assert k5 > 0.999 * bins.energy.sum()


def test_spectrum_zero_field():
    bins = vorticity_spectrum(np.zeros((32, 32)))
    assert np.all(bins.energy == 0.0)


def test_spectrum_partition(rng):
    n = 32
    omega = rng.standard_normal((n, n))
    omega -= omega.mean()
    bins = vorticity_spectrum(omega)
    # binning is a partition of the nonzero modes: sums must agree exactly
    what = np.fft.fft2(omega)
    k1 = np.fft.fftfreq(n) * n
    kmag = np.hypot(k1[:, None], k1[None, :])
    nz = kmag > 0
    direct = np.sum(np.pi * np.abs(what[nz]) ** 2 / ((n * n) ** 2 * kmag[nz]))
    assert bins.energy.sum() == pytest.approx(direct, abs=1e-10 * direct)
    assert bins.n_modes_per_bin.sum() == n * n - 1
    assert len(bins.energy) == n // 2


def test_spectrum_requires_square():
    with pytest.raises(ShapeError):
        vorticity_spectrum(np.zeros((16, 32)))


# -- pull statistics ----------------------------------------------------------------

def test_pull_gaussian_oracle():
    # clean field b; observed truth = b + eta; members = b + eps_i.
    # For a caliberated ensemble pull_std -> sqrt((m+1)/(m-1)) ~ 1.
    r = np.random.default_rng(42)
    npix, m, sigma = 10 ** 5, 100, 0.8
    base = r.standard_normal(npix)
    truth = base + r.normal(0.0, sigma, npix)
    members = base[None, :] + r.normal(0.0, sigma, (m, npix))
    mean = members.mean(axis=0)
    std = members.std(axis=0)
    pull_mean, pull_std = pull_stats(mean, std, truth)
    assert abs(pull_mean) < 0.02
    assert 0.95 < pull_std < 1.05


def test_pull_perfect_mean_honest_std():
    r = np.random.default_rng(3)
    npix, sigma = 10 ** 5, 1.3
    base = r.standard_normal(npix)
    truth = base + r.normal(0.0, sigma, npix)
    pull_mean, pull_std = pull_stats(base, np.full(npix, sigma), truth)
    assert abs(pull_mean) < 0.02
    assert pull_std == pytest.approx(1.0, abs=0.02)


def test_pull_std_scaling_covariance():
    r = np.random.default_rng(5)
    mean = r.standard_normal(1000)
    std = np.abs(r.standard_normal(1000)) + 0.1
    truth = r.standard_normal(1000)
    _, p1 = pull_stats(mean, std, truth)
    _, p2 = pull_stats(mean, 0.5 * std, truth)
    assert p2 == pytest.approx(2.0 * p1, rel=1e-12)


def test_pull_empty_mask():
    with pytest.raises(ParameterError):
        pull_stats(np.zeros(10), np.zeros(10), np.zeros(10))


# -- autoregressive rollout ------------------------------------------------------------

def _make_trajectory(k=12, n=32):
    r = np.random.default_rng(9)
    base = r.standard_normal((n, n))
    frames = [base]
    for _ in range(k):
        frames.append(frames[-1] + 0.15 * r.standard_normal((n, n)))
    return np.stack(frames)


def test_rollout_zero_residual_is_persistence():
    traj = _make_trajectory()
    prev, cur = traj[0], traj[1]
    truth = traj[2:8]
    out = autoregressive_rollout(lambda p, c, k: np.zeros_like(c),
                                 prev, cur, truth, horizon=6)
    for k, (field, score) in enumerate(out):
        assert np.array_equal(field, cur)
        assert score == pytest.approx(pcc(cur, truth[k]), abs=1e-12)


def test_rollout_oracle_residual_perfect():
    traj = _make_trajectory()
    truth = traj[2:8]

    def oracle(prev, cur, k):
        return truth[k - 1] - cur

    out = autoregressive_rollout(oracle, traj[0], traj[1], truth, horizon=6)
    for _, score in out:
        assert score == pytest.approx(1.0, abs=1e-12)


def test_rollout_horizon_validation():
    traj = _make_trajectory()
    with pytest.raises(ParameterError):
        autoregressive_rollout(lambda p, c, k: c, traj[0], traj[1], traj[2:4],
                               horizon=0)
    with pytest.raises(ParameterError):
        autoregressive_rollout(lambda p, c, k: c, traj[0], traj[1], traj[2:4],
                               horizon=10)
