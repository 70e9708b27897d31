import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentcfm import datasets as ds
from latentcfm.datasets.darcy import ConfigError as DarcyConfigError, REFERENCE_STATS, solve_pressure
from latentcfm.datasets.triangle import ConfigError as TriangleConfigError
from latentcfm.metrics import darcy_residual, mode_coverage


# -- triangle -------------------------------------------------------------------------
def test_mode_count_and_uniform_frequencies():
    cfg = ds.TriangleConfig(k=4, d=2, seed=3)
    assert cfg.n_modes == 16 and len(cfg.mode_centers()) == 16
    x = ds.sample_triangle(cfg, 100000)
    frac = mode_coverage(x, cfg)["fractions"]
    assert np.all(np.abs(frac - 0.0625) < 0.005)


def test_preset_frequencies_match_weights():
    cfg = ds.TriangleConfig.preset(4, seed=0)
    x = ds.sample_triangle(cfg, 100000)
    frac = mode_coverage(x, cfg)["fractions"]
    np.testing.assert_allclose(frac, cfg.mode_weights(), atol=0.005)
    assert cfg.mode_weights().sum() == pytest.approx(1.0)


def test_single_mode_and_support():
    cfg = ds.TriangleConfig(k=1, d=2, mode_width=0.3, seed=1)
    x = ds.sample_triangle(cfg, 5000)
    assert np.all(ds.in_support(cfg, x))
    assert mode_coverage(x, cfg)["counts"].tolist() == [5000]


@settings(max_examples=20, deadline=None)
@given(k=st.integers(1, 5), d=st.integers(1, 3), seed=st.integers(0, 1000))
def test_samples_stay_inside_supports(k, d, seed):
    cfg = ds.TriangleConfig(k=k, d=d, seed=seed)
    x = ds.sample_triangle(cfg, 2000)
    assert x.shape == (2000, d)
    assert np.mean(~ds.in_support(cfg, x)) == 0.0


def test_density_integrates_to_one():
    cfg = ds.TriangleConfig.preset(1)
    g = (np.arange(400) + 0.5) / 400
    xx, yy = np.meshgrid(g, g, indexing="ij")
    dens = ds.triangle_density(cfg, np.stack([xx.ravel(), yy.ravel()], axis=1))
    assert dens.mean() == pytest.approx(1.0, abs=1e-3)


def test_triangle_validation():
    with pytest.raises(TriangleConfigError):
        ds.TriangleConfig(k=4, weights=[0.5, 0.5, 0.1, 0.0])
    with pytest.raises(TriangleConfigError):
        ds.TriangleConfig(k=4, weights=[1.0, 0.0])
    with pytest.raises(TriangleConfigError):
        ds.sample_triangle(ds.TriangleConfig(), 0)


def test_seeded_regeneration_is_byte_identical():
    cfg = ds.TriangleConfig.preset(2, seed=9)
    a = ds.sample_triangle(cfg, 10000)
    assert a.tobytes() == ds.sample_triangle(cfg, 10000).tobytes()
    # chunked streams: a longer draw extends the shorter one
    assert np.array_equal(ds.sample_triangle(cfg, 12000)[:4096], a[:4096])
    K1, P1 = ds.generate_darcy(ds.DarcyConfig(N=16, seed=2), 3)
    K2, P2 = ds.generate_darcy(ds.DarcyConfig(N=16, seed=2), 3)
    assert K1.tobytes() == K2.tobytes() and P1.tobytes() == P2.tobytes()


def test_split_half():
    x = np.arange(10.0)[:, None]
    a, b = ds.split_half(x, 0)
    assert len(a) == len(b) == 5
    assert sorted(np.concatenate([a, b])[:, 0].tolist()) == list(range(10))


# -- Darcy ------------------------------------------------------------------------------
def test_grf_without_terms_is_constant():
    cfg = ds.DarcyConfig(N=16, kl_terms=0, grf_mean=0.3)
    np.testing.assert_allclose(ds.sample_grf(cfg), np.exp(0.3))


def test_eigenvalues_sorted_and_normalised():
    lam, phi = ds.kl_eigenpairs(ds.DarcyConfig(N=16))
    assert np.all(np.diff(lam) <= 0) and np.all(lam > 0)
    np.testing.assert_allclose(np.mean(phi ** 2, axis=0), 1.0, rtol=1e-10)


def test_log_permeability_variance_matches_spectrum():
    cfg = ds.DarcyConfig(N=16, seed=4)
    lam, phi = ds.kl_eigenpairs(cfg)
    G = np.log(np.stack([ds.sample_grf(cfg, i) for i in range(1000)]))
    emp = G.var(axis=0).mean()
    spectral = float(np.sum(lam * np.mean(phi ** 2, axis=0)))
    assert emp == pytest.approx(spectral, rel=0.1)


def _dense_neumann_poisson(f, h):
    """Independent dense oracle: 5-point Neumann Laplacian, mean-zero least squares."""
    N = f.shape[0]
    n = N * N
    A = np.zeros((n, n))
    idx = np.arange(n).reshape(N, N)
    for i in range(N):
        for j in range(N):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                a, b = i + di, j + dj
                if 0 <= a < N and 0 <= b < N:
                    A[idx[i, j], idx[i, j]] += 1.0 / h ** 2
                    A[idx[i, j], idx[a, b]] -= 1.0 / h ** 2
    p = np.linalg.lstsq(A, (f - f.mean()).ravel(), rcond=None)[0]
    return (p - p.mean()).reshape(N, N)


def test_constant_permeability_matches_dense_poisson():
    cfg = ds.DarcyConfig(N=16)
    f = ds.source_term(cfg)
    Kc = 2.5
    _, p = ds.solve_darcy(np.full((16, 16), Kc), cfg)
    np.testing.assert_allclose(p, _dense_neumann_poisson(f / Kc, cfg.h), atol=1e-8)


def test_zero_source_gives_zero_pressure():
    cfg = ds.DarcyConfig(N=16)
    K = ds.sample_grf(cfg, 0)
    _, p = ds.solve_darcy(K, cfg, f=np.zeros((16, 16)))
    assert np.abs(p).max() == 0.0


def test_pressure_mean_zero_and_conservation():
    cfg = ds.DarcyConfig(N=16)
    K, P = ds.generate_darcy(cfg, 2)
    assert np.all(np.abs(P.mean(axis=(1, 2))) < 1e-8)
    _, p = ds.solve_darcy(np.ones((16, 16)), cfg)
    from latentcfm.datasets.darcy import _face_transmissibility, apply_operator
    Tx, Ty = _face_transmissibility(np.ones((16, 16)), cfg.h)
    div = -apply_operator(p, Tx, Ty)         # discrete div(K grad p)
    f = ds.source_term(cfg)
    assert abs(div.sum() + f.sum()) < 1e-8 * np.abs(f).sum()
    np.testing.assert_allclose(-div, f - f.mean(), atol=1e-6 * np.abs(f).max())


def test_solved_pairs_separate_from_shuffled_pairs():
    cfg = ds.DarcyConfig(N=32)
    K, P = ds.generate_darcy(cfg, 8)
    R = darcy_residual(K, P, cfg)
    R_shuffled = darcy_residual(K, np.roll(P, 1, axis=0), cfg)
    assert R.max() * 10 < R_shuffled.min()


def test_solved_pair_residual_at_full_grid():
    cfg = ds.DarcyConfig(N=64)
    K, P = ds.generate_darcy(cfg, 1)
    assert darcy_residual(K, P, cfg)[0] < 1e-2


def test_standardize_round_trip_and_reference_stats():
    cfg = ds.DarcyConfig(N=16)
    K, P = ds.generate_darcy(cfg, 4)
    x, stats = ds.standardize(K, P)
    assert x.shape == (4, 2, 16, 16)
    K2, P2 = ds.unstandardize(x, stats)
    np.testing.assert_allclose(K2, K, atol=1e-12)
    np.testing.assert_allclose(P2, P, atol=1e-12)
    x, s2 = ds.standardize(K, P, REFERENCE_STATS)
    assert s2["mu_K"] == 1.1491 and s2["sigma_K"] == 7.8154
    np.testing.assert_allclose(x[:, 0], (K - 1.1491) / 7.8154)
    with pytest.raises(DarcyConfigError):
        ds.standardize(np.ones((2, 16, 16)), P[:2])


def test_darcy_validation():
    with pytest.raises(DarcyConfigError):
        ds.DarcyConfig(N=4)
    with pytest.raises(DarcyConfigError):
        ds.DarcyConfig(w=0.6)
    with pytest.raises(DarcyConfigError):
        solve_pressure(-np.ones((8, 8)), np.zeros((8, 8)), 1 / 8)
