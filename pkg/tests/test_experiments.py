"""Properties measured on the cached desk-scale runs (see ``latentcfm.experiments``)."""
import numpy as np
import pytest

from latentcfm import pipelines as pl
from latentcfm.experiments import DEFAULT_RESULTS, run_suite
from latentcfm.latent import encode
from latentcfm.metrics import SinkhornConfig, sinkhorn_divergence
from latentcfm.solvers import SolverConfig


@pytest.fixture(scope="module")
def triangle():
    return run_suite("triangle")


def test_icfm_triangle_band(triangle):
    for key, r in triangle["runs"].items():
        if r["method"] == "icfm":
            assert 0.005 <= r["sinkhorn"] <= 0.03, key


def test_gmm_beats_paired_icfm(triangle):
    runs = triangle["runs"]
    for p in {r["preset"] for r in runs.values()}:
        assert runs[f"p{p}/latent-cfm-gmm"]["sinkhorn"] <= runs[f"p{p}/icfm"]["sinkhorn"], p


def test_euler_1000_matches_dopri5(triangle):
    bundle = pl.load_bundle(str(DEFAULT_RESULTS / "triangle" / "p0_latent-cfm-gmm.lcfm"))[0]
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((2000, 2))
    cond = pl.draw_conditions(bundle, 2000, rng)
    euler = pl.sample(bundle, 2000, SolverConfig("euler", steps=1000), x0=x0, cond=cond)
    dopri = pl.sample(bundle, 2000, SolverConfig(), x0=x0, cond=cond)
    s = sinkhorn_divergence(euler, dopri, SinkhornConfig(blur=0.05, scale=1.0))
    assert np.sqrt(2 * max(s, 0.0)) < 1e-2


def test_test_kl_non_increasing_in_beta():
    rows = run_suite("beta")["rows"]
    kl = [r["test_kl"] for r in sorted(rows, key=lambda r: r["beta"])]
    print("test KL by beta:", kl)
    assert all(b <= a for a, b in zip(kl, kl[1:]))


def test_fixed_latent_concentrates_samples():
    run_suite("composition")
    bundle = pl.load_bundle(str(DEFAULT_RESULTS / "composition" / "triangle_vae.lcfm"))[0]
    rng = np.random.default_rng(1)
    anchor = np.array([[0.125, 0.125]])
    _, _, f = encode(bundle.encoder, anchor, rng)
    solver = SolverConfig("rk4", steps=50)
    within = pl.sample(bundle, 2000, solver, seed=2, cond=np.repeat(f, 2000, axis=0))
    total = pl.sample(bundle, 2000, solver, seed=3)
    ratio = within.var(axis=0).sum() / total.var(axis=0).sum()
    print("within / total variance:", ratio)
    assert ratio < 0.25
