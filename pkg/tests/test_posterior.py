import math

import numpy as np
import pytest

from flowcal.mcmc import ChainSet
from flowcal.model import PARAM_NAMES
from flowcal.posterior import credible_band, histogram, shape_tag, summarize, summarize_samples


def chain_set(draws, n_chains=1, k_c=26.0):
    """ChainSet from an (n, 4) array, split evenly across chains."""
    draws = np.asarray(draws, dtype=float)
    return ChainSet({name: draws[:, i].reshape(n_chains, -1) for i, name in enumerate(PARAM_NAMES)},
                    acceptance=np.zeros(n_chains), k_c=k_c)


def posterior_like(n=4000, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.normal(110, 0.5, n), rng.normal(2300, 30, n),
                            rng.normal(400, 60, n), rng.normal(1.5, 0.1, n)])


def test_constant_chain():
    s = summarize_samples(np.full(300, 5.0))
    assert s.mean == 5.0 and s.std == 0.0 and s.degenerate
    assert s.q025 == s.q975 == 5.0


def test_uniform_grid_order_statistics():
    s = summarize_samples(np.arange(1, 10001) / 1000)
    assert s.mean == pytest.approx(5.0005, abs=1e-12)
    assert s.q025 == pytest.approx(0.25, abs=1e-12)
    assert s.q975 == pytest.approx(9.75, abs=1e-12)
    assert s.counts.sum() == 10000 and not s.degenerate


def test_pooling_consistency():
    draws = posterior_like(1000)
    one = summarize(chain_set(draws))
    three = summarize(chain_set(np.tile(draws.T, 3).T, n_chains=3))
    for name in PARAM_NAMES:
        assert three[name].mean == pytest.approx(one[name].mean, rel=1e-14)
        assert three[name].q025 == one[name].q025 and three[name].q975 == one[name].q975


def test_summary_invariants_and_representative():
    s = summarize(chain_set(posterior_like(), n_chains=2))
    for name in PARAM_NAMES:
        assert s[name].q025 <= s[name].mean <= s[name].q975
        assert s[name].counts.sum() == 4000 and s[name].counts.size >= 20
    rep = s.representative()
    assert rep.u_f == pytest.approx(110, abs=0.1) and rep.k_c == 26.0
    assert s.as_dict()["speed_at_capacity"] == pytest.approx(s["q_c"].mean / 26)


def test_summary_write(tmp_path):
    paths = summarize(chain_set(posterior_like(500))).write(tmp_path)
    assert {p.name for p in paths} == {"summary.json"} | {f"hist_{n}.csv" for n in PARAM_NAMES}


def test_empty_chains_rejected():
    with pytest.raises(ValueError):
        summarize_samples([])


def test_shape_tags():
    rng = np.random.default_rng(1)
    assert summarize_samples(rng.normal(size=20000)).shape == "normal-like"
    assert summarize_samples(rng.exponential(size=20000)).shape == "exponential-like"
    assert shape_tag(0.7) == "normal-like" and shape_tag(0.8) == "exponential-like"
    assert shape_tag(-1.2) == "exponential-like"


def test_histogram_min_bins():
    edges, counts = histogram(np.arange(30.0))
    assert counts.size >= 20 and counts.sum() == 30 and edges.size == counts.size + 1


def test_band_identical_draws_has_zero_width():
    band = credible_band(chain_set(np.tile([110.0, 2300.0, 400.0, 1.5], (200, 1))), grid_size=51)
    assert np.allclose(band.width(), 0.0, atol=1e-9)
    assert np.allclose(band.lower, band.central, atol=1e-9)


def test_band_at_zero_flow_is_u_f_quantiles():
    draws = posterior_like(1500)
    band = credible_band(chain_set(draws), n_draws=None)
    lo, hi = np.percentile(draws[:, 0], [2.5, 97.5])
    assert band.q[0] == 0.0
    assert band.lower[0] == pytest.approx(lo, abs=1e-12) and band.upper[0] == pytest.approx(hi, abs=1e-12)


def test_band_orders_and_grid():
    draws = posterior_like()
    band = credible_band(chain_set(draws), grid_size=101, seed=4)
    assert band.q[-1] == pytest.approx(draws[:, 1].mean())
    ok = band.n_draws == band.n_draws.max()
    assert ok.sum() > 50
    assert np.all(band.lower[ok] <= band.central[ok] + 1e-9)
    assert np.all(band.central[ok] <= band.upper[ok] + 1e-9)
    assert np.all(band.n_draws <= 2000)


def test_band_widening_quantiles_never_narrows():
    cs = chain_set(posterior_like())
    inner = credible_band(cs, seed=2)
    outer = credible_band(cs, seed=2, level=(1.0, 99.0))
    ok = ~np.isnan(inner.lower)
    assert np.all(outer.width()[ok] >= inner.width()[ok] - 1e-12)


def test_band_is_seeded():
    cs = chain_set(posterior_like())
    a, b = credible_band(cs, seed=3), credible_band(cs, seed=3)
    assert np.array_equal(a.lower, b.lower, equal_nan=True)


def test_band_errors():
    cs = chain_set(posterior_like(500))
    with pytest.raises(ValueError):
        credible_band(cs, grid_size=1)
    with pytest.raises(ValueError):
        credible_band(chain_set(posterior_like(50)))


def test_band_csv(tmp_path):
    band = credible_band(chain_set(posterior_like(500)), grid_size=11)
    band.write_csv(tmp_path / "band.csv")
    lines = (tmp_path / "band.csv").read_text().splitlines()
    assert lines[0] == "q,lower,central,upper,n_draws" and len(lines) == 12
