import numpy as np
import pytest

from flowcal.model import SpeedFlowParams, predict_speed
from flowcal.synth import GeneratorSpec, generate, generate_arrays

TRUTH = SpeedFlowParams(110, 2300, 400, 1.5)


def test_noise_free_limit():
    q, u = generate_arrays(GeneratorSpec(TRUTH, sigma=1e-9, n=1000, seed=1))
    assert np.max(np.abs(u - predict_speed(TRUTH, q))) < 1e-6


def test_deterministic():
    spec = GeneratorSpec(TRUTH, sigma=4.0, n=1000, seed=5)
    assert generate(spec) == generate(spec)
    other = generate(GeneratorSpec(TRUTH, sigma=4.0, n=1000, seed=6))
    assert generate(spec) != other


def test_mean_residual_and_flow_bound():
    n, sigma = 100000, 4.0
    q, u = generate_arrays(GeneratorSpec(TRUTH, sigma=sigma, n=n, seed=2))
    assert abs(np.mean(u - predict_speed(TRUTH, q))) < 4 * sigma / np.sqrt(n)
    assert np.all(q <= TRUTH.q_c) and np.all(q >= 0) and np.all(u > 0)


def test_truncation_resamples():
    low = SpeedFlowParams(5.0, 100, 10, 1.0, k_c=26)
    _, u = generate_arrays(GeneratorSpec(low, sigma=10.0, n=5000, seed=0))
    assert np.all(u > 0)


def test_empirical_flow_weights():
    q, _ = generate_arrays(GeneratorSpec(TRUTH, 4.0, 5000, "empirical", seed=3, flow_weights=[0, 1, 0, 0]))
    assert np.all((q >= 575) & (q <= 1150))


def test_observation_fields():
    obs = generate(GeneratorSpec(TRUTH, 4.0, 3, seed=0, step_minutes=6))
    assert (obs[1].timestamp - obs[0].timestamp).seconds == 360
    assert all(o.lane == 1 and o.heavy_share == 0 and o.k == pytest.approx(o.q / o.u) for o in obs)


@pytest.mark.parametrize("kwargs", [dict(sigma=0.0, n=5), dict(sigma=1.0, n=0),
                                    dict(sigma=1.0, n=5, flow_distribution="normal"),
                                    dict(sigma=1.0, n=5, flow_distribution="empirical")])
def test_invalid_specs(kwargs):
    with pytest.raises(ValueError):
        GeneratorSpec(TRUTH, **kwargs)
