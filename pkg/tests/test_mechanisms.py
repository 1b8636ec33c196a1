import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dpconsensus.errors import DimensionMismatchError
from dpconsensus.mechanisms import DpConfig, clip, privatize, sample_lot

vectors = arrays(np.float64, st.integers(1, 8), elements=st.floats(-1e3, 1e3))


def test_clip_examples():
    assert np.allclose(clip(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
    assert np.array_equal(clip(np.array([0.3, 0.4]), 1.0), [0.3, 0.4])
    assert np.array_equal(clip(np.zeros(3), 2.0), np.zeros(3))


@settings(max_examples=200)
@given(vectors, st.floats(1e-3, 1e3))
def test_clip_properties(v, c):
    out = clip(v, c)
    assert np.linalg.norm(out) <= c * (1 + 1e-12)
    assert np.allclose(clip(out, c), out, rtol=1e-12, atol=0)
    if np.linalg.norm(v) <= c:
        assert np.array_equal(out, v)
    else:
        assert not np.array_equal(out, v)
        # direction preserved
        assert np.allclose(out * np.linalg.norm(v), v * np.linalg.norm(out), rtol=1e-9, atol=1e-9)


def test_sample_lot():
    gen = np.random.default_rng(0)
    assert np.array_equal(sample_lot(7, 1.0, gen), np.arange(7))
    sizes = [len(sample_lot(10_000, 0.5, gen)) for _ in range(1000)]
    assert 4900 <= np.mean(sizes) <= 5100
    tiny = [len(sample_lot(100, 1e-6, gen)) for _ in range(100)]
    assert sum(s == 0 for s in tiny) >= 95


def test_privatize_examples():
    gen = np.random.default_rng(0)
    cfg = DpConfig(clip_norm=10, noise_multiplier=0, lot_size=2, dataset_size=2)
    out = privatize(np.array([[1.0, 0.0], [0.0, 1.0]]), cfg, gen)
    assert np.allclose(out.vector, [0.5, 0.5]) and out.lot_actual == 2
    cfg = DpConfig(clip_norm=1, noise_multiplier=0, lot_size=1, dataset_size=1)
    assert np.allclose(privatize(np.array([[30.0, 40.0]]), cfg, gen).vector, [0.6, 0.8])


def test_noise_energy_matches_chi_square_expectation():
    gen = np.random.default_rng(1)
    cfg = DpConfig(clip_norm=10, noise_multiplier=1, lot_size=4, dataset_size=8)
    sq = [np.sum(privatize(np.zeros((3, 2)), cfg, gen).vector ** 2) for _ in range(10_000)]
    assert np.mean(sq) == pytest.approx(12.5, rel=0.05)


def test_empty_lot_is_pure_noise():
    gen = np.random.default_rng(2)
    cfg = DpConfig(clip_norm=2, noise_multiplier=1, lot_size=4, dataset_size=8)
    out = privatize(np.zeros((0, 5)), cfg, gen, dim=5)
    assert out.lot_actual == 0 and out.vector.shape == (5,) and np.any(out.vector != 0)


def test_dimension_mismatch():
    cfg = DpConfig(clip_norm=1, noise_multiplier=0, lot_size=1, dataset_size=2)
    with pytest.raises(DimensionMismatchError):
        privatize(np.zeros((2, 3)), cfg, np.random.default_rng(), dim=4)


def test_reduces_to_lot_mean_without_clipping_or_noise():
    gen = np.random.default_rng(3)
    g = gen.standard_normal((6, 4)) * 100
    cfg = DpConfig(clip_norm=np.inf, noise_multiplier=0, lot_size=6, dataset_size=6)
    assert np.allclose(privatize(g, cfg, gen).vector, g.mean(axis=0), rtol=1e-14)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.floats(0.1, 10))
def test_replacing_one_sample_moves_output_at_most_2c_over_l(seed, n, c):
    gen = np.random.default_rng(seed)
    g = gen.standard_normal((n, 3)) * gen.uniform(0.1, 50)
    g2 = g.copy()
    g2[gen.integers(n)] = gen.standard_normal(3) * 100
    cfg = DpConfig(clip_norm=c, noise_multiplier=0, lot_size=n, dataset_size=n)
    a = privatize(g, cfg, gen).vector
    b = privatize(g2, cfg, gen).vector
    assert np.linalg.norm(a - b) <= 2 * c / n * (1 + 1e-12)


def test_same_stream_same_output():
    cfg = DpConfig(clip_norm=1, noise_multiplier=1, lot_size=2, dataset_size=4)
    g = np.ones((2, 3))
    a = privatize(g, cfg, np.random.default_rng(9)).vector
    b = privatize(g, cfg, np.random.default_rng(9)).vector
    assert np.array_equal(a, b)


def test_config_validation():
    with pytest.raises(ValueError):
        DpConfig(clip_norm=1, noise_multiplier=1, lot_size=5, dataset_size=4)
    with pytest.raises(ValueError):
        DpConfig(clip_norm=0, noise_multiplier=1, lot_size=1, dataset_size=4)
    assert DpConfig(1.0, 2.0, 10, 40).noise_std == pytest.approx(0.2)
