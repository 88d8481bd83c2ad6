import numpy as np
import pytest

from vqkv import InvalidInputError, SyntheticSpec, VectorDataset, gen_dataset, generate
from vqkv.synthetic import rope_frequencies, rope_rotate


def test_same_spec_gives_identical_files(tmp_path):
    spec = SyntheticSpec(kind="rope_rotated_keys", dim=8, count=500, seed=3)
    gen_dataset(spec, tmp_path / "a.vecd")
    gen_dataset(spec, tmp_path / "b.vecd")
    assert (tmp_path / "a.vecd").read_bytes() == (tmp_path / "b.vecd").read_bytes()
    assert not np.array_equal(generate(spec), generate(spec.with_seed(4)))


def test_rotation_preserves_norms():
    out, pre = generate(SyntheticSpec(kind="rope_rotated_keys", dim=16, count=2000, seed=1), prerotation=True)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(pre, axis=1), rtol=1e-5)
    assert not np.allclose(out[1:], pre[1:])
    np.testing.assert_allclose(out[0], pre[0], rtol=1e-6)  # position 0 is unrotated


def test_rotation_pairs_by_hand():
    x = np.array([[1.0, 0.0, 0.0, 1.0]])
    theta0, theta1 = 3 * 1.0, 3 * 100.0 ** (-0.5)
    out = rope_rotate(x, [3], base=100.0)
    np.testing.assert_allclose(out[0], [np.cos(theta0), np.sin(theta0), -np.sin(theta1), np.cos(theta1)])
    np.testing.assert_allclose(rope_frequencies(4, 100.0), [1.0, 0.1])


def test_rotation_is_relative():
    # dot products of rotated pairs depend only on the position gap
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((1, 8)), rng.standard_normal((1, 8))
    d1 = rope_rotate(a, [5]) @ rope_rotate(b, [2]).T
    d2 = rope_rotate(a, [105]) @ rope_rotate(b, [102]).T
    assert d1.item() == pytest.approx(d2.item(), rel=1e-9)


def test_single_zero_mean_component():
    count, sigma = 40_000, 0.7
    xs = generate(SyntheticSpec(dim=6, count=count, component_count=1, mean_scale=0.0,
                                noise_scale=sigma, seed=9)).astype(np.float64)
    assert np.all(np.abs(xs.mean(axis=0)) <= 4 * sigma / np.sqrt(count))
    np.testing.assert_allclose(xs.std(axis=0), sigma, rtol=0.05)


def test_mixture_has_requested_components():
    xs = generate(SyntheticSpec(dim=4, count=3000, component_count=3, noise_scale=0.0, mean_scale=5.0))
    assert len(np.unique(xs, axis=0)) == 3


def test_dataset_roundtrip(tmp_path):
    spec = SyntheticSpec(dim=5, count=77)
    ds = gen_dataset(spec, tmp_path / "d.vecd")
    assert np.array_equal(np.asarray(VectorDataset.load(tmp_path / "d.vecd").vectors), ds.vectors)


@pytest.mark.parametrize("kwargs", [
    dict(kind="rope_rotated_keys", dim=7),
    dict(dim=0),
    dict(count=0),
    dict(rope_base=0.0),
    dict(noise_scale=-1.0),
])
def test_spec_validation(kwargs):
    with pytest.raises((InvalidInputError, ValueError)):
        SyntheticSpec(**kwargs)
