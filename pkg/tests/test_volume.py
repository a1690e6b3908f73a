import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from maxent_seg.volume import (
    BinaryMask,
    LabelMap,
    ProbMap,
    Volume,
    component_volumes_ml,
    connected_components,
    mask_volume_ml,
    threshold,
    zscore_normalize,
)

small_dims = st.tuples(*(st.integers(1, 5),) * 3)


def test_grid_validation():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        ProbMap(np.full((2, 2, 1), 1.5))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1, 0, 1))
    with pytest.raises(ValueError):
        LabelMap(np.array([[[0, 2]]]), num_labels=2)


def test_grids_are_immutable():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1.0


def test_flat_order_is_x_fastest():
    v = Volume.from_flat((2, 3, 1), np.arange(6.0))
    assert v.data[1, 0, 0] == 1.0
    assert v.data[0, 1, 0] == 2.0
    np.testing.assert_array_equal(v.flat(), np.arange(6.0))


def test_threshold_examples():
    assert not threshold(ProbMap(np.full((3, 3, 1), 0.5))).data.any()
    m = threshold(ProbMap.from_flat((3, 1, 1), [0.2, 0.7, 0.5]), 0.5)
    assert m.flat().tolist() == [False, True, False]
    with pytest.raises(ValueError):
        threshold(ProbMap(np.zeros((1, 1, 1))), 1.5)


@given(arrays(np.float64, small_dims, elements=st.floats(0, 1)), st.floats(0, 1))
def test_threshold_matches_elementwise(a, t):
    m = threshold(ProbMap(a), t)
    for idx in np.ndindex(a.shape):
        assert m.data[idx] == (a[idx] > t)


def test_zscore_examples():
    with pytest.raises(ValueError, match="zero variance"):
        zscore_normalize(Volume(np.ones((3, 3, 1))))
    out = zscore_normalize(Volume.from_flat((3, 1, 1), [1.0, 2.0, 3.0]))
    np.testing.assert_allclose(out.flat(), [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-12)
    again = zscore_normalize(out)
    np.testing.assert_allclose(again.data, out.data, atol=1e-9)


def test_zscore_region_statistics():
    rng = np.random.default_rng(3)
    v = Volume(rng.normal(5, 2, (6, 6, 2)))
    region = BinaryMask(rng.random((6, 6, 2)) > 0.4)
    out = zscore_normalize(v, region)
    sel = out.data[region.data]
    assert abs(sel.mean()) < 1e-9
    assert abs(sel.std() - 1) < 1e-9
    with pytest.raises(ValueError):
        zscore_normalize(v, BinaryMask(np.zeros((6, 6, 2), bool)))
    with pytest.raises(ValueError):
        zscore_normalize(v, BinaryMask(np.ones((5, 6, 2), bool)))


@given(
    arrays(np.float64, (4, 3, 2), elements=st.floats(-100, 100)),
    st.floats(0.01, 100),
    st.floats(-100, 100),
)
def test_zscore_affine_invariance(a, scale, shift):
    if a.std() < 1e-3:
        return
    base = zscore_normalize(Volume(a))
    moved = zscore_normalize(Volume(scale * a + shift))
    np.testing.assert_allclose(moved.data, base.data, atol=1e-7)


def test_connectivity_examples():
    one = np.zeros((3, 3, 3), bool)
    one[1, 1, 1] = True
    assert connected_components(BinaryMask(one)).num_labels == 1
    corner = np.zeros((2, 2, 2), bool)
    corner[0, 0, 0] = corner[1, 1, 1] = True
    assert connected_components(BinaryMask(corner), 26).num_labels == 1
    assert connected_components(BinaryMask(corner), 18).num_labels == 2
    assert connected_components(BinaryMask(corner), 6).num_labels == 2
    with pytest.raises(ValueError):
        connected_components(BinaryMask(corner), 8)


def test_labels_follow_x_fastest_scan_order():
    m = np.zeros((4, 4, 1), bool)
    m[3, 0, 0] = True  # flat index 3
    m[0, 2, 0] = True  # flat index 8
    lm = connected_components(BinaryMask(m))
    assert lm.data[3, 0, 0] == 1 and lm.data[0, 2, 0] == 2


@pytest.mark.parametrize("connectivity", [6, 18, 26])
@pytest.mark.parametrize("seed", range(12))
def test_components_match_flood_fill(connectivity, seed):
    rng = np.random.default_rng(seed)
    shape = tuple(rng.integers(1, 11, 3)) if seed % 3 else (8, 8, 8)
    m = rng.random(shape) < rng.uniform(0.1, 0.5)
    lm = connected_components(BinaryMask(m), connectivity)
    got = sorted(sorted(zip(*np.nonzero(lm.data == k))) for k in range(1, lm.num_labels + 1))
    want = sorted(sorted(c) for c in oracles.flood_fill_components(m, connectivity))
    assert [[tuple(map(int, p)) for p in c] for c in got] == want
    assert np.array_equal(lm.data > 0, m)


def test_component_volumes():
    m = np.zeros((10, 10, 10), bool)
    m[:] = True
    assert component_volumes_ml(connected_components(BinaryMask(m))) == [(1, 1.0)]
    assert component_volumes_ml(connected_components(BinaryMask(np.zeros((3, 3, 3), bool)))) == []
    big = np.zeros((50, 100, 2), bool)
    big[:, :, 0] = True
    vols = component_volumes_ml(connected_components(BinaryMask(big, (1, 1, 3))))
    assert vols == [(1, pytest.approx(15.0, abs=1e-12))]


@settings(max_examples=50)
@given(arrays(bool, small_dims), st.tuples(*(st.floats(0.1, 5),) * 3))
def test_component_volumes_sum_to_mask_volume(a, spacing):
    m = BinaryMask(a, spacing)
    total = sum(v for _, v in component_volumes_ml(connected_components(m)))
    assert total == pytest.approx(mask_volume_ml(m), rel=1e-12, abs=1e-15)
