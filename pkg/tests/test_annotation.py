import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dtiseg import staple, tracts
from dtiseg.errors import DataError
from dtiseg.nifti import VolumeMeta
from dtiseg.tck import StreamlineSet


# --- STAPLE ------------------------------------------------------------------


def test_staple_unanimity_fixed_point():
    rng = np.random.default_rng(0)
    vol = (rng.random((8, 8, 8)) > 0.5).astype(np.uint8)
    res = staple.staple_fuse([vol, vol, vol])
    np.testing.assert_array_equal(res.hard, vol)
    # identity rows on the observed labels
    for j in range(3):
        np.testing.assert_allclose(np.diag(res.performance.theta[j]), 1.0, atol=1e-6)


def test_staple_majority_recovery_vs_random_rater():
    rng = np.random.default_rng(7)
    truth = (rng.random((16, 16, 16)) > 0.5).astype(np.uint8)
    rand = rng.integers(0, 2, size=truth.shape).astype(np.uint8)
    cands = [truth, truth, truth, truth, rand]
    res = staple.staple_fuse(cands)
    # brute-force majority vote oracle
    stack = np.stack(cands)
    majority = (stack.sum(axis=0) >= 3).astype(np.uint8)
    agree = np.mean(res.hard == majority)
    assert agree >= 0.99


def test_staple_symmetric_disagreement_posterior_half():
    a = np.ones((4, 4, 4), dtype=np.uint8)
    b = np.full((4, 4, 4), 2, dtype=np.uint8)
    res = staple.staple_fuse([a, b])
    lab = list(res.label_ids)
    i1, i2 = lab.index(1), lab.index(2)
    np.testing.assert_allclose(res.posteriors[:, i1], 0.5, atol=1e-9)
    np.testing.assert_allclose(res.posteriors[:, i2], 0.5, atol=1e-9)
    # documented tie-break: lowest label id wins
    assert np.all(res.hard == 1)


def test_staple_log_likelihood_monotone():
    rng = np.random.default_rng(13)
    truth = rng.integers(0, 3, size=(10, 10, 10)).astype(np.uint8)
    cands = []
    for _ in range(4):
        noisy = truth.copy()
        flip = rng.random(truth.shape) < 0.15
        noisy[flip] = rng.integers(0, 3, size=int(flip.sum()))
        cands.append(noisy)
    res = staple.staple_fuse(cands)
    ll = np.array(res.log_likelihood)
    assert np.all(np.diff(ll) >= -1e-9)


def test_staple_posteriors_sum_to_one():
    rng = np.random.default_rng(5)
    cands = [rng.integers(0, 4, size=(6, 6, 6)).astype(np.uint8) for _ in range(3)]
    res = staple.staple_fuse(cands)
    np.testing.assert_allclose(res.posteriors.sum(axis=1), 1.0, atol=1e-9)


def test_staple_perfect_raters_one_iteration():
    rng = np.random.default_rng(2)
    vol = rng.integers(0, 3, size=(6, 6, 6)).astype(np.uint8)
    res = staple.staple_fuse([vol, vol], diag_init=1.0, max_iter=1)
    np.testing.assert_array_equal(res.hard, vol)


def test_staple_absent_label_flagged():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros((4, 4, 4), dtype=np.uint8)
    b[0, 0, 0] = 1
    res = staple.staple_fuse([a, b], label_ids=[0, 1, 2])
    assert 2 in res.absent_labels


def test_staple_grid_mismatch():
    with pytest.raises(ValueError):
        staple.staple_fuse([np.zeros((4, 4, 4), dtype=np.uint8),
                            np.zeros((5, 4, 4), dtype=np.uint8)])


def test_staple_needs_two_candidates():
    with pytest.raises(ValueError):
        staple.staple_fuse([np.zeros((4, 4, 4), dtype=np.uint8)])


# --- density masks -----------------------------------------------------------


def _meta(n=10, h=1.0):
    return VolumeMeta(dims=(n, n, n), voxel_size_mm=(h, h, h))


def test_density_single_axis_streamline():
    s = StreamlineSet([np.array([[0.5, 0.5, 0.5], [7.5, 0.5, 0.5]], dtype=np.float32)])
    mask, thr = tracts.density_mask(s, _meta())
    density = tracts.streamline_density(s, _meta())
    assert density.max() == 1
    assert thr == 1.0
    np.testing.assert_array_equal(mask, density > 0)
    assert mask[:, 0, 0].sum() == 8


def test_density_percentile_linear_interpolation():
    # 100 voxels with densities 1..100 -> 5th percentile by linear
    # interpolation is 5.95; voxels with density <= 5 drop out, 95 kept
    rows = []
    for d in range(1, 101):
        # d copies of a streamline crossing voxel (d-1, 0, 0) only
        x = d - 1 + 0.5
        for _ in range(d):
            rows.append(np.array([[x, 0.2, 0.5], [x, 0.8, 0.5]], dtype=np.float32))
    s = StreamlineSet(rows)
    meta = VolumeMeta(dims=(100, 1, 1), voxel_size_mm=(1, 1, 1))
    density = tracts.streamline_density(s, meta)
    np.testing.assert_array_equal(density[:, 0, 0], np.arange(1, 101))
    # brute-force percentile oracle on the sorted values
    vals = np.sort(density[density > 0]).astype(float)
    pos = 0.05 * (vals.size - 1)
    lo = int(np.floor(pos))
    oracle = vals[lo] + (pos - lo) * (vals[lo + 1] - vals[lo])
    mask, thr = tracts.density_mask(s, meta)
    assert thr == pytest.approx(oracle) == pytest.approx(5.95)
    assert mask.sum() == 95
    assert not mask[:5].any()


def test_density_all_equal_degenerate_percentile():
    s = StreamlineSet([
        np.array([[0.5, 0.5, 0.5], [3.5, 0.5, 0.5]], dtype=np.float32),
        np.array([[0.5, 0.5, 0.5], [3.5, 0.5, 0.5]], dtype=np.float32),
    ])
    mask, thr = tracts.density_mask(s, _meta())
    density = tracts.streamline_density(s, _meta())
    assert thr == 2.0
    np.testing.assert_array_equal(mask, density > 0)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), k=st.integers(2, 4))
def test_density_invariant_to_order_and_duplication(seed, k):
    rng = np.random.default_rng(seed)
    lines = []
    for _ in range(6):
        n = rng.integers(2, 5)
        pts = rng.uniform(0.2, 9.8, size=(n, 3)).astype(np.float32)
        lines.append(pts)
    meta = _meta()
    base_mask, base_thr = tracts.density_mask(StreamlineSet(lines), meta)
    perm = [lines[i] for i in rng.permutation(len(lines))]
    m2, t2 = tracts.density_mask(StreamlineSet(perm), meta)
    np.testing.assert_array_equal(base_mask, m2)
    assert base_thr == t2
    dup = lines * k
    m3, t3 = tracts.density_mask(StreamlineSet(dup), meta)
    np.testing.assert_array_equal(base_mask, m3)
    assert t3 == base_thr * k


def test_density_outside_grid_skipped(caplog):
    s = StreamlineSet([np.array([[-5, 0.5, 0.5], [3.5, 0.5, 0.5]], dtype=np.float32)])
    with caplog.at_level("WARNING"):
        density = tracts.streamline_density(s, _meta(4))
    assert density.sum() > 0
    assert any("skipped" in r.message for r in caplog.records)


def test_density_empty_errors():
    s = StreamlineSet([np.array([[50, 50, 50], [60, 60, 60]], dtype=np.float32)])
    with pytest.raises(DataError):
        tracts.density_mask(s, _meta(4))


def test_streamline_per_voxel_dedup():
    # a streamline that re-enters the same voxel twice still counts once
    s = StreamlineSet([np.array([[0.2, 0.5, 0.5], [0.8, 0.5, 0.5],
                                 [0.4, 0.5, 0.5]], dtype=np.float32)])
    density = tracts.streamline_density(s, _meta(4))
    assert density[0, 0, 0] == 1


# --- bilateral merge ---------------------------------------------------------


def _full_inputs(shape=(6, 6, 6)):
    out = {}
    for name in tracts.expected_input_names():
        out[name] = np.zeros(shape, dtype=bool)
    return out


def test_merge_bilateral_disjoint_union_counts():
    masks = _full_inputs()
    left = np.zeros((6, 6, 6), dtype=bool)
    right = np.zeros((6, 6, 6), dtype=bool)
    left.reshape(-1)[:10] = True
    right.reshape(-1)[100:112] = True
    masks["IFO_left"], masks["IFO_right"] = left, right
    res = tracts.merge_bilateral(masks)
    i = res.names.index("IFO")
    assert res.channels[i].sum() == 22


def test_merge_bilateral_produces_31_channels():
    res = tracts.merge_bilateral(_full_inputs())
    assert res.channels.shape[0] == 31
    assert len(res.names) == 31
    assert sum(1 for n in res.names if n.startswith("CC_")) == 7


def test_merge_bilateral_missing_both_sides():
    masks = _full_inputs()
    masks["UF_left"] = None
    masks["UF_right"] = None
    res = tracts.merge_bilateral(masks)
    i = res.names.index("UF")
    assert not res.present[i]
    assert res.channels[i].sum() == 0


def test_merge_bilateral_one_side_missing_flagged_partial():
    masks = _full_inputs()
    m = np.zeros((6, 6, 6), dtype=bool)
    m[2, 2, 2] = True
    masks["CST_left"] = m
    masks["CST_right"] = None
    res = tracts.merge_bilateral(masks)
    i = res.names.index("CST")
    assert res.present[i] and res.partial[i]
    assert res.channels[i].sum() == 1


def test_merge_bilateral_unknown_name():
    masks = _full_inputs()
    masks["NOPE_left"] = np.zeros((6, 6, 6), dtype=bool)
    with pytest.raises(DataError):
        tracts.merge_bilateral(masks)


def test_merge_bilateral_commissural_passthrough():
    masks = _full_inputs()
    m = np.zeros((6, 6, 6), dtype=bool)
    m[1] = True
    masks["CC_2"] = m
    res = tracts.merge_bilateral(masks)
    i = res.names.index("CC_2")
    np.testing.assert_array_equal(res.channels[i].astype(bool), m)


# --- tissue merge ------------------------------------------------------------


def test_merge_tissue_single_label():
    vol = np.zeros((5, 5, 5), dtype=np.int16)
    vol[1:3] = 7
    out = tracts.merge_tissue_labels(vol, {7: 1})
    assert (out == 1).sum() == (vol == 7).sum()


def test_merge_tissue_count_conservation():
    vol = np.zeros((10, 10, 1), dtype=np.int16)
    vol.reshape(-1)[:100] = 3
    vol.reshape(-1)[50:100] = 5  # 50 voxels of 3, 50 of 5
    out = tracts.merge_tissue_labels(vol, {3: 1, 5: 1})
    assert (out == 1).sum() == 100


def test_merge_tissue_young_fetus_12_labels():
    rng = np.random.default_rng(11)
    vol = rng.integers(0, 13, size=(8, 8, 8)).astype(np.int16)
    # 12 atlas labels onto 4 tissues; transient zones (11: subplate,
    # 12: intermediate) merge into WM
    mapping = {1: 1, 2: 1, 3: 2, 4: 2, 5: 3, 6: 3, 7: 4, 8: 4, 9: 1, 10: 2,
               11: 1, 12: 1}
    out = tracts.merge_tissue_labels(vol, mapping)
    assert set(np.unique(out)) <= {0, 1, 2, 3, 4}
    assert (out > 0).sum() == (vol > 0).sum()
    for tissue in (1, 2, 3, 4):
        src = [k for k, v in mapping.items() if v == tissue]
        assert (out == tissue).sum() == sum((vol == s).sum() for s in src)


def test_merge_tissue_unmapped_id_errors():
    vol = np.full((3, 3, 3), 9, dtype=np.int16)
    with pytest.raises(DataError) as exc:
        tracts.merge_tissue_labels(vol, {1: 1})
    assert "9" in str(exc.value)
