import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.distance import cdist

from mdbanet.metrics import (
    SCAR_BIN_EDGES,
    CaseRecord,
    ScarSizeHistogram,
    aggregate_eval,
    dice_binary,
    evaluate_case,
    hausdorff_mm,
    scar_histogram,
    summary_csv,
)
from mdbanet.phantom import PhantomSpec, generate_phantom, oracle_connected_components
from mdbanet.volume_io import SCAR, LabelMap


def brute_hausdorff(a, b, spacing):
    pa = np.argwhere(a) * np.asarray(spacing)
    pb = np.argwhere(b) * np.asarray(spacing)
    d = cdist(pa, pb)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


# ---------------------------------------------------------------- dice

def test_dice_identical_and_empty():
    a = np.zeros((4, 4, 4), bool)
    assert dice_binary(a, a) == 1.0
    a[1, 1, 1] = True
    assert dice_binary(a, a) == 1.0


def test_dice_subset():
    a = np.zeros((2, 2, 2), bool)
    a[:] = True
    b = np.zeros_like(a)
    b[0] = True
    assert dice_binary(a, b) == pytest.approx(2 * 4 / 12)
    assert dice_binary(b, a) == dice_binary(a, b)


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        dice_binary(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


# ---------------------------------------------------------------- hausdorff

def _single(pos, shape=(8, 8, 8)):
    a = np.zeros(shape, bool)
    a[pos] = True
    return a


def test_hd_identical_is_zero(phantom):
    _, lm = phantom
    m = lm.labels == SCAR
    assert hausdorff_mm(m, m, lm.spacing) == 0.0


def test_hd_single_voxels():
    assert hausdorff_mm(_single((0, 0, 0)), _single((3, 4, 0)), (1, 1, 1)) == pytest.approx(5.0)
    assert hausdorff_mm(_single((0, 0, 0)), _single((3, 0, 0)), (2, 1, 1)) == pytest.approx(6.0)


def test_hd_empty_is_undefined():
    with pytest.warns(RuntimeWarning):
        assert hausdorff_mm(np.zeros((3, 3, 3), bool), _single((1, 1, 1), (3, 3, 3))) is None


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.tuples(*[st.sampled_from([0.5, 1.0, 1.5, 2.5])] * 3))
def test_hd_matches_brute_force_and_is_symmetric(seed, spacing):
    rng = np.random.default_rng(seed)
    a = rng.random((7, 6, 5)) < 0.1
    b = rng.random((7, 6, 5)) < 0.1
    a[0, 0, 0] = b[6, 5, 4] = True
    hd = hausdorff_mm(a, b, spacing)
    assert hd == pytest.approx(brute_hausdorff(a, b, spacing), abs=1e-9)
    assert hd == hausdorff_mm(b, a, spacing)


def test_hd_percentile_not_larger():
    rng = np.random.default_rng(0)
    a, b = rng.random((8, 8, 8)) < 0.2, rng.random((8, 8, 8)) < 0.2
    assert hausdorff_mm(a, b, percentile=95) <= hausdorff_mm(a, b)


def test_spacing_scaling_law():
    _, lm = generate_phantom(PhantomSpec(seed=4))
    pred = np.roll(lm.labels == SCAR, 2, axis=0)
    ref = lm.labels == SCAR
    k = 1.7
    base = hausdorff_mm(pred, ref, (1, 1, 1))
    assert hausdorff_mm(pred, ref, (k, k, k)) == pytest.approx(k * base, rel=1e-12)
    h1 = scar_histogram(LabelMap(lm.labels, (1, 1, 1)))
    hk = scar_histogram(LabelMap(lm.labels, (k, k, k)))
    assert hk.total_volume == pytest.approx(k**3 * h1.total_volume, rel=1e-12)
    assert hk.total_count == h1.total_count


# ---------------------------------------------------------------- histogram

def test_histogram_known_components():
    labels = np.zeros((40, 40, 40), np.uint8)
    labels[0:10, 0, 0] = SCAR  # 10 voxels
    labels[0:20, 5:8, 5] = SCAR  # 60
    labels[20:40, 20:35, 10:12] = SCAR  # 600
    h = scar_histogram(LabelMap(labels, (1, 1, 1)))
    expected = np.zeros(11, int)
    expected[[0, 1, 10]] = 1
    np.testing.assert_array_equal(h.counts, expected)
    np.testing.assert_array_equal(h.volumes[[0, 1, 10]], [10, 60, 600])
    assert sorted(oracle_connected_components(labels, SCAR, 26)) == [10, 60, 600]


def test_histogram_empty():
    h = scar_histogram(LabelMap(np.zeros((4, 4, 4), np.uint8), (1, 1, 1)))
    assert h.total_count == 0 and h.total_volume == 0
    assert np.all(h.count_percent == 0)


def test_histogram_bin_edges_half_open():
    h = ScarSizeHistogram.from_volumes([0.98, 49.999, 50.0, 499.9, 500.0, 7545.89])
    assert h.counts.tolist() == [2, 1, 0, 0, 0, 0, 0, 0, 0, 1, 2]
    assert len(SCAR_BIN_EDGES) == 12


def test_histogram_invariants_and_sum(rng):
    a = ScarSizeHistogram.from_volumes(rng.uniform(0, 900, 50))
    b = ScarSizeHistogram.from_volumes(rng.uniform(0, 900, 30))
    c = a + b
    assert c.total_count == 80
    assert c.count_percent.sum() == pytest.approx(100, abs=0.1)
    assert c.volume_percent.sum() == pytest.approx(100, abs=0.1)
    assert c.table_rows()[0][-2] == ">500"
    json.dumps(c.to_dict())


@pytest.mark.parametrize("conn", [6, 18, 26])
def test_histogram_matches_oracle_on_random_labels(rng, conn):
    labels = ((rng.random((12, 12, 12)) < 0.25) * SCAR).astype(np.uint8)
    h = scar_histogram(LabelMap(labels, (0.9, 0.9, 2.0)), conn)
    sizes = oracle_connected_components(labels, SCAR, conn)
    ref = ScarSizeHistogram.from_volumes(np.array(sizes) * 0.9 * 0.9 * 2.0)
    np.testing.assert_array_equal(h.counts, ref.counts)
    np.testing.assert_allclose(h.volumes, ref.volumes, rtol=1e-12)


# ---------------------------------------------------------------- aggregation

def test_aggregate_single_case():
    r = aggregate_eval([CaseRecord("a", 0.7, 3.0, 0.9, 2.0)])
    assert r.aggregates["ds_scar"].std == 0
    assert r.aggregates["ds_scar"].mean == 0.7


def test_aggregate_mean_std():
    r = aggregate_eval([CaseRecord("a", 0.4, 1.0), CaseRecord("b", 0.6, 1.0)])
    assert r.aggregates["ds_scar"].mean == pytest.approx(0.5)
    assert r.aggregates["ds_scar"].std == pytest.approx(0.1)
    assert r.aggregates["ds_la"].mean is None


def test_aggregate_excludes_undefined_hd():
    recs = [CaseRecord("a", 0.5, 2.0), CaseRecord("b", 0.5, None), CaseRecord("c", 0.5, 4.0)]
    with pytest.warns(RuntimeWarning, match="1 undefined"):
        r = aggregate_eval(recs)
    s = r.aggregates["hd_scar"]
    assert (s.n, s.excluded, s.mean) == (2, 1, 3.0)


def test_aggregate_empty():
    with pytest.raises(ValueError):
        aggregate_eval([])


def test_summary_format():
    r = aggregate_eval([CaseRecord("a", 0.512, 31.0, 0.9, 19.0), CaseRecord("b", 0.612, 33.0, 0.95, 20.0)], "MDBAnet")
    row = r.summary_row()
    assert row == {"method": "MDBAnet", "la_ds": "0.925(0.025)", "la_hd_mm": "19.50(0.50)",
                   "scar_ds": "0.562(0.050)", "scar_hd_mm": "32.00(1.00)"}
    assert summary_csv([r]).splitlines()[0] == "method,la_ds,la_hd_mm,scar_ds,scar_hd_mm"


def test_evaluate_case_perfect(phantom):
    _, lm = phantom
    rec = evaluate_case("x", lm, lm)
    assert (rec.ds_scar, rec.hd_scar, rec.ds_la, rec.hd_la) == (1.0, 0.0, 1.0, 0.0)


def test_eval_result_write(tmp_path):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        r = aggregate_eval([CaseRecord("a", 0.5, None)], "MDnet")
    r.write(tmp_path)
    lines = (tmp_path / "evaluation.csv").read_text().splitlines()
    assert lines[0] == "case_id,ds_la,hd_la,ds_scar,hd_scar"
    assert lines[1] == "a,,,0.500000,"
    assert json.loads((tmp_path / "evaluation.json").read_text())["summary"]["method"] == "MDnet"
