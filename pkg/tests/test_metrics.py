import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from i2gfp.matting_core import Label, save_alpha, save_trimap
from i2gfp.metrics import (
    REPORT_SCHEMA,
    conn_metric,
    connectivity_levels,
    evaluate,
    gaussian_derivative_taps,
    grad_metric,
    largest_component,
    mse,
    pair_directories,
    sad,
)

from oracles import components_floodfill, conn_oracle, grad_oracle, mse_loop, sad_loop


def random_instance(seed, binary=False):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(16, 33))
    p, g = rng.random((n, n)), rng.random((n, n))
    if binary:
        p, g = (p > 0.5).astype(float), (g > 0.5).astype(float)
    return p, g, rng.random((n, n)) > 0.3


# -- worked examples -----------------------------------------------------------

def test_sad_scaling_example():
    g = np.zeros((40, 50))
    assert sad(np.ones_like(g), g, np.ones(g.shape, bool)) == pytest.approx(2.0)
    mask = np.zeros(g.shape, bool)
    mask.flat[:1000] = True
    assert sad(np.ones_like(g), g, mask) == pytest.approx(1.0)


def test_mse_single_pixel():
    mask = np.zeros((4, 4), bool)
    mask[1, 2] = True
    p = np.zeros((4, 4))
    p[1, 2] = 0.1
    assert mse(p, np.zeros((4, 4)), mask) == pytest.approx(0.01)


@pytest.mark.parametrize("metric", [sad, mse, grad_metric, conn_metric])
def test_identity_and_empty_mask(metric):
    p, g, m = random_instance(3)
    assert metric(p, p, m) == 0.0
    assert metric(p, g, np.zeros_like(m)) == 0.0


def test_grad_ignores_constant_offset():
    p, _, m = random_instance(4)
    q = p * 0.5
    assert grad_metric(q + 0.25, q, m) == pytest.approx(0.0, abs=1e-20)


def test_conn_fully_opaque_is_zero():
    ones = np.ones((20, 20))
    assert conn_metric(ones, ones) == 0.0
    assert (connectivity_levels(ones, ones) == 1.0).all()


def test_shape_mismatch_raises():
    with pytest.raises(ValueError, match="shape mismatch"):
        sad(np.zeros((4, 4)), np.zeros((4, 5)))


def test_derivative_taps_normalised_and_truncated():
    g, dg = gaussian_derivative_taps(1.4)
    assert len(g) == len(dg) == 2 * 5 + 1
    assert np.linalg.norm(g) == pytest.approx(1.0)
    assert np.linalg.norm(dg) == pytest.approx(1.0)
    assert dg.sum() == pytest.approx(0.0, abs=1e-15)


def test_largest_component_tie_goes_to_first_in_raster_order():
    b = np.zeros((5, 5), bool)
    b[0, 3:5] = True
    b[4, 0:2] = True
    comp = largest_component(b)
    assert comp[0, 3] and not comp[4, 0]
    assert not largest_component(np.zeros((3, 3), bool)).any()


# -- oracles -------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(100))
def test_grad_matches_dense_oracle(seed):
    p, g, m = random_instance(seed)
    expected = grad_oracle(p, g, m)
    assert grad_metric(p, g, m) == pytest.approx(expected, rel=1e-6)


@pytest.mark.parametrize("seed", range(100))
def test_conn_matches_floodfill_exactly(seed):
    p, g, m = random_instance(seed, binary=seed % 2 == 0)
    assert conn_metric(p, g, m) == conn_oracle(p, g, m)


@pytest.mark.parametrize("seed", range(20))
def test_sad_mse_match_loops(seed):
    p, g, m = random_instance(seed)
    assert sad(p, g, m) == pytest.approx(sad_loop(p, g, m), abs=1e-7)
    assert mse(p, g, m) == pytest.approx(mse_loop(p, g, m), abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_largest_component_matches_floodfill(seed):
    b = np.random.default_rng(seed).random((12, 12)) > 0.5
    comps = components_floodfill(b)
    best = max(comps, key=len) if comps else []  # max keeps the first on ties
    expected = np.zeros_like(b)
    for y, x in best:
        expected[y, x] = True
    np.testing.assert_array_equal(largest_component(b), expected)


# -- properties ------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_symmetry_and_non_negativity(seed):
    p, g, m = random_instance(seed)
    for metric in (sad, mse, grad_metric):
        assert metric(p, g, m) == metric(g, p, m) >= 0.0
    assert conn_metric(p, g, m) >= 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_sad_mse_ignore_values_outside_mask(seed):
    p, g, m = random_instance(seed)
    noise = np.random.default_rng(seed + 1).random(p.shape)
    p2, g2 = np.where(m, p, noise), np.where(m, g, 1 - noise)
    assert sad(p2, g2, m) == sad(p, g, m)
    assert mse(p2, g2, m) == mse(p, g, m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_sad_zero_iff_equal_on_mask(seed):
    p, g, m = random_instance(seed)
    q = np.where(m, p, g)
    assert sad(q, p, m) == 0.0
    if m.any():
        q[np.argwhere(m)[0][0], np.argwhere(m)[0][1]] += 0.5
        assert sad(q, p, m) > 0.0


# -- evaluate / reports -----------------------------------------------------------------

def trimap_with_band(shape, band):
    tri = np.full(shape, Label.FOREGROUND, np.uint8)
    tri[band] = Label.UNKNOWN
    return tri


def test_evaluate_aggregate_and_ordering():
    gt = np.zeros((50, 40))
    tri = np.full(gt.shape, Label.UNKNOWN, np.uint8)
    p1 = np.zeros_like(gt)
    p1.flat[:1000] = 1.0
    p3 = np.zeros_like(gt)
    p3.flat[:1500] = 1.0
    report = evaluate([("b", p3, gt, tri), ("a", p1, gt, tri)])
    assert [r.name for r in report.per_image] == ["a", "b"]
    assert report.per_image[0].sad == pytest.approx(1.0)
    assert report.aggregate["sad"] == pytest.approx(1.25)
    assert report.aggregate["count"] == 2
    assert report.ok


def test_evaluate_identical_is_zero():
    rng = np.random.default_rng(0)
    g = rng.random((24, 24))
    tri = trimap_with_band(g.shape, (slice(4, 20), slice(4, 20)))
    report = evaluate([("x", g, g, tri), ("y", g, g, tri)])
    assert all(report.aggregate[m] == 0.0 for m in ("sad", "mse", "grad", "conn"))


def test_evaluate_region_switch():
    g = np.zeros((10, 10))
    p = np.full((10, 10), 0.5)
    tri = trimap_with_band(g.shape, (slice(0, 2), slice(None)))
    unknown = evaluate([("x", p, g, tri)]).per_image[0].sad
    full = evaluate([("x", p, g, tri)], region="full").per_image[0].sad
    assert unknown == pytest.approx(0.01)
    assert full == pytest.approx(0.05)
    with pytest.raises(ValueError):
        evaluate([], region="everything")


def test_evaluate_records_failures_and_keeps_going(tmp_path):
    g = np.zeros((8, 8))
    tri = np.full(g.shape, Label.UNKNOWN, np.uint8)
    report = evaluate([("good", g, g, tri), ("shape", np.zeros((8, 9)), g, tri),
                       ("missing", tmp_path / "nope.png", g, tri)])
    assert [r.name for r in report.per_image] == ["good"]
    assert {f["name"] for f in report.failures} == {"shape", "missing"}
    assert not report.ok
    assert report.aggregate["count"] == 1


def test_report_json_validates_against_schema():
    rng = np.random.default_rng(1)
    g = rng.random((16, 16))
    tri = np.full(g.shape, Label.UNKNOWN, np.uint8)
    report = evaluate([("a", rng.random((16, 16)), g, tri), ("bad", np.zeros((3, 3)), g, tri)])
    doc = json.loads(report.to_json())
    jsonschema.validate(doc, REPORT_SCHEMA)
    assert doc["aggregate"]["count"] == 1
    table = report.summary_table()
    assert "mean (1 images)" in table and "FAILED bad" in table


def test_pair_directories(tmp_path):
    dirs = [tmp_path / d for d in ("pred", "gt", "tri")]
    for d in dirs:
        d.mkdir()
    a = np.linspace(0, 1, 64).reshape(8, 8)
    for name in ("b", "a"):
        save_alpha(dirs[0] / f"{name}.png", a)
        save_alpha(dirs[1] / f"{name}.png", a)
        save_trimap(dirs[2] / f"{name}.png", np.full((8, 8), Label.UNKNOWN, np.uint8))
    pairs = pair_directories(*dirs)
    assert [p[0] for p in pairs] == ["a", "b"]
    report = evaluate(pairs)
    assert report.ok and report.aggregate["sad"] == 0.0
    (dirs[1] / "a.png").unlink()
    with pytest.raises(ValueError, match="count mismatch"):
        pair_directories(*dirs)
    with pytest.raises(FileNotFoundError):
        pair_directories(tmp_path / "absent", dirs[1], dirs[2])
