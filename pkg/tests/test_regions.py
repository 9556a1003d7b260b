import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from udd.autodiff import Graph
from udd.autodiff.gradcheck import numeric_grad, rel_error
from udd.regions import RegionSpec, crop_region, generate_candidates, map_to_feature_coords, upsample_to


def test_half_group_32():
    half = [r for r in generate_candidates(32, 32) if r.scale_group == "half"]
    assert [(r.y0, r.x0, r.h, r.w) for r in half] == [(0, 0, 16, 16), (0, 16, 16, 16), (16, 0, 16, 16), (16, 16, 16, 16)]


def test_third_group_32():
    third = {r.corner: r for r in generate_candidates(32, 32) if r.scale_group == "third"}
    assert all((r.h, r.w) == (10, 10) for r in third.values())
    assert (third["BR"].y0, third["BR"].x0) == (22, 22)
    assert (third["TR"].y0, third["TR"].x0) == (0, 22)


def test_two_thirds_group_32():
    big = [r for r in generate_candidates(32, 32) if r.scale_group == "two_thirds"]
    assert {(r.h, r.w) for r in big} == {(21, 21)}
    assert {(r.y0, r.x0) for r in big} == {(0, 0), (0, 11), (11, 0), (11, 11)}


def test_twelve_candidates():
    assert len(generate_candidates(32, 32)) == 12
    assert len(set(generate_candidates(28, 28))) == 12


def test_too_small():
    with pytest.raises(ValueError):
        generate_candidates(2, 10)


@settings(max_examples=300, deadline=None)
@given(st.integers(9, 64), st.integers(9, 64))
def test_candidates_in_bounds_and_cover_corners(H, W):
    regs = generate_candidates(H, W)
    assert len(regs) == 12
    assert regs == generate_candidates(H, W)
    for r in regs:
        assert r.x0 >= 0 and r.y0 >= 0 and r.w >= 1 and r.h >= 1 and r.fits(H, W)
    for y, x in [(0, 0), (0, W - 1), (H - 1, 0), (H - 1, W - 1)]:
        assert any(r.contains(y, x) for r in regs)
    for r in regs:
        # flush: each window touches the two image borders named by its corner
        assert (r.y0 == 0) if r.corner[0] == "T" else (r.y0 + r.h == H)
        assert (r.x0 == 0) if r.corner[1] == "L" else (r.x0 + r.w == W)


def test_crop_full_is_identity():
    g = Graph()
    x = np.random.default_rng(0).standard_normal((2, 1, 5, 6))
    c = crop_region(g.constant(x), RegionSpec(0, 0, 6, 5))
    assert np.array_equal(g.eval(c), x)


def test_crop_out_of_bounds():
    g = Graph()
    with pytest.raises(ValueError):
        crop_region(g.constant(np.zeros((1, 1, 4, 4))), RegionSpec(2, 0, 3, 2))


def test_crop_sum_gradient_is_indicator():
    g = Graph()
    x = g.leaf("x", (1, 1, 6, 6))
    r = RegionSpec(1, 2, 3, 2)
    (gx,) = g.derive(g.apply("sum", [crop_region(x, r)]), [x])
    val = g.eval(gx, {x: np.ones((1, 1, 6, 6))})
    mask = np.zeros((6, 6))
    mask[2:4, 1:4] = 1
    assert np.array_equal(val[0, 0], mask)


def test_overlapping_crops_accumulate():
    rng = np.random.default_rng(1)
    a, b = RegionSpec(0, 0, 4, 4), RegionSpec(2, 2, 4, 4)
    wa, wb = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    g = Graph()
    x = g.leaf("x", (1, 1, 6, 6))
    loss = g.apply("sum", [g.apply("square", [crop_region(x, a) * g.constant(wa)])]) + \
        g.apply("sum", [crop_region(x, b) * g.constant(wb)])
    (gx,) = g.derive(loss, [x])
    x0 = rng.standard_normal((1, 1, 6, 6))
    analytic = g.eval(gx, {x: x0})

    def f(v):
        return float(np.sum((v[0, 0, :4, :4] * wa) ** 2) + np.sum(v[0, 0, 2:, 2:] * wb))

    assert rel_error(analytic, numeric_grad(f, x0)) <= 1e-6
    # overlap cell gets both contributions
    assert analytic[0, 0, 3, 3] == pytest.approx(2 * x0[0, 0, 3, 3] * wa[3, 3] ** 2 + wb[1, 1])


def test_upsample_same_size_identity():
    g = Graph()
    x = np.random.default_rng(2).standard_normal((1, 2, 5, 7))
    assert np.array_equal(g.eval(upsample_to(g.constant(x), 5, 7)), x)


def test_upsample_1x1_constant():
    g = Graph()
    out = g.eval(upsample_to(g.constant(np.full((1, 1, 1, 1), 3.25)), 4, 5))
    assert out.shape == (1, 1, 4, 5) and np.all(out == 3.25)


def test_upsample_2x2_to_4x4_by_hand():
    src = np.array([[1.0, 2.0], [3.0, 5.0]])
    g = Graph()
    out = g.eval(upsample_to(g.constant(src[None, None]), 4, 4))[0, 0]
    # align corners: sample positions 0, 1/3, 2/3, 1 along each axis
    t = [0, 1 / 3, 2 / 3, 1]
    expect = np.array([[(1 - u) * (1 - v) * 1 + (1 - u) * v * 2 + u * (1 - v) * 3 + u * v * 5 for v in t] for u in t])
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-14)


@pytest.mark.parametrize("idx", range(12))
def test_crop_upsample_gradcheck(idx):
    H = W = 9
    r = generate_candidates(H, W)[idx]
    rng = np.random.default_rng(idx)
    wts = rng.standard_normal((1, 1, H, W))
    g = Graph()
    x = g.leaf("x", (1, 1, H, W))
    out = upsample_to(crop_region(x, r), H, W)
    loss = g.apply("sum", [g.apply("square", [out * g.constant(wts)])])
    (gx,) = g.derive(loss, [x])
    x0 = rng.standard_normal((1, 1, H, W))

    def f(v):
        return float(g.eval(loss, {x: v}))

    analytic = g.eval(gx, {x: x0})
    assert rel_error(analytic, numeric_grad(f, x0)) <= 1e-6


def test_map_exact_division():
    assert map_to_feature_coords(RegionSpec(0, 0, 16, 16), 8, 4, 4) == RegionSpec(0, 0, 2, 2)


def test_map_rounds_and_clamps():
    m = map_to_feature_coords(RegionSpec(22, 22, 10, 10), 8, 4, 4)
    assert (m.x0, m.y0, m.w, m.h) == (3, 3, 1, 1)


def test_map_clamps_into_small_map():
    # 28x28 input, ConvNet-3: 3x3 map with reduction 8
    for r in generate_candidates(28, 28):
        m = map_to_feature_coords(r, 8, 3, 3)
        assert m.fits(3, 3) and m.w >= 1 and m.h >= 1


def test_map_reduction_one_identity():
    for r in generate_candidates(20, 17):
        assert map_to_feature_coords(r, 1, 20, 17) == r
