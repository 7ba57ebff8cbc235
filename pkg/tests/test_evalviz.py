import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from flowembed import evalviz as ev
from flowembed import synthgen as sg
from flowembed.flowloss import KernelConfig

# dice -------------------------------------------------------------------------


def test_dice_identical():
    m = np.zeros((5, 5), bool)
    m[1:3] = True
    assert ev.dice_score(m.astype(float), m) == 1.0


def test_dice_disjoint():
    a = np.zeros((4, 4))
    a[0] = 1
    b = np.zeros((4, 4), bool)
    b[3] = True
    assert ev.dice_score(a, b) == 0.0


def test_dice_half_overlap():
    a = np.zeros((20, 20))
    a[:5] = 1  # 100 pixels
    b = np.zeros((20, 20), bool)
    b[:5, :10] = True
    b[5:10, :10] = True  # 100 pixels, 50 shared
    assert ev.dice_score(a, b) == pytest.approx(0.5, abs=1e-15)


def test_dice_both_empty():
    assert ev.dice_score(np.zeros((3, 3)), np.zeros((3, 3), bool)) == 1.0


def test_dice_threshold_inclusive():
    assert ev.dice_score(np.full((1, 2), 0.5), np.ones((1, 2), bool)) == 1.0


def test_dice_shape_mismatch():
    with pytest.raises(ValueError):
        ev.dice_score(np.zeros((2, 2)), np.zeros((2, 3)))


@given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
def test_dice_symmetric(a, b):
    assert ev.dice_score(a.astype(float), b) == ev.dice_score(b.astype(float), a)


# projection ---------------------------------------------------------------------

def test_projection_constant_field():
    emb = np.ones((4, 5, 6)) * np.arange(4)[:, None, None]
    img = ev.random_projection(emb, ev.make_basis(4, 0))
    assert img.shape == (5, 6, 3) and np.all(img == 128)


def test_projection_two_clusters():
    emb = np.zeros((4, 6, 6))
    emb[0, :, :3] = 1.0
    emb[1, :, 3:] = 1.0
    img = ev.random_projection(emb, ev.make_basis(4, 1))
    colors = {tuple(c) for c in img.reshape(-1, 3)}
    assert len(colors) == 2


def test_projection_deterministic():
    emb = np.random.default_rng(0).normal(size=(8, 7, 7))
    a = ev.random_projection(emb, ev.make_basis(8, 5))
    b = ev.random_projection(emb, ev.make_basis(8, 5))
    assert a.tobytes() == b.tobytes()


def test_projection_dim_mismatch():
    with pytest.raises(ValueError):
        ev.random_projection(np.zeros((3, 2, 2)), ev.make_basis(4))


# similarity maps ------------------------------------------------------------------

def _two_regions(d=4, n=12):
    emb = np.zeros((d, n, n))
    emb[0, :, : n // 2] = 1.0
    emb[1, :, n // 2:] = 1.0
    return emb + 0.05 * np.random.default_rng(0).normal(size=emb.shape)


def test_anchor_map_self_is_one():
    emb = np.random.default_rng(1).normal(size=(4, 7, 7))
    flow = np.random.default_rng(2).normal(size=(7, 7, 2))
    assert ev.anchor_similarity_map(emb, (3, 4)).values[3, 4] == pytest.approx(1.0, abs=1e-12)
    assert ev.anchor_similarity_map(flow, (3, 4), kind="flow").values[3, 4] == 1.0


def test_anchor_map_constant_field():
    m = ev.anchor_similarity_map(np.ones((3, 5, 5)), (0, 0))
    np.testing.assert_allclose(m.values, 1.0, atol=1e-12)


def test_anchor_map_regions():
    emb = _two_regions()
    v = ev.anchor_similarity_map(emb, (6, 2)).values
    assert v[:, :6].mean() > v[:, 6:].mean() + 0.5


def test_anchor_out_of_bounds():
    with pytest.raises(ValueError):
        ev.anchor_similarity_map(np.ones((2, 4, 4)), (4, 0))


def test_kind_checked():
    with pytest.raises(ValueError):
        ev.anchor_similarity_map(np.ones((2, 4, 4)), (0, 0), kind="depth")
    with pytest.raises(ValueError):
        ev.anchor_similarity_map(np.ones((4, 4, 3)), (0, 0), kind="flow")


def test_shifted_zero_offset():
    emb = np.random.default_rng(3).normal(size=(4, 6, 6))
    m = ev.shifted_similarity_map(emb, (0, 0))
    assert m.valid.all()
    np.testing.assert_allclose(m.values, 1.0, atol=1e-12)


def test_shifted_zero_flow():
    m = ev.shifted_similarity_map(np.zeros((10, 10, 2)), (5, 5), kind="flow")
    assert np.all(m.values[m.valid] == 1.0)
    assert m.valid.sum() == 25 and np.isnan(m.values[~m.valid]).all()
    assert m.valid[:5, :5].all()


def test_shifted_boundary_band():
    emb = np.zeros((2, 12, 12))
    emb[0, :, :6] = 1.0
    emb[1, :, 6:] = 1.0
    m = ev.shifted_similarity_map(emb, (2, 0))
    low = m.valid & (m.values < 0.5)
    # low exactly where (i, j) and (i, j + 2) straddle the column-6 boundary
    expected = np.zeros((12, 12), bool)
    expected[:, 4:6] = True
    assert np.array_equal(low, expected)


def test_shifted_offset_bounds():
    with pytest.raises(ValueError):
        ev.shifted_similarity_map(np.ones((2, 4, 6)), (6, 0))
    with pytest.raises(ValueError):
        ev.shifted_similarity_map(np.ones((2, 4, 6)), (0, -4))


def test_similarity_image_rendering():
    m = ev.shifted_similarity_map(np.zeros((6, 6, 2)), (2, 2), kind="flow")
    img = m.to_image()
    assert img.dtype == np.uint8
    assert np.all(img[m.valid] == 255) and np.all(img[~m.valid] == ev.INVALID_GRAY)


@settings(max_examples=30)
@given(arrays(np.float64, (3, 5, 5), elements=st.floats(-10, 10)), st.integers(-4, 4), st.integers(-4, 4))
def test_similarity_ranges(emb, dx, dy):
    m = ev.shifted_similarity_map(emb + 1e-3, (dx, dy))
    v = m.values[m.valid]
    assert np.all(v >= -1 - 1e-12) and np.all(v <= 1 + 1e-12)
    f = ev.shifted_similarity_map(np.moveaxis(emb[:2], 0, -1), (dx, dy), kind="flow")
    v = f.values[f.valid]
    assert np.all(v > 0) and np.all(v <= 1)


# warp and occlusion ------------------------------------------------------------------

def test_warp_zero_flows():
    f2 = np.random.default_rng(0).random((5, 6))
    warped, occ = ev.warp_and_occlude(f2, np.zeros((5, 6, 2)), np.zeros((5, 6, 2)))
    assert np.array_equal(warped, f2) and not occ.any()


def test_inverse_constant_flows():
    fwd = np.zeros((8, 8, 2))
    fwd[..., 0], fwd[..., 1] = 1.5, -0.5
    _, occ = ev.warp_and_occlude(np.zeros((8, 8)), fwd, -fwd)
    assert not occ.any()


def test_warp_analytic_pair():
    spec = sg.shapes_corpus(1, (128, 128), rng_seed=3)[0]
    pair = sg.render_pair(spec)
    warped, occ = ev.warp_and_occlude(pair.frame2, pair.forward_flow, pair.backward_flow)
    assert np.all(warped[occ] == 0)
    ok = ~pair.occlusion_mask
    assert np.abs(warped - pair.frame1)[ok & ~occ].mean() < 2 / 255


def test_warp_extent_mismatch():
    with pytest.raises(ValueError):
        ev.warp_and_occlude(np.zeros((4, 4)), np.zeros((4, 4, 2)), np.zeros((4, 5, 2)))


# flow colors ------------------------------------------------------------------------

def test_wheel_size():
    w = ev.color_wheel()
    assert w.shape == (55, 3) and w.min() >= 0 and w.max() <= 1


def test_zero_flow_white():
    assert np.all(ev.flow_color_encode(np.zeros((3, 4, 2))) == 255)


def test_constant_flow_single_hue():
    flow = np.broadcast_to([2.0, 1.0], (4, 4, 2))
    img = ev.flow_color_encode(flow)
    assert len({tuple(c) for c in img.reshape(-1, 3)}) == 1
    assert not np.all(img == 255)


def test_opposite_directions_opposite_hues():
    flow = np.zeros((1, 2, 2))
    flow[0, 0] = [3, 0]
    flow[0, 1] = [-3, 0]
    img = ev.flow_color_encode(flow, max_mag=3).astype(float) / 255
    hue = [np.angle(complex(*_hue_vector(c))) for c in img[0]]
    diff = abs((hue[0] - hue[1] + np.pi) % (2 * np.pi) - np.pi)
    assert diff > 2.5


def _hue_vector(rgb):
    # chroma-plane coordinates of an RGB color
    r, g, b = rgb
    return r - 0.5 * (g + b), np.sqrt(3) / 2 * (g - b)


# structure statistic ----------------------------------------------------------------

def test_fg_bg_gap_two_clusters():
    emb = np.zeros((2, 6, 6))
    mask = np.zeros((6, 6), bool)
    mask[:, :2] = True
    emb[0][mask] = 1.0
    emb[1][~mask] = 1.0
    assert ev.fg_bg_similarity_gap(emb, mask) == pytest.approx(1.0)


def test_fg_bg_gap_matches_brute_force():
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(3, 5, 5))
    mask = rng.random((5, 5)) > 0.6
    u = emb / np.linalg.norm(emb, axis=0)
    f, b = u[:, mask].T, u[:, ~mask].T
    ff = [f[i] @ f[j] for i in range(len(f)) for j in range(len(f)) if i != j]
    fb = [x @ y for x in f for y in b]
    assert ev.fg_bg_similarity_gap(emb, mask) == pytest.approx(np.mean(ff) - np.mean(fb), abs=1e-12)


def test_fg_bg_gap_needs_both():
    with pytest.raises(ValueError):
        ev.fg_bg_similarity_gap(np.ones((2, 3, 3)), np.ones((3, 3), bool))


def test_kernel_config_used_for_flow_maps():
    flow = np.zeros((3, 3, 2))
    flow[0, 0] = [1, 0]
    wide = ev.anchor_similarity_map(flow, (1, 1), KernelConfig(sigma=5.0), kind="flow").values[0, 0]
    narrow = ev.anchor_similarity_map(flow, (1, 1), KernelConfig(sigma=0.5), kind="flow").values[0, 0]
    assert wide > narrow
