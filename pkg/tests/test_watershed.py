from collections import deque

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage

from skullstrip import phantoms
from skullstrip.errors import EmptyForeground, NoCandidateRegion, ShapeMismatch, TooFewMarkers
from skullstrip.metrics import dice
from skullstrip.watershed import (
    WatershedParams,
    connected_components,
    make_markers,
    region_stats,
    select_brain_mask,
    segment_slice,
    watershed_flood,
)

masks = hnp.arrays(np.uint8, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=14),
                   elements=st.integers(0, 1))


def disk(shape, cy, cx, r):
    yy, xx = np.indices(shape)
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)


# connected components ------------------------------------------------------

def test_cc_empty():
    assert not connected_components(np.zeros((4, 4))).any()


def test_cc_diagonal_touch():
    m = np.array([[1, 0], [0, 1]])
    assert connected_components(m).max() == 1


def test_cc_raster_order():
    m = np.zeros((6, 9), np.uint8)
    m[4, 0] = 1          # first pixel in raster order: third
    m[0, 6:8] = 1        # first
    m[2, 2:4] = 1        # second
    lab = connected_components(m)
    assert lab[0, 6] == 1 and lab[2, 2] == 2 and lab[4, 0] == 3


@given(masks)
def test_cc_matches_scipy_label(m):
    ours = connected_components(m)
    ref, n = ndimage.label(m, structure=np.ones((3, 3)))
    assert ours.max() == n
    np.testing.assert_array_equal(ours, ref)
    assert sum(int((ours == k).sum()) for k in range(1, n + 1)) == int(m.sum())


# markers -------------------------------------------------------------------

def test_markers_square():
    img = np.zeros((12, 12), np.float32)
    img[3:9, 3:9] = 1.0
    mk = make_markers(img, 0.5, 1, 1)
    fg = np.zeros((12, 12), bool)
    fg[4:8, 4:8] = True
    np.testing.assert_array_equal(mk == 2, fg)
    assert set(np.unique(mk)) == {0, 1, 2}
    # cross dilation of the square grows each side by one, corners excluded
    dil = np.zeros((12, 12), bool)
    dil[2:10, 3:9] = True
    dil[3:9, 2:10] = True
    np.testing.assert_array_equal(mk == 1, ~dil)
    np.testing.assert_array_equal(mk == 0, dil & ~fg)


def test_markers_empty_foreground():
    with pytest.raises(EmptyForeground):
        make_markers(np.zeros((8, 8)), 0.5, 1, 1)


def test_markers_two_disks():
    img = np.maximum(disk((30, 30), 8, 8, 5), disk((30, 30), 21, 20, 5)).astype(np.float32)
    mk = make_markers(img, 0.5, 1, 1)
    fg_labels = sorted(set(np.unique(mk)) - {0, 1})
    assert fg_labels == [2, 3]
    _, n = ndimage.label(img > 0.5, structure=np.ones((3, 3)))
    assert len(fg_labels) == n


# flooding ------------------------------------------------------------------

def test_flood_ridge():
    cost = np.zeros((7, 9))
    cost[:, 4] = 1.0
    markers = np.zeros((7, 9), np.int32)
    markers[3, 1] = 1
    markers[3, 7] = 2
    out = watershed_flood(cost, markers)
    assert np.all(out[:, :4] == 1)
    assert np.all(out[:, 5:] == 2)
    assert np.all(out[:, 4] == 0)


def test_flood_full_markers_unchanged():
    markers = np.ones((4, 4), np.int32)
    markers[:, 2:] = 2
    np.testing.assert_array_equal(watershed_flood(np.zeros((4, 4)), markers), markers)


def test_flood_too_few_markers():
    markers = np.zeros((4, 4), np.int32)
    markers[0, 0] = markers[3, 3] = 5
    with pytest.raises(TooFewMarkers):
        watershed_flood(np.zeros((4, 4)), markers)


def test_flood_shape_mismatch():
    markers = np.zeros((4, 4), np.int32)
    markers[0, 0], markers[3, 3] = 1, 2
    with pytest.raises(ShapeMismatch):
        watershed_flood(np.zeros((4, 5)), markers)


@st.composite
def flood_cases(draw):
    h = draw(st.integers(3, 12))
    w = draw(st.integers(3, 12))
    cost = draw(hnp.arrays(np.float64, (h, w), elements=st.floats(0, 1)))
    markers = draw(hnp.arrays(np.int32, (h, w), elements=st.sampled_from([0, 0, 0, 0, 0, 1, 2, 3])))
    assume(len(np.unique(markers[markers > 0])) >= 2)
    return cost, markers


@given(flood_cases())
def test_flood_properties(case):
    cost, markers = case
    out = watershed_flood(cost, markers)
    # seeds keep their labels
    np.testing.assert_array_equal(out[markers > 0], markers[markers > 0])
    # every flooded pixel reaches a seed of its label through its own label
    h, w = out.shape
    for lab in np.unique(out[out > 0]):
        region = out == lab
        seen = region & (markers == lab)
        queue = deque(zip(*np.nonzero(seen)))
        while queue:
            y, x = queue.popleft()
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w and region[ny, nx] and not seen[ny, nx]:
                        seen[ny, nx] = True
                        queue.append((ny, nx))
        assert np.array_equal(seen, region)


# brain selection -----------------------------------------------------------

def test_select_centred_disk():
    shape = (40, 40)
    regions = disk(shape, 19.5, 19.5, 5) * 1 + disk(shape, 6, 6, 5) * 2
    stats = region_stats(regions)
    # hand check of the mean-distance ordering
    ys, xs = np.nonzero(regions == 2)
    assert stats[2][1] == pytest.approx(np.mean(np.hypot(ys - 19.5, xs - 19.5)))
    assert stats[1][1] < stats[2][1]
    np.testing.assert_array_equal(select_brain_mask(regions, 1), regions == 1)


def test_select_single_region():
    regions = np.zeros((10, 10), np.int32)
    regions[0:3, 0:3] = 4
    np.testing.assert_array_equal(select_brain_mask(regions, 1), regions == 4)


def test_select_mirror_tie_lower_label():
    regions = np.zeros((10, 10), np.int32)
    regions[2:6, 1] = 3
    regions[5, 1:3] = 3
    mirror = regions[:, ::-1] == 3
    regions[mirror] = 5
    s = region_stats(regions)
    assert s[3] == s[5]
    np.testing.assert_array_equal(select_brain_mask(regions, 1), regions == 3)


def test_select_tie_prefers_larger_area():
    regions = np.zeros((10, 10), np.int32)
    c = 4.5
    for dy, dx in [(2.5, 2.5), (2.5, -2.5), (-2.5, 2.5), (-2.5, -2.5)]:
        regions[int(c + dy), int(c + dx)] = 2
    for a, b in [(0.5, 3.5), (3.5, 0.5)]:
        for sy in (1, -1):
            for sx in (1, -1):
                regions[int(c + sy * a), int(c + sx * b)] = 7
    s = region_stats(regions)
    assert s[2][0] == 4 and s[7][0] == 8
    assert s[2][1] == pytest.approx(s[7][1], rel=1e-15)
    np.testing.assert_array_equal(select_brain_mask(regions, 1), regions == 7)


def test_select_min_area():
    regions = np.zeros((20, 20), np.int32)
    regions[9:11, 9:11] = 1
    regions[0:6, 0:6] = 2
    np.testing.assert_array_equal(select_brain_mask(regions, 10), regions == 2)
    with pytest.raises(NoCandidateRegion):
        select_brain_mask(regions, 100)


@given(hnp.arrays(np.int32, (9, 11), elements=st.integers(0, 4)), st.permutations([1, 2, 3, 4]))
def test_select_relabel_invariant(regions, perm):
    stats = region_stats(regions)
    assume(stats)
    dists = sorted(d for _, d in stats.values())
    assume(len(dists) == 1 or dists[1] - dists[0] > 1e-9)
    relabeled = np.zeros_like(regions)
    for old, new in zip([1, 2, 3, 4], perm):
        relabeled[regions == old] = new
    np.testing.assert_array_equal(select_brain_mask(regions, 1), select_brain_mask(relabeled, 1))


# full pipeline ---------------------------------------------------------------

def test_segment_phantom_with_distractor():
    img, truth = phantoms.make_phantom(64, 3, distractor=True)
    assert dice(segment_slice(img), truth) >= 0.95


def test_segment_phantom_without_distractor():
    img, truth = phantoms.make_phantom(64, 4, distractor=False)
    assert dice(segment_slice(img), truth) >= 0.95


def test_segment_black_slice():
    with pytest.raises(EmptyForeground):
        segment_slice(np.zeros((32, 32)))


def test_segment_deterministic():
    img, _ = phantoms.make_phantom(64, 5)
    p = WatershedParams(threshold=0.35)
    assert segment_slice(img, p).tobytes() == segment_slice(img.copy(), p).tobytes()
