import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from breen import teacher as T
from breen.verify import pool_bruteforce


# --- letterbox -------------------------------------------------------------


def test_letterbox_square_is_identity():
    img = np.random.default_rng(0).random((336, 336, 3)).astype(np.float32)
    out, m = T.letterbox(img)
    assert m.scale == 1.0 and m.pad_left == 0 and m.pad_top == 0
    np.testing.assert_array_equal(out, img)


def test_letterbox_exact_halving():
    out, m = T.letterbox(np.ones((336, 672, 3)))  # 672 wide, 336 high
    assert m.scale == 0.5
    assert (m.content_w, m.content_h) == (336, 168)
    assert m.pad_top == 84 and m.pad_left == 0
    assert out[:84].max() == 0 and out[84 + 168 :].max() == 0
    assert out[84:252].min() == 1


def test_letterbox_rounding_rule():
    # 500 wide, 300 high: content height round(300 * 336 / 500) = round(201.6) = 202, pad (336 - 202) // 2
    _, m = T.letterbox(np.ones((300, 500, 3)))
    assert m.scale == pytest.approx(336 / 500)
    assert m.content_h == 202
    assert m.pad_top == 67


def test_letterbox_empty_image_rejected():
    with pytest.raises(ValueError):
        T.letterbox(np.zeros((0, 5, 3)))


@settings(max_examples=40, deadline=None)
@given(w=st.integers(1, 700), h=st.integers(1, 700), fx=st.floats(0, 1), fy=st.floats(0, 1))
def test_letterbox_back_projection_within_a_pixel(w, h, fx, fy):
    scale = 336 / max(w, h)
    m = T.LetterboxMap(w, h, scale, (336 - min(336, max(1, round(w * scale)))) // 2,
                       (336 - min(336, max(1, round(h * scale)))) // 2)
    x, y = fx * w, fy * h
    bx, by = m.to_original(*m.to_canvas(x, y))
    assert abs(bx - x) <= 1 and abs(by - y) <= 1


# --- pooling ---------------------------------------------------------------


@pytest.mark.parametrize("stride,n", [(3, 64), (4, 36), (2, 144)])
def test_pool_token_counts(stride, n):
    assert T.pool_grid(np.zeros((24, 24, 5)), stride).shape == (n, 5)


def test_pool_constant_grid():
    out = T.pool_grid(np.full((24, 24, 3), 0.7), 4)
    np.testing.assert_allclose(out, 0.7)


def test_pool_row_index_grid():
    grid = np.broadcast_to(np.arange(24.0)[:, None, None], (24, 24, 2)).copy()
    out = T.pool_grid(grid, 3).reshape(8, 8, 2)
    for r in range(8):
        np.testing.assert_allclose(out[r], 3 * r + 1)
    np.testing.assert_allclose(T.pool_grid(grid, 3), pool_bruteforce(grid, 3))


def test_pool_token_k_is_window_row_major():
    grid = np.zeros((24, 24, 1))
    grid[6:9, 9:12] = 1.0  # window row 2, col 3 for stride 3
    out = T.pool_grid(grid, 3)[:, 0]
    assert np.flatnonzero(out) == [2 * 8 + 3]


def test_pool_indivisible_stride():
    with pytest.raises(T.GeometryError):
        T.pool_grid(np.zeros((24, 24, 2)), 5)
    with pytest.raises(T.GeometryError):
        T.pool_grid(np.zeros((25, 25, 2)), 3)


@settings(max_examples=30, deadline=None)
@given(g=st.sampled_from([6, 12, 24]), seed=st.integers(0, 10_000), data=st.data())
def test_pool_matches_bruteforce_and_preserves_mean(g, seed, data):
    s = data.draw(st.sampled_from([d for d in range(1, g + 1) if g % d == 0]))
    grid = np.random.default_rng(seed).standard_normal((g, g, 4))
    out = T.pool_grid(grid, s)
    np.testing.assert_allclose(out, pool_bruteforce(grid, s), atol=1e-6)
    np.testing.assert_allclose(out.mean(0), grid.reshape(-1, 4).mean(0), atol=1e-5)


# --- alignment targets -----------------------------------------------------


def test_alignment_target_orders():
    grid = np.zeros((24, 24, 2))
    assert T.build_alignment_target(grid, [3, 4]).lengths == [64, 36]
    assert len(T.build_alignment_target(grid, [4, 3])) == 100
    assert T.build_alignment_target(grid, [2]).lengths == [144]
    assert T.build_alignment_target(grid, [4, 2], T.COARSE_FIRST).lengths == [36, 144]


def test_alignment_target_needs_strides():
    with pytest.raises(ValueError):
        T.build_alignment_target(np.zeros((24, 24, 2)), [])


# --- synthetic teacher -----------------------------------------------------


def test_synth_teacher_deterministic_and_unit_norm():
    img = np.random.default_rng(0).random((336, 336, 3))
    a = T.synth_teacher(img, seed=3)
    b = T.synth_teacher(img.copy(), seed=3)
    np.testing.assert_array_equal(a.features, b.features)
    assert a.features.shape == (24, 24, 32)
    np.testing.assert_allclose(np.linalg.norm(a.features, axis=-1), 1, atol=1e-5)


def test_synth_teacher_zero_image_is_position_code():
    feats = T.synth_teacher(np.zeros((336, 336, 3)), dim=16).features
    code = T.position_code(24, 16)
    np.testing.assert_allclose(feats, code / np.linalg.norm(code, axis=-1, keepdims=True), atol=1e-6)


def test_synth_content_swapping_blocks_swaps_cells():
    rng = np.random.default_rng(4)
    img = rng.random((336, 336, 3))
    swapped = img.copy()
    a, b = (slice(0, 14), slice(14, 28)), (slice(140, 154), slice(70, 84))
    swapped[a], swapped[b] = img[b], img[a]
    c0 = T.synth_content(img, 8, 0)
    c1 = T.synth_content(swapped, 8, 0)
    np.testing.assert_array_equal(c1[0, 1], c0[10, 5])
    np.testing.assert_array_equal(c1[10, 5], c0[0, 1])
    mask = np.ones((24, 24), dtype=bool)
    mask[0, 1] = mask[10, 5] = False
    np.testing.assert_array_equal(c1[mask], c0[mask])


# --- file format -----------------------------------------------------------


def test_grid_file_round_trip(tmp_path):
    grid = T.TeacherFeatureGrid(np.random.default_rng(5).standard_normal((24, 24, 32)).astype(np.float32))
    T.save_feature_grid(grid, tmp_path / "g.brtf")
    back = T.load_feature_grid(tmp_path / "g.brtf")
    np.testing.assert_array_equal(back.features, grid.features)


def test_grid_file_truncated(tmp_path):
    buf = T.encode_grid(np.zeros((4, 4, 2), dtype=np.float32))
    with pytest.raises(T.FormatError, match="payload"):
        T.decode_grid(buf[:-3])


@pytest.mark.parametrize(
    "offset,value,field",
    [(0, b"XXXX", "magic"), (4, (9).to_bytes(4, "little"), "version")],
)
def test_grid_file_bad_header_names_field(offset, value, field):
    buf = bytearray(T.encode_grid(np.zeros((4, 4, 2), dtype=np.float32)))
    buf[offset : offset + 4] = value
    with pytest.raises(T.FormatError, match=field):
        T.decode_grid(bytes(buf))


def test_grid_of_25_fails_at_pool_time(tmp_path):
    T.save_feature_grid(T.TeacherFeatureGrid(np.zeros((25, 25, 2), dtype=np.float32)), tmp_path / "g.brtf")
    grid = T.load_feature_grid(tmp_path / "g.brtf")
    with pytest.raises(T.GeometryError):
        T.pool_grid(grid, 3)
