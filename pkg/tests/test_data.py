from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnan.data import (
    ImageU8,
    PairSet,
    Y_COEFFS,
    batch_iter,
    bicubic_resize,
    bicubic_upscale,
    dihedral,
    dihedral_inverse,
    downscale,
    load_eval_set,
    load_png,
    make_batch,
    modcrop,
    prepare,
    quantize,
    random_crop_pair,
    read_manifest,
    resize_weights,
    rgb_to_y,
    save_png,
)

GOLDEN = Path(__file__).parent / "data" / "golden" / "bicubic_8x8.npz"
OVERFIT = Path(__file__).parent / "data" / "overfit"


def _img(h, w, seed=0, name="img"):
    return ImageU8(np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8), name)


# ---- png ----------------------------------------------------------------


def test_png_roundtrip(tmp_path):
    rgb = _img(7, 9)
    save_png(rgb, tmp_path / "a.png")
    back = load_png(tmp_path / "a.png")
    assert back.pixels.dtype == np.uint8 and np.array_equal(back.pixels, rgb.pixels)
    gray = ImageU8(rgb.pixels[:, :, :1].copy(), "g")
    save_png(gray, tmp_path / "g.png")
    back = load_png(tmp_path / "g.png")
    assert back.channels == 1 and np.array_equal(back.pixels, gray.pixels)


def test_image_invariants():
    with pytest.raises(ValueError):
        ImageU8(np.zeros((4, 4, 2), np.uint8))
    img = _img(5, 6)
    assert (img.height, img.width, img.channels) == (5, 6, 3)
    assert modcrop(img, 4).pixels.shape == (4, 4, 3)


def test_quantize_rounds_half_away():
    out = quantize(np.array([0.5, 1.5, 254.5, -3, 300]) / 255.0)
    assert out.tolist() == [1, 2, 255, 0, 255]


# ---- bicubic ------------------------------------------------------------


@pytest.mark.parametrize("boundary", ["symmetric", "edge"])
def test_bicubic_golden(boundary):
    g = np.load(GOLDEN)
    down = bicubic_resize(g["src"], 4, 4, boundary=boundary)
    np.testing.assert_allclose(down, g[boundary], atol=1e-12)
    assert np.abs(quantize(down).astype(int) - quantize(g[boundary]).astype(int)).max() <= 1
    np.testing.assert_allclose(bicubic_resize(g["src"], 16, 16, boundary=boundary), g[boundary + "_up"], atol=1e-12)


def test_bicubic_boundaries_differ():
    g = np.load(GOLDEN)
    assert not np.allclose(bicubic_resize(g["src"], 4, 4), bicubic_resize(g["src"], 4, 4, boundary="edge"))


def test_bicubic_constant_and_identity():
    const = np.full((9, 7, 3), 0.3)
    for size in [(3, 4), (7, 9), (20, 13)]:
        np.testing.assert_allclose(bicubic_resize(const, *size), 0.3, atol=1e-15)
    x = np.random.default_rng(1).random((6, 5, 3))
    np.testing.assert_allclose(bicubic_resize(x, 5, 6), x, atol=1e-6)


def test_bicubic_linearity():
    rng = np.random.default_rng(2)
    x, y = rng.random((12, 10, 3)), rng.random((12, 10, 3))
    for w, h in [(5, 6), (30, 24), (7, 17)]:
        lhs = bicubic_resize(1.7 * x - 0.4 * y, w, h)
        rhs = 1.7 * bicubic_resize(x, w, h) - 0.4 * bicubic_resize(y, w, h)
        np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_resize_weights_rows_sum_to_one():
    for n_in, n_out in [(8, 4), (8, 16), (10, 3), (3, 10)]:
        idx, w = resize_weights(n_in, n_out)
        assert idx.shape == w.shape and idx.min() >= 0 and idx.max() < n_in
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_bicubic_rejects_bad_size():
    with pytest.raises(ValueError):
        bicubic_resize(np.zeros((4, 4, 3)), 0, 2)


def test_bicubic_upscale_shape():
    assert bicubic_upscale(np.zeros((3, 5, 7)), 3).shape == (3, 15, 21)


# ---- colour -------------------------------------------------------------


def test_rgb_to_y():
    assert rgb_to_y(np.zeros((1, 1, 3)))[0, 0] == pytest.approx(16 / 255, abs=1e-15)
    assert rgb_to_y(np.ones((1, 1, 3)))[0, 0] == pytest.approx(235 / 255, abs=1e-15)
    # BT.601 luma weights scaled to the 219-level studio range
    np.testing.assert_allclose(Y_COEFFS / 219.0, [0.299, 0.587, 0.114], atol=1e-3)


# ---- dihedral -----------------------------------------------------------


def test_dihedral_basics():
    x = np.random.default_rng(3).integers(0, 100, (3, 5, 7))
    assert np.array_equal(dihedral(x, 0), x)
    assert np.array_equal(dihedral(dihedral(x, 2), 2), x)
    for k in range(8):
        assert np.array_equal(dihedral_inverse(dihedral(x, k), k), x)
    outs = [dihedral(x[0], k) for k in range(8)]
    sq = np.random.default_rng(4).integers(0, 100, (5, 5))
    outs_sq = [dihedral(sq, k).tobytes() for k in range(8)]
    assert len(set(outs_sq)) == 8
    assert len({(o.shape, o.tobytes()) for o in outs}) == 8
    with pytest.raises(ValueError):
        dihedral(x, 8)


def test_dihedral_group_table():
    x = np.arange(36).reshape(6, 6)
    images = [dihedral(x, k).tobytes() for k in range(8)]
    table = np.zeros((8, 8), int)
    for a in range(8):
        for b in range(8):
            table[a, b] = images.index(dihedral(dihedral(x, a), b).tobytes())
    # Latin square with identity 0: closure, identity and inverses
    for row in table:
        assert sorted(row) == list(range(8))
    for col in table.T:
        assert sorted(col) == list(range(8))
    assert table[0].tolist() == list(range(8)) and table[:, 0].tolist() == list(range(8))
    rots = [table[1, 0]]
    for _ in range(3):
        rots.append(table[rots[-1], 1])
    assert rots == [1, 2, 3, 0]
    for k in range(4, 8):
        assert table[k, k] == 0
    # associativity
    for a in range(8):
        for b in range(8):
            for c in range(8):
                assert table[table[a, b], c] == table[a, table[b, c]]
    assert not np.array_equal(table, table.T)


# ---- crops and batches --------------------------------------------------


def test_crop_alignment():
    hr = _img(24, 30, 5)
    lr = ImageU8(hr.pixels[::3, ::3].copy())
    rng = np.random.default_rng(0)
    for _ in range(10):
        pair = random_crop_pair(hr, lr, 4, 3, rng)
        assert pair.lr.shape == (3, 4, 4) and pair.hr.shape == (3, 12, 12)
        np.testing.assert_array_equal(pair.hr[:, ::3, ::3], pair.lr)
        assert pair.lr.min() >= 0 and pair.lr.max() <= 1


def test_crop_rejects_small_image():
    hr, lr = _img(8, 8, name="tiny.png"), _img(4, 4)
    with pytest.raises(ValueError, match="tiny.png"):
        random_crop_pair(hr, lr, 5, 2, np.random.default_rng(0))


def test_lr_is_bicubic_of_hr():
    hr = _img(20, 18, 6)
    data = PairSet.from_hr([hr], 2)
    hr_a, lr = data.pairs[0]
    again = quantize(bicubic_resize(hr_a.pixels / 255.0, lr.width, lr.height))
    assert np.array_equal(again, lr.pixels)


def test_batches_reproducible_and_augmented():
    data = PairSet.from_hr([_img(40, 36, 7), _img(32, 44, 8)], 2, seed=11)
    a = list(batch_iter(data, 3, 8, 0, 4))
    b = list(batch_iter(data, 3, 8, 0, 4, prefetch=2))
    assert len(a) == 4
    for (sa, la, ha, ia), (sb, lb, hb, ib) in zip(a, b):
        assert sa == sb and ia == ib
        assert np.array_equal(la, lb) and np.array_equal(ha, hb)
    lr, hr, _ = make_batch(data, 3, 8, 2)
    assert np.array_equal(lr, a[2][1]) and lr.shape == (3, 3, 8, 8) and hr.shape == (3, 3, 16, 16)
    other = PairSet(data.pairs, 2, seed=12)
    assert not np.array_equal(make_batch(other, 3, 8, 2)[0], lr)


def test_batch_augmentation_keeps_alignment():
    lr = _img(16, 16, 9)
    # block-replicated HR, so any dihedral transform keeps the [::2] phase
    hr = ImageU8(np.repeat(np.repeat(lr.pixels, 2, axis=0), 2, axis=1))
    data = PairSet([(hr, lr)], 2, seed=0)
    for step in range(10):
        lr, hrb, _ = make_batch(data, 4, 6, step)
        np.testing.assert_array_equal(hrb[:, :, ::2, ::2], lr)


def test_prefetch_surfaces_errors():
    data = PairSet([(_img(8, 8), _img(4, 4))], 2)
    with pytest.raises(ValueError):
        list(batch_iter(data, 1, 6, 0, 2, prefetch=1))


# ---- prepare / manifests -----------------------------------------------


def test_prepare_idempotent(tmp_path):
    out = tmp_path / "ds"
    man = prepare(OVERFIT, out, [2, 4])
    snap = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    prepare(OVERFIT, out, [2, 4])
    again = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
    assert snap == again
    spec = read_manifest(man[2], 2)
    spec.validate()
    data = PairSet.load(spec)
    assert len(data.pairs) == 2
    for hr, lr in data.pairs:
        assert (hr.height, hr.width) == (2 * lr.height, 2 * lr.width)
        assert np.array_equal(downscale(hr, 2).pixels, lr.pixels)


def test_manifest_missing_file(tmp_path):
    (tmp_path / "m.txt").write_text("HR/a.png\tLR_x2/a.png\n")
    with pytest.raises(FileNotFoundError):
        read_manifest(tmp_path / "m.txt", 2).validate()


def test_eval_set_generates_missing_lr(tmp_path):
    items = load_eval_set(OVERFIT, 3)
    assert [i.name for i in items] == ["astronaut_96", "rocket_96"]
    assert items[0].lr.width == 32 and items[0].hr.width == 96


@settings(max_examples=20, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), oh=st.integers(1, 20), ow=st.integers(1, 20))
def test_resize_constant_property(h, w, oh, ow):
    out = bicubic_resize(np.full((h, w, 3), 0.7), ow, oh)
    assert out.shape == (oh, ow, 3)
    np.testing.assert_allclose(out, 0.7, atol=1e-12)
