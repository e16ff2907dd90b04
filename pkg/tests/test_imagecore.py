import cv2
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hdrcycle.errors import DatasetError, ImageFormatError
from hdrcycle.imagecore import (HdrImage, LdrImage, equalize_histogram, load_image, make_dataset, read_pfm,
                                read_rgbe, resize, resize_array, save_image, synthesize_exposure, write_pfm,
                                write_rgbe)
from hdrcycle.imagecore.io import float_to_rgbe, rgbe_to_float
from hdrcycle.imagecore.preprocess import equalize_array

from oracles import bilinear_half_pixel, rgbe_decode


def ldr(px):
    return LdrImage(np.asarray(px, dtype=np.float32))


# -- codecs -----------------------------------------------------------------

def test_png_white_is_one(tmp_path):
    cv2.imwrite(str(tmp_path / "w.png"), np.full((16, 16, 3), 255, np.uint8))
    img = load_image(tmp_path / "w.png", "ldr")
    assert img.pixels.max() == 1.0 and img.pixels.min() == 1.0
    assert img.source_bit_depth == 8


def test_png_16bit_normalisation(tmp_path):
    cv2.imwrite(str(tmp_path / "w.png"), np.full((16, 16, 3), 65535, np.uint16))
    img = load_image(tmp_path / "w.png")
    assert img.source_bit_depth == 16
    assert np.all(img.pixels == 1.0)


def test_png_round_trip_within_quantisation(tmp_path, rng):
    img = ldr(rng.random((20, 24, 3)))
    save_image(img, tmp_path / "a.png")
    back = load_image(tmp_path / "a.png")
    assert np.abs(back.pixels - img.pixels).max() <= 1 / 255


def test_greyscale_png_rejected(tmp_path):
    cv2.imwrite(str(tmp_path / "g.png"), np.zeros((16, 16), np.uint8))
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "g.png", "ldr")


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.pfm", "hdr")


def test_wrong_extension_for_kind(tmp_path):
    cv2.imwrite(str(tmp_path / "a.png"), np.zeros((16, 16, 3), np.uint8))
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "a.png", "hdr")


@pytest.mark.parametrize("byteorder", ["little", "big"])
def test_pfm_round_trip_bitwise(tmp_path, rng, byteorder):
    px = (rng.random((17, 23, 3)) * 100).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", px, byteorder)
    back = read_pfm(tmp_path / "a.pfm")
    assert back.dtype == np.float32
    assert np.array_equal(back, px)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, (16, 18, 3), elements=st.floats(0, 1e6, width=32)))
def test_pfm_round_trip_property(tmp_path_factory, px):
    path = tmp_path_factory.mktemp("pfm") / "p.pfm"
    save_image(HdrImage(px), path)
    assert np.array_equal(load_image(path).pixels, px)


def test_pfm_rows_stored_bottom_up(tmp_path):
    px = np.zeros((16, 16, 3), np.float32)
    px[0] = 1.0  # top row
    write_pfm(tmp_path / "a.pfm", px)
    raw = (tmp_path / "a.pfm").read_bytes()
    header_end = raw.index(b"-1.0\n") + 5
    first_stored = np.frombuffer(raw[header_end:header_end + 16 * 12], "<f4")
    assert np.all(first_stored == 0.0)


def test_nan_hdr_rejected(tmp_path):
    px = np.ones((16, 16, 3), np.float32)
    px[3, 3, 1] = np.nan
    with pytest.raises(ImageFormatError):
        save_image(HdrImage(px), tmp_path / "a.pfm")
    with pytest.raises(ImageFormatError):
        save_image(px, tmp_path / "b.pfm", "hdr")


def test_rgbe_red_quadruple_matches_reference():
    got = rgbe_to_float(np.array([[255, 0, 0, 128]], np.uint8))[0]
    assert tuple(got) == pytest.approx(rgbe_decode(255, 0, 0, 128), abs=0)
    assert got[0] == pytest.approx(255 / 256)


def _write_flat_hdr(path, quads: np.ndarray):
    h, w, _ = quads.shape
    with open(path, "wb") as f:
        f.write(b"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n" + f"-Y {h} +X {w}\n".encode())
        f.write(quads.astype(np.uint8).tobytes())


def test_rgbe_flat_file_against_reference(tmp_path, rng):
    quads = rng.integers(0, 256, (16, 5, 4)).astype(np.uint8)  # width < 8 forces flat scanlines
    quads[0, 0] = (255, 0, 0, 128)
    _write_flat_hdr(tmp_path / "a.hdr", quads)
    px = read_rgbe(tmp_path / "a.hdr")
    expect = np.array([[rgbe_decode(*map(int, q)) for q in row] for row in quads], np.float32)
    assert np.array_equal(px, expect)
    assert px[0, 0, 0] == pytest.approx(255 / 256)


def test_rgbe_rle_round_trip_and_opencv_agreement(tmp_path, rng):
    px = (rng.random((20, 40, 3)) ** 3 * 50).astype(np.float32)
    px[:, 10:30] = 2.0  # long runs exercise the run-length path
    write_rgbe(tmp_path / "a.hdr", px)
    back = read_rgbe(tmp_path / "a.hdr")
    # each channel is quantised to 1/256 of the pixel's largest channel
    assert np.all(np.abs(back - px) <= px.max(axis=2, keepdims=True) / 128 + 1e-30)
    expect = rgbe_to_float(float_to_rgbe(px))
    assert np.array_equal(back, expect)
    ocv = cv2.imread(str(tmp_path / "a.hdr"), cv2.IMREAD_UNCHANGED)[..., ::-1]
    assert np.allclose(ocv, back, rtol=1e-6, atol=1e-30)


def test_rgbe_opencv_written_file(tmp_path, rng):
    px = (rng.random((16, 32, 3)) * 8).astype(np.float32)
    cv2.imwrite(str(tmp_path / "o.hdr"), px[..., ::-1].copy())
    back = load_image(tmp_path / "o.hdr").pixels
    assert np.all(np.abs(back - px) <= px.max(axis=2, keepdims=True) / 128)


# -- equalisation -------------------------------------------------------------

def test_equalize_uniform_histogram_is_identity():
    levels = np.arange(256, dtype=np.float32) / 255
    px = np.stack([np.tile(levels, (16, 1))] * 3, axis=-1)
    out = equalize_histogram(ldr(px))
    assert np.abs(out.pixels - px).max() <= 1 / 255


def test_equalize_constant_unchanged():
    img = ldr(np.full((16, 16, 3), 0.37))
    assert np.array_equal(equalize_histogram(img).pixels, img.pixels)


def test_equalize_two_levels():
    px = np.full((16, 16, 3), 0.1, np.float32)
    px[8:] = 0.9
    out = equalize_histogram(ldr(px)).pixels
    # (cdf(v) - cdf_min) / (N - cdf_min): the low level has cdf == cdf_min
    assert np.all(out[:8] == 0.0)
    assert np.all(out[8:] == 1.0)


def test_equalize_matches_opencv(rng):
    px = (rng.random((32, 40, 3)) ** 2).astype(np.float32)
    ours = equalize_histogram(ldr(px)).pixels
    q = np.round(px * 255).astype(np.uint8)
    ref = np.stack([cv2.equalizeHist(np.ascontiguousarray(q[..., c])) for c in range(3)], -1) / 255.0
    assert np.abs(ours - ref).max() <= 1 / 255 + 1e-7


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (16, 16, 3)))
def test_equalize_idempotent(q):
    px = q.astype(np.float32) / 255
    once = equalize_array(px)
    twice = equalize_array(once)
    assert np.abs(once - twice).max() <= 1 / 255 + 1e-7
    assert once.min() >= 0 and once.max() <= 1


# -- exposure and resize -----------------------------------------------------

def test_exposure_examples():
    img = ldr(np.full((16, 16, 3), 0.3))
    assert np.array_equal(synthesize_exposure(img, 1.0, 0.0).pixels, img.pixels)
    assert synthesize_exposure(img, 2.0).pixels[0, 0, 0] == pytest.approx(0.6)
    assert synthesize_exposure(ldr(np.full((16, 16, 3), 0.7)), 2.0).pixels.max() == 1.0
    with pytest.raises(ValueError):
        synthesize_exposure(img, 0.0)


@given(st.floats(0.01, 5), st.floats(-1, 1), st.floats(0, 1), st.floats(0, 1))
def test_exposure_monotone(gain, bias, a, b):
    lo, hi = sorted((a, b))
    px = np.zeros((16, 16, 3), np.float32)
    px[0], px[1] = lo, hi
    out = synthesize_exposure(ldr(px), gain, bias).pixels
    assert out[0, 0, 0] <= out[1, 0, 0]


def test_resize_identity_and_constant(rng):
    img = ldr(rng.random((32, 32, 3)))
    assert np.array_equal(resize(img, (32, 32)).pixels, img.pixels)
    const = HdrImage(np.full((20, 30, 3), 3.5, np.float32))
    out = resize(const, (47, 16))
    assert out.shape == (47, 16, 3)
    assert np.allclose(out.pixels, 3.5, rtol=0, atol=1e-6)


def test_resize_checkerboard_matches_hand_bilinear():
    board = np.array([[0.0, 1.0], [1.0, 0.0]], np.float32)
    out = resize_array(board[..., None].repeat(3, -1), (4, 4))[..., 0]
    expect = bilinear_half_pixel(board, 4, 4)
    assert np.allclose(out, expect, atol=1e-6)
    assert out[0, 0] == 0.0 and out[0, 3] == 1.0 and out[3, 0] == 1.0 and out[3, 3] == 0.0


def test_resize_rejects_bad_sizes(rng):
    img = ldr(rng.random((16, 16, 3)))
    with pytest.raises(ValueError):
        resize(img, (0, 16))
    with pytest.raises(ValueError):
        resize(img, (8, 8))


# -- datasets ---------------------------------------------------------------

def _tree(root, n_ldr, n_hdr, rng):
    (root / "ldr").mkdir()
    (root / "hdr").mkdir()
    for k in range(n_ldr):
        save_image(ldr(rng.random((16, 16, 3))), root / "ldr" / f"{k}.png")
    for k in range(n_hdr):
        save_image(HdrImage(rng.random((16, 16, 3)).astype(np.float32) * 4), root / "hdr" / f"{k}.pfm")
    return root


def test_dataset_lengths(tmp_path, rng):
    root = _tree(tmp_path, 3, 2, rng)
    ds = make_dataset(root / "ldr", root / "hdr", seed=0, image_size=(16, 16))
    assert ds.lengths == (3, 2)


def test_dataset_order_reproducible(tmp_path, rng):
    root = _tree(tmp_path, 10, 3, rng)
    a = make_dataset(root / "ldr", root / "hdr", seed=7, image_size=(16, 16))
    b = make_dataset(root / "ldr", root / "hdr", seed=7, image_size=(16, 16))
    for epoch in range(3):
        xa, ya = a.order(epoch)
        xb, yb = b.order(epoch)
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)
    batches_a = list(a.batches(0))
    batches_b = list(b.batches(0))
    for ba, bb in zip(batches_a, batches_b):
        assert ba.x_ids == bb.x_ids and ba.y_ids == bb.y_ids
        assert np.array_equal(ba.x.numpy(), bb.x.numpy())


def test_dataset_drop_last(tmp_path, rng):
    root = _tree(tmp_path, 10, 3, rng)
    ds = make_dataset(root / "ldr", root / "hdr", batch_size=4, image_size=(16, 16))
    batches = list(ds.batches(0))
    assert len(batches) == 10 // 4 == 2
    assert all(b.x.shape[0] == 4 and b.y.shape[0] == 4 for b in batches)
    # every LDR index appears at most once per epoch
    xs, _ = ds.order(0)
    assert len(set(xs.tolist())) == len(xs)


def test_dataset_hdr_peak_normalised(tmp_path, rng):
    root = _tree(tmp_path, 4, 4, rng)
    ds = make_dataset(root / "ldr", root / "hdr", image_size=(16, 16))
    batch = next(ds.batches(0))
    assert np.allclose(batch.y.flatten(1).amax(1).numpy(), 1.0)


def test_empty_directory(tmp_path, rng):
    root = _tree(tmp_path, 2, 0, rng)
    with pytest.raises(DatasetError):
        make_dataset(root / "ldr", root / "hdr")
