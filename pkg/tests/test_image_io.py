import json

import numpy as np
import pytest
from PIL import Image
from scipy import ndimage

from common.errors import DataError, ImageFormatError
from common.image_io import (
    BinaryMask, GrayImage, compute_valid_mask, load_grayscale, load_image_directory, load_mask,
    resample_to_isotropic, rescale_intensity, save_grayscale, save_mask
)


def test_png_without_sidecar_gets_default_spacing(tmp_path):
    path = tmp_path / "slice.png"
    Image.fromarray(np.full((128, 128), 7, dtype=np.uint8)).save(path)

    img = load_grayscale(str(path))

    assert img.shape == (128, 128)
    assert img.spacing == (1.0, 1.0)
    assert img.pixels.dtype == np.float64
    assert np.all(img.pixels == 7.0)


def test_raw_with_sidecar_reads_spacing(tmp_path):
    path = tmp_path / "slice.raw"
    data = np.arange(96 * 96, dtype="<f4").reshape(96, 96)
    data.tofile(path)
    (tmp_path / "slice.json").write_text(json.dumps({"shape": [96, 96], "spacing": [1.31, 1.31], "dtype": "<f4"}))

    img = load_grayscale(str(path))

    assert img.spacing == (1.31, 1.31)
    np.testing.assert_array_equal(img.pixels, data.astype(np.float64))


def test_rgb_png_is_a_format_error(tmp_path):
    path = tmp_path / "color.png"
    Image.fromarray(np.zeros((32, 32, 3), dtype=np.uint8)).save(path)
    with pytest.raises(ImageFormatError):
        load_grayscale(str(path))


def test_unsupported_extension_and_missing_file(tmp_path):
    (tmp_path / "notes.txt").write_text("x")
    with pytest.raises(ImageFormatError):
        load_grayscale(str(tmp_path / "notes.txt"))
    with pytest.raises(DataError):
        load_grayscale(str(tmp_path / "absent.png"))


def test_corrupt_png_is_a_data_error(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"\x89PNG not really")
    with pytest.raises(DataError):
        load_grayscale(str(path))


def test_save_grayscale_picks_bit_depth(tmp_path):
    low = GrayImage(np.full((20, 20), 200.0))
    high = GrayImage(np.full((20, 20), 1000.0))
    save_grayscale(str(tmp_path / "low.png"), low)
    save_grayscale(str(tmp_path / "high.png"), high)

    with Image.open(tmp_path / "low.png") as im:
        assert im.mode == "L"
    assert np.all(load_grayscale(str(tmp_path / "high.png")).pixels == 1000.0)


def test_raw_save_keeps_negative_values_and_spacing(tmp_path):
    pixels = np.linspace(-5.0, 5.0, 400).reshape(20, 20)
    path = str(tmp_path / "img.raw")
    save_grayscale(path, GrayImage(pixels, (0.5, 0.5)))

    loaded = load_grayscale(path)

    assert loaded.spacing == (0.5, 0.5)
    np.testing.assert_allclose(loaded.pixels, pixels, atol=1e-6)


def test_mask_png_is_0_255(tmp_path):
    values = np.zeros((20, 20), dtype=np.uint8)
    values[5:10, 5:10] = 1
    path = str(tmp_path / "mask.png")
    save_mask(path, BinaryMask(values))

    with Image.open(path) as im:
        assert set(np.unique(np.asarray(im))) == {0, 255}
    np.testing.assert_array_equal(load_mask(path).values, values)


def test_gray_image_invariants():
    with pytest.raises(ValueError):
        GrayImage(np.zeros((15, 40)))
    with pytest.raises(ValueError):
        GrayImage(np.zeros((16, 16)), (0.0, 1.0))
    with pytest.raises(ValueError):
        BinaryMask(np.full((4, 4), 2))


def test_resample_identity_is_a_bit_exact_copy(rng):
    img = GrayImage(rng.random((100, 100)))
    out = resample_to_isotropic(img, 1.0)
    assert out.shape == (100, 100)
    np.testing.assert_array_equal(out.pixels, img.pixels)
    assert out.pixels is not img.pixels


def test_resample_shape_follows_spacing():
    img = GrayImage(np.zeros((100, 100)), (0.91, 0.91))
    out = resample_to_isotropic(img, 1.0)
    assert out.shape == (91, 91)
    assert out.spacing == (1.0, 1.0)


def test_resample_preserves_constants():
    img = GrayImage(np.full((50, 60), 3.5), (1.31, 0.7))
    out = resample_to_isotropic(img, 1.0)
    np.testing.assert_allclose(out.pixels, 3.5)


def test_resample_rejects_non_positive_target():
    with pytest.raises(ValueError):
        resample_to_isotropic(GrayImage(np.zeros((20, 20))), 0.0)


def test_valid_mask_all_zero_image():
    mask = compute_valid_mask(GrayImage(np.zeros((32, 32))), 0.5, 10)
    assert mask.values.sum() == 0
    assert mask.shape == (32, 32)


def test_valid_mask_drops_small_components():
    pixels = np.zeros((40, 40))
    pixels[5:15, 5:15] = 1.0   # 100 px
    pixels[30, 30:33] = 1.0    # 3 px
    mask = compute_valid_mask(GrayImage(pixels), 0.5, 10)

    expected = np.zeros((40, 40), dtype=np.uint8)
    expected[5:15, 5:15] = 1
    np.testing.assert_array_equal(mask.values, expected)


def _flood_fill_oracle(binary, min_size):
    """Exhaustive 8-connected flood fill"""
    height, width = binary.shape
    seen = np.zeros_like(binary, dtype=bool)
    out = np.zeros(binary.shape, dtype=np.uint8)
    for r in range(height):
        for c in range(width):
            if not binary[r, c] or seen[r, c]:
                continue
            stack, component = [(r, c)], []
            seen[r, c] = True
            while stack:
                y, x = stack.pop()
                component.append((y, x))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < height and 0 <= nx < width and binary[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            if len(component) >= min_size:
                for y, x in component:
                    out[y, x] = 1
    return out


@pytest.mark.parametrize("seed", range(5))
def test_valid_mask_matches_flood_fill(seed):
    rng = np.random.default_rng(seed)
    pixels = ndimage.gaussian_filter(rng.random((48, 48)), 1.5)
    thresh = float(np.median(pixels))
    mask = compute_valid_mask(GrayImage(pixels), thresh, 12)
    np.testing.assert_array_equal(mask.values, _flood_fill_oracle(pixels >= thresh, 12))


def test_valid_mask_ignores_added_small_components():
    pixels = np.zeros((40, 40))
    pixels[5:20, 5:20] = 1.0
    base = compute_valid_mask(GrayImage(pixels), 0.5, 10)
    pixels[35, 35] = 1.0
    pixels[2, 30:32] = 1.0
    np.testing.assert_array_equal(compute_valid_mask(GrayImage(pixels), 0.5, 10).values, base.values)


def test_rescale_intensity():
    np.testing.assert_allclose(rescale_intensity(np.array([[2.0, 4.0], [6.0, 10.0]])), [[0, 0.25], [0.5, 1.0]])
    assert not rescale_intensity(np.full((3, 3), 5.0)).any()


def test_load_image_directory_skips_unreadable(tmp_path):
    save_grayscale(str(tmp_path / "a.png"), GrayImage(np.full((20, 20), 10.0)))
    (tmp_path / "b.png").write_bytes(b"garbage")
    (tmp_path / "readme.txt").write_text("ignored")

    loaded = load_image_directory(str(tmp_path))

    assert [p.split("/")[-1] for p, _ in loaded] == ["a.png"]


def test_load_image_directory_without_images(tmp_path):
    with pytest.raises(DataError):
        load_image_directory(str(tmp_path))
