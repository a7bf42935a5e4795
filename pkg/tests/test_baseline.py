import math

import numpy as np
import pytest

from common.errors import DataError
from common.image_io import GrayImage
from matcher.baseline import (
    DESCRIPTOR_DIM, ClassicKeypoint, baseline_match, build_dog_pyramid, compute_descriptors,
    detect_keypoints_dog, export_keypoints_csv, find_dog_extrema, import_keypoints_csv, match_inverse_consistent,
    match_ratio_test
)


def _blob_image(shape, centers, sigma):
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    pixels = np.zeros(shape)
    for r, c in centers:
        pixels += np.exp(-((rows - r) ** 2 + (cols - c) ** 2) / (2.0 * sigma ** 2))
    return pixels


def _unit(rng, count):
    d = rng.random((count, DESCRIPTOR_DIM))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def test_constant_image_has_no_keypoints():
    assert detect_keypoints_dog(GrayImage(np.full((64, 64), 7.0))) == []


def test_blob_center_is_detected():
    img = GrayImage(_blob_image((64, 64), [(32, 32)], 4.0))
    keypoints = detect_keypoints_dog(img, octaves=3, scales_per_octave=3, contrast_thresh=0.01)
    assert any(math.hypot(kp.row - 32, kp.col - 32) <= 2.0 for kp in keypoints)


def test_integer_shift_moves_keypoints_with_the_image(texture):
    shift = (8, -4)
    reference = np.zeros((112, 112))
    reference[24:88, 24:88] = texture.pixels
    shifted = np.roll(reference, shift, axis=(0, 1))

    before = detect_keypoints_dog(GrayImage(reference))
    after = detect_keypoints_dog(GrayImage(shifted))

    assert before and len(before) == len(after)
    moved = np.array([[kp.row + shift[0], kp.col + shift[1]] for kp in before])
    found = np.array([[kp.row, kp.col] for kp in after])
    nearest = np.min(np.linalg.norm(moved[:, None, :] - found[None, :, :], axis=2), axis=1)
    assert np.all(nearest <= 0.5)


def test_image_too_small_for_octaves():
    with pytest.raises(ValueError):
        detect_keypoints_dog(GrayImage(_blob_image((20, 20), [(10, 10)], 3.0)), octaves=3)


def _extrema_oracle(dogs, thresh, border):
    layers, height, width = dogs.shape
    found = []
    for l in range(1, layers - 1):
        for r in range(border, height - border):
            for c in range(border, width - border):
                value = dogs[l, r, c]
                if abs(value) <= thresh:
                    continue
                cube = dogs[l - 1:l + 2, r - 1:r + 2, c - 1:c + 2].ravel()
                others = np.delete(cube, 13)
                if value > others.max() or value < others.min():
                    found.append((l, r, c))
    return found


def test_extrema_match_exhaustive_scan():
    rng = np.random.default_rng(5)
    centers = [tuple(rng.uniform(8, 56, size=2)) for _ in range(6)]
    pixels = _blob_image((64, 64), centers, 3.0) + 0.05 * rng.random((64, 64))

    for octave in build_dog_pyramid(pixels, 2, 3, 1.6):
        assert find_dog_extrema(octave.dogs, 0.005, 2) == _extrema_oracle(octave.dogs, 0.005, 2)


def test_descriptors_are_unit_norm(texture):
    keypoints = detect_keypoints_dog(texture)
    described = compute_descriptors(texture, keypoints)
    assert described
    for kp in described:
        assert kp.descriptor.shape == (DESCRIPTOR_DIM,)
        assert np.linalg.norm(kp.descriptor) == pytest.approx(1.0, abs=1e-5)


def test_window_outside_image_is_dropped(texture):
    edge = ClassicKeypoint(2.0, 2.0, 2.0, 0.0)
    inside = ClassicKeypoint(32.0, 32.0, 2.0, 0.0)
    described = compute_descriptors(texture, [edge, inside])
    assert [kp.location for kp in described] == [(32.0, 32.0)]


def test_identical_patches_give_identical_descriptors(texture):
    kp = ClassicKeypoint(32.0, 30.0, 1.8, 1.1)
    a = compute_descriptors(texture, [kp])[0].descriptor
    b = compute_descriptors(GrayImage(texture.pixels.copy()), [kp])[0].descriptor
    np.testing.assert_array_equal(a, b)


def test_descriptor_follows_a_quarter_turn(texture):
    theta = 0.3
    kp = ClassicKeypoint(30.0, 35.0, 2.0, theta)
    rotated = GrayImage(np.rot90(texture.pixels).copy())
    width = texture.shape[1]
    # rot90 sends (r, c) to (W - 1 - c, r) and turns gradient angles by -pi/2
    turned = ClassicKeypoint(width - 1 - 35.0, 30.0, 2.0, theta - math.pi / 2)

    original = compute_descriptors(texture, [kp])[0].descriptor
    after = compute_descriptors(rotated, [turned])[0].descriptor
    assert np.abs(original - after).max() < 0.05


def test_ratio_test_accepts_clear_winner():
    D1 = np.zeros((1, DESCRIPTOR_DIM))
    D1[0, 0] = 1.0
    D2 = np.repeat(D1, 2, axis=0)
    D2[0, 1] = 0.2
    D2[1, 1] = 0.9
    assert match_ratio_test(D1, D2, 0.75) == [(0, 0)]
    assert match_ratio_test(D1, D2, 0.2) == []


def test_ratio_test_needs_two_candidates(rng):
    assert match_ratio_test(_unit(rng, 3), _unit(rng, 1), 0.75) == []
    with pytest.raises(ValueError):
        match_ratio_test(_unit(rng, 3), _unit(rng, 3), 1.5)


def test_ratio_test_matches_two_nearest_oracle(rng):
    D1, D2 = _unit(rng, 15), _unit(rng, 12)
    expected = []
    for i in range(15):
        distances = np.linalg.norm(D2 - D1[i], axis=1)
        first, second = np.argsort(distances, kind="stable")[:2]
        if distances[first] < 0.95 * distances[second]:
            expected.append((i, int(first)))
    assert match_ratio_test(D1, D2, 0.95) == expected


def test_ratio_test_shrinks_with_ratio(rng):
    D1, D2 = _unit(rng, 30), _unit(rng, 30)
    loose = set(match_ratio_test(D1, D2, 0.98))
    strict = set(match_ratio_test(D1, D2, 0.9))
    assert strict <= loose


def test_inverse_consistency_is_one_to_one(rng):
    D1, D2 = _unit(rng, 25), _unit(rng, 20)
    matches = match_inverse_consistent(D1, D2)
    assert matches
    assert len({i for i, _ in matches}) == len(matches) == len({j for _, j in matches})
    assert match_inverse_consistent(np.zeros((0, DESCRIPTOR_DIM)), D2) == []


def test_baseline_match_rows(rng):
    D = _unit(rng, 4)
    kps1 = [ClassicKeypoint(float(k), float(k), 1.6, 0.0, D[k]) for k in range(4)]
    kps2 = [ClassicKeypoint(float(k) + 10, float(k), 1.6, 0.0, D[k]) for k in range(4)]

    matches = baseline_match(kps1, kps2, "inverse-consistency")

    assert len(matches) == 4
    for pair in matches.pairs:
        assert math.isnan(pair.match_prob)
        assert pair.desc_dist2 == 0.0
        assert pair.pt2 == (pair.pt1[0] + 10, pair.pt1[1])
    with pytest.raises(ValueError):
        baseline_match(kps1, kps2, "cross-check")


def test_keypoint_csv_round_trip(tmp_path, texture):
    described = compute_descriptors(texture, detect_keypoints_dog(texture))
    path = str(tmp_path / "keypoints.csv")
    export_keypoints_csv(path, described)

    loaded = import_keypoints_csv(path)

    assert len(loaded) == len(described)
    for a, b in zip(described, loaded):
        assert a.location == b.location
        np.testing.assert_allclose(a.descriptor, b.descriptor, atol=1e-12)


def test_import_renormalizes_and_checks_header(tmp_path):
    header = ",".join(["row", "col", "scale", "orientation"] + [f"d{k}" for k in range(DESCRIPTOR_DIM)])
    row = [5.0, 6.0, 1.6, 0.0] + [2.0] * DESCRIPTOR_DIM
    path = tmp_path / "external.csv"
    path.write_text(header + "\n" + ",".join(str(v) for v in row) + "\n")

    loaded = import_keypoints_csv(str(path))
    assert np.linalg.norm(loaded[0].descriptor) == pytest.approx(1.0)

    path.write_text("x,y\n1,2\n")
    with pytest.raises(DataError):
        import_keypoints_csv(str(path))
