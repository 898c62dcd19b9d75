"""Surrogate extractor: trivial statistics cases and independent recomputation."""

import numpy as np
import pytest

from styleroute.features import ExtractorSpec, extract_features, luma


def test_zero_image_gives_zero_stack():
    stack = extract_features(np.zeros((16, 16, 3), dtype=np.uint8))
    for level in stack.levels:
        assert np.allclose(level, 0.0, atol=1e-15)


def test_constant_image_statistics():
    img = np.full((16, 16, 3), 100, dtype=np.uint8)
    stack = extract_features(img)
    assert np.allclose(stack.levels[0], 100 / 255.0, atol=1e-12)  # channel means = c
    assert np.allclose(stack.levels[1], 0.0, atol=1e-12)  # no gradients
    assert np.allclose(stack.levels[2], 0.0, atol=1e-12)  # no off-DC energy
    assert np.allclose(stack.levels[3], luma(img / 255.0)[0, 0], atol=1e-12)


def test_unsupported_size_rejected():
    with pytest.raises(ValueError):
        extract_features(np.zeros((8, 8, 3), dtype=np.uint8))
    with pytest.raises(ValueError):
        extract_features(np.zeros((16, 16), dtype=np.uint8))


def test_determinism():
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
    a = extract_features(img).concat()
    b = extract_features(img).concat()
    assert (a == b).all()


def test_width_matches_spec():
    spec = ExtractorSpec()
    stack = extract_features(np.zeros((16, 16, 3), dtype=np.uint8), spec)
    assert stack.width == spec.width == 35
    assert tuple(level.size for level in stack.levels) == spec.level_widths


def _reference_stack(img: np.ndarray) -> np.ndarray:
    """Independent reimplementation of the documented statistics with loops."""
    img01 = img.astype(np.float64) / 255.0
    h, w, _ = img01.shape
    y = 0.299 * img01[..., 0] + 0.587 * img01[..., 1] + 0.114 * img01[..., 2]

    means = [img01[..., c].sum() / (h * w) for c in range(3)]

    gy, gx = np.gradient(y)
    hist = [0.0] * 8
    for r in range(h):
        for c in range(w):
            mag = np.hypot(gx[r, c], gy[r, c])
            theta = np.arctan2(gy[r, c], gx[r, c])
            b = int(np.floor((theta + np.pi) / (2 * np.pi) * 8)) % 8
            hist[b] += mag
    hist = [v / (h * w) for v in hist]

    radial = []
    for s in (1, 2):
        hs, ws = h // s, w // s
        plane = np.zeros((hs, ws))
        for r in range(hs):
            for c in range(ws):
                plane[r, c] = y[r * s : (r + 1) * s, c * s : (c + 1) * s].mean()
        power = np.abs(np.fft.fft2(plane)) ** 2 / (hs * ws)
        fy = np.fft.fftfreq(hs)
        fx = np.fft.fftfreq(ws)
        radius = np.zeros((hs, ws))
        for r in range(hs):
            for c in range(ws):
                radius[r, c] = np.hypot(fy[r], fx[c])
        r_max = radius.max()
        edges = np.linspace(0, r_max, 5)
        bins = [0.0] * 4
        for r in range(hs):
            for c in range(ws):
                rad = radius[r, c]
                if rad == 0:
                    continue
                for b in range(4):
                    if edges[b] < rad <= edges[b + 1]:
                        bins[b] += power[r, c]
        radial.extend(np.log1p(bins))

    patch = []
    for r in range(4):
        for c in range(4):
            patch.append(y[r * 4 : (r + 1) * 4, c * 4 : (c + 1) * 4].mean())

    return np.array(means + hist + radial + patch)


def test_checkerboard_matches_independent_recomputation():
    yy, xx = np.mgrid[0:16, 0:16]
    board = ((xx + yy) % 2 * 255).astype(np.uint8)
    img = np.repeat(board[..., None], 3, axis=2)
    got = extract_features(img).concat()
    want = _reference_stack(img)
    assert np.allclose(got, want, atol=1e-10)


def test_random_images_match_independent_recomputation():
    rng = np.random.default_rng(7)
    for _ in range(3):
        img = rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8)
        assert np.allclose(extract_features(img).concat(), _reference_stack(img), atol=1e-10)
