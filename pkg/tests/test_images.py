import struct

import numpy as np
import pytest

from sdguide import images


def reference_read_pfm(path):
    """Independent minimal PFM parser used to cross-check the writer."""
    with open(path, "rb") as fh:
        data = fh.read()
    nl1 = data.index(b"\n")
    nl2 = data.index(b"\n", nl1 + 1)
    nl3 = data.index(b"\n", nl2 + 1)
    assert data[:nl1] == b"PF"
    w, h = (int(v) for v in data[nl1 + 1:nl2].split())
    scale = float(data[nl2 + 1:nl3])
    assert scale < 0  # little endian
    floats = struct.unpack("<" + "f" * (w * h * 3), data[nl3 + 1:])
    img = np.asarray(floats, dtype=np.float64).reshape(h, w, 3)
    return img[::-1]


class TestPfm:
    def test_single_pixel_layout(self, tmp_path):
        path = tmp_path / "one.pfm"
        images.write_pfm(np.array([[[1.0, 0.0, 0.0]]], dtype=np.float32), path)
        raw = path.read_bytes()
        header = b"PF\n1 1\n-1.0\n"
        assert raw.startswith(header)
        assert len(raw) - len(header) == 12
        assert struct.unpack("<3f", raw[len(header):]) == (1.0, 0.0, 0.0)

    def test_round_trip_bit_exact(self, tmp_path, rng):
        img = rng.random((7, 5, 3)).astype(np.float32)
        path = tmp_path / "img.pfm"
        images.write_pfm(img, path)
        back = images.read_pfm(path)
        assert back.shape == (7, 5, 3)
        assert np.array_equal(back.astype(np.float32), img)

    def test_reference_reader_agrees(self, tmp_path, rng):
        img = rng.random((4, 6, 3)).astype(np.float32)
        path = tmp_path / "img.pfm"
        images.write_pfm(img, path)
        ours = images.read_pfm(path)
        theirs = reference_read_pfm(path)
        assert np.array_equal(ours, theirs)

    def test_rejects_non_finite(self, tmp_path):
        img = np.full((2, 2, 3), np.nan)
        with pytest.raises(images.ImageError):
            images.write_pfm(img, tmp_path / "bad.pfm")

    def test_read_rejects_other_formats(self, tmp_path):
        p = tmp_path / "x.pfm"
        p.write_bytes(b"Pf\n1 1\n-1.0\n" + b"\x00" * 4)
        with pytest.raises(images.ImageError):
            images.read_pfm(p)


class TestMape:
    def test_identical_images(self, rng):
        img = rng.random((8, 8, 3))
        assert images.mape(img, img) == 0.0

    def test_formula_arithmetic(self):
        img = np.full((4, 4, 3), 0.02)
        ref = np.full((4, 4, 3), 0.01)
        # |0.01| / (0.01 + 0.01) = 0.5
        assert images.mape(img, ref) == pytest.approx(0.5)

    def test_epsilon_shields_black_reference(self):
        img = np.full((2, 2, 3), 0.1)
        ref = np.zeros((2, 2, 3))
        assert images.mape(img, ref) == pytest.approx(0.1 / 0.01)
        assert np.isfinite(images.mape(img, ref))

    def test_dimension_mismatch(self):
        with pytest.raises(images.ImageError):
            images.mape(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))

    def test_channel_mean_reduction(self):
        # pixel value is the mean over channels before the ratio
        img = np.zeros((1, 1, 3))
        img[0, 0] = [0.3, 0.0, 0.0]
        ref = np.full((1, 1, 3), 0.1)
        assert images.mape(img, ref) == pytest.approx(0.0)
