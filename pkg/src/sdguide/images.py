"""PFM float-image input/output and the error metric used by the CLI."""

from __future__ import annotations

import numpy as np

MAPE_EPSILON = 0.01


class ImageError(ValueError):
    pass


def write_pfm(image, path):
    """Write an (H, W, 3) float image as a color PFM file.

    Header is ``PF\\n<w> <h>\\n-1.0\\n`` followed by little-endian float32
    RGB rows stored bottom-to-top; the round trip is bit-exact for float32
    data.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ImageError("expected an (H, W, 3) image")
    if not np.all(np.isfinite(image)):
        raise ImageError("image contains non-finite pixels")
    h, w, _ = image.shape
    data = np.flipud(image).astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(b"PF\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(data)


def read_pfm(path):
    """Read a color PFM file written by :func:`write_pfm` (or compatible)."""
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"PF":
            raise ImageError(f"not a color PFM file: {path}")
        dims = fh.readline().split()
        if len(dims) != 2:
            raise ImageError("malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        count = w * h * 3
        raw = fh.read(4 * count)
        if len(raw) != 4 * count:
            raise ImageError("truncated PFM payload")
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(raw, dtype=dtype).reshape(h, w, 3)
    return np.flipud(img).astype(np.float64)


def mape(image, reference, epsilon=MAPE_EPSILON):
    """Mean absolute percentage error against a reference image.

    Both images are reduced to a per-pixel value as the mean over the three
    channels; the epsilon keeps near-black reference pixels from dominating.
    """
    image = np.asarray(image, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if image.shape != reference.shape:
        raise ImageError(
            f"image dimensions {image.shape} do not match reference {reference.shape}"
        )
    if np.any(image < 0) or np.any(reference < 0):
        raise ImageError("images must be nonnegative")
    v = image.mean(axis=-1) if image.ndim == 3 else image
    ref = reference.mean(axis=-1) if reference.ndim == 3 else reference
    return float(np.mean(np.abs(v - ref) / (ref + epsilon)))
