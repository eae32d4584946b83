"""8-bit RGB image I/O: PNG (via Pillow) and binary PPM (P6).

Images are plain numpy arrays of shape (H, W, 3), dtype uint8, row-major.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptDataError, InvalidInputError

_PNG_MAGIC = b"\x89PNG"
_PPM_MAGIC = b"P6"


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check the (H, W, 3) uint8 contract and return the array unchanged."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidInputError(f"expected (H, W, 3) RGB image, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError("zero-sized image")
    if arr.dtype != np.uint8:
        raise InvalidInputError(f"expected uint8 samples, got {arr.dtype}")
    return arr


def read_image(path: str | Path) -> np.ndarray:
    """Load a PNG or binary PPM file as an (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    if data[:4] == _PNG_MAGIC:
        img = Image.open(io.BytesIO(data)).convert("RGB")
        return np.asarray(img, dtype=np.uint8)
    if data[:2] == _PPM_MAGIC:
        return _decode_ppm(data)
    raise InvalidInputError(f"{path}: not a PNG or P6 PPM file")


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write an image as PNG or PPM depending on the file extension."""
    image = validate_image(image)
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        path.write_bytes(_encode_ppm(image))
    else:
        Image.fromarray(image, mode="RGB").save(path, format="PNG")


def _encode_ppm(image: np.ndarray) -> bytes:
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + image.tobytes()


def _decode_ppm(data: bytes) -> np.ndarray:
    # Header: "P6", whitespace-separated width, height, maxval; '#' comments.
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptDataError("truncated PPM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as exc:
            raise CorruptDataError("malformed PPM header") from exc
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise CorruptDataError("PPM with zero dimension")
    if maxval != 255:
        raise InvalidInputError(f"only maxval 255 PPM supported, got {maxval}")
    need = w * h * 3
    raster = data[pos : pos + need]
    if len(raster) < need:
        raise CorruptDataError("truncated PPM raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()
