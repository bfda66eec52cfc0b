"""Image file IO: PNG via Pillow, binary PPM (P6) via a self-contained codec.

All in-memory images are float64 HWC arrays in [0, 1] with 1 or 3
channels. The PPM path exists so tests have a dependency-free
round-trip format.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class ImageDecodeError(ValueError):
    """Raised when bytes cannot be decoded into an image."""


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def from_uint8(arr: np.ndarray) -> np.ndarray:
    img = arr.astype(np.float64) / 255.0
    if img.ndim == 2:
        img = img[:, :, None]
    return img


def decode_png(data: bytes) -> np.ndarray:
    try:
        with PILImage.open(io.BytesIO(data)) as im:
            if im.mode in ("L", "I;16", "I"):
                return from_uint8(np.asarray(im.convert("L")))
            return from_uint8(np.asarray(im.convert("RGB")))
    except Exception as exc:
        raise ImageDecodeError(f"cannot decode image bytes: {exc}") from exc


def encode_png(img: np.ndarray) -> bytes:
    arr = to_uint8(img)
    mode = "L" if arr.ndim == 2 or arr.shape[2] == 1 else "RGB"
    if mode == "L" and arr.ndim == 3:
        arr = arr[:, :, 0]
    buf = io.BytesIO()
    PILImage.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Binary P6, maxval 255. Grayscale input is expanded to RGB."""
    arr = to_uint8(img)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise ImageDecodeError(f"{path}: not a binary PPM (P6) file")
    # header = magic, width, height, maxval; comments start with '#'
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise ImageDecodeError(f"{path}: unsupported PPM maxval {maxval}")
    raw = data[pos : pos + w * h * 3]
    if len(raw) != w * h * 3:
        raise ImageDecodeError(f"{path}: truncated PPM payload")
    return from_uint8(np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3))


def read_image(path: str | Path) -> np.ndarray:
    """Read a PNG or PPM file into a float64 HWC array in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    return decode_png(path.read_bytes())


def write_image(path: str | Path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, img)
    else:
        path.write_bytes(encode_png(img))


def read_mask(path: str | Path) -> np.ndarray:
    """Read a binary mask file into a float {0, 1} HxW array."""
    img = read_image(path)
    return (img.mean(axis=2) > 0.5).astype(np.float64)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    write_image(path, mask.astype(np.float64)[:, :, None])
