"""Minimal binary PGM (P5) / PPM (P6) image IO.

Sampled images live in [-1, 1] float; files hold 8-bit values. The
quantizer is round-half-away-from-zero via np.round then clip, and the
loader maps back with x / 127.5 - 1 so a write/read round trip is
within one quantization step everywhere.
"""

from __future__ import annotations

import numpy as np


class ImageError(ValueError):
    pass


def quantize(x: np.ndarray) -> np.ndarray:
    """[-1, 1] float -> u8, any shape."""
    return np.clip(np.round((np.asarray(x, dtype=np.float64) + 1.0) * 127.5),
                   0, 255).astype(np.uint8)


def dequantize(u: np.ndarray) -> np.ndarray:
    return np.asarray(u, dtype=np.float64) / 127.5 - 1.0


def write_image(path, img: np.ndarray) -> None:
    """img: [c, h, w] in [-1, 1] (or u8). c=1 writes PGM, c=3 writes PPM."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ImageError(f"expected [c,h,w] with c in (1,3), got {img.shape}")
    u = img if img.dtype == np.uint8 else quantize(img)
    c, h, w = u.shape
    magic = b"P5" if c == 1 else b"P6"
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    # planar [c,h,w] -> interleaved [h,w,c] raster order
    body = np.transpose(u, (1, 2, 0)).tobytes()
    with open(path, "wb") as f:
        f.write(header + body)


def _token(f) -> bytes:
    # whitespace-separated header token, skipping #-comments
    tok = b""
    while True:
        ch = f.read(1)
        if not ch:
            raise ImageError("truncated header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_image(path) -> np.ndarray:
    """Returns u8 [c, h, w]. Use dequantize() for the float view."""
    with open(path, "rb") as f:
        magic = _token(f)
        if magic not in (b"P5", b"P6"):
            raise ImageError(f"unsupported format {magic!r}")
        w = int(_token(f))
        h = int(_token(f))
        maxval = int(_token(f))
        if maxval != 255:
            raise ImageError(f"only maxval 255 supported, got {maxval}")
        c = 1 if magic == b"P5" else 3
        body = f.read(h * w * c)
    if len(body) != h * w * c:
        raise ImageError(f"expected {h * w * c} pixel bytes, got {len(body)}")
    u = np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)
    return np.transpose(u, (2, 0, 1)).copy()


def write_grid(path, images: np.ndarray, cols: int = 8) -> None:
    """Tile [n, c, h, w] into one image, row-major, zero padded."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ImageError(f"expected [n,c,h,w], got {images.shape}")
    n, c, h, w = images.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    grid = np.full((c, rows * h, cols * w), -1.0)
    for i in range(n):
        r, q = divmod(i, cols)
        grid[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = images[i]
    write_image(path, grid)
