"""Synthetic class-conditioned datasets and the FXDT raw-tensor format.

FXDT layout (little-endian, normative):

    magic   4 bytes  b"FXDT"
    version u32      currently 1
    count   u32      number of images
    h, w, c u32 each
    labels  u8       1 if a label table follows the payload
    payload count*c*h*w bytes, u8, image-major then channel-major
    labels  count u32 entries (only when the flag is set)

Pixels map to model space as x/127.5 - 1, so 0 -> -1.0 and 255 -> 1.0.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nm


class DataError(ValueError):
    """Raised for malformed, truncated, or inconsistent dataset files."""


FXDT_MAGIC = b"FXDT"
FXDT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIIB")


@dataclass(frozen=True)
class DatasetHeader:
    count: int
    h: int
    w: int
    c: int
    has_labels: bool
    version: int = FXDT_VERSION

    @property
    def image_bytes(self) -> int:
        return self.c * self.h * self.w

    @property
    def payload_bytes(self) -> int:
        return self.count * self.image_bytes


def write_fxdt(path, images: np.ndarray, labels=None) -> None:
    """Write [n, c, h, w] u8 images (optionally with u32 labels)."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise DataError("images must be a [n, c, h, w] uint8 array")
    n, c, h, w = images.shape
    if labels is not None:
        labels = np.asarray(labels, dtype="<u4")
        if labels.shape != (n,):
            raise DataError("labels must be one u32 per image")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FXDT_MAGIC, FXDT_VERSION, n, h, w, c,
                             0 if labels is None else 1))
        f.write(np.ascontiguousarray(images).tobytes())
        if labels is not None:
            f.write(labels.tobytes())


def read_fxdt_header(f) -> DatasetHeader:
    raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DataError(f"truncated header: got {len(raw)} of {_HEADER.size} bytes")
    magic, version, count, h, w, c, flag = _HEADER.unpack(raw)
    if magic != FXDT_MAGIC:
        raise DataError(f"bad magic {magic!r}")
    if version != FXDT_VERSION:
        raise DataError(f"unsupported version {version}")
    if min(h, w, c) < 1 or h > 1 << 16 or w > 1 << 16 or c > 64:
        raise DataError(f"degenerate image shape ({h}, {w}, {c})")
    if flag not in (0, 1):
        raise DataError(f"bad label flag {flag}")
    return DatasetHeader(count, h, w, c, bool(flag), version)


def iter_fxdt(path):
    """Stream (image [c, h, w] float64 in [-1, 1], label or None) pairs.

    Reads one image at a time; never touches bytes beyond the declared
    payload and label table."""
    with open(path, "rb") as f:
        hdr = read_fxdt_header(f)
        labels = None
        if hdr.has_labels:
            offset = _HEADER.size + hdr.payload_bytes
            f.seek(offset)
            raw = f.read(4 * hdr.count)
            if len(raw) < 4 * hdr.count:
                raise DataError(
                    f"truncated label table at byte {offset + len(raw)}"
                )
            labels = np.frombuffer(raw, dtype="<u4")
            f.seek(_HEADER.size)
        for i in range(hdr.count):
            raw = f.read(hdr.image_bytes)
            if len(raw) < hdr.image_bytes:
                offset = _HEADER.size + i * hdr.image_bytes + len(raw)
                raise DataError(f"truncated payload at byte {offset}")
            img = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
            img = img.reshape(hdr.c, hdr.h, hdr.w) / 127.5 - 1.0
            yield img, (int(labels[i]) if labels is not None else None)


def load_fxdt(path) -> tuple[np.ndarray, np.ndarray | None, DatasetHeader]:
    """Load a whole file into memory: ([n,c,h,w] in [-1,1], labels, header)."""
    with open(path, "rb") as f:
        hdr = read_fxdt_header(f)
    images = np.zeros((hdr.count, hdr.c, hdr.h, hdr.w))
    labels = np.zeros(hdr.count, dtype=np.int64) if hdr.has_labels else None
    for i, (img, lab) in enumerate(iter_fxdt(path)):
        images[i] = img
        if labels is not None:
            labels[i] = lab
    return images, labels, hdr


# --------------------------------------------------------------------------
# synthetic class-conditioned data


FAMILIES = ("gaussian-blobs", "stripes", "checker")


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int
    h: int
    w: int
    c: int
    count: int
    family: str = "gaussian-blobs"
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise DataError(f"unknown family {self.family!r}")
        if self.num_classes < 1 or min(self.h, self.w, self.c) < 1:
            raise DataError("degenerate spec")
        if self.count < 0:
            raise DataError("count must be non-negative")


def class_params(spec: SyntheticSpec, k: int) -> dict:
    """Deterministic per-class generator parameters. Classes differ both in
    coarse structure (blob position / stripe angle / cell size) and in a
    near-Nyquist texture component, so weak and powerful patch sizes see
    class signal at their respective scales."""
    kk = k / max(spec.num_classes, 1)
    ang = 2.0 * math.pi * kk
    return {
        "cy": spec.h / 2.0 + 0.3 * spec.h * math.sin(ang),
        "cx": spec.w / 2.0 + 0.3 * spec.w * math.cos(ang),
        "sigma": spec.h / 6.0,
        "amp": 0.30 + 0.10 * kk,
        "angle": math.pi * kk,
        "wavelength": 4.0 + 2.0 * (k % 3),
        "cell": 2 ** (1 + k % 3),
        "texture_horizontal": k % 2 == 0,
        "texture_amp": 0.10,
    }


def _grid(h, w):
    return np.meshgrid(np.arange(h, dtype=np.float64),
                       np.arange(w, dtype=np.float64), indexing="ij")


def _texture(h, w, params) -> np.ndarray:
    yy, xx = _grid(h, w)
    axis = yy if params["texture_horizontal"] else xx
    return params["texture_amp"] * np.cos(math.pi * axis)


def _class_pattern(spec: SyntheticSpec, k: int) -> np.ndarray:
    p = class_params(spec, k)
    yy, xx = _grid(spec.h, spec.w)
    if spec.family == "gaussian-blobs":
        d2 = (yy - p["cy"]) ** 2 + (xx - p["cx"]) ** 2
        base = p["amp"] * np.exp(-d2 / (2.0 * p["sigma"] ** 2))
    elif spec.family == "stripes":
        u = xx * math.cos(p["angle"]) + yy * math.sin(p["angle"])
        base = p["amp"] * np.sin(2.0 * math.pi * u / p["wavelength"])
    else:
        cell = p["cell"]
        parity = ((yy // cell) + (xx // cell)) % 2
        base = p["amp"] * (2.0 * parity - 1.0)
    return 0.35 + base + _texture(spec.h, spec.w, p)


_NOISE_STD = 0.04


def generate(spec: SyntheticSpec, self_check: bool = True):
    """Deterministic dataset: ([n,c,h,w] u8, labels i64, probe accuracy).

    Classes cycle round-robin. The linear-probe self-check asserts the
    classes are separable enough (> 95%) to carry conditioning signal."""
    images = np.zeros((spec.count, spec.c, spec.h, spec.w), dtype=np.uint8)
    labels = np.zeros(spec.count, dtype=np.int64)
    patterns = [_class_pattern(spec, k) for k in range(spec.num_classes)]
    for i in range(spec.count):
        k = i % spec.num_classes
        rng = nm.philox(spec.seed, i, nm.BRANCH_DATA)
        img = patterns[k] + _NOISE_STD * rng.standard_normal(
            (spec.c, spec.h, spec.w)
        )
        images[i] = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        labels[i] = k
    accuracy = float("nan")
    if self_check and spec.count >= 4 * spec.num_classes:
        floats = images.astype(np.float64) / 127.5 - 1.0
        accuracy = linear_probe_accuracy(floats, labels, spec.num_classes)
        if accuracy <= 0.95:
            raise DataError(
                f"classes not separable: probe accuracy {accuracy:.3f}"
            )
    return images, labels, accuracy


def linear_probe_accuracy(images: np.ndarray, labels: np.ndarray,
                          num_classes: int) -> float:
    """Training accuracy of a least-squares one-vs-all linear classifier."""
    n = images.shape[0]
    x = np.concatenate([images.reshape(n, -1), np.ones((n, 1))], axis=1)
    y = np.eye(num_classes)[labels]
    w, *_ = np.linalg.lstsq(x, y, rcond=None)
    pred = np.argmax(x @ w, axis=1)
    return float(np.mean(pred == labels))


class InMemoryDataset:
    """Batch sampler over a normalized in-memory dataset."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[0] != self.labels.shape[0]:
            raise DataError("images [n,c,h,w] and labels [n] must align")
        if self.images.shape[0] == 0:
            raise DataError("empty dataset")

    @classmethod
    def from_file(cls, path) -> "InMemoryDataset":
        images, labels, hdr = load_fxdt(path)
        if labels is None:
            raise DataError("training data needs labels")
        return cls(images, labels)

    @classmethod
    def synthetic(cls, spec: SyntheticSpec) -> "InMemoryDataset":
        images, labels, _ = generate(spec)
        return cls(images.astype(np.float64) / 127.5 - 1.0, labels)

    def sample_batch(self, rng, n: int):
        idx = rng.integers(self.images.shape[0], size=n)
        return self.images[idx], self.labels[idx]
