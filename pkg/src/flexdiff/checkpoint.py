"""FXCK checkpoint format: model config, patch registry, named f64
tensors with per-tensor checksums, EMA shadow, and training state.

Layout (little-endian, normative):

    magic    4 bytes b"FXCK"
    version  u32     currently 1
    config   u32 length + utf-8 text (canonical key = value form)
    registry u32 count + count u32 patch sizes
    tag      u32 length + ascii flatten-order tag ("c-order-f64-le")
    frozen   u32 length + utf-8 newline-joined frozen tensor names
    table    u32 count, then per tensor: u32 name length, name utf-8,
             u8 ndim, ndim u64 dims, u64 payload offset, u32 crc32
    payload  u64 length + raw f64 little-endian tensor data

Tensor names are namespaced: params/..., ema/..., opt/m/..., opt/v/...,
state/... . Saving is deterministic (sorted names), so save(load(x))
is byte-identical to x.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .backbone import Model, ModelConfig
from .config import ConfigError, format_config_text, parse_config_text, resolve
from .numerics import Tensor
from .tokenizer import PatchSpec


class CheckpointError(ValueError):
    """Raised for malformed, truncated, or tampered checkpoint files."""


FXCK_MAGIC = b"FXCK"
FXCK_VERSION = 1
FLATTEN_TAG = "c-order-f64-le"


MODEL_SCHEMA: dict[str, tuple[str, object]] = {
    "model.h": ("int", None),
    "model.w": ("int", None),
    "model.c_in": ("int", None),
    "model.d_model": ("int", None),
    "model.n_layers": ("int", None),
    "model.n_heads": ("int", None),
    "model.num_classes": ("int", 0),
    "model.cond_mode": ("str", "class"),
    "model.vocab_size": ("int", 0),
    "model.learn_variance": ("bool", False),
    "model.pos_mode": ("str", "sinusoidal"),
    "model.lora_rank": ("int", 32),
    "model.label_drop": ("float", 0.1),
    "model.p_powerful": ("int", None),
    "model.p_weak": ("int", None),
    "model.extra_sizes": ("ints", ()),
    "model.flex_mode": ("str", "none"),
    "model.merged": ("bool", False),
}


def config_to_text(cfg: ModelConfig, flex_mode: str | None, merged: bool) -> str:
    values = {
        "model.h": cfg.h,
        "model.w": cfg.w,
        "model.c_in": cfg.c_in,
        "model.d_model": cfg.d_model,
        "model.n_layers": cfg.n_layers,
        "model.n_heads": cfg.n_heads,
        "model.num_classes": cfg.num_classes,
        "model.cond_mode": cfg.cond_mode,
        "model.vocab_size": cfg.vocab_size,
        "model.learn_variance": cfg.learn_variance,
        "model.pos_mode": cfg.pos_mode,
        "model.lora_rank": cfg.lora_rank,
        "model.label_drop": cfg.label_drop,
        "model.p_powerful": cfg.patch.p_powerful,
        "model.p_weak": cfg.patch.p_weak,
        "model.extra_sizes": cfg.patch.extra_sizes,
        "model.flex_mode": flex_mode or "none",
        "model.merged": merged,
    }
    return format_config_text(values)


def model_config_from_values(values: dict) -> tuple[ModelConfig, str | None, bool]:
    patch = PatchSpec(
        p_powerful=values["model.p_powerful"],
        p_weak=values["model.p_weak"],
        extra_sizes=tuple(values["model.extra_sizes"]),
    )
    cfg = ModelConfig(
        h=values["model.h"], w=values["model.w"], c_in=values["model.c_in"],
        d_model=values["model.d_model"], n_layers=values["model.n_layers"],
        n_heads=values["model.n_heads"], patch=patch,
        num_classes=values["model.num_classes"],
        cond_mode=values["model.cond_mode"],
        vocab_size=values["model.vocab_size"],
        learn_variance=values["model.learn_variance"],
        pos_mode=values["model.pos_mode"],
        lora_rank=values["model.lora_rank"],
        label_drop=values["model.label_drop"],
    )
    mode = values["model.flex_mode"]
    return cfg, (None if mode == "none" else mode), values["model.merged"]


def config_from_text(text: str) -> tuple[ModelConfig, str | None, bool]:
    try:
        values = resolve(MODEL_SCHEMA, parse_config_text(text))
    except ConfigError as e:
        raise CheckpointError(f"bad embedded config: {e}") from None
    return model_config_from_values(values)


@dataclass
class CheckpointData:
    """Everything a checkpoint holds, in memory."""

    model: Model
    ema: dict[str, np.ndarray] | None = None
    opt_m: dict[str, np.ndarray] | None = None
    opt_v: dict[str, np.ndarray] | None = None
    state: dict[str, float] | None = None


def _gather_tensors(data: CheckpointData) -> dict[str, np.ndarray]:
    out = {
        f"params/{k}": np.ascontiguousarray(v.data)
        for k, v in data.model.params.items()
    }
    for prefix, table in (("ema", data.ema), ("opt/m", data.opt_m),
                          ("opt/v", data.opt_v)):
        for k, v in (table or {}).items():
            out[f"{prefix}/{k}"] = np.ascontiguousarray(v)
    for k, v in (data.state or {}).items():
        out[f"state/{k}"] = np.asarray(float(v))
    return out


def save_checkpoint(path, data: CheckpointData) -> None:
    tensors = _gather_tensors(data)
    names = sorted(tensors)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")

    payload = bytearray()
    rows = []
    for name in names:
        arr = tensors[name].astype("<f8")
        raw = arr.tobytes()
        rows.append((name, arr.shape, len(payload), zlib.crc32(raw)))
        payload.extend(raw)

    def block(b: bytes) -> bytes:
        return struct.pack("<I", len(b)) + b

    frozen = "\n".join(sorted(data.model.frozen))
    out = bytearray()
    out += FXCK_MAGIC
    out += struct.pack("<I", FXCK_VERSION)
    out += block(config_to_text(data.model.cfg, data.model.flex_mode,
                                data.model.merged).encode())
    sizes = data.model.cfg.patch.supported
    out += struct.pack("<I", len(sizes)) + struct.pack(f"<{len(sizes)}I", *sizes)
    out += block(FLATTEN_TAG.encode())
    out += block(frozen.encode())
    out += struct.pack("<I", len(rows))
    for name, shape, offset, crc in rows:
        nb = name.encode()
        out += struct.pack("<I", len(nb)) + nb
        out += struct.pack("<B", len(shape))
        out += struct.pack(f"<{len(shape)}Q", *shape) if shape else b""
        out += struct.pack("<QI", offset, crc)
    out += struct.pack("<Q", len(payload))
    out += payload
    with open(path, "wb") as f:
        f.write(out)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(
                f"truncated checkpoint: {what} at byte {self.pos} needs {n} bytes"
            )
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def block(self, what: str) -> bytes:
        return self.take(self.u32(what), what)


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        raw = f.read()
    r = _Reader(raw)
    if r.take(4, "magic") != FXCK_MAGIC:
        raise CheckpointError("bad magic: not an FXCK checkpoint")
    version = r.u32("version")
    if version != FXCK_VERSION:
        raise CheckpointError(
            f"version {version} needs migration; this build reads {FXCK_VERSION}"
        )
    cfg, flex_mode, merged = config_from_text(r.block("config").decode())
    n_sizes = r.u32("patch registry")
    registry = struct.unpack(f"<{n_sizes}I", r.take(4 * n_sizes, "patch registry"))
    if tuple(registry) != cfg.patch.supported:
        raise CheckpointError("patch registry disagrees with config")
    tag = r.block("flatten tag").decode()
    if tag != FLATTEN_TAG:
        raise CheckpointError(f"unknown flatten order {tag!r}")
    frozen_text = r.block("frozen names").decode()
    frozen = frozenset(frozen_text.split("\n")) - {""}

    n_tensors = r.u32("tensor table")
    rows = []
    seen = set()
    for _ in range(n_tensors):
        name = r.block("tensor name").decode()
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        ndim = struct.unpack("<B", r.take(1, name))[0]
        shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim, name)) if ndim else ()
        offset = r.u64(name)
        crc = r.u32(name)
        rows.append((name, shape, offset, crc))
    payload_len = r.u64("payload length")
    payload = r.take(payload_len, "payload")
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes")

    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset, crc in rows:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > payload_len:
            raise CheckpointError(f"tensor {name!r} overruns payload")
        chunk = payload[offset:end]
        if zlib.crc32(chunk) != crc:
            raise CheckpointError(f"checksum mismatch in tensor {name!r}")
        tensors[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()

    params = {}
    ema: dict[str, np.ndarray] = {}
    opt_m: dict[str, np.ndarray] = {}
    opt_v: dict[str, np.ndarray] = {}
    state: dict[str, float] = {}
    for name, arr in tensors.items():
        kind, _, rest = name.partition("/")
        if kind == "params":
            params[rest] = Tensor(arr, requires_grad=rest not in frozen)
        elif kind == "ema":
            ema[rest] = arr
        elif kind == "state":
            state[rest] = float(arr)
        elif kind == "opt":
            sub, _, pname = rest.partition("/")
            (opt_m if sub == "m" else opt_v)[pname] = arr
        else:
            raise CheckpointError(f"unknown tensor namespace {name!r}")

    model = Model(cfg=cfg, params=params, flex_mode=flex_mode,
                  merged=merged, frozen=frozen)
    return CheckpointData(
        model=model,
        ema=ema or None,
        opt_m=opt_m or None,
        opt_v=opt_v or None,
        state=state or None,
    )
