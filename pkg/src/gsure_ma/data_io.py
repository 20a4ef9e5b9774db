"""Synthetic phantoms, dataset splits, the TNSR tensor container and PGM export."""
from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ContainerError, TruncationError

MAGIC = b"TNSR"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("u1")}
_TAGS = {np.dtype("float64"): 0, np.dtype("float32"): 1, np.dtype("uint8"): 2}


# ---------------------------------------------------------------- phantoms

@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float
    amplitude: float


@dataclass(frozen=True)
class PhantomDescriptor:
    h: int
    w: int
    ellipses: tuple
    phase: tuple = (0.0, 0.0, 0.0)   # (offset, y slope, x slope) in radians
    seed: int | None = None


@dataclass
class Phantom:
    image: np.ndarray
    descriptor: PhantomDescriptor


def render_phantom(desc: PhantomDescriptor) -> np.ndarray:
    """Rasterize an ellipse superposition with a smooth phase ramp."""
    h, w = desc.h, desc.w
    yy = (np.arange(h) - h / 2 + 0.5) / (h / 2)
    xx = (np.arange(w) - w / 2 + 0.5) / (w / 2)
    Y, X = np.meshgrid(yy, xx, indexing="ij")
    mag = np.zeros((h, w))
    for e in desc.ellipses:
        c, s = np.cos(e.angle), np.sin(e.angle)
        dy, dx = Y - e.cy, X - e.cx
        u = (c * dx + s * dy) / e.rx
        v = (-s * dx + c * dy) / e.ry
        mag += np.where(u * u + v * v <= 1.0, e.amplitude, 0.0)
    mag = np.clip(mag, 0.0, 1.0)
    p0, py, px = desc.phase
    img = mag * np.exp(1j * (p0 + py * Y + px * X))
    # |exp(i phi)| can round to 1 + eps
    over = np.abs(img) > 1.0
    img[over] /= np.abs(img[over])
    return img


def random_descriptor(h: int, w: int, num_ellipses: int, rng_seed: int) -> PhantomDescriptor:
    if num_ellipses < 1:
        raise ValueError("num_ellipses must be >= 1")
    rng = np.random.default_rng(rng_seed)
    # outer "head" ellipse keeps the content non-degenerate
    ellipses = [Ellipse(
        cy=rng.uniform(-0.05, 0.05), cx=rng.uniform(-0.05, 0.05),
        ry=rng.uniform(0.7, 0.9), rx=rng.uniform(0.55, 0.8),
        angle=rng.uniform(-0.3, 0.3), amplitude=rng.uniform(0.5, 0.8))]
    for _ in range(num_ellipses - 1):
        ellipses.append(Ellipse(
            cy=rng.uniform(-0.5, 0.5), cx=rng.uniform(-0.45, 0.45),
            ry=rng.uniform(0.05, 0.35), rx=rng.uniform(0.05, 0.3),
            angle=rng.uniform(0, np.pi), amplitude=rng.uniform(-0.3, 0.45)))
    phase = (rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0))
    return PhantomDescriptor(h, w, tuple(ellipses), phase, rng_seed)


def make_phantom(h: int, w: int, num_ellipses: int = 8, rng_seed: int = 0) -> Phantom:
    desc = random_descriptor(h, w, num_ellipses, rng_seed)
    return Phantom(render_phantom(desc), desc)


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def images(self, part: str) -> list[np.ndarray]:
        return [render_phantom(d) for d in getattr(self, part)]


def make_split(n_train: int, n_val: int, n_test: int, base_seed: int = 0, h: int = 64,
               w: int = 64, num_ellipses: int = 8) -> DatasetSplit:
    """Disjoint phantom descriptors; descriptor k uses seed base_seed + k."""
    if min(n_train, n_val, n_test) < 0:
        raise ValueError("split counts must be >= 0")
    descs = [random_descriptor(h, w, num_ellipses, base_seed + k)
             for k in range(n_train + n_val + n_test)]
    return DatasetSplit(descs[:n_train], descs[n_train:n_train + n_val],
                        descs[n_train + n_val:])


# ---------------------------------------------------------------- TNSR

def _as_record_array(name, arr) -> np.ndarray:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype not in _TAGS:
        raise ContainerError(f"record {name!r}: unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise ContainerError(f"record {name!r}: rank {arr.ndim} too large")
    return arr


def dumps_tnsr(records) -> bytes:
    """Serialize an ordered mapping (or sequence of pairs) name -> array."""
    items = list(records.items() if hasattr(records, "items") else records)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        raise ContainerError("duplicate record names")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(items)))
    for name, arr in items:
        arr = _as_record_array(name, arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ContainerError(f"record name too long: {name[:32]!r}...")
        tag = _TAGS[arr.dtype]
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return buf.getvalue()


def loads_tnsr(data: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(data)
    if len(view) < 10 or bytes(view[:4]) != MAGIC:
        raise ContainerError("not a TNSR container (bad magic)")
    version, count = struct.unpack_from("<HI", view, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported TNSR version {version}")
    pos = 10
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def need(n, what, name):
        if pos + n > len(view):
            if what == "payload":
                raise TruncationError(name, n, len(view) - pos)
            raise ContainerError(f"truncated {what} in record {name!r}")

    for k in range(count):
        name = f"#{k}"
        need(2, "header", name)
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        need(nlen + 2, "header", name)
        try:
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"record #{k}: name is not UTF-8") from exc
        pos += nlen
        tag, rank = struct.unpack_from("<BB", view, pos)
        pos += 2
        if tag not in _DTYPES:
            raise ContainerError(f"record {name!r}: unknown dtype tag {tag}")
        need(8 * rank, "extents", name)
        shape = struct.unpack_from(f"<{rank}Q", view, pos)
        pos += 8 * rank
        dt = _DTYPES[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        need(nbytes, "payload", name)
        if name in out:
            raise ContainerError(f"duplicate record name {name!r}")
        arr = np.frombuffer(bytes(view[pos:pos + nbytes]), dtype=dt).reshape(shape)
        out[name] = arr.astype(dt.newbyteorder("="), copy=True)
        pos += nbytes
    if pos != len(view):
        raise ContainerError(
            f"container size mismatch: header describes {pos} bytes, file has {len(view)}")
    return out


def write_tnsr(path, records) -> None:
    Path(path).write_bytes(dumps_tnsr(records))


def read_tnsr(path) -> "OrderedDict[str, np.ndarray]":
    return loads_tnsr(Path(path).read_bytes())


def complex_records(prefix: str, z: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """Complex arrays are stored as two f64 records, ``<prefix>.re`` / ``.im``."""
    z = np.asarray(z)
    return [(f"{prefix}.re", np.ascontiguousarray(z.real, dtype=np.float64)),
            (f"{prefix}.im", np.ascontiguousarray(z.imag, dtype=np.float64))]


def complex_from_records(records, prefix: str) -> np.ndarray:
    return records[f"{prefix}.re"] + 1j * records[f"{prefix}.im"]


# ---------------------------------------------------------------- PGM

def to_pgm_bytes(img: np.ndarray) -> tuple[bytes, float, float]:
    """Binary P5 graymap of ``img`` (magnitude if complex), min-max scaled."""
    a = np.abs(img) if np.iscomplexobj(img) else np.asarray(img, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    pix = np.clip(np.round(scaled * 255), 0, 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes(), lo, hi


def write_pgm(path, img: np.ndarray) -> tuple[float, float]:
    data, lo, hi = to_pgm_bytes(img)
    Path(path).write_bytes(data)
    return lo, hi


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ContainerError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ContainerError(f"unsupported maxval {maxval}")
    return np.frombuffer(data[-w * h:], dtype=np.uint8).reshape(h, w)
