"""Numeric foundation: seeded randomness, quantization, file formats, and
the central-difference gradient oracle.

Tensors are plain numpy arrays. On disk they are always float32 (``.mrt``
files); in memory the optimizers keep float64 and truncate only at the file
boundary. Images are float arrays of shape [H, W, C] with values in [0, 1].

Randomness uses numpy's PCG64 bit generator (O'Neill 2014 reference stream)
seeded through ``SeedSequence``; identical seeds give identical streams.
"""

import math
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"MRT1"
_MAX_RANK = 32
_MAX_ELEMENTS = 1 << 40


class FormatError(ValueError):
    """Raised for malformed tensor or image files."""


class GradientCheckError(ValueError):
    """Raised when a function turns non-finite during finite differencing."""


# ---------------------------------------------------------------- randomness


def make_rng(seed):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_seed(*parts):
    """Deterministic 63-bit seed from integer parts, e.g. (base, cell, image)."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> np.uint64(1))


def sample_standard_normal(rng, shape):
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) == 0:
        raise ValueError("shape must be non-empty")
    return rng.standard_normal(shape)


# -------------------------------------------------------------- quantization


def to_levels(values):
    """Map [0, 1] values onto integer levels 0..255 with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.int64)


def from_levels(levels):
    return np.asarray(levels, dtype=np.float64) / 255.0


def quantize(values):
    return from_levels(to_levels(values))


def as_image(img):
    """Validate an image and return it as float64 [H, W, C]."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"image must be [H, W, 1|3], got shape {a.shape}")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    return a


# ---------------------------------------------------------- gradient oracle


def finite_difference_gradient(f, x, h=1e-3):
    """Central differences of scalar ``f`` at every coordinate of ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            idx = np.unravel_index(i, x.shape)
            raise GradientCheckError(f"non-finite function value at coordinate {tuple(int(j) for j in idx)}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a, b, floor=1e-8):
    """max|a - b| / max(max|b|, floor), the norm used by all gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))


# -------------------------------------------------------------- tensor files


def save_tensor(path, t):
    t = np.asarray(t)
    if t.ndim == 0:
        raise ValueError("cannot save a rank-0 tensor; shape must be non-empty")
    data = np.ascontiguousarray(t, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise ValueError("tensor contains non-finite values")
    header = TENSOR_MAGIC + struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape)
    Path(path).write_bytes(header + data.tobytes())


def load_tensor(path):
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (rank,) = struct.unpack_from("<I", raw, 4)
    if rank == 0 or rank > _MAX_RANK:
        raise FormatError(f"{path}: invalid rank {rank}")
    if len(raw) < 8 + 4 * rank:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    count = 1
    for s in shape:
        count *= s
        if count > _MAX_ELEMENTS:
            raise FormatError(f"{path}: dimension overflow")
    offset = 8 + 4 * rank
    if len(raw) - offset != 4 * count:
        raise FormatError(f"{path}: payload has {len(raw) - offset} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", offset=offset, count=count).reshape(shape).astype(np.float32)


# --------------------------------------------------------------- image files


def save_image(path, img):
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"unsupported channel count for shape {a.shape}")
    levels = to_levels(a).astype(np.uint8)
    h, w, c = levels.shape
    magic = b"P5" if c == 1 else b"P6"
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode("ascii") + levels.tobytes())


def _pnm_tokens(raw, count):
    tokens, pos = [], 2
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def load_image(path):
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: not a binary P5/P6 pixmap")
    try:
        tokens, pos = _pnm_tokens(raw, 3)
        w, h, maxval = (int(t) for t in tokens)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed header") from exc
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} unsupported")
    c = 1 if magic == b"P5" else 3
    payload = raw[pos : pos + w * h * c]
    if len(payload) != w * h * c:
        raise FormatError(f"{path}: truncated pixel data")
    return from_levels(np.frombuffer(payload, dtype=np.uint8).reshape(h, w, c))
