"""Grayscale images, PGM I/O and the Gaussian / DoG scale space."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SIGMA0 = 1.6
INTERVALS = 3
ASSUMED_BLUR = 0.5


class PgmError(ValueError):
    """Base class for PGM decoding failures."""


class UnsupportedMagicError(PgmError):
    pass


class MalformedHeaderError(PgmError):
    pass


class TruncatedDataError(PgmError):
    pass


class ImageTooSmallError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Image:
    """Row-major intensities in [0, 1], shape ``(height, width)``."""

    data: np.ndarray

    def __post_init__(self):
        d = np.array(self.data, dtype=np.float64, copy=True)
        if d.ndim != 2:
            raise ValueError("image data must be 2-D")
        if not np.all(np.isfinite(d)):
            raise ValueError("image contains non-finite values")
        d.setflags(write=False)
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


# -- PGM -------------------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int):
    pos = 0
    out = []
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise MalformedHeaderError("incomplete PGM header")
        out.append(m.group(1))
        pos = m.end()
    return out, pos


def decode_pgm(buf: bytes) -> Image:
    if len(buf) < 2 or buf[:2] != b"P5":
        raise UnsupportedMagicError(f"unsupported magic {buf[:2]!r}; only binary P5 is read")
    tokens, pos = _header_tokens(buf, 4)
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"non-numeric PGM header field: {exc}") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise MalformedHeaderError(f"bad PGM header values {width}x{height} maxval {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise MalformedHeaderError("missing whitespace after maxval")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    if len(buf) - pos < need:
        raise TruncatedDataError(f"expected {need} data bytes, found {len(buf) - pos}")
    raw = np.frombuffer(buf, dtype=dtype, count=width * height, offset=pos)
    return Image(raw.reshape(height, width).astype(np.float64) / maxval)


def load_pgm(path) -> Image:
    buf = Path(path).read_bytes()
    try:
        return decode_pgm(buf)
    except PgmError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def encode_pgm(img: Image) -> bytes:
    q = np.round(np.clip(img.data, 0.0, 1.0) * 65535.0).astype(">u2")
    return f"P5\n{img.width} {img.height}\n65535\n".encode() + q.tobytes()


def save_pgm(img: Image, path):
    Path(path).write_bytes(encode_pgm(img))


# -- blur ------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps, radius ``ceil(4 sigma)``."""
    r = int(math.ceil(4.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


def _blur_axis(a: np.ndarray, w: np.ndarray, axis: int) -> np.ndarray:
    r = len(w) // 2
    n = a.shape[axis]
    idx = np.arange(n)
    out = w[r] * a
    # pair taps symmetrically: x[i-k] + x[i+k] is order independent, so
    # mirrored inputs give bit-identical mirrored outputs
    for k in range(1, r + 1):
        lo = np.take(a, np.clip(idx - k, 0, n - 1), axis=axis)
        hi = np.take(a, np.clip(idx + k, 0, n - 1), axis=axis)
        out = out + w[r + k] * (lo + hi)
    return out


def blur_array(a: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    w = gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(np.asarray(a, dtype=np.float64), w, 1), w, 0)


def gaussian_blur(img: Image, sigma: float) -> Image:
    """Separable Gaussian blur with clamp-to-edge borders."""
    return Image(blur_array(img.data, sigma))


# -- scale space ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ScaleSpace:
    """Per-octave Gaussian stacks ``(intervals+3, h, w)`` and DoG stacks ``(intervals+2, h, w)``.

    ``sigmas[k]`` is the blur of level ``k`` in the octave's own pixel units;
    in input pixels it is ``sigmas[k] * 2**octave``.
    """

    gaussians: list
    dogs: list
    sigmas: np.ndarray
    intervals: int
    sigma0: float

    @property
    def n_octaves(self) -> int:
        return len(self.gaussians)


def default_octaves(width: int, height: int) -> int:
    return max(1, min(4, int(math.floor(math.log2(min(width, height)))) - 3))


def build_scale_space(img: Image, octaves: int | None = None, intervals: int = INTERVALS,
                      sigma0: float = SIGMA0, assumed_blur: float = ASSUMED_BLUR) -> ScaleSpace:
    mindim = min(img.width, img.height)
    if mindim < 16:
        raise ImageTooSmallError(f"image min dimension {mindim} < 16")
    if octaves is None:
        octaves = default_octaves(img.width, img.height)
    if octaves < 1 or intervals < 1:
        raise ValueError("octaves and intervals must be >= 1")
    if (mindim >> (octaves - 1)) < 8:
        raise ImageTooSmallError(f"{octaves} octaves need the last octave to be >= 8 px")

    n_levels = intervals + 3
    sigmas = sigma0 * 2.0 ** (np.arange(n_levels) / intervals)
    increments = np.sqrt(sigmas[1:] ** 2 - sigmas[:-1] ** 2)

    base = blur_array(img.data, math.sqrt(sigma0 ** 2 - assumed_blur ** 2))
    gaussians, dogs = [], []
    for _ in range(octaves):
        levels = [base]
        for inc in increments:
            levels.append(blur_array(levels[-1], inc))
        stack = np.stack(levels)
        gaussians.append(stack)
        dogs.append(stack[1:] - stack[:-1])
        base = stack[intervals][::2, ::2]
    return ScaleSpace(gaussians, dogs, sigmas, intervals, sigma0)
