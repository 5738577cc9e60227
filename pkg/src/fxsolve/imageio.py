"""Grayscale image I/O for test problems: binary/ASCII PGM and CSV grids."""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .errors import OutOfRange, UnsupportedFormat
from .fxnum import Fixed, quantize

BUNDLED = {"planet": "planet.pgm", "sprite": "sprite.pgm"}


def _pgm_tokens(data: bytes):
    """Yield header tokens and the byte offset just past the last one."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnsupportedFormat("truncated PGM header")
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return ``(pixels, maxval)`` from a P5 or P2 graymap."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(data)
    w, h, maxval = int(w), int(h), int(maxval)
    if magic == "P5":
        if maxval > 255:
            raise UnsupportedFormat("only 8-bit binary graymaps are supported")
        pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset)
    elif magic == "P2":
        pix = np.array(data[offset:].split()[: w * h], dtype=np.int64)
    else:
        raise UnsupportedFormat(f"not a graymap: magic {magic!r}")
    if pix.size != w * h:
        raise UnsupportedFormat("truncated pixel data")
    return pix.reshape(h, w).astype(np.int64), maxval


def write_pgm(path, pixels, maxval: int = 255):
    pixels = np.asarray(pixels, dtype=np.int64)
    if pixels.min() < 0 or pixels.max() > maxval or maxval > 255:
        raise OutOfRange("pixel values outside [0, maxval]")
    h, w = pixels.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + pixels.astype(np.uint8).tobytes())


def load_image(path, quantize_bits: int | None = None) -> np.ndarray:
    """Read an image as real values in (-1, 1), optionally quantized at exponent 0.

    Graymap pixels map linearly ``[0, maxval] -> [0, 1)`` via ``p / (maxval + 1)``;
    CSV grids are taken as real values and must already lie in (-1, 1).
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".pnm"):
        pix, maxval = read_pgm(path)
        values = pix / float(maxval + 1)
    elif suffix in (".csv", ".txt"):
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        if np.any(np.abs(values) >= 1):
            raise OutOfRange("CSV image values must lie in (-1, 1)")
    else:
        raise UnsupportedFormat(f"unsupported image format {suffix!r}")
    if quantize_bits is not None:
        values = quantize(values, quantize_bits, Fixed(0)).dequantize()
    return values


def save_image(path, values):
    """Write values losslessly: CSV as ``repr`` floats, PGM when they are multiples of 1/256."""
    path = Path(path)
    values = np.asarray(values, dtype=float)
    if path.suffix.lower() == ".pgm":
        pix = values * 256.0
        if np.any(values < 0) or np.any(values >= 1) or np.any(pix != np.round(pix)):
            raise OutOfRange("PGM output needs values k/256 in [0, 1)")
        write_pgm(path, pix.astype(np.int64), 255)
    elif path.suffix.lower() == ".csv":
        lines = [",".join(repr(float(v)) for v in row) for row in np.atleast_2d(values)]
        path.write_text("\n".join(lines) + "\n")
    else:
        raise UnsupportedFormat(f"unsupported image format {path.suffix!r}")


def bundled_image_path(name: str) -> Path:
    if name not in BUNDLED:
        raise KeyError(f"no bundled image {name!r}; choose from {sorted(BUNDLED)}")
    return Path(str(resources.files("fxsolve") / "data" / BUNDLED[name]))


def bundled_image(name: str, quantize_bits: int | None = None) -> np.ndarray:
    return load_image(bundled_image_path(name), quantize_bits)
