"""Hyperspectral cube and aggregated-image I/O.

Cubes live on disk as an ENVI-like pair: ``<name>.hdr`` (plain text) and
``<name>.raw`` (little-endian float32, band sequential). In memory the data
is a ``(bands, height, width)`` float32 array.
"""

from __future__ import annotations

import enum
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

HOD3K_RANGE_NM = (470.0, 620.0)


class CubeFormatError(ValueError):
    """Raised for malformed headers, payloads, or cube contents."""


def default_wavelengths(bands, lo=HOD3K_RANGE_NM[0], hi=HOD3K_RANGE_NM[1]):
    if bands == 1:
        return [float(lo)]
    return [float(w) for w in np.linspace(lo, hi, bands)]


@dataclass(frozen=True, eq=False)
class HyperCube:
    data: np.ndarray
    wavelengths_nm: tuple

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise CubeFormatError(f"cube data must be 3-D (bands, height, width), got shape {data.shape}")
        if min(data.shape) < 1:
            raise CubeFormatError(f"cube has an empty dimension: {data.shape}")
        wl = tuple(float(w) for w in self.wavelengths_nm)
        if len(wl) != data.shape[0]:
            raise CubeFormatError(f"{len(wl)} wavelengths for {data.shape[0]} bands")
        if any(not (100.0 < w < 3000.0) for w in wl):
            raise CubeFormatError("wavelengths must lie in (100, 3000) nm")
        if any(b <= a for a, b in zip(wl, wl[1:])):
            raise CubeFormatError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(data)):
            raise CubeFormatError("cube contains non-finite samples")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "wavelengths_nm", wl)

    @property
    def bands(self):
        return self.data.shape[0]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]

    def pixels(self):
        """Spectra as a (height*width, bands) float64 matrix, row-major pixel order."""
        return self.data.reshape(self.bands, -1).T.astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, HyperCube):
            return NotImplemented
        return (
            self.data.shape == other.data.shape
            and self.wavelengths_nm == other.wavelengths_nm
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class MosaicFrame:
    data: np.ndarray
    pattern_size: int
    cell_wavelengths_nm: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        p = int(self.pattern_size)
        if data.ndim != 2:
            raise CubeFormatError("mosaic frame must be a single 2-D plane")
        if p < 1 or data.shape[0] % p or data.shape[1] % p:
            raise CubeFormatError(f"frame {data.shape} not divisible by pattern size {p}")
        cells = np.asarray(self.cell_wavelengths_nm, dtype=np.float64)
        if cells.shape != (p, p):
            raise CubeFormatError(f"cell wavelength grid must be {p}x{p}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "pattern_size", p)
        object.__setattr__(self, "cell_wavelengths_nm", cells)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


class Role(enum.Enum):
    SPATIAL = "SpatialAggregated"
    SPECTRAL = "SpectralAggregated"


@dataclass(frozen=True)
class AggregatedImage:
    data: np.ndarray
    role: Role
    provenance: str = field(default="", compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or data.shape[2] != 3:
            raise CubeFormatError(f"aggregated image must be HxWx3, got {data.shape}")
        if data.dtype != np.uint8:
            if np.any(data < 0) or np.any(data > 255) or np.any(data != np.round(data)):
                raise CubeFormatError("aggregated image samples must be integers in [0, 255]")
            data = data.astype(np.uint8)
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


# ------------------------------------------------------------------ cube files


def _pair(path):
    path = Path(path)
    stem = path.with_suffix("") if path.suffix in (".hdr", ".raw") else path
    return stem.with_suffix(".hdr"), stem.with_suffix(".raw")


def _parse_header(text):
    fields = {}
    for key, val in re.findall(r"^\s*([A-Za-z][A-Za-z ]*?)\s*=\s*(\{[^}]*\}|[^\n]*)", text, flags=re.M):
        fields[key.strip().lower()] = val.strip()
    return fields


def read_cube(path):
    """Load a cube from ``<stem>.hdr`` + ``<stem>.raw``."""
    hdr, raw = _pair(path)
    if not hdr.exists():
        raise FileNotFoundError(hdr)
    if not raw.exists():
        raise FileNotFoundError(raw)
    fields = _parse_header(hdr.read_text())
    try:
        width = int(fields["samples"])
        height = int(fields["lines"])
        bands = int(fields["bands"])
    except (KeyError, ValueError) as exc:
        raise CubeFormatError(f"{hdr}: missing or bad dimension field ({exc})") from None
    interleave = fields.get("interleave", "bsq").lower()
    if interleave != "bsq":
        raise CubeFormatError(f"{hdr}: only bsq interleave is supported, got {interleave}")
    dtype = fields.get("data type", "float32le").lower()
    if dtype not in ("float32le", "4"):
        raise CubeFormatError(f"{hdr}: unsupported data type {dtype}")
    if "wavelength" in fields:
        body = fields["wavelength"].strip("{} ")
        try:
            wl = [float(v) for v in body.split(",") if v.strip()]
        except ValueError:
            raise CubeFormatError(f"{hdr}: unparsable wavelength list") from None
    else:
        wl = default_wavelengths(bands)

    payload = raw.read_bytes()
    expected = width * height * bands * 4
    if len(payload) != expected:
        raise CubeFormatError(
            f"{raw}: payload is {len(payload)} bytes, header implies {expected} "
            f"({height}x{width}x{bands} float32)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(bands, height, width).astype(np.float32)
    return HyperCube(data, wl)


def write_cube(cube, path):
    if not isinstance(cube, HyperCube):
        cube = HyperCube(*cube)
    hdr, raw = _pair(path)
    wl = ", ".join(repr(float(w)) for w in cube.wavelengths_nm)
    text = (
        "ENVI\n"
        f"samples = {cube.width}\n"
        f"lines = {cube.height}\n"
        f"bands = {cube.bands}\n"
        "interleave = bsq\n"
        "data type = float32le\n"
        f"wavelength = {{{wl}}}\n"
    )
    hdr.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(np.ascontiguousarray(cube.data, dtype="<f4").tobytes())
    hdr.write_text(text)


def demosaic(frame):
    """Split a p x p mosaic frame into a p*p band cube by pure subsampling.

    Band k is tile cell (k // p, k % p); bands are then reordered so the
    wavelengths ascend.
    """
    p = frame.pattern_size
    h, w = frame.height // p, frame.width // p
    tiles = frame.data.reshape(h, p, w, p).transpose(1, 3, 0, 2).reshape(p * p, h, w)
    wl = frame.cell_wavelengths_nm.reshape(-1)
    order = np.argsort(wl, kind="stable")
    return HyperCube(tiles[order], wl[order])


# --------------------------------------------------------------------- images


def write_ppm(data, path):
    data = np.ascontiguousarray(data, dtype=np.uint8)
    h, w = data.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path):
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise CubeFormatError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = blob[pos + 1 : pos + 1 + w * h * 3]
    if len(body) != w * h * 3:
        raise CubeFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def render_image(img, path):
    """Write an aggregated image as binary PPM (lossless)."""
    write_ppm(img.data, path)


def write_provenance(img, image_path):
    side = Path(os.fspath(image_path)).with_suffix(".txt")
    side.write_text(f"role = {img.role.value}\n{img.provenance}\n")
    return side
