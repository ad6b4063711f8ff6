"""16-bit PNG serialization for rasters, with key=value sidecar metadata.

Displacement maps quantize symmetrically: png = round((v/scale + 1)/2 * 65535),
where scale is the recorded positive full-scale value. Distance fields map
[0, truncation] linearly onto [0, 65535]. Line masks are 8-bit 0/255 PNGs.
The sidecar lives next to the image at "<png path>.meta".
"""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .raster import DisplacementMap, DistanceField, truncation_for_width
from .lines import LineMap


def _write_u16_png(path: str, arr: np.ndarray) -> None:
    img = Image.fromarray(arr.astype("<u2"))
    img.save(path, format="PNG")


def _read_u16_png(path: str) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.dtype not in (np.uint16, np.int32):
        raise InvalidInputError(f"{path}: expected 16-bit grayscale PNG, got dtype {arr.dtype}")
    arr = arr.astype(np.int64)
    if arr.min() < 0 or arr.max() > 65535:
        raise InvalidInputError(f"{path}: sample values outside 16-bit range")
    return arr.astype(np.float64)


def write_meta(path: str, entries: dict) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_meta(path: str) -> dict:
    entries = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidInputError(f"{path}: malformed metadata line {line!r}")
            key, value = line.split("=", 1)
            entries[key] = value
    return entries


def _meta_path(png_path) -> str:
    return os.fspath(png_path) + ".meta"


def save_displacement(path: str, disp: DisplacementMap, scale: float | None = None) -> float:
    """Write a displacement PNG plus sidecar; returns the scale used.

    Default scale is max|value| (1.0 for an all-zero map) so quantization uses
    the full 16-bit range deterministically.
    """
    values = disp.values.astype(np.float64)
    if scale is None:
        peak = float(np.abs(values).max())
        scale = peak if peak > 0 else 1.0
    if not (scale > 0):
        raise InvalidInputError(f"scale must be positive, got {scale}")
    ratio = values / scale
    if ratio.min() < -1.0 - 1e-9 or ratio.max() > 1.0 + 1e-9:
        raise InvalidInputError("scale too small for map values")
    q = np.round((np.clip(ratio, -1.0, 1.0) + 1.0) / 2.0 * 65535.0)
    _write_u16_png(path, q)
    write_meta(_meta_path(path), {"kind": "disp", "width": disp.width, "scale": repr(scale)})
    return scale


def load_displacement(path: str) -> DisplacementMap:
    meta = read_meta(_meta_path(path))
    if meta.get("kind") != "disp":
        raise InvalidInputError(f"{path}: sidecar kind {meta.get('kind')!r}, expected 'disp'")
    scale = float(meta["scale"])
    q = _read_u16_png(path)
    values = (q / 65535.0 * 2.0 - 1.0) * scale
    return DisplacementMap(values)


def save_distance(path: str, df: DistanceField) -> None:
    values = df.values.astype(np.float64)
    q = np.round(values / df.truncation * 65535.0)
    _write_u16_png(path, q)
    write_meta(
        _meta_path(path),
        {"kind": "df", "width": df.width, "scale": repr(float(df.truncation))},
    )


def load_distance(path: str) -> DistanceField:
    meta = read_meta(_meta_path(path))
    if meta.get("kind") != "df":
        raise InvalidInputError(f"{path}: sidecar kind {meta.get('kind')!r}, expected 'df'")
    trunc = float(meta["scale"])
    q = _read_u16_png(path)
    values = q / 65535.0 * trunc
    width = values.shape[0]
    expected = truncation_for_width(width)
    if abs(trunc - expected) > 1e-9 * max(trunc, expected):
        raise InvalidInputError(
            f"{path}: truncation {trunc} does not match 5% of width {width}"
        )
    return DistanceField(values, truncation=trunc)


def save_linemap(path: str, lines: LineMap) -> None:
    img = Image.fromarray((lines.mask * 255).astype(np.uint8), mode="L")
    img.save(path, format="PNG")


def load_linemap(path: str) -> LineMap:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return LineMap((arr >= 128).astype(np.uint8))


def save_preview(path: str, gray: np.ndarray) -> None:
    if gray.dtype != np.uint8:
        raise InvalidInputError("preview must be uint8")
    Image.fromarray(gray, mode="L").save(path, format="PNG")


def exists_with_meta(path: str) -> bool:
    return os.path.exists(path) and os.path.exists(_meta_path(path))
