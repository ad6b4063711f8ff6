"""Core raster types: displacement maps, truncated distance fields, joint samples.

Displacement values are signed offsets along the surface normal in mesh units
(positive = outward). Distance fields hold unsigned Euclidean distances to the
nearest wrinkle-line pixel, truncated at 5% of the map width; both live on the
same square UV grid, indexed [row, col] with row 0 at v=0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import filters
from .errors import InvalidInputError

VALID_WIDTHS = (64, 128, 256)

# Fraction of the map width at which distance fields are truncated.
TRUNCATION_FRACTION = 0.05


def truncation_for_width(width: int) -> float:
    return TRUNCATION_FRACTION * width


def _frozen(values: np.ndarray, dtype=np.float32) -> np.ndarray:
    arr = np.ascontiguousarray(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_square(values: np.ndarray, what: str) -> None:
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise InvalidInputError(f"{what} must be a square 2-D array, got shape {values.shape}")
    if values.shape[0] not in VALID_WIDTHS:
        raise InvalidInputError(f"{what} width must be one of {VALID_WIDTHS}, got {values.shape[0]}")
    if not np.all(np.isfinite(values)):
        raise InvalidInputError(f"{what} contains non-finite values")


@dataclass(frozen=True, eq=False)
class DisplacementMap:
    """Square float32 raster of signed normal offsets."""

    values: np.ndarray

    def __post_init__(self):
        _check_square(np.asarray(self.values), "DisplacementMap")
        object.__setattr__(self, "values", _frozen(self.values))

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Truncated unsigned distance raster, pixel units.

    Fields produced by the pipeline carry truncation == 0.05 * width; scaled
    copies (model-internal normalization) may carry a rescaled truncation.
    """

    values: np.ndarray
    truncation: float = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        vals = np.asarray(self.values)
        _check_square(vals, "DistanceField")
        trunc = self.truncation
        if trunc is None:
            trunc = truncation_for_width(vals.shape[0])
        if not (trunc > 0):
            raise InvalidInputError(f"truncation must be positive, got {trunc}")
        eps = 1e-4 * trunc
        if vals.min() < -eps or vals.max() > trunc + eps:
            raise InvalidInputError(
                f"DistanceField values must lie in [0, {trunc}], got "
                f"[{vals.min()}, {vals.max()}]"
            )
        # clip in float32 space against the largest representable value that
        # does not exceed the float64 truncation, so stored maxima never
        # round above the cap
        t32 = np.float32(trunc)
        if float(t32) > trunc:
            t32 = np.nextafter(t32, np.float32(0))
        clipped = np.clip(np.asarray(vals, dtype=np.float32), np.float32(0), t32)
        object.__setattr__(self, "values", _frozen(clipped))
        object.__setattr__(self, "truncation", float(trunc))

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class JointSample:
    """Displacement map paired with the distance field of its wrinkle lines."""

    disp: DisplacementMap
    df: DistanceField

    def __post_init__(self):
        if self.disp.width != self.df.width:
            raise InvalidInputError(
                f"disp width {self.disp.width} != df width {self.df.width}"
            )

    @property
    def width(self) -> int:
        return self.disp.width


def high_pass(disp: DisplacementMap, sigma: float | None = None) -> DisplacementMap:
    """Remove low-frequency shape: disp minus its Gaussian blur, re-centered.

    sigma defaults to width/32. The residual mean is subtracted so the output
    is exactly zero-mean regardless of boundary effects of the reflect-padded
    blur.
    """
    if sigma is None:
        sigma = disp.width / 32.0
    kernel = filters.gaussian_kernel(sigma)
    if kernel.shape[0] // 2 > disp.width - 1:
        raise InvalidInputError(f"sigma {sigma} too large for width {disp.width}")
    x = disp.values.astype(np.float64)
    residual = x - filters.blur2(x, kernel)
    residual -= residual.mean()
    return DisplacementMap(residual)


def normalize_joint(sample: JointSample, disp_std: float, df_std: float) -> JointSample:
    """Scale both channels by 1/std. Argmin/argmax pixel locations are preserved."""
    if not (disp_std > 0 and df_std > 0):
        raise InvalidInputError("normalization stds must be positive")
    disp = DisplacementMap(sample.disp.values.astype(np.float64) / disp_std)
    df = DistanceField(
        sample.df.values.astype(np.float64) / df_std,
        truncation=sample.df.truncation / df_std,
    )
    return JointSample(disp, df)


def denormalize_joint(sample: JointSample, disp_std: float, df_std: float) -> JointSample:
    if not (disp_std > 0 and df_std > 0):
        raise InvalidInputError("normalization stds must be positive")
    disp = DisplacementMap(sample.disp.values.astype(np.float64) * disp_std)
    df = DistanceField(
        sample.df.values.astype(np.float64) * df_std,
        truncation=sample.df.truncation * df_std,
    )
    return JointSample(disp, df)


def shaded_preview(
    disp: DisplacementMap,
    light_dir: tuple[float, float, float] = (0.0, 0.0, 1.0),
    gain: float = 1.0,
) -> np.ndarray:
    """Lambert-shaded uint8 rendering of the height field.

    light_dir must be unit length. A flat zero map under the default head-on
    light renders as full white (255).
    """
    light = np.asarray(light_dir, dtype=np.float64)
    if abs(np.linalg.norm(light) - 1.0) > 1e-6:
        raise InvalidInputError(f"light_dir must be unit length, got norm {np.linalg.norm(light)}")
    x = disp.values.astype(np.float64) * gain
    gx = filters.grad_x(x)
    gy = filters.grad_y(x)
    nz = np.ones_like(x)
    norm = np.sqrt(gx * gx + gy * gy + 1.0)
    lambert = (-gx * light[0] - gy * light[1] + nz * light[2]) / norm
    return np.clip(np.round(255.0 * np.clip(lambert, 0.0, 1.0)), 0, 255).astype(np.uint8)
