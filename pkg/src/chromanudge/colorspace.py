"""Differentiable conversions between sRGB, linear RGB and CIE 1976 Lab.

Every conversion comes in two flavours: an array kernel operating on
``(..., 3)`` float64 arrays, and a tagged wrapper on :class:`PixelImage` /
:class:`ColorTriple` that checks the encoding before converting. The
array kernels are what the loss and gradient code uses internally.

Lab is computed against the D65 reference white with the 2 degree
observer, which is the white point sRGB itself is defined against.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# IEC 61966-2-1 transfer function
SRGB_BREAK = 0.04045
LINEAR_BREAK = 0.0031308
SRGB_SLOPE = 12.92
SRGB_GAMMA = 2.4
SRGB_OFFSET = 0.055

# linear sRGB -> XYZ, D65
RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
D65_WHITE = np.array([0.95047, 1.00000, 1.08883])

LAB_DELTA = 6.0 / 29.0
LAB_BREAK = LAB_DELTA**3
LAB_LINEAR_SLOPE = 1.0 / (3.0 * LAB_DELTA**2)
LAB_LINEAR_OFFSET = 4.0 / 29.0


class Encoding(str, enum.Enum):
    SRGB = "srgb"
    LINEAR_RGB = "linear_rgb"
    LAB = "lab"


class EncodingError(ValueError):
    """Raised when a tagged color is handed to a conversion for another encoding."""


@dataclass(frozen=True)
class ColorTriple:
    """A single color with an explicit encoding tag."""

    c0: float
    c1: float
    c2: float
    encoding: Encoding = Encoding.SRGB

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoding", Encoding(self.encoding))
        for v in (self.c0, self.c1, self.c2):
            if not np.isfinite(v):
                raise ValueError(f"non-finite color component in {self!r}")

    @classmethod
    def from_array(cls, values, encoding: Encoding) -> "ColorTriple":
        a, b, c = (float(v) for v in np.asarray(values, dtype=np.float64).reshape(3))
        return cls(a, b, c, Encoding(encoding))

    def as_array(self) -> np.ndarray:
        return np.array([self.c0, self.c1, self.c2], dtype=np.float64)

    def to(self, encoding: Encoding) -> "ColorTriple":
        """Convert through the image path on a 1x1 image."""
        img = PixelImage(self.as_array().reshape(1, 1, 3), self.encoding)
        return ColorTriple.from_array(convert(img, encoding).data[0, 0], encoding)

    def __iter__(self):
        return iter((self.c0, self.c1, self.c2))


@dataclass(frozen=True)
class PixelImage:
    """An ``H x W x 3`` float64 image tagged with its color encoding."""

    data: np.ndarray
    encoding: Encoding = Encoding.SRGB

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"expected an H x W x 3 image, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "encoding", Encoding(self.encoding))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def require(self, encoding: Encoding) -> np.ndarray:
        if self.encoding != encoding:
            raise EncodingError(f"expected {encoding.value} image, got {self.encoding.value}")
        return self.data


@dataclass(frozen=True)
class ConversionJacobian:
    """Per-pixel 3x3 Jacobians ``d out_c / d in_k`` plus a non-smooth flag."""

    matrices: np.ndarray
    flagged: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.flagged is None:
            object.__setattr__(self, "flagged", np.zeros(self.matrices.shape[:-2], dtype=bool))


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise ValueError(f"{what}: {bad} non-finite entries in input")


# ---------------------------------------------------------------------------
# array kernels


def srgb_to_linear_array(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    # the power branch is evaluated on a safe argument so negative inputs
    # on the linear branch don't produce warnings
    safe = np.maximum(c, SRGB_BREAK)
    return np.where(
        c <= SRGB_BREAK,
        c / SRGB_SLOPE,
        ((safe + SRGB_OFFSET) / (1.0 + SRGB_OFFSET)) ** SRGB_GAMMA,
    )


def srgb_to_linear_derivative(c: np.ndarray) -> np.ndarray:
    """Elementwise derivative of the sRGB decoding curve (active branch)."""
    c = np.asarray(c, dtype=np.float64)
    safe = np.maximum(c, SRGB_BREAK)
    return np.where(
        c <= SRGB_BREAK,
        1.0 / SRGB_SLOPE,
        SRGB_GAMMA / (1.0 + SRGB_OFFSET) * ((safe + SRGB_OFFSET) / (1.0 + SRGB_OFFSET)) ** (SRGB_GAMMA - 1.0),
    )


def linear_to_srgb_array(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    safe = np.maximum(c, LINEAR_BREAK)
    return np.where(
        c <= LINEAR_BREAK,
        c * SRGB_SLOPE,
        (1.0 + SRGB_OFFSET) * safe ** (1.0 / SRGB_GAMMA) - SRGB_OFFSET,
    )


def lab_f(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.where(t > LAB_BREAK, np.cbrt(t), t * LAB_LINEAR_SLOPE + LAB_LINEAR_OFFSET)


def lab_f_derivative(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    safe = np.maximum(t, LAB_BREAK)
    return np.where(t > LAB_BREAK, 1.0 / (3.0 * np.cbrt(safe) ** 2), LAB_LINEAR_SLOPE)


def linear_to_lab_array(rgb: np.ndarray, white: np.ndarray = D65_WHITE) -> np.ndarray:
    xyz = np.asarray(rgb, dtype=np.float64) @ RGB_TO_XYZ.T
    f = lab_f(xyz / white)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def srgb_to_lab_array(srgb: np.ndarray, white: np.ndarray = D65_WHITE) -> np.ndarray:
    return linear_to_lab_array(srgb_to_linear_array(srgb), white)


# d(L, a, b) / d(fx, fy, fz)
_LAB_FROM_F = np.array(
    [
        [0.0, 116.0, 0.0],
        [500.0, -500.0, 0.0],
        [0.0, 200.0, -200.0],
    ]
)


def srgb_to_lab_jacobian_array(srgb: np.ndarray, white: np.ndarray = D65_WHITE) -> np.ndarray:
    """Jacobian of :func:`srgb_to_lab_array`, shape ``(..., 3, 3)``.

    Entry ``[..., c, k]`` is ``d Lab_c / d sRGB_k``.
    """
    srgb = np.asarray(srgb, dtype=np.float64)
    lin = srgb_to_linear_array(srgb)
    d_lin = srgb_to_linear_derivative(srgb)
    xyz_n = (lin @ RGB_TO_XYZ.T) / white
    d_f = lab_f_derivative(xyz_n)
    # d f_j / d lin_k = f'(xyz_n_j) * M[j, k] / white_j
    d_f_d_lin = d_f[..., :, None] * (RGB_TO_XYZ / white[:, None])
    d_f_d_srgb = d_f_d_lin * d_lin[..., None, :]
    return np.einsum("cj,...jk->...ck", _LAB_FROM_F, d_f_d_srgb)


def clamp_unit_array(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 1.0)


def clamp_unit_grad_mask(x: np.ndarray) -> np.ndarray:
    """Subgradient of the clamp: 1 on [0, 1] (boundary included), 0 outside."""
    x = np.asarray(x)
    return ((x >= 0.0) & (x <= 1.0)).astype(np.float64)


# ---------------------------------------------------------------------------
# tagged wrappers


def srgb_to_linear(img: PixelImage) -> PixelImage:
    data = img.require(Encoding.SRGB)
    _check_finite(data, "srgb_to_linear")
    return PixelImage(srgb_to_linear_array(data), Encoding.LINEAR_RGB)


def linear_to_srgb(img: PixelImage) -> PixelImage:
    data = img.require(Encoding.LINEAR_RGB)
    _check_finite(data, "linear_to_srgb")
    return PixelImage(linear_to_srgb_array(data), Encoding.SRGB)


def srgb_to_lab(img: PixelImage, white: np.ndarray = D65_WHITE) -> PixelImage:
    data = img.require(Encoding.SRGB)
    _check_finite(data, "srgb_to_lab")
    return PixelImage(srgb_to_lab_array(data, white), Encoding.LAB)


def linear_to_lab(img: PixelImage, white: np.ndarray = D65_WHITE) -> PixelImage:
    data = img.require(Encoding.LINEAR_RGB)
    _check_finite(data, "linear_to_lab")
    return PixelImage(linear_to_lab_array(data, white), Encoding.LAB)


def clamp_unit(img: PixelImage) -> PixelImage:
    """Clamp every entry to [0, 1].

    The gradient contract is the one of :func:`clamp_unit_grad_mask`:
    pass-through inside the unit interval (boundaries included), zero outside.
    """
    _check_finite(img.data, "clamp_unit")
    return PixelImage(clamp_unit_array(img.data), img.encoding)


def convert(img: PixelImage, encoding: Encoding) -> PixelImage:
    encoding = Encoding(encoding)
    if img.encoding == encoding:
        return img
    if encoding == Encoding.LAB:
        if img.encoding == Encoding.SRGB:
            return srgb_to_lab(img)
        return linear_to_lab(img)
    if img.encoding == Encoding.SRGB and encoding == Encoding.LINEAR_RGB:
        return srgb_to_linear(img)
    if img.encoding == Encoding.LINEAR_RGB and encoding == Encoding.SRGB:
        return linear_to_srgb(img)
    raise EncodingError(f"no conversion from {img.encoding.value} to {encoding.value}")


def lab_from_latent_decode_jacobian(img: PixelImage, margin: float = 1e-4) -> ConversionJacobian:
    """Per-pixel Jacobian of Lab with respect to the decoded sRGB image.

    Pixels closer than ``margin`` to a non-smooth point (the clamp bounds 0
    and 1, the sRGB curve joint, or the Lab ``f`` joint) are flagged; their
    Jacobian is still the one-sided derivative of whichever branch is active.
    """
    data = img.require(Encoding.SRGB)
    _check_finite(data, "lab_from_latent_decode_jacobian")
    jac = srgb_to_lab_jacobian_array(data)
    near = (np.abs(data) < margin) | (np.abs(data - 1.0) < margin) | (np.abs(data - SRGB_BREAK) < margin)
    xyz_n = (srgb_to_linear_array(data) @ RGB_TO_XYZ.T) / D65_WHITE
    near |= np.abs(xyz_n - LAB_BREAK) < margin
    return ConversionJacobian(jac, near.any(axis=-1))


def srgb_to_linear_jacobian(img: PixelImage) -> ConversionJacobian:
    """Diagonal per-pixel Jacobian of the sRGB decoding curve."""
    data = img.require(Encoding.SRGB)
    d = srgb_to_linear_derivative(data)
    mats = np.zeros(data.shape + (3,))
    idx = np.arange(3)
    mats[..., idx, idx] = d
    near = np.abs(data - SRGB_BREAK) < 1e-12
    return ConversionJacobian(mats, near.any(axis=-1))
