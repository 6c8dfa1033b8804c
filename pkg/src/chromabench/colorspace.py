"""Color-space conversions among RGB, YUV, XYZ and Lab with analytic
Jacobians, gamut clipping, luminance extraction and grayscale detection.

Conversions are exact matrix/piecewise maps evaluated in float64; the
matrix inverses are computed once at import time.  Nothing in here clips:
out-of-cube values survive a conversion untouched so that losses can be
taken either before or after the explicit :func:`clip_rgb`.

A parallel set of ``*_t`` functions builds the same maps out of
differentiable tensor ops for use inside a training graph.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NumericalError

logger = logging.getLogger("chromabench.colorspace")


class Space(str, Enum):
    RGB = "rgb"
    YUV = "yuv"
    LAB = "lab"
    XYZ = "xyz"
    GRAY = "gray"


_CHANNELS = {Space.RGB: 3, Space.YUV: 3, Space.LAB: 3, Space.XYZ: 3, Space.GRAY: 1}


@dataclass(frozen=True)
class ColorImage:
    """H x W x C planar image tagged with its color space.

    Values are unclipped reals; for RGB the nominal cube is [0, 1] but
    out-of-cube values are representable (pre-clip state).
    """

    space: Space
    planes: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.planes)
        if p.ndim != 3:
            raise DimensionError(f"ColorImage: planes must be HxWxC, got {p.shape}")
        want = _CHANNELS[self.space]
        if p.shape[2] != want:
            raise DimensionError(
                f"ColorImage: {self.space.value} needs {want} channels, got {p.shape[2]}")
        object.__setattr__(self, "planes", p)

    @property
    def height(self) -> int:
        return self.planes.shape[0]

    @property
    def width(self) -> int:
        return self.planes.shape[1]


@dataclass(frozen=True)
class WhitePoint:
    xn: float
    yn: float
    zn: float

    def __post_init__(self):
        if not (self.xn > 0 and self.yn > 0 and self.zn > 0):
            raise ContractError("WhitePoint components must be strictly positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.xn, self.yn, self.zn], dtype=np.float64)


# conversion matrices, printed coefficients kept verbatim
YUV_MATRIX = np.array([
    [0.299, 0.587, 0.114],
    [-0.14713, -0.28886, 0.436],
    [0.615, -0.51498, -0.10001],
], dtype=np.float64)

XYZ_MATRIX = np.array([
    [2.769, 1.7518, 0.13],
    [1.0, 4.5907, 0.0601],
    [0.0, 0.0565, 5.5943],
], dtype=np.float64)

YUV_INV = np.linalg.inv(YUV_MATRIX)
XYZ_INV = np.linalg.inv(XYZ_MATRIX)

# white reference: XYZ of RGB white (1,1,1) = row sums of the matrix
WHITE_POINT = WhitePoint(*XYZ_MATRIX.sum(axis=1))

LAB_DELTA = 6.0 / 29.0
LAB_DELTA3 = LAB_DELTA ** 3
_LAB_LOW_SLOPE = (29.0 / 6.0) ** 2 / 3.0   # slope of f below the threshold
_LAB_INV_LOW_SLOPE = 3.0 * LAB_DELTA ** 2  # slope of f^-1 below 6/29
_LAB_OFFSET = 4.0 / 29.0

# nominal channel extents, used by the pipeline to normalize chrominance
U_MAX = 0.436
V_MAX = 0.615
AB_MAX = 128.0
L_MAX = 100.0

GRAYSCALE_DEFAULT_TOL = 2.0 / 255.0


def _require_space(img: ColorImage, space: Space, op: str) -> None:
    if img.space is not space:
        raise ContractError(f"{op}: expected a {space.value} image, got {img.space.value}")


def _dot_row(r, g, b, row) -> np.ndarray:
    # one fixed arithmetic order so luminance() and rgb_to_yuv() agree bitwise
    return r * row[0] + g * row[1] + b * row[2]


def luminance(img: ColorImage) -> ColorImage:
    """Perceptual luminance Y = 0.299 R + 0.587 G + 0.114 B."""
    _require_space(img, Space.RGB, "luminance")
    r, g, b = img.planes[..., 0], img.planes[..., 1], img.planes[..., 2]
    y = _dot_row(r, g, b, YUV_MATRIX[0])
    return ColorImage(Space.GRAY, y[..., None])


def rgb_to_yuv(img: ColorImage) -> ColorImage:
    _require_space(img, Space.RGB, "rgb_to_yuv")
    r, g, b = img.planes[..., 0], img.planes[..., 1], img.planes[..., 2]
    out = np.stack([_dot_row(r, g, b, YUV_MATRIX[i]) for i in range(3)], axis=-1)
    return ColorImage(Space.YUV, out)


def yuv_to_rgb(img: ColorImage) -> ColorImage:
    _require_space(img, Space.YUV, "yuv_to_rgb")
    return ColorImage(Space.RGB, img.planes @ YUV_INV.T)


def rgb_to_xyz(img: ColorImage) -> ColorImage:
    _require_space(img, Space.RGB, "rgb_to_xyz")
    r, g, b = img.planes[..., 0], img.planes[..., 1], img.planes[..., 2]
    out = np.stack([_dot_row(r, g, b, XYZ_MATRIX[i]) for i in range(3)], axis=-1)
    return ColorImage(Space.XYZ, out)


def xyz_to_rgb(img: ColorImage) -> ColorImage:
    _require_space(img, Space.XYZ, "xyz_to_rgb")
    return ColorImage(Space.RGB, img.planes @ XYZ_INV.T)


def lab_f(t):
    """Piecewise Lab companding: cube root above (6/29)^3, affine below."""
    t = np.asarray(t, dtype=np.float64)
    return np.where(t > LAB_DELTA3, np.cbrt(np.maximum(t, 0.0)),
                    _LAB_LOW_SLOPE * t + _LAB_OFFSET)


def lab_f_inv(s):
    """Exact piecewise inverse of :func:`lab_f`."""
    s = np.asarray(s, dtype=np.float64)
    return np.where(s > LAB_DELTA, s ** 3, _LAB_INV_LOW_SLOPE * (s - _LAB_OFFSET))


def xyz_to_lab(img: ColorImage, wp: WhitePoint = WHITE_POINT) -> ColorImage:
    _require_space(img, Space.XYZ, "xyz_to_lab")
    w = wp.as_array()
    fx = lab_f(img.planes[..., 0] / w[0])
    fy = lab_f(img.planes[..., 1] / w[1])
    fz = lab_f(img.planes[..., 2] / w[2])
    lab = np.stack([116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)], axis=-1)
    return ColorImage(Space.LAB, lab)


def lab_to_xyz(img: ColorImage, wp: WhitePoint = WHITE_POINT) -> ColorImage:
    _require_space(img, Space.LAB, "lab_to_xyz")
    w = wp.as_array()
    fy = (img.planes[..., 0] + 16.0) / 116.0
    fx = fy + img.planes[..., 1] / 500.0
    fz = fy - img.planes[..., 2] / 200.0
    xyz = np.stack([w[0] * lab_f_inv(fx), w[1] * lab_f_inv(fy), w[2] * lab_f_inv(fz)],
                   axis=-1)
    return ColorImage(Space.XYZ, xyz)


def rgb_to_lab(img: ColorImage, wp: WhitePoint = WHITE_POINT) -> ColorImage:
    return xyz_to_lab(rgb_to_xyz(img), wp)


def lab_to_rgb(img: ColorImage, wp: WhitePoint = WHITE_POINT) -> ColorImage:
    return xyz_to_rgb(lab_to_xyz(img, wp))


def clip_rgb(img: ColorImage) -> ColorImage:
    """Per-channel clamp into [0, 1]; idempotent."""
    _require_space(img, Space.RGB, "clip_rgb")
    return ColorImage(Space.RGB, np.clip(img.planes, 0.0, 1.0))


def is_grayscale(img: ColorImage, tol: float = GRAYSCALE_DEFAULT_TOL) -> bool:
    """True iff every pixel's channel spread is <= tol (boundary inclusive)."""
    _require_space(img, Space.RGB, "is_grayscale")
    spread = img.planes.max(axis=2) - img.planes.min(axis=2)
    return bool(spread.max() <= tol)


def assemble(lum: ColorImage, chroma: np.ndarray, space: Space,
             wp: WhitePoint = WHITE_POINT) -> ColorImage:
    """Stack a luminance plane with chrominance planes, convert to RGB, clip.

    ``lum`` is in [0, 1]; for Lab it is interpreted as L/100 and rescaled
    linearly.  ``chroma`` holds the raw (un-normalized) chrominance values
    in the target space's units, shape H x W x 2.
    """
    _require_space(lum, Space.GRAY, "assemble")
    chroma = np.asarray(chroma, dtype=np.float64)
    if chroma.ndim != 3 or chroma.shape[2] != 2:
        raise DimensionError(f"assemble: chroma must be HxWx2, got {chroma.shape}")
    if chroma.shape[:2] != lum.planes.shape[:2]:
        raise DimensionError(
            f"assemble: chroma {chroma.shape[:2]} does not match luminance "
            f"{lum.planes.shape[:2]}")
    plane = lum.planes[..., 0]
    if space is Space.YUV:
        stacked = np.stack([plane, chroma[..., 0], chroma[..., 1]], axis=-1)
        rgb = yuv_to_rgb(ColorImage(Space.YUV, stacked))
    elif space is Space.LAB:
        stacked = np.stack([plane * L_MAX, chroma[..., 0], chroma[..., 1]], axis=-1)
        rgb = lab_to_rgb(ColorImage(Space.LAB, stacked), wp)
    else:
        raise ContractError(f"assemble: space must be YUV or Lab, got {space.value}")
    return clip_rgb(rgb)


# ---------------------------------------------------------------------------
# analytic Jacobians
# ---------------------------------------------------------------------------


def _lab_f_prime(t: float) -> float:
    if t > LAB_DELTA3:
        return (1.0 / 3.0) * t ** (-2.0 / 3.0)
    return _LAB_LOW_SLOPE


def _lab_f_inv_prime(s: float) -> float:
    if s > LAB_DELTA:
        return 3.0 * s * s
    return _LAB_INV_LOW_SLOPE


def _jac_xyz_to_lab(xyz: np.ndarray, wp: WhitePoint) -> np.ndarray:
    w = wp.as_array()
    t = xyz / w
    if np.any(np.abs(t - LAB_DELTA3) < 1e-9):
        raise NumericalError("jacobian: point at the piecewise-branch threshold")
    fpx, fpy, fpz = (_lab_f_prime(ti) / wi for ti, wi in zip(t, w))
    return np.array([
        [0.0, 116.0 * fpy, 0.0],
        [500.0 * fpx, -500.0 * fpy, 0.0],
        [0.0, 200.0 * fpy, -200.0 * fpz],
    ])


def _jac_lab_to_xyz(lab: np.ndarray, wp: WhitePoint) -> np.ndarray:
    w = wp.as_array()
    fy = (lab[0] + 16.0) / 116.0
    fx = fy + lab[1] / 500.0
    fz = fy - lab[2] / 200.0
    if np.any(np.abs(np.array([fx, fy, fz]) - LAB_DELTA) < 1e-9):
        raise NumericalError("jacobian: point at the piecewise-branch threshold")
    gx, gy, gz = (_lab_f_inv_prime(s) for s in (fx, fy, fz))
    return np.array([
        [w[0] * gx / 116.0, w[0] * gx / 500.0, 0.0],
        [w[1] * gy / 116.0, 0.0, 0.0],
        [w[2] * gz / 116.0, 0.0, -w[2] * gz / 200.0],
    ])


def _convert_vec(point: np.ndarray, src: Space, dst: Space, wp: WhitePoint) -> np.ndarray:
    img = ColorImage(src, point.reshape(1, 1, 3))
    out = convert(img, dst, wp)
    return out.planes.reshape(3)


# single conversion steps along the rgb <-> xyz <-> lab / rgb <-> yuv routes
_STEPS = {
    (Space.RGB, Space.YUV): lambda p, wp: YUV_MATRIX,
    (Space.YUV, Space.RGB): lambda p, wp: YUV_INV,
    (Space.RGB, Space.XYZ): lambda p, wp: XYZ_MATRIX,
    (Space.XYZ, Space.RGB): lambda p, wp: XYZ_INV,
    (Space.XYZ, Space.LAB): _jac_xyz_to_lab,
    (Space.LAB, Space.XYZ): _jac_lab_to_xyz,
}

_ROUTES = {
    (Space.RGB, Space.YUV): [Space.YUV],
    (Space.YUV, Space.RGB): [Space.RGB],
    (Space.RGB, Space.XYZ): [Space.XYZ],
    (Space.XYZ, Space.RGB): [Space.RGB],
    (Space.XYZ, Space.LAB): [Space.LAB],
    (Space.LAB, Space.XYZ): [Space.XYZ],
    (Space.RGB, Space.LAB): [Space.XYZ, Space.LAB],
    (Space.LAB, Space.RGB): [Space.XYZ, Space.RGB],
    (Space.YUV, Space.XYZ): [Space.RGB, Space.XYZ],
    (Space.XYZ, Space.YUV): [Space.RGB, Space.YUV],
    (Space.YUV, Space.LAB): [Space.RGB, Space.XYZ, Space.LAB],
    (Space.LAB, Space.YUV): [Space.XYZ, Space.RGB, Space.YUV],
}


def convert(img: ColorImage, dst: Space, wp: WhitePoint = WHITE_POINT) -> ColorImage:
    """Convert between any two of RGB, YUV, XYZ, Lab (no clipping)."""
    if img.space is dst:
        return img
    if img.space is Space.GRAY or dst is Space.GRAY:
        raise ContractError("convert: gray has no inverse conversion; use luminance()")
    route = _ROUTES[(img.space, dst)]
    cur = img
    for hop in route:
        fn = {
            (Space.RGB, Space.YUV): rgb_to_yuv,
            (Space.YUV, Space.RGB): yuv_to_rgb,
            (Space.RGB, Space.XYZ): rgb_to_xyz,
            (Space.XYZ, Space.RGB): xyz_to_rgb,
            (Space.XYZ, Space.LAB): lambda im: xyz_to_lab(im, wp),
            (Space.LAB, Space.XYZ): lambda im: lab_to_xyz(im, wp),
        }[(cur.space, hop)]
        cur = fn(cur)
    return cur


def jacobian(src: Space, dst: Space, point, wp: WhitePoint = WHITE_POINT) -> np.ndarray:
    """3x3 analytic Jacobian of the src -> dst conversion at ``point``.

    ``point`` is a 3-vector in the source space.  Raises NumericalError if
    a Lab branch threshold is hit (tolerance 1e-9).
    """
    point = np.asarray(point, dtype=np.float64).reshape(3)
    if src is dst:
        return np.eye(3)
    route = _ROUTES.get((src, dst))
    if route is None:
        raise ContractError(f"jacobian: unsupported pair {src.value} -> {dst.value}")
    jac = np.eye(3)
    cur_space, cur_point = src, point
    for hop in route:
        jac = _STEPS[(cur_space, hop)](cur_point, wp) @ jac
        cur_point = _convert_vec(cur_point, cur_space, hop, wp)
        cur_space = hop
    return jac


# ---------------------------------------------------------------------------
# differentiable (graph) conversions
# ---------------------------------------------------------------------------

# maps (L, a, b) -> the three companded coordinates (fx, fy, fz)
_LAB_STAGE_MATRIX = np.array([
    [1.0 / 116.0, 1.0 / 500.0, 0.0],
    [1.0 / 116.0, 0.0, 0.0],
    [1.0 / 116.0, 0.0, -1.0 / 200.0],
])
_LAB_STAGE_OFFSET = np.array([16.0 / 116.0] * 3)


def lab_f_inv_t(s: T.Tensor) -> T.Tensor:
    """Differentiable piecewise inverse companding (cube above 6/29)."""
    above = T.Tensor((s.data > LAB_DELTA).astype(s.data.dtype))
    below = T.Tensor((s.data <= LAB_DELTA).astype(s.data.dtype))
    cube = T.mul(T.mul(s, s), s)
    affine = T.mul_scalar(T.add_scalar(s, -_LAB_OFFSET), _LAB_INV_LOW_SLOPE)
    return T.add(T.mul(above, cube), T.mul(below, affine))


def lab_to_rgb_t(lab: T.Tensor, wp: WhitePoint = WHITE_POINT) -> T.Tensor:
    """Differentiable Lab -> RGB on an NCHW tensor with channels (L, a, b)."""
    s = T.channel_linear(lab, _LAB_STAGE_MATRIX, _LAB_STAGE_OFFSET)
    fi = lab_f_inv_t(s)
    xyz = T.scale_channels(fi, wp.as_array())
    return T.channel_linear(xyz, XYZ_INV)


def yuv_to_rgb_t(yuv: T.Tensor) -> T.Tensor:
    """Differentiable YUV -> RGB on an NCHW tensor."""
    return T.channel_linear(yuv, YUV_INV)


def constants_text() -> str:
    """Full-precision dump of the conversion constants for audit."""
    def fmt(m):
        return "\n".join("  " + " ".join(repr(float(x)) for x in row) for row in m)

    wp = WHITE_POINT.as_array()
    return "\n".join([
        "rgb->yuv matrix:",
        fmt(YUV_MATRIX),
        "yuv->rgb matrix (inverse):",
        fmt(YUV_INV),
        "rgb->xyz matrix:",
        fmt(XYZ_MATRIX),
        "xyz->rgb matrix (inverse):",
        fmt(XYZ_INV),
        f"white point: {wp[0]!r} {wp[1]!r} {wp[2]!r}",
        f"lab threshold: t > {LAB_DELTA3!r} (f), s > {LAB_DELTA!r} (f inverse)",
        f"channel extents: U {U_MAX!r}, V {V_MAX!r}, a/b {AB_MAX!r}, L {L_MAX!r}",
    ])
