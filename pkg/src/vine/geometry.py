"""Perturbed homographies and differentiable bilinear warping.

Homographies act on normalized image coordinates: the unit square
[0,1] x [0,1] covers the image, with the center of pixel (row i, col j)
at (x, y) = ((j + 0.5) / W, (i + 0.5) / H).  Warping is inverse
(each output pixel samples the input at h^-1 of its own coordinate),
which avoids the holes of forward splatting; out-of-bounds samples read
as zero, matching mask semantics where absent foreground is 0.

All functions here are pure and safe to call from parallel episode
workers, each with its own seeded random source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as vt
from .tensor import Tensor

_UNIT_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


class DegenerateViewError(RuntimeError):
    """Raised when corner perturbation keeps producing unusable quads."""


@dataclass(frozen=True)
class Homography:
    """A 3x3 projective map in normalized coordinates.

    ``matrix[2][2]`` is 1 after normalization and the matrix is
    invertible (|det| > 1e-12).  ``delta_max`` records the
    corner-perturbation magnitude used to generate it.
    """

    matrix: np.ndarray
    delta_max: float = 0.0

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is not invertible")
        if abs(m[2, 2]) <= 1e-12:
            raise ValueError("homography cannot be normalized to matrix[2][2] == 1")
        object.__setattr__(self, "matrix", m / m[2, 2])

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(3)))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map an N-by-2 array of (x, y) points through the homography."""
        pts = np.asarray(pts, dtype=np.float64)
        ph = np.concatenate([pts, np.ones((pts.shape[0], 1))], axis=1)
        q = ph @ self.matrix.T
        return q[:, :2] / q[:, 2:3]

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix), self.delta_max)


def identity_homography() -> Homography:
    return Homography(np.eye(3))


def _solve_dlt(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i in range(4):
        x, y = src[i]
        u, v = dst[i]
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    h = np.linalg.solve(a, b)
    return np.concatenate([h, [1.0]]).reshape(3, 3)


def solve_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Direct linear transform for the exact map of four correspondences.

    Solves the 8x8 linear system for the entries of H with H[2,2] fixed
    to 1, so that ``dst_i ~ H @ src_i`` in homogeneous coordinates.
    """
    return Homography(_solve_dlt(src, dst))


def _quad_is_convex(quad: np.ndarray) -> bool:
    # strictly positive cross products at all four corners (CCW order)
    for i in range(4):
        p, q, r = quad[i], quad[(i + 1) % 4], quad[(i + 2) % 4]
        cross = (q[0] - p[0]) * (r[1] - q[1]) - (q[1] - p[1]) * (r[0] - q[0])
        if cross <= 1e-9:
            return False
    return True


def perturb_corners(delta_max: float, rng: np.random.Generator) -> Homography:
    """Homography displacing each unit-square corner by U(-d, d)^2 offsets.

    Returns the exact projective map from the original corners to the
    displaced ones, normalized so matrix[2][2] == 1.  With delta_max == 0
    the displaced corners equal the originals and the result is exactly
    the identity matrix.  Degenerate displaced quadrilaterals (non-convex
    or collinear corners) are redrawn up to 8 times.
    """
    if not 0.0 <= delta_max < 0.25:
        raise ValueError(f"delta_max must be in [0, 0.25), got {delta_max}")
    for _ in range(8):
        offsets = rng.uniform(-delta_max, delta_max, size=(4, 2))
        displaced = _UNIT_CORNERS + offsets
        if np.array_equal(displaced, _UNIT_CORNERS):
            return Homography(np.eye(3), delta_max)
        if not _quad_is_convex(displaced):
            continue
        h = _solve_dlt(_UNIT_CORNERS, displaced)
        if abs(np.linalg.det(h)) > 1e-12:
            return Homography(h, delta_max)
    raise DegenerateViewError(
        f"no valid quad after 8 draws at delta_max={delta_max}")


def _pixel_grid_source(h: Homography, height: int, width: int):
    """Source pixel coordinates for inverse warping an H-by-W grid."""
    inv = np.linalg.inv(h.matrix)
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    x = (cols.reshape(-1) + 0.5) / width
    y = (rows.reshape(-1) + 0.5) / height
    q = inv @ np.stack([x, y, np.ones_like(x)])
    sx = q[0] / q[2] * width - 0.5
    sy = q[1] / q[2] * height - 0.5
    return sy, sx


def _bilinear_taps(sy: np.ndarray, sx: np.ndarray, height: int, width: int):
    """Corner indices, weights and validity for bilinear sampling."""
    y0 = np.floor(sy).astype(np.intp)
    x0 = np.floor(sx).astype(np.intp)
    wy = sy - y0
    wx = sx - x0
    taps = []
    for dy, dx, w in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                      (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < height) & (xx >= 0) & (xx < width)
        taps.append((np.clip(yy, 0, height - 1), np.clip(xx, 0, width - 1),
                     np.where(valid, w, 0.0)))
    return taps


def warp(image: Tensor, h: Homography) -> Tensor:
    """Inverse-warp a C-by-H-by-W image under ``h`` with bilinear sampling.

    Differentiable with respect to the image values (the warp is a fixed
    sparse linear map once ``h`` is known).  The identity homography
    returns the input bit-exactly.
    """
    if image.data.ndim != 3:
        raise vt.ShapeError(f"warp: expected C×H×W, got {image.shape}")
    c, height, width = image.shape
    if height < 2 or width < 2:
        raise vt.ShapeError(f"warp: image too small, got {image.shape}")
    if h.is_identity():
        return vt.from_op(image.data.copy(), (image,), lambda g: (g,))
    sy, sx = _pixel_grid_source(h, height, width)
    taps = _bilinear_taps(sy, sx, height, width)
    flat = image.data.reshape(c, -1)
    out = np.zeros((c, height * width))
    for yy, xx, w in taps:
        out += flat[:, yy * width + xx] * w

    def bwd(g):
        gf = g.reshape(c, -1)
        gx = np.zeros((c, height * width))
        for yy, xx, w in taps:
            np.add.at(gx.T, yy * width + xx, (gf * w).T)
        return (gx.reshape(c, height, width),)

    return vt.from_op(out.reshape(c, height, width), (image,), bwd)


def warp_mask(mask: np.ndarray, h: Homography) -> np.ndarray:
    """Warp a binary H-by-W mask and re-binarize at 0.5.

    Thresholding restores binarity lost to bilinear blending at the
    boundary.  Masks carry no gradient, so this is plain array math.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2:
        raise vt.ShapeError(f"warp_mask: expected H×W, got {mask.shape}")
    if h.is_identity():
        return mask.copy()
    warped = warp(Tensor(mask[None]), h)
    return (warped.data[0] >= 0.5).astype(np.float64)


def _interp_matrix(n_out: int, n_in: int, factor: int) -> np.ndarray:
    """Row-stochastic 1-D bilinear interpolation matrix (n_out x n_in)."""
    s = np.clip((np.arange(n_out) + 0.5) / factor - 0.5, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(s).astype(np.intp), n_in - 2)
    w = s - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] = 1.0 - w
    m[np.arange(n_out), i0 + 1] += w
    return m


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinearly upsample a C-by-H-by-W map by an integer factor.

    Separable: rows and columns interpolate independently.  Source
    coordinates are clamped at the image border (no zero fringe), so a
    constant map upsamples to the same constant.
    """
    if x.data.ndim != 3:
        raise vt.ShapeError(f"upsample_bilinear: expected C×H×W, got {x.shape}")
    if factor == 1:
        return vt.from_op(x.data.copy(), (x,), lambda g: (g,))
    c, height, width = x.shape
    ry = _interp_matrix(height * factor, height, factor)
    rx = _interp_matrix(width * factor, width, factor)
    tmp = np.tensordot(x.data, rx, axes=(2, 1))          # C x H x Wo
    out = np.tensordot(tmp, ry, axes=(1, 1)).transpose(0, 2, 1)

    def bwd(g):
        t = np.tensordot(g, rx, axes=(2, 0))             # C x Ho x W
        return (np.tensordot(t, ry, axes=(1, 0)).transpose(0, 2, 1),)

    return vt.from_op(np.ascontiguousarray(out), (x,), bwd)
