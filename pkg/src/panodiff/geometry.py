"""Equirectangular (ERP) panorama geometry.

Conventions
-----------
* Right-handed frame with ``z`` up. Longitude ``phi`` is measured in the
  ``x``-``y`` plane from ``+x`` towards ``+y``; latitude ``theta`` from the
  equator towards ``+z``.
* Pixel ``(i, j)`` is sampled at its center: ``phi = (j + 0.5) / W * 360 - 180``
  and ``theta = 90 - (i + 0.5) / H * 180`` (degrees).
* Rotations act on direction vectors as ``v' = R @ v`` with
  ``R = R_x(roll) @ R_y(pitch) @ R_z(yaw)``. A yaw-only rotation therefore adds
  ``yaw`` to every longitude, which on the grid is a circular column shift.

Images are plain ``numpy`` arrays shaped ``(C, H, W)``; any trailing ``(H, W)``
array (class-id maps, masks) can be rotated the same way.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence, Union

import numpy as np


class GeometryError(ValueError):
    """Raised on invalid grids, indices or directions."""


@dataclass(frozen=True)
class ErpGrid:
    """A ``H x W`` equirectangular grid with the 2:1 aspect ratio enforced."""

    height: int
    width: int

    def __post_init__(self):
        if int(self.height) != self.height or self.height < 1:
            raise GeometryError(f"grid height must be a positive integer, got {self.height}")
        if self.width != 2 * self.height:
            raise GeometryError(
                f"equirectangular grid must be 2:1, got H={self.height}, W={self.width}"
            )

    @classmethod
    def from_shape(cls, shape: Sequence[int]) -> "ErpGrid":
        """Grid of the trailing two axes of an array shape."""
        return cls(int(shape[-2]), int(shape[-1]))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def column_degrees(self) -> float:
        """Longitude spanned by one pixel column."""
        return 360.0 / self.width

    def longitudes(self) -> np.ndarray:
        """Pixel-center longitudes in degrees, shape ``(W,)``."""
        return (np.arange(self.width) + 0.5) / self.width * 360.0 - 180.0

    def latitudes(self) -> np.ndarray:
        """Pixel-center latitudes in degrees, shape ``(H,)``."""
        return 90.0 - (np.arange(self.height) + 0.5) / self.height * 180.0

    def directions(self) -> np.ndarray:
        """Unit direction of every pixel center, shape ``(H, W, 3)``."""
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return pixel_to_direction(self, rows, cols)

    def solid_angle_weights(self) -> np.ndarray:
        """Per-pixel solid angle (steradians), shape ``(H, W)``; sums to 4*pi."""
        lat_edges = np.radians(90.0 - np.arange(self.height + 1) / self.height * 180.0)
        band = np.sin(lat_edges[:-1]) - np.sin(lat_edges[1:])
        return np.repeat((band * 2.0 * np.pi / self.width)[:, None], self.width, axis=1)


class RotationAngles(NamedTuple):
    """Yaw (about ``z``), pitch (about ``y``) and roll (about ``x``) in degrees."""

    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0

    def canonical(self) -> "RotationAngles":
        """Wrap yaw into [0, 360) and pitch/roll into [-180, 180)."""
        return RotationAngles(
            float(np.mod(self.yaw, 360.0)),
            float(np.mod(self.pitch + 180.0, 360.0) - 180.0),
            float(np.mod(self.roll + 180.0, 360.0) - 180.0),
        )


AnglesLike = Union[RotationAngles, Sequence[float]]


def _as_angles(angles: AnglesLike) -> RotationAngles:
    a = RotationAngles(*[float(v) for v in angles])
    if not all(math.isfinite(v) for v in a):
        raise GeometryError(f"rotation angles must be finite, got {tuple(a)}")
    return a


def pixel_to_direction(grid: ErpGrid, i, j) -> np.ndarray:
    """Unit direction of the center of pixel ``(i, j)``.

    ``i`` and ``j`` may be scalars or integer arrays of a common shape; the
    result has that shape plus a trailing axis of length 3.
    """
    i = np.asarray(i)
    j = np.asarray(j)
    if np.any(i < 0) or np.any(i >= grid.height) or np.any(j < 0) or np.any(j >= grid.width):
        raise GeometryError(f"pixel index out of range for grid {grid.shape}")
    lon = np.radians((j + 0.5) / grid.width * 360.0 - 180.0)
    lat = np.radians(90.0 - (i + 0.5) / grid.height * 180.0)
    cos_lat = np.cos(lat)
    return np.stack([cos_lat * np.cos(lon), cos_lat * np.sin(lon), np.sin(lat)], axis=-1)


def direction_to_continuous(grid: ErpGrid, v) -> tuple[np.ndarray, np.ndarray]:
    """Continuous (row, column) of direction(s) ``v`` (shape ``(..., 3)``).

    Rows run from -0.5 (north pole) to H - 0.5 (south pole); columns from
    -0.5 to W - 0.5 with the seam at longitude +-180 degrees.
    """
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1)
    if np.any(norm == 0.0):
        raise GeometryError("cannot project the zero vector")
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    lon = np.degrees(np.arctan2(y, x))
    lat = np.degrees(np.arcsin(np.clip(z / norm, -1.0, 1.0)))
    col = (lon + 180.0) / 360.0 * grid.width - 0.5
    row = (90.0 - lat) / 180.0 * grid.height - 0.5
    return row, col


def nearest_pixel(grid: ErpGrid, row, col) -> tuple[np.ndarray, np.ndarray]:
    """Nearest integer pixel: longitude wraps modulo W, latitude is clamped."""
    r = np.clip(np.floor(np.asarray(row) + 0.5), 0, grid.height - 1).astype(np.intp)
    c = np.mod(np.floor(np.asarray(col) + 0.5), grid.width).astype(np.intp)
    return r, c


def direction_to_pixel(grid: ErpGrid, v):
    """Project direction(s) onto the grid.

    Returns ``(row, col, (nearest_row, nearest_col))`` where ``row``/``col``
    are continuous coordinates consistent with :func:`pixel_to_direction`.
    """
    row, col = direction_to_continuous(grid, v)
    return row, col, nearest_pixel(grid, row, col)


def _rz(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _ry(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rx(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_matrix(angles: AnglesLike) -> np.ndarray:
    """``R = R_x(roll) @ R_y(pitch) @ R_z(yaw)``, acting on column vectors."""
    a = _as_angles(angles)
    return _rx(a.roll) @ _ry(a.pitch) @ _rz(a.yaw)


def angles_from_matrix(m: np.ndarray) -> RotationAngles:
    """Inverse of :func:`rotation_matrix`, returned in canonical ranges.

    Pitch comes back in [-90, 90]; at gimbal lock (|pitch| = 90) the roll is
    folded into the yaw.
    """
    m = np.asarray(m, dtype=float)
    pitch = math.degrees(math.asin(max(-1.0, min(1.0, m[0, 2]))))
    if abs(m[0, 2]) < 1.0 - 1e-12:
        yaw = math.degrees(math.atan2(-m[0, 1], m[0, 0]))
        roll = math.degrees(math.atan2(-m[1, 2], m[2, 2]))
    else:
        yaw = math.degrees(math.atan2(m[1, 0], m[1, 1]))
        roll = 0.0
    return RotationAngles(yaw, pitch, roll).canonical()


def rotation_index_map(grid: ErpGrid, angles: AnglesLike) -> np.ndarray:
    """Flat source index for every output pixel of a rotated panorama.

    Output pixel ``p`` pulls from the input pixel nearest to ``R^-1 dir(p)``,
    so every output pixel is defined. Shape ``(H, W)``, values in
    ``[0, H*W)``.
    """
    return matrix_index_map(grid, rotation_matrix(angles))


def matrix_index_map(grid: ErpGrid, m: np.ndarray) -> np.ndarray:
    """:func:`rotation_index_map` for an explicit rotation matrix ``m``."""
    # Row vectors times m equals m^T (= m^-1) applied to each direction.
    src = grid.directions() @ np.asarray(m, dtype=float)
    _, _, (ri, ci) = direction_to_pixel(grid, src)
    return ri * grid.width + ci


def gather_pixels(image: np.ndarray, index_map: np.ndarray) -> np.ndarray:
    """Resample the trailing ``(H, W)`` axes of ``image`` with a flat index map."""
    h, w = image.shape[-2:]
    flat = image.reshape(image.shape[:-2] + (h * w,))
    return flat[..., index_map.ravel()].reshape(image.shape[:-2] + index_map.shape)


def scatter_pixels(grad: np.ndarray, index_map: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`gather_pixels`: sum gradients back onto source pixels."""
    lead = grad.shape[:-2]
    n = index_map.size
    g = grad.reshape((-1, n))
    idx = index_map.ravel()
    out = np.stack([np.bincount(idx, weights=row, minlength=n) for row in g])
    return out.reshape(lead + index_map.shape)


def rotate_image(image: np.ndarray, angles: AnglesLike) -> np.ndarray:
    """Rotate a panorama on the sphere with nearest-pixel pull-back resampling.

    Works on any array whose trailing two axes form an ERP grid; all leading
    channels are resampled identically and the dtype is preserved, so class-id
    maps stay integral.
    """
    image = np.asarray(image)
    grid = ErpGrid.from_shape(image.shape)
    return gather_pixels(image, rotation_index_map(grid, angles))


def yaw_shift(image: np.ndarray, k: int) -> np.ndarray:
    """Exact yaw rotation by ``k`` pixel columns (``k * 360 / W`` degrees)."""
    if int(k) != k:
        raise GeometryError(f"yaw shift must be an integer column count, got {k}")
    return np.roll(np.asarray(image), int(k), axis=-1)


@dataclass(frozen=True)
class NfovSpec:
    """Rectilinear narrow field-of-view camera on the sphere.

    ``aspect`` is width over height; the camera looks along ``+x`` of its own
    frame, which ``viewpoint`` rotates into the world.
    """

    fov_h: float
    aspect: float = 2.0
    viewpoint: RotationAngles = RotationAngles()

    def __post_init__(self):
        if not 0.0 < self.fov_h < 180.0:
            raise GeometryError(f"horizontal FOV must lie in (0, 180) degrees, got {self.fov_h}")
        if not self.aspect > 0.0:
            raise GeometryError(f"aspect ratio must be positive, got {self.aspect}")

    @property
    def half_extents(self) -> tuple[float, float]:
        """Tangents of the horizontal and vertical half-angles."""
        th = math.tan(math.radians(self.fov_h) / 2.0)
        return th, th / self.aspect


def in_frustum(spec: NfovSpec, v: np.ndarray) -> np.ndarray:
    """Boolean test of world direction(s) ``v`` (``(..., 3)``) against the camera frustum."""
    cam = np.asarray(v, dtype=float) @ rotation_matrix(spec.viewpoint)
    x, y, z = cam[..., 0], cam[..., 1], cam[..., 2]
    th, tv = spec.half_extents
    return (x > 0.0) & (np.abs(y) <= th * x) & (np.abs(z) <= tv * x)


def nfov_mask(grid: ErpGrid, spec: NfovSpec) -> np.ndarray:
    """``uint8`` mask of the pixels whose centers fall inside the NFOV frustum."""
    return in_frustum(spec, grid.directions()).astype(np.uint8)


def frustum_solid_angle(spec: NfovSpec) -> float:
    """Closed-form solid angle of a rectangular pyramid with the view's half-extents."""
    a, b = spec.half_extents
    return 4.0 * math.asin(a * b / math.sqrt((1.0 + a * a) * (1.0 + b * b)))


def random_nfov(rng: np.random.Generator, fov_range=(30.0, 120.0), aspect: float = 2.0) -> NfovSpec:
    """NFOV camera with a uniform FOV in ``fov_range`` and a uniformly random orientation on the sphere."""
    fov = float(rng.uniform(*fov_range))
    yaw = float(rng.uniform(0.0, 360.0))
    pitch = math.degrees(math.asin(rng.uniform(-1.0, 1.0)))
    roll = float(rng.uniform(-180.0, 180.0))
    return NfovSpec(fov, aspect, RotationAngles(yaw, pitch, roll))
