"""Gnomonic viewport extraction from equirectangular panoramas.

Angle conventions used throughout the package:
    longitude in [-pi, pi), increasing eastward (rightward in the panorama)
    latitude  in [-pi/2, pi/2], increasing northward (upward in the panorama)
Equirectangular pixel centers sit at
    lon = -pi + (col + 0.5) * 2*pi / width
    lat = pi/2 - (row + 0.5) * pi / height
Sampling wraps in longitude (the +-pi seam is continuous) and clamps in
latitude (rows beyond the poles repeat the pole row).
"""

from dataclasses import dataclass
import struct

import numpy as np

TWO_PI = 2.0 * np.pi
DEFAULT_FOV = np.pi / 2.0
DEFAULT_SIZE = 224
VIEWPORT_MAGIC = b"MTAV1"


@dataclass(frozen=True)
class SphereCoord:
    """A point on the unit sphere, radians."""

    lon: float
    lat: float


@dataclass
class ViewportSequence:
    """Viewports rendered from one panorama.

    viewports: (V, size, size, 3) float32 in the source value range
    centers:   (V, 2) float64, columns are (lon, lat)
    """

    viewports: np.ndarray
    centers: np.ndarray
    fov: float


def wrap_lon(lon):
    """Wrap longitudes into [-pi, pi)."""
    return np.mod(np.asarray(lon, dtype=np.float64) + np.pi, TWO_PI) - np.pi


def erp_grid(height: int, width: int):
    """Per-pixel (lon, lat) arrays for an equirectangular image, pixel centers."""
    lon = -np.pi + (np.arange(width, dtype=np.float64) + 0.5) * TWO_PI / width
    lat = np.pi / 2.0 - (np.arange(height, dtype=np.float64) + 0.5) * np.pi / height
    return np.meshgrid(lon, lat)


def tangent_offsets(fov: float, size: int):
    """Tangent-plane coordinates of the viewport pixel lattice.

    Edge-inclusive lattice: corners land exactly at tan(fov/2), and odd sizes
    place the middle pixel exactly at the projection center.
    """
    half = np.tan(fov / 2.0)
    xs = np.linspace(-half, half, size)
    ys = np.linspace(half, -half, size)
    return np.meshgrid(xs, ys)


def gnomonic_grid(center: SphereCoord, fov: float = DEFAULT_FOV, size: int = DEFAULT_SIZE) -> np.ndarray:
    """Sphere coordinates seen by each viewport pixel.

    Returns a (size, size, 2) float64 array, last axis (lon, lat). Row 0 looks
    toward +lat, column growth toward +lon. Uses the closed-form inverse
    gnomonic mapping, so the construction never builds rotation matrices (the
    tests check it against an explicit 3D-rotation oracle).
    """
    x, y = tangent_offsets(fov, size)
    sin_lat0 = np.sin(center.lat)
    cos_lat0 = np.cos(center.lat)
    inv_norm = 1.0 / np.sqrt(1.0 + x * x + y * y)
    lat = np.arcsin(np.clip((sin_lat0 + y * cos_lat0) * inv_norm, -1.0, 1.0))
    lon = wrap_lon(center.lon + np.arctan2(x, cos_lat0 - y * sin_lat0))
    return np.stack([lon, lat], axis=-1)


def sphere_to_pixel(lon, lat, height: int, width: int):
    """Fractional (row, col) sampling positions for sphere coordinates."""
    col = (np.asarray(lon, dtype=np.float64) + np.pi) / TWO_PI * width - 0.5
    row = (np.pi / 2.0 - np.asarray(lat, dtype=np.float64)) / np.pi * height - 0.5
    return row, col


def bilinear_sample(image: np.ndarray, rows, cols) -> np.ndarray:
    """Bilinear lookup with longitudinal wrap and latitudinal clamp.

    image is (H, W) or (H, W, C). Output dtype is float64 and every value is a
    convex combination of source pixels, so the source min/max bound it.
    """
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape[:2]
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)

    r0 = np.floor(rows)
    c0 = np.floor(cols)
    fr = rows - r0
    fc = cols - c0

    r0i = np.clip(r0.astype(np.int64), 0, h - 1)
    r1i = np.clip(r0.astype(np.int64) + 1, 0, h - 1)
    c0i = np.mod(c0.astype(np.int64), w)
    c1i = np.mod(c0.astype(np.int64) + 1, w)

    if img.ndim == 3:
        fr = fr[..., None]
        fc = fc[..., None]

    top = img[r0i, c0i] + fc * (img[r0i, c1i] - img[r0i, c0i])
    bot = img[r1i, c0i] + fc * (img[r1i, c1i] - img[r1i, c0i])
    return top + fr * (bot - top)


def render_viewport(
    image: np.ndarray,
    center: SphereCoord,
    fov: float = DEFAULT_FOV,
    size: int = DEFAULT_SIZE,
) -> np.ndarray:
    """Render one gnomonic viewport from an equirectangular image."""
    grid = gnomonic_grid(center, fov, size)
    rows, cols = sphere_to_pixel(grid[..., 0], grid[..., 1], image.shape[0], image.shape[1])
    return bilinear_sample(image, rows, cols)


def equatorial_centers(count: int) -> list[SphereCoord]:
    """count centers on the equator, lon_i = -pi + 2*pi*i/count."""
    return [SphereCoord(lon=-np.pi + TWO_PI * i / count, lat=0.0) for i in range(count)]


def uniform_sphere_centers(count: int) -> list[SphereCoord]:
    """Deterministic near-uniform centers over the whole sphere (Fibonacci lattice).

    Optional alternative sampler for generalization studies; equatorial
    sampling stays the default everywhere.
    """
    golden = (1.0 + np.sqrt(5.0)) / 2.0
    centers = []
    for i in range(count):
        z = 1.0 - (2.0 * i + 1.0) / count
        lat = float(np.arcsin(np.clip(z, -1.0, 1.0)))
        lon = float(wrap_lon(TWO_PI * i / golden))
        centers.append(SphereCoord(lon=lon, lat=lat))
    return centers


def sample_viewports(
    image: np.ndarray,
    centers: list[SphereCoord],
    fov: float = DEFAULT_FOV,
    size: int = DEFAULT_SIZE,
) -> ViewportSequence:
    views = np.stack(
        [render_viewport(image, c, fov, size) for c in centers]
    ).astype(np.float32)
    coords = np.array([[c.lon, c.lat] for c in centers], dtype=np.float64)
    return ViewportSequence(viewports=views, centers=coords, fov=fov)


def equatorial_sample(
    image: np.ndarray,
    count: int = 8,
    fov: float = DEFAULT_FOV,
    size: int = DEFAULT_SIZE,
) -> ViewportSequence:
    """Default viewport sampler: count viewports spaced evenly on the equator."""
    return sample_viewports(image, equatorial_centers(count), fov, size)


def write_viewport_file(path, seq: ViewportSequence) -> None:
    """Serialize a viewport stack.

    Layout: magic MTAV1, then V and S as little-endian uint32, then the
    (V, S, S, 3) tensor row-major as little-endian float32.
    """
    v, s = seq.viewports.shape[0], seq.viewports.shape[1]
    data = np.ascontiguousarray(seq.viewports, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(VIEWPORT_MAGIC)
        fh.write(struct.pack("<II", v, s))
        fh.write(data.tobytes())


def read_viewport_file(path) -> np.ndarray:
    """Read a viewport stack written by write_viewport_file, (V, S, S, 3) float32."""
    with open(path, "rb") as fh:
        magic = fh.read(len(VIEWPORT_MAGIC))
        if magic != VIEWPORT_MAGIC:
            raise ValueError(f"bad viewport file magic: {magic!r}")
        v, s = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(), dtype="<f4")
    expected = v * s * s * 3
    if data.size != expected:
        raise ValueError(f"viewport file payload has {data.size} floats, expected {expected}")
    return data.reshape(v, s, s, 3).copy()
