"""Physical layout of the tag mesh, antennas, image planes and categories.

All lengths are meters.  The default shelf converts the deployment units
once and for all: 5 in = 0.127 m tag pitch, 13.78 ft = 4.2 m reader
distance, 20 in = 0.508 m antenna separation, 4.5 ft = 1.372 m mount
height.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

SPEED_OF_LIGHT = 2.998e8  # m/s

TAG_PITCH_M = 0.127
READER_DISTANCE_M = 4.2
ANTENNA_SEPARATION_M = 0.508
MOUNT_HEIGHT_M = 1.372


class LayoutError(ValueError):
    """Raised for inconsistent or out-of-range layout parameters."""


@dataclass(frozen=True)
class TagGrid:
    """Planar mesh of passive tags, row-major indexed (tag k = row*k_x + col)."""

    k_x: int
    k_y: int
    spacing_x: float
    spacing_y: float
    origin: tuple[float, float, float] = (0.0, MOUNT_HEIGHT_M, 0.0)
    tag_positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.k_x < 1 or self.k_y < 1:
            raise LayoutError("grid needs at least one tag per axis")
        if self.spacing_x <= 0 or self.spacing_y <= 0:
            raise LayoutError("tag spacing must be positive")
        cols = np.arange(self.k_x) * self.spacing_x
        rows = np.arange(self.k_y) * self.spacing_y
        xx, yy = np.meshgrid(cols, rows)  # row-major: row index varies slowest
        pos = np.column_stack([
            xx.ravel() + self.origin[0],
            yy.ravel() + self.origin[1],
            np.full(self.k_x * self.k_y, self.origin[2]),
        ])
        object.__setattr__(self, "tag_positions", pos)

    @property
    def n_tags(self) -> int:
        return self.k_x * self.k_y

    def column_of(self, tag_id) -> np.ndarray:
        """Column index of one or many tag ids."""
        return np.asarray(tag_id) % self.k_x


@dataclass(frozen=True)
class AntennaArray:
    """Reader antenna positions, one monostatic antenna per entry."""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if pos.shape[0] < 1 or pos.shape[1] != 3:
            raise LayoutError("antenna array needs >= 1 position of 3 coords")
        object.__setattr__(self, "positions", pos)

    @property
    def n_antennas(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class ImagePlane:
    """Voxelized plane parallel to the tag mesh, offset toward the antennas.

    Voxel (u, v) has flat index j = v * width_vox + u, with u along the
    tag columns and v along the rows; v = 0 is the bottom row.
    """

    grid: TagGrid
    z_offset: float
    p_x: int
    p_y: int
    voxel_centers: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.p_x < 1 or self.p_y < 1:
            raise LayoutError("voxel subdivision must be >= 1")
        if self.z_offset < 0:
            raise LayoutError("image plane must sit on the antenna side of the tags")
        g = self.grid
        pitch_x = g.spacing_x / self.p_x
        pitch_y = g.spacing_y / self.p_y
        us = (np.arange(self.width_vox) + 0.5) * pitch_x + g.origin[0]
        vs = (np.arange(self.height_vox) + 0.5) * pitch_y + g.origin[1]
        xx, yy = np.meshgrid(us, vs)
        centers = np.column_stack([
            xx.ravel(),
            yy.ravel(),
            np.full(xx.size, g.origin[2] + self.z_offset),
        ])
        object.__setattr__(self, "voxel_centers", centers)

    @property
    def width_vox(self) -> int:
        return self.p_x * (self.grid.k_x - 1)

    @property
    def height_vox(self) -> int:
        return self.p_y * (self.grid.k_y - 1)

    @property
    def n_voxels(self) -> int:
        return self.width_vox * self.height_vox

    @property
    def pitch_x(self) -> float:
        return self.grid.spacing_x / self.p_x

    @property
    def pitch_y(self) -> float:
        return self.grid.spacing_y / self.p_y

    def to_voxel_uv(self, x: float, y: float) -> tuple[float, float]:
        """Map plane-coordinates (meters) to fractional voxel (u, v)."""
        g = self.grid
        return ((x - g.origin[0]) / self.pitch_x - 0.5,
                (y - g.origin[1]) / self.pitch_y - 0.5)


@dataclass(frozen=True)
class CategoryLayout:
    """Column-wise item categories; each category spans whole tag columns."""

    categories: tuple[tuple[int, int, int], ...]  # (id, first_column, last_column)
    k_x: int

    def __post_init__(self):
        seen = set()
        for cid, first, last in self.categories:
            if not (0 <= first <= last < self.k_x):
                raise LayoutError(f"category {cid} columns out of range")
            cols = set(range(first, last + 1))
            if cols & seen:
                raise LayoutError(f"category {cid} overlaps another category")
            seen |= cols

    @property
    def ids(self) -> list[int]:
        return [c[0] for c in self.categories]

    def centroids(self, plane: ImagePlane) -> dict[int, tuple[float, float]]:
        """Per-category centroid in voxel (u, v) coordinates.

        The centroid is the arithmetic mean of the voxel centers whose u
        position falls within the category's column span.
        """
        out = {}
        v_mean = (plane.height_vox - 1) / 2.0
        for cid, first, last in self.categories:
            u_lo = first * plane.p_x
            u_hi = last * plane.p_x - 1
            if u_hi < u_lo:  # single-column category spans no full gap
                u_lo = u_hi = first * plane.p_x
            out[cid] = ((u_lo + u_hi) / 2.0, v_mean)
        return out

    def column_span(self, cid: int) -> tuple[int, int]:
        for c, first, last in self.categories:
            if c == cid:
                return first, last
        raise KeyError(f"unknown category {cid}")


def default_categories(k_x: int = 29, n_categories: int = 6,
                       columns_per_category: int = 4) -> CategoryLayout:
    """Evenly laid out categories with one separator column between them."""
    cats = []
    col = 0
    for cid in range(1, n_categories + 1):
        cats.append((cid, col, col + columns_per_category - 1))
        col += columns_per_category + 1
    if cats[-1][2] >= k_x:
        raise LayoutError("category layout does not fit the grid")
    return CategoryLayout(tuple(cats), k_x)


def link_distance(tag: int, antenna: int, grid: TagGrid, array: AntennaArray) -> float:
    """Euclidean tag-to-antenna distance for one monostatic link."""
    if not 0 <= tag < grid.n_tags:
        raise IndexError(f"tag index {tag} out of range")
    if not 0 <= antenna < array.n_antennas:
        raise IndexError(f"antenna index {antenna} out of range")
    return float(np.linalg.norm(grid.tag_positions[tag] - array.positions[antenna]))


def average_wavelength(f_low: float, f_high: float) -> float:
    """Wavelength of the band-center frequency."""
    if f_low <= 0 or f_high < f_low:
        raise ValueError("need 0 < f_low <= f_high")
    return SPEED_OF_LIGHT / ((f_low + f_high) / 2.0)


def fresnel_width(theta0: float, lambda_avg: float, d1, d2):
    """First-Fresnel-zone radius at a point splitting a link into d1 + d2,
    scaled by the tuning factor theta0."""
    d1 = np.asarray(d1, dtype=float)
    d2 = np.asarray(d2, dtype=float)
    total = d1 + d2
    if np.any(total == 0):
        raise ValueError("d1 + d2 must be positive")
    return theta0 * np.sqrt(lambda_avg * d1 * d2 / total)


def inside_ellipsoid(voxel, tag, antenna, theta) -> bool | np.ndarray:
    """True where dist(voxel,tag) + dist(voxel,antenna) < dist(tag,antenna) + theta."""
    voxel = np.asarray(voxel, dtype=float)
    tag = np.asarray(tag, dtype=float)
    antenna = np.asarray(antenna, dtype=float)
    d1 = np.linalg.norm(voxel - tag, axis=-1)
    d2 = np.linalg.norm(voxel - antenna, axis=-1)
    d = np.linalg.norm(tag - antenna, axis=-1)
    result = d1 + d2 < d + theta
    return bool(result) if np.isscalar(result) or result.ndim == 0 else result


def default_layout() -> tuple[TagGrid, AntennaArray, list[ImagePlane], CategoryLayout]:
    """The reference 29 x 4 shelf with two antennas and two image planes."""
    grid = TagGrid(k_x=29, k_y=4, spacing_x=TAG_PITCH_M, spacing_y=TAG_PITCH_M)
    center_x = (grid.k_x - 1) * grid.spacing_x / 2.0
    array = AntennaArray(np.array([
        [center_x - ANTENNA_SEPARATION_M / 2, MOUNT_HEIGHT_M, READER_DISTANCE_M],
        [center_x + ANTENNA_SEPARATION_M / 2, MOUNT_HEIGHT_M, READER_DISTANCE_M],
    ]))
    planes = [ImagePlane(grid, z, p_x=5, p_y=5) for z in (0.3, 0.6)]
    return grid, array, planes, default_categories(grid.k_x)


def load_layout(path) -> tuple[TagGrid, AntennaArray, list[ImagePlane], CategoryLayout]:
    """Load a layout from a JSON config file.

    Recognized keys: k_x, k_y, spacing_m, origin, antenna_positions,
    z_planes, p_x, p_y, categories (list of [id, first_col, last_col]).
    Missing keys fall back to the reference shelf values.
    """
    with open(path) as fh:
        cfg = json.load(fh)
    return layout_from_dict(cfg)


def layout_from_dict(cfg: dict):
    k_x = int(cfg.get("k_x", 29))
    k_y = int(cfg.get("k_y", 4))
    spacing = float(cfg.get("spacing_m", TAG_PITCH_M))
    origin = tuple(cfg.get("origin", (0.0, MOUNT_HEIGHT_M, 0.0)))
    grid = TagGrid(k_x=k_x, k_y=k_y, spacing_x=spacing, spacing_y=spacing,
                   origin=origin)
    if "antenna_positions" in cfg:
        array = AntennaArray(np.asarray(cfg["antenna_positions"], dtype=float))
    else:
        center_x = origin[0] + (k_x - 1) * spacing / 2.0
        array = AntennaArray(np.array([
            [center_x - ANTENNA_SEPARATION_M / 2, origin[1], origin[2] + READER_DISTANCE_M],
            [center_x + ANTENNA_SEPARATION_M / 2, origin[1], origin[2] + READER_DISTANCE_M],
        ]))
    p_x = int(cfg.get("p_x", 5))
    p_y = int(cfg.get("p_y", 5))
    z_planes = cfg.get("z_planes", [0.3, 0.6])
    planes = [ImagePlane(grid, float(z), p_x=p_x, p_y=p_y) for z in z_planes]
    if "categories" in cfg:
        cats = tuple((int(c[0]), int(c[1]), int(c[2])) for c in cfg["categories"])
        layout = CategoryLayout(cats, k_x)
    else:
        layout = default_categories(k_x)
    return grid, array, planes, layout
