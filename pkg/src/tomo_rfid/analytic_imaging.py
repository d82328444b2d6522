"""Analytical image reconstruction: path-loss-exponent weights on Fresnel
ellipsoids and a regularized least-squares inversion with spatial priors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .geometry import AntennaArray, ImagePlane, TagGrid, fresnel_width
from .preprocess import RssDifferenceVector


class SingularGeometryError(ValueError):
    """Link distance makes the log path-loss term vanish."""


class SolverError(RuntimeError):
    """Regularized normal matrix is singular after conditioning."""


def delta_beta(y_k: float, lambda_avg: float, d: float) -> float:
    """Change in path-loss exponent implied by an RSS difference."""
    if d <= 0:
        raise SingularGeometryError("link distance must be positive")
    denom = 10.0 * math.log10(lambda_avg / (4.0 * math.pi * d))
    if denom == 0.0:
        raise SingularGeometryError("link distance lies on the log-model zero")
    return y_k / denom


@dataclass
class WeightMatrix:
    """Per-(link, voxel) contribution weights for one antenna."""

    entries: np.ndarray          # (M, N)
    theta0: float
    delta_betas: np.ndarray      # (M,)


def build_weights(grid: TagGrid, array: AntennaArray, plane: ImagePlane,
                  y: RssDifferenceVector, theta0: float,
                  lambda_avg: float) -> WeightMatrix:
    """Weights 1/d^(4 - delta_beta) inside each link's Fresnel ellipsoid.

    The ellipsoid width is evaluated per voxel from the voxel's own split
    of the link (d1 to the tag, d2 to the antenna).
    """
    if y.values.size != grid.n_tags:
        raise ValueError("difference vector length does not match tag count")
    ant = array.positions[y.antenna_id]
    tags = grid.tag_positions
    d = np.linalg.norm(tags - ant[None, :], axis=1)          # (K,)

    denom = 10.0 * np.log10(lambda_avg / (4.0 * math.pi * d))
    if np.any(denom == 0.0):
        raise SingularGeometryError("a link distance lies on the log-model zero")
    dbeta = y.values / denom                                 # (K,)

    vox = plane.voxel_centers                                # (N, 3)
    d1 = np.linalg.norm(vox[None, :, :] - tags[:, None, :], axis=2)   # (K, N)
    d2 = np.linalg.norm(vox[None, :, :] - ant[None, None, :], axis=2)  # (K, N)
    theta = fresnel_width(theta0, lambda_avg, d1, d2)
    inside = d1 + d2 < d[:, None] + theta
    link_w = d ** (dbeta - 4.0)                              # (K,)
    entries = np.where(inside, link_w[:, None], 0.0)
    return WeightMatrix(entries, theta0, dbeta)


def first_difference_operators(plane: ImagePlane) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """Forward first differences along u and v with zero boundary rows."""
    W, H = plane.width_vox, plane.height_vox
    N = W * H
    j = np.arange(N)
    u = j % W
    v = j // W
    rows_x = j[u < W - 1]
    dx = sp.csr_matrix(
        (np.concatenate([-np.ones(rows_x.size), np.ones(rows_x.size)]),
         (np.concatenate([rows_x, rows_x]), np.concatenate([rows_x, rows_x + 1]))),
        shape=(N, N))
    rows_y = j[v < H - 1]
    dy = sp.csr_matrix(
        (np.concatenate([-np.ones(rows_y.size), np.ones(rows_y.size)]),
         (np.concatenate([rows_y, rows_y]), np.concatenate([rows_y, rows_y + W]))),
        shape=(N, N))
    return dx, dy


@dataclass
class PriorSet:
    """Regularization terms of the inverse problem.

    corr is conditioned with a small ridge before inversion; the combined
    regularizer sigma_n * corr^-1 + alpha * (DxT Dx + DyT Dy) is cached.
    """

    alpha: float
    diff_x: sp.spmatrix
    diff_y: sp.spmatrix
    corr: np.ndarray
    delta: float
    c_n: float
    c_x: float
    sigma_n: float
    sigma_x: float
    pixel_distances: np.ndarray | None = None
    conditioning: float = 1e-8
    corr_inv: np.ndarray = field(init=False, repr=False)
    regularizer: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        n = self.corr.shape[0]
        conditioned = self.corr + self.conditioning * np.eye(n)
        self.corr_inv = np.linalg.inv(conditioned)
        smoothness = (self.diff_x.T @ self.diff_x
                      + self.diff_y.T @ self.diff_y)
        if sp.issparse(smoothness):
            smoothness = smoothness.toarray()
        self.regularizer = self.sigma_n * self.corr_inv + self.alpha * smoothness


def build_priors(plane: ImagePlane, sigma_y: float, alpha: float = 15.0,
                 c_n: float = 1.0, c_x: float = 1.0,
                 delta: float | None = None,
                 conditioning: float = 1e-8) -> PriorSet:
    """Exponential spatial-correlation prior plus smoothness operators."""
    if delta is None:
        delta = 3.0 * plane.pitch_x
    xy = plane.voxel_centers[:, :2]
    dists = np.linalg.norm(xy[:, None, :] - xy[None, :, :], axis=2)
    sigma_n = c_n * sigma_y
    sigma_x = c_x * sigma_y
    corr = (sigma_x / delta) * np.exp(-dists / delta)
    dx, dy = first_difference_operators(plane)
    return PriorSet(alpha=alpha, diff_x=dx, diff_y=dy, corr=corr, delta=delta,
                    c_n=c_n, c_x=c_x, sigma_n=sigma_n, sigma_x=sigma_x,
                    pixel_distances=dists, conditioning=conditioning)


def solve(y: np.ndarray | RssDifferenceVector, weights: WeightMatrix,
          priors: PriorSet) -> np.ndarray:
    """Solve the regularized normal equations by Cholesky factorization."""
    rhs = y.values if isinstance(y, RssDifferenceVector) else np.asarray(y, dtype=float)
    W = weights.entries
    A = W.T @ W + priors.regularizer
    A = 0.5 * (A + A.T)
    try:
        c, low = scipy.linalg.cho_factor(A)
    except scipy.linalg.LinAlgError as exc:
        raise SolverError(f"normal matrix not positive definite: {exc}") from exc
    return scipy.linalg.cho_solve((c, low), W.T @ rhs)


@dataclass
class ImageFrame:
    """Reconstructed attenuation image, values normalized to [0, 1]."""

    width_vox: int
    height_vox: int
    values: np.ndarray
    timestamp_s: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.size != self.width_vox * self.height_vox:
            raise ValueError("value count does not match frame dimensions")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1):
            raise ValueError("frame values must lie in [0, 1]")

    @classmethod
    def from_solution(cls, width: int, height: int, values: np.ndarray,
                      timestamp_s: float = 0.0) -> "ImageFrame":
        """Clamp negatives and normalize by the frame maximum."""
        v = np.maximum(np.asarray(values, dtype=float), 0.0)
        peak = v.max() if v.size else 0.0
        if peak > 0:
            v = v / peak
        return cls(width, height, v, timestamp_s)

    def as_grid(self) -> np.ndarray:
        """(height, width) array with row 0 at the bottom of the shelf."""
        return self.values.reshape(self.height_vox, self.width_vox)

    def to_pgm_bytes(self) -> bytes:
        grid = np.rint(255.0 * self.as_grid()).astype(np.uint8)
        header = f"P5\n{self.width_vox} {self.height_vox}\n255\n".encode()
        return header + grid[::-1, :].tobytes()  # row 0 of the file = shelf top

    def save_pgm(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_pgm_bytes())

    def to_list(self) -> list[float]:
        return self.values.tolist()


def image(grid: TagGrid, array: AntennaArray, planes: list[ImagePlane],
          ys: list[RssDifferenceVector], priors: PriorSet, theta0: float,
          lambda_avg: float, timestamp_s: float = 0.0) -> ImageFrame:
    """Solve per antenna and plane, then average planes, then antennas."""
    if not planes:
        raise ValueError("need at least one image plane")
    if not ys:
        raise ValueError("need at least one antenna difference vector")
    acc = np.zeros(planes[0].n_voxels)
    for y in ys:
        per_antenna = np.zeros(planes[0].n_voxels)
        for plane in planes:
            w = build_weights(grid, array, plane, y, theta0, lambda_avg)
            per_antenna += solve(y, w, priors)
        acc += per_antenna / len(planes)
    acc /= len(ys)
    return ImageFrame.from_solution(planes[0].width_vox, planes[0].height_vox,
                                    acc, timestamp_s)
