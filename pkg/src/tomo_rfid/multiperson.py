"""Moving-window multi-person imaging: masks the difference vector down to
one column window at a time, images every window, and fuses the stack."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .analytic_imaging import ImageFrame
from .dnn_imaging import MlpEnsemble, normalize_input
from .geometry import TagGrid
from .preprocess import CalibrationProfile, RssDifferenceVector


@dataclass
class WindowConfig:
    """Moving-window and merge parameters.

    merge_mode "average" fuses window images by their mean; "median" keeps a
    per-voxel median across windows.  sample_outside draws the out-of-window
    filler from the calibration Gaussians instead of the deterministic
    2-sigma value.
    """

    k_cw: int = 6
    merge_median_kernel: int = 3
    merge_average_kernel: int = 3
    merge_mode: str = "average"
    sample_outside: bool = False
    norm_floor: float = 0.25

    def __post_init__(self):
        if self.k_cw < 1:
            raise ValueError("impact width must be at least one column")
        for k in (self.merge_median_kernel, self.merge_average_kernel):
            if k < 1 or k % 2 == 0:
                raise ValueError("merge kernels must be odd and positive")
        if self.merge_mode not in ("average", "median"):
            raise ValueError("merge_mode must be 'average' or 'median'")
        if self.norm_floor < 0:
            raise ValueError("normalization floor must be non-negative")


def window_count(grid: TagGrid, cfg: WindowConfig) -> int:
    if cfg.k_cw > grid.k_x:
        raise ValueError("impact width exceeds the column count")
    return grid.k_x - cfg.k_cw + 1


def outside_fill(profile: CalibrationProfile, antenna: int,
                 cfg: WindowConfig | None = None,
                 rng: np.random.Generator | None = None) -> np.ndarray:
    """Replacement values for tags outside a window: 2 sigma, or a Gaussian
    draw when sampling is enabled."""
    mu = profile.diff_mu[antenna]
    sigma = profile.diff_sigma[antenna]
    if cfg is not None and cfg.sample_outside:
        if rng is None:
            raise ValueError("sampling the outside filler needs an rng")
        return np.maximum(rng.normal(mu, sigma), 0.0)
    return 2.0 * sigma


def window_vectors(y: RssDifferenceVector, profile: CalibrationProfile,
                   grid: TagGrid, cfg: WindowConfig,
                   rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """All k_x - k_cw + 1 masked variants of one difference vector.

    In-window entries are copied unchanged; every other entry takes the
    no-obstruction filler for that (tag, antenna).
    """
    if profile.n_tags != grid.n_tags:
        raise ValueError("profile does not cover this tag grid")
    n_win = window_count(grid, cfg)
    cols = grid.column_of(np.arange(grid.n_tags))
    fill = outside_fill(profile, y.antenna_id, cfg, rng)
    out = []
    for i in range(n_win):
        inside = (cols >= i) & (cols < i + cfg.k_cw)
        out.append(np.where(inside, y.values, fill))
    return out


def _filter_stack(stack: np.ndarray, cfg: WindowConfig) -> np.ndarray:
    """2-D median then averaging filter applied to each image in the stack."""
    if cfg.merge_median_kernel > 1:
        stack = ndimage.median_filter(
            stack, size=(1, cfg.merge_median_kernel, cfg.merge_median_kernel))
    if cfg.merge_average_kernel > 1:
        stack = ndimage.uniform_filter(
            stack, size=(1, cfg.merge_average_kernel, cfg.merge_average_kernel))
    return stack


def window_coverage(grid: TagGrid, cfg: WindowConfig, width_vox: int,
                    p_x: int) -> np.ndarray:
    """Per-voxel-column count of windows whose column span contains it.

    Interior columns are seen by k_cw - 1 windows but edge columns by as few
    as one; weighting the window average by this count keeps people at the
    shelf ends as bright as people in the middle.
    """
    n_win = window_count(grid, cfg)
    c_u = (np.arange(width_vox) + 0.5) / p_x      # position in tag-column units
    lo = np.ceil(c_u - cfg.k_cw + 1).clip(min=0)
    hi = np.floor(c_u).clip(max=n_win - 1)
    return np.maximum(hi - lo + 1, 1.0)


def image_multiperson(ys: list[RssDifferenceVector], ensemble: MlpEnsemble,
                      profile: CalibrationProfile, grid: TagGrid,
                      cfg: WindowConfig, timestamp_s: float = 0.0,
                      rng: np.random.Generator | None = None) -> ImageFrame:
    """Window-expanded ensemble imaging fused over windows and antennas."""
    H, W = ensemble.image_height, ensemble.image_width
    p_x = W // (grid.k_x - 1)
    coverage = window_coverage(grid, cfg, W, p_x)
    per_antenna = []
    for y in ys:
        vecs = np.stack(window_vectors(y, profile, grid, cfg, rng))
        inputs = normalize_input(vecs, ensemble.max_rss)
        preds = ensemble.predict_batch(inputs).reshape(-1, H, W)
        preds = _filter_stack(preds, cfg)
        if cfg.merge_mode == "median":
            merged = np.median(preds, axis=0)
        else:
            merged = np.sum(preds, axis=0) / coverage[None, :]
        per_antenna.append(merged)
    combined = np.maximum(np.mean(per_antenna, axis=0), 0.0)
    # The floor stops an empty frame's residual noise from being blown up
    # to full scale by the peak normalization.
    peak = max(float(combined.max()), cfg.norm_floor, 1e-30)
    return ImageFrame(W, H, (combined / peak).ravel(), timestamp_s)


def expand_training_samples(samples, profile: CalibrationProfile,
                            grid: TagGrid, cfg: WindowConfig, max_rss: float):
    """Window-expand labeled single-person samples into DNN training pairs.

    samples: iterable of (antenna_id, y_values_db, label_image, center_col).
    A window keeps the sample's label only when it contains the person's
    center column; other windows are labeled with a blank image.
    """
    n_win = window_count(grid, cfg)
    cols = grid.column_of(np.arange(grid.n_tags))
    inputs, labels = [], []
    for antenna, y_vals, label, center_col in samples:
        fill = outside_fill(profile, antenna)
        blank = np.zeros_like(label)
        for i in range(n_win):
            inside = (cols >= i) & (cols < i + cfg.k_cw)
            vec = np.where(inside, y_vals, fill)
            inputs.append(normalize_input(vec, max_rss))
            labels.append(label if i <= center_col < i + cfg.k_cw else blank)
    return np.asarray(inputs), np.asarray(labels)


def no_obstruction_samples(profile: CalibrationProfile, n_outputs: int,
                           max_rss: float, copies: int = 1):
    """Blank-scene training pairs: the 2-sigma filler maps to a blank image."""
    inputs, labels = [], []
    blank = np.zeros(n_outputs)
    for _ in range(copies):
        for a in range(profile.n_antennas):
            inputs.append(normalize_input(2.0 * profile.diff_sigma[a], max_rss))
            labels.append(blank)
    return np.asarray(inputs), np.asarray(labels)
