"""Scenario plumbing shared by the CLI and the verification suite:
synthetic body profiles, browsing scenes, training-set assembly, ensemble
training and labeled scenario runs."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import preprocess as pp
from .analytic_imaging import ImageFrame, build_priors, image
from .channel_sim import ChannelModel, ObstructionScene, Obstacle, generate_reads
from .dnn_imaging import (MlpEnsemble, MlpSpec, TrainingSet, build_ensemble,
                          rasterize_label, train)
from .geometry import AntennaArray, CategoryLayout, ImagePlane, TagGrid
from .multiperson import (WindowConfig, expand_training_samples,
                          image_multiperson, no_obstruction_samples)
from .preprocess import CalibrationProfile
from .tracking_eval import PopularitySession, evaluate

CALIBRATION_DURATION_S = 120.0
DEFAULT_RATE = 475.0
MAX_RSS_DEFAULT = 30.0
LABEL_SEMI_U = 12.0          # half-width of the label ellipse, voxels

SCENARIO_ARRIVE_S = 10.0
SCENARIO_WINDOW_S = 3.0


@dataclass(frozen=True)
class BodyProfile:
    """Synthetic browsing person: torso ellipse and attenuation strength."""

    name: str
    semi_axis_x: float
    semi_axis_y: float
    max_loss_db: float
    jitter_sigma_m: float = 0.02


TRAIN_PROFILES = (
    BodyProfile("train-slim", 0.18, 0.75, 12.0),
    BodyProfile("train-mid", 0.23, 0.80, 15.0),
    BodyProfile("train-broad", 0.28, 0.85, 18.0),
)
TEST_PROFILE = BodyProfile("test-unseen", 0.21, 0.78, 13.5)


def category_center(grid: TagGrid, layout: CategoryLayout, cid: int) -> tuple[float, float]:
    """Absolute (x, y) of a category's center in meters."""
    first, last = layout.column_span(cid)
    col = (first + last) / 2.0
    x = grid.origin[0] + col * grid.spacing_x
    y = grid.origin[1] + (grid.k_y - 1) * grid.spacing_y / 2.0
    return x, y


def browse_scene(grid: TagGrid, layout: CategoryLayout, categories,
                 body: BodyProfile, duration_s: float, seed: int,
                 arrive_s: float = 0.0, depart_s: float | None = None) -> ObstructionScene:
    """One person per category, standing at its center for [arrive, depart)."""
    obstacles = []
    for cid in categories:
        x, y = category_center(grid, layout, cid)
        obstacles.append(Obstacle(
            center_x=x, center_y=y,
            semi_axis_x=body.semi_axis_x, semi_axis_y=body.semi_axis_y,
            max_loss_db=body.max_loss_db, jitter_sigma_m=body.jitter_sigma_m,
            start_s=arrive_s, end_s=depart_s))
    return ObstructionScene(obstacles=obstacles, duration_s=duration_s, seed=seed)


def category_label(plane: ImagePlane, grid: TagGrid, layout: CategoryLayout,
                   cid: int, semi_u: float = LABEL_SEMI_U) -> np.ndarray:
    """Ground-truth ellipse image for a person browsing one category."""
    x, y = category_center(grid, layout, cid)
    cu, cv = plane.to_voxel_uv(x, y)
    semi_v = plane.height_vox / 2.0
    return rasterize_label((cu, cv), (semi_u, semi_v), plane)


def calibrate(grid: TagGrid, array: AntennaArray, model: ChannelModel,
              seed: int = 1, duration_s: float = CALIBRATION_DURATION_S,
              rate: float = DEFAULT_RATE) -> CalibrationProfile:
    """Simulate an obstruction-free capture and fit the profile."""
    scene = ObstructionScene(obstacles=[], duration_s=duration_s, seed=seed)
    log = generate_reads(grid, array, model, scene, rate)
    return pp.run_calibration(log, grid, array, model.n_channels)


def collect_training_samples(grid: TagGrid, array: AntennaArray,
                             model: ChannelModel, profile: CalibrationProfile,
                             layout: CategoryLayout, plane: ImagePlane,
                             bodies, browse_s: float = 16.0,
                             rate: float = DEFAULT_RATE, seed0: int = 100,
                             gate_threshold: float = pp.POWER_THRESHOLD_DEFAULT):
    """Simulated single-person browses: one (antenna, y, label, column) sample
    per gated tick and antenna."""
    samples = []
    seed = seed0
    for body in bodies:
        for cid in layout.ids:
            scene = browse_scene(grid, layout, [cid], body, browse_s, seed)
            seed += 1
            log = generate_reads(grid, array, model, scene, rate)
            label = category_label(plane, grid, layout, cid)
            x, _ = category_center(grid, layout, cid)
            center_col = (x - grid.origin[0]) / grid.spacing_x
            for _, ys in pp.monitor_ticks(log, profile):
                for y in ys:
                    if pp.power_gate(y, gate_threshold):
                        samples.append((y.antenna_id, y.values.copy(), label,
                                        center_col))
    return samples


def build_training_set(samples, profile: CalibrationProfile, grid: TagGrid,
                       cfg: WindowConfig, max_rss: float = MAX_RSS_DEFAULT,
                       no_obstruction_copies: int = 30) -> TrainingSet:
    """Window-expand the labeled samples and append blank-scene pairs."""
    if not samples:
        raise ValueError("no training samples; scenes produced no gated ticks")
    n_outputs = samples[0][2].size
    x1, y1 = expand_training_samples(samples, profile, grid, cfg, max_rss)
    x2, y2 = no_obstruction_samples(profile, n_outputs, max_rss,
                                    copies=no_obstruction_copies)
    return TrainingSet(np.concatenate([x1, x2]), np.concatenate([y1, y2]))


def train_ensemble(training_set: TrainingSet, plane: ImagePlane,
                   n_members: int = 3, epochs: int = 15, batch_size: int = 256,
                   learning_rate: float = 2e-3, l2_coeff: float = 1e-6,
                   dropout_retain: float = 0.7, max_rss: float = MAX_RSS_DEFAULT,
                   k_cw: int = 6, seed: int = 0):
    """Train the median ensemble; returns (ensemble, per-member loss history)."""
    n_in = training_set.inputs.shape[1]
    n_out = training_set.labels.shape[1]
    spec = MlpSpec(n_inputs=n_in, n_outputs=n_out, dropout_retain=dropout_retain,
                   l2_coeff=l2_coeff, learning_rate=learning_rate,
                   batch_size=batch_size, epochs=epochs, seed=seed)
    ensemble = build_ensemble(spec, n_members, plane.width_vox, plane.height_vox,
                              max_rss=max_rss, k_cw=k_cw)
    histories = []
    for i, member in enumerate(ensemble.members):
        rng = np.random.default_rng(seed + 7919 * (i + 1))
        histories.append(train(member, training_set.inputs, training_set.labels,
                               spec, rng, epochs=epochs))
    return ensemble, histories


@dataclass
class ScenarioResult:
    events: list
    windows: list
    result: dict
    n_gated_ticks: int


def scenario_windows(duration_s: float, categories, arrive_s: float,
                     depart_s: float, window_s: float = SCENARIO_WINDOW_S):
    """Ground-truth windows; a window's tested set is the categories of the
    persons present at its midpoint."""
    windows = []
    n = int(math.floor(duration_s / window_s))
    for i in range(n):
        lo = i * window_s
        hi = lo + window_s
        mid = (lo + hi) / 2.0
        truth = set(categories) if arrive_s <= mid < depart_s else set()
        windows.append((lo, hi, truth))
    return windows


def run_scenario(grid: TagGrid, array: AntennaArray, model: ChannelModel,
                 profile: CalibrationProfile, ensemble: MlpEnsemble,
                 layout: CategoryLayout, plane: ImagePlane, categories,
                 body: BodyProfile = TEST_PROFILE, duration_s: float = 210.0,
                 arrive_s: float = SCENARIO_ARRIVE_S,
                 depart_s: float | None = None, rate: float = DEFAULT_RATE,
                 seed: int = 0, cfg: WindowConfig | None = None,
                 window_s: float = SCENARIO_WINDOW_S,
                 frame_sink=None) -> ScenarioResult:
    """Simulate a labeled browsing scenario and score the pipeline on it."""
    if cfg is None:
        cfg = WindowConfig(k_cw=ensemble.k_cw)
    if depart_s is None:
        depart_s = duration_s - 14.0
    scene = browse_scene(grid, layout, categories, body, duration_s, seed,
                         arrive_s=arrive_s, depart_s=depart_s)
    log = generate_reads(grid, array, model, scene, rate)
    session = PopularitySession(layout, plane)
    n_gated = 0
    for t, ys in pp.monitor_ticks(log, profile):
        frame = None
        if any(pp.power_gate(y) for y in ys):
            frame = image_multiperson(ys, ensemble, profile, grid, cfg,
                                      timestamp_s=t)
            n_gated += 1
            if frame_sink is not None:
                frame_sink(n_gated, frame)
        session.feed(frame, t)
    windows = scenario_windows(duration_s, categories, arrive_s, depart_s,
                               window_s)
    result = evaluate(session.events, windows)
    return ScenarioResult(session.events, windows, result, n_gated)
