"""Synthetic monostatic RFID read stream generator.

Stands in for reader hardware: emits timestamped (tag, antenna, subcarrier)
RSS/phase records under configurable obstruction scenes.  The forward
obstruction model attenuates a link by how much of its first Fresnel zone
cross-section the obstacle ellipse covers, applied twice for the
out-and-back path.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (SPEED_OF_LIGHT, AntennaArray, ImagePlane, TagGrid,
                       fresnel_width)

TWO_PI = 2.0 * math.pi

# Phase filtering keeps readings whose Fresnel-zone blockage is at least
# 6.25%; the simulated phase response must straddle that regime.
OBSTRUCTED_OVERLAP_THRESHOLD = 0.0625

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


def desk_subcarriers(n: int = 8) -> list[float]:
    """n evenly spaced subcarriers spanning the 902.75-927.25 MHz band."""
    return list(np.linspace(902.75e6, 927.25e6, n))


def full_band_subcarriers() -> list[float]:
    """The 50-channel hop set of the production band (500 kHz steps)."""
    return desk_subcarriers(50)


@dataclass
class ChannelModel:
    """Radio parameters of the monostatic reader/tag channel."""

    tx_power_dbm: float = 30.0
    antenna_gain_db: float = 6.0
    tag_gain_db: float = 2.0
    backscatter_loss_db: float = 5.0
    env_constant_db: float = 30.0       # absorbs fixed gains of the log model
    baseline_exponent: float = 4.0      # free-space double-fading exponent
    noise_sigma_db: float = 0.8
    cable_phase_offset_rad: float = 0.7
    tag_backscatter_phase_rad: float = 0.4
    multipath_phase_sigma_rad: float = 0.05
    subcarriers: list[float] = field(default_factory=desk_subcarriers)

    def __post_init__(self):
        if len(self.subcarriers) < 1:
            raise ValueError("need at least one subcarrier")
        if self.noise_sigma_db < 0:
            raise ValueError("noise sigma must be non-negative")
        self.cable_phase_offset_rad %= TWO_PI
        self.tag_backscatter_phase_rad %= TWO_PI

    @property
    def n_channels(self) -> int:
        return len(self.subcarriers)

    @property
    def lambda_avg(self) -> float:
        freqs = self.subcarriers
        return SPEED_OF_LIGHT / ((min(freqs) + max(freqs)) / 2.0)


@dataclass
class Obstacle:
    """Elliptical blocker in the obstruction plane (all lengths meters)."""

    center_x: float
    center_y: float
    semi_axis_x: float
    semi_axis_y: float
    max_loss_db: float
    jitter_sigma_m: float = 0.0
    start_s: float = 0.0
    end_s: float | None = None

    def __post_init__(self):
        if self.semi_axis_x <= 0 or self.semi_axis_y <= 0:
            raise ValueError("obstacle semi-axes must be positive")
        if self.max_loss_db < 0:
            raise ValueError("max_loss_db must be non-negative")

    def active_at(self, t: float) -> bool:
        end = math.inf if self.end_s is None else self.end_s
        return self.start_s <= t < end


@dataclass
class ObstructionScene:
    """Obstacle timeline plus the z of the plane the obstacles live in."""

    obstacles: list[Obstacle] = field(default_factory=list)
    duration_s: float = 60.0
    seed: int = 0
    plane_z: float = 0.45

    def to_dict(self) -> dict:
        return {
            "duration_s": self.duration_s,
            "seed": self.seed,
            "plane_z": self.plane_z,
            "obstacles": [
                {
                    "center_x": o.center_x, "center_y": o.center_y,
                    "semi_axis_x": o.semi_axis_x, "semi_axis_y": o.semi_axis_y,
                    "max_loss_db": o.max_loss_db,
                    "jitter_sigma_m": o.jitter_sigma_m,
                    "start_s": o.start_s, "end_s": o.end_s,
                }
                for o in self.obstacles
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObstructionScene":
        obstacles = [Obstacle(**ob) for ob in d.get("obstacles", [])]
        return cls(obstacles=obstacles,
                   duration_s=float(d.get("duration_s", 60.0)),
                   seed=int(d.get("seed", 0)),
                   plane_z=float(d.get("plane_z", 0.45)))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "ObstructionScene":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class TagRead:
    """One interrogation record."""

    timestamp_s: float
    tag_id: int
    antenna_id: int
    channel_index: int
    rss_dbm: float
    phase_rad: float


def free_space_rss(model: ChannelModel, lam: float, d: float, beta: float) -> float:
    """Log-model RSS for an unobstructed link of one-way length d."""
    if d <= 0:
        raise ValueError("distance must be positive")
    if lam <= 0:
        raise ValueError("wavelength must be positive")
    return model.env_constant_db + 10.0 * beta * math.log10(lam / (4.0 * math.pi * d))


def phase_at(model: ChannelModel, f: float, d: float, rng: np.random.Generator) -> float:
    """Received phase: round-trip propagation plus fixed offsets and
    a multipath jitter draw, wrapped to [0, 2*pi)."""
    if f <= 0:
        raise ValueError("frequency must be positive")
    if d < 0:
        raise ValueError("distance must be non-negative")
    kappa = TWO_PI * f / SPEED_OF_LIGHT
    jitter = rng.normal(0.0, model.multipath_phase_sigma_rad) \
        if model.multipath_phase_sigma_rad > 0 else 0.0
    phi = (2.0 * kappa * d + jitter + model.cable_phase_offset_rad
           + model.tag_backscatter_phase_rad)
    return phi % TWO_PI


def _disk_points(n: int = 256) -> np.ndarray:
    """Deterministic low-discrepancy unit-disk sample (sunflower layout)."""
    i = np.arange(n)
    r = np.sqrt((i + 0.5) / n)
    th = i * _GOLDEN_ANGLE
    return np.column_stack([r * np.cos(th), r * np.sin(th)])


_UNIT_DISK = _disk_points(256)


def _link_overlap(scene: ObstructionScene, centers: np.ndarray, active: np.ndarray,
                  tag_pos: np.ndarray, ant_pos: np.ndarray, plane_z: float,
                  lambda_avg: float) -> tuple[np.ndarray, np.ndarray]:
    """Fresnel cross-section overlap fraction and two-way loss per link.

    tag_pos may be (K, 3); returns (overlap, loss_db) arrays of shape (K,).
    Losses from multiple obstacles add; overlaps add and clip at 1.
    """
    tag_pos = np.atleast_2d(tag_pos)
    K = tag_pos.shape[0]
    overlap = np.zeros(K)
    loss = np.zeros(K)
    dz = ant_pos[2] - tag_pos[:, 2]
    if np.any(dz == 0):
        raise ValueError("antenna and tag planes must be separated in z")
    t = (plane_z - tag_pos[:, 2]) / dz
    cross = tag_pos + t[:, None] * (ant_pos[None, :] - tag_pos)
    d1 = np.linalg.norm(cross - tag_pos, axis=1)
    d2 = np.linalg.norm(ant_pos[None, :] - cross, axis=1)
    radius = fresnel_width(1.0, lambda_avg, d1, d2)
    pts_x = cross[:, None, 0] + radius[:, None] * _UNIT_DISK[None, :, 0]
    pts_y = cross[:, None, 1] + radius[:, None] * _UNIT_DISK[None, :, 1]
    for idx, obs in enumerate(scene.obstacles):
        if not active[idx]:
            continue
        cx, cy = centers[idx]
        q = (((pts_x - cx) / obs.semi_axis_x) ** 2
             + ((pts_y - cy) / obs.semi_axis_y) ** 2)
        frac = np.mean(q <= 1.0, axis=1)
        overlap += frac
        loss += 2.0 * obs.max_loss_db * frac
    return np.minimum(overlap, 1.0), loss


def obstruction_loss(scene: ObstructionScene, tick_positions: np.ndarray,
                     tag, antenna, plane: ImagePlane,
                     lambda_avg: float = SPEED_OF_LIGHT / 915e6) -> float:
    """Two-way obstruction loss (dB) of the tag-antenna link.

    tick_positions holds the jittered obstacle centers for the current tick,
    shape (n_obstacles, 2); the plane fixes where the link's Fresnel
    cross-section is evaluated.
    """
    tag = np.asarray(tag, dtype=float)
    antenna = np.asarray(antenna, dtype=float)
    active = np.ones(len(scene.obstacles), dtype=bool)
    z = plane.grid.origin[2] + plane.z_offset
    _, loss = _link_overlap(scene, np.asarray(tick_positions, dtype=float),
                            active, tag[None, :], antenna, z, lambda_avg)
    return float(loss[0])


class ReadLog:
    """Columnar store of TagRead records with delimited-file round-trip."""

    FIELDS = ("timestamp_s", "tag_id", "antenna_id", "channel_index",
              "rss_dbm", "phase_rad")

    def __init__(self, timestamp_s, tag_id, antenna_id, channel_index,
                 rss_dbm, phase_rad):
        self.timestamp_s = np.asarray(timestamp_s, dtype=float)
        self.tag_id = np.asarray(tag_id, dtype=np.int64)
        self.antenna_id = np.asarray(antenna_id, dtype=np.int64)
        self.channel_index = np.asarray(channel_index, dtype=np.int64)
        self.rss_dbm = np.asarray(rss_dbm, dtype=float)
        self.phase_rad = np.asarray(phase_rad, dtype=float)

    def __len__(self) -> int:
        return self.timestamp_s.size

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, i) -> TagRead:
        return TagRead(float(self.timestamp_s[i]), int(self.tag_id[i]),
                       int(self.antenna_id[i]), int(self.channel_index[i]),
                       float(self.rss_dbm[i]), float(self.phase_rad[i]))

    @classmethod
    def empty(cls) -> "ReadLog":
        return cls(*([[]] * 6))

    @classmethod
    def from_reads(cls, reads) -> "ReadLog":
        reads = list(reads)
        return cls([r.timestamp_s for r in reads], [r.tag_id for r in reads],
                   [r.antenna_id for r in reads], [r.channel_index for r in reads],
                   [r.rss_dbm for r in reads], [r.phase_rad for r in reads])

    def slice(self, mask) -> "ReadLog":
        return ReadLog(self.timestamp_s[mask], self.tag_id[mask],
                       self.antenna_id[mask], self.channel_index[mask],
                       self.rss_dbm[mask], self.phase_rad[mask])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.FIELDS)
            for i in range(len(self)):
                writer.writerow([
                    f"{self.timestamp_s[i]:.6f}", int(self.tag_id[i]),
                    int(self.antenna_id[i]), int(self.channel_index[i]),
                    f"{self.rss_dbm[i]:.6f}", f"{self.phase_rad[i]:.6f}",
                ])

    @classmethod
    def read_csv(cls, path) -> "ReadLog":
        cols = {f: [] for f in cls.FIELDS}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != list(cls.FIELDS):
                raise ValueError(f"unexpected read-log header: {reader.fieldnames}")
            for row in reader:
                for f in cls.FIELDS:
                    cols[f].append(float(row[f]))
        return cls(**cols)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for i in range(len(self)):
                fh.write(json.dumps({
                    "timestamp_s": round(float(self.timestamp_s[i]), 6),
                    "tag_id": int(self.tag_id[i]),
                    "antenna_id": int(self.antenna_id[i]),
                    "channel_index": int(self.channel_index[i]),
                    "rss_dbm": round(float(self.rss_dbm[i]), 6),
                    "phase_rad": round(float(self.phase_rad[i]), 6),
                }) + "\n")

    @classmethod
    def read_jsonl(cls, path) -> "ReadLog":
        cols = {f: [] for f in cls.FIELDS}
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                for f in cls.FIELDS:
                    cols[f].append(rec[f])
        return cls(**cols)


def link_distance_table(grid: TagGrid, array: AntennaArray) -> np.ndarray:
    """(K, A) one-way link distances."""
    diff = grid.tag_positions[:, None, :] - array.positions[None, :, :]
    return np.linalg.norm(diff, axis=2)


def free_space_tables(grid: TagGrid, array: AntennaArray,
                      model: ChannelModel) -> tuple[np.ndarray, np.ndarray]:
    """Per-(channel, tag, antenna) free-space RSS and deterministic phase."""
    d = link_distance_table(grid, array)                     # (K, A)
    freqs = np.asarray(model.subcarriers)                    # (F,)
    lam = SPEED_OF_LIGHT / freqs
    rss = (model.env_constant_db
           + 10.0 * model.baseline_exponent
           * np.log10(lam[:, None, None] / (4.0 * math.pi * d[None, :, :])))
    kappa = TWO_PI * freqs / SPEED_OF_LIGHT
    phase = (2.0 * kappa[:, None, None] * d[None, :, :]
             + model.cable_phase_offset_rad
             + model.tag_backscatter_phase_rad) % TWO_PI
    return rss, phase


def generate_reads(grid: TagGrid, array: AntennaArray, model: ChannelModel,
                   scene: ObstructionScene, rate_per_s: float,
                   reads_per_cycle: int = 64) -> ReadLog:
    """Simulate a full read stream, deterministically from scene.seed.

    Tags are drawn uniformly per read (ALOHA approximation); antennas
    alternate per interrogation cycle; the hop channel is constant within
    a cycle and re-drawn uniformly each cycle.
    """
    if rate_per_s <= 0:
        raise ValueError("rate must be positive")
    K, A, F = grid.n_tags, array.n_antennas, model.n_channels
    n_total = int(math.floor(rate_per_s * scene.duration_s))
    if n_total == 0:
        return ReadLog.empty()
    n_ticks = int(math.floor(scene.duration_s)) + 1
    n_cycles = (n_total + reads_per_cycle - 1) // reads_per_cycle
    n_obs = len(scene.obstacles)

    rng = np.random.default_rng(scene.seed)
    # Fixed draw order keeps the stream bit-reproducible.
    jitters = rng.standard_normal((n_ticks, n_obs, 2)) if n_obs else \
        np.zeros((n_ticks, 0, 2))
    cycle_channels = rng.integers(0, F, size=n_cycles)
    tags = rng.integers(0, K, size=n_total)
    noise = rng.standard_normal(n_total) * model.noise_sigma_db
    mp_jitter = rng.standard_normal(n_total) * model.multipath_phase_sigma_rad
    obstructed_phase = rng.uniform(math.pi / 4.0, math.pi, size=n_total)

    idx = np.arange(n_total)
    timestamps = idx / rate_per_s
    cycles = idx // reads_per_cycle
    antennas = cycles % A
    channels = cycle_channels[cycles]

    fs_rss, base_phase = free_space_tables(grid, array, model)
    plane_z = grid.origin[2] + scene.plane_z
    lam_avg = model.lambda_avg

    loss_per_read = np.zeros(n_total)
    overlap_per_read = np.zeros(n_total)
    if n_obs:
        sigmas = np.array([[o.jitter_sigma_m] for o in scene.obstacles])
        base_centers = np.array([[o.center_x, o.center_y] for o in scene.obstacles])
        tick_of_read = np.floor(timestamps).astype(np.int64)
        for tick in range(n_ticks):
            sel = np.flatnonzero(tick_of_read == tick)
            if sel.size == 0:
                continue
            t_mid = float(tick)
            active = np.array([o.active_at(t_mid) for o in scene.obstacles])
            if not active.any():
                continue
            centers = base_centers + sigmas * jitters[tick]
            ov = np.zeros((K, A))
            lo = np.zeros((K, A))
            for a in range(A):
                ov[:, a], lo[:, a] = _link_overlap(
                    scene, centers, active, grid.tag_positions,
                    array.positions[a], plane_z, lam_avg)
            loss_per_read[sel] = lo[tags[sel], antennas[sel]]
            overlap_per_read[sel] = ov[tags[sel], antennas[sel]]

    rss = fs_rss[channels, tags, antennas] - loss_per_read + noise
    obstructed = overlap_per_read > OBSTRUCTED_OVERLAP_THRESHOLD
    extra = np.where(obstructed, obstructed_phase, mp_jitter)
    phase = (base_phase[channels, tags, antennas] + extra) % TWO_PI

    return ReadLog(timestamps, tags, antennas, channels, rss, phase)
