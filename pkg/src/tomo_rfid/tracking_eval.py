"""Blob detection over rolling image buffers, per-category popularity
scoring, and the TPR/FPR/MR evaluation harness."""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .analytic_imaging import ImageFrame
from .geometry import CategoryLayout, ImagePlane

BLOB_BUFFER_LEN = 5
BLOB_THRESHOLD = 0.1
ETA2_DEFAULT = 10.0
MIN_BLOB_AREA_DEFAULT = 20
BACKGROUND_FRAMES_DEFAULT = 10

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


@dataclass
class Blob:
    pixel_count: int
    bbox: tuple[int, int, int, int]       # (u_min, v_min, u_max, v_max)
    centroid: tuple[float, float]         # (u, v)


@dataclass
class BlobSet:
    blobs: list[Blob] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.blobs)

    def __iter__(self):
        return iter(self.blobs)


def detect_blobs(frames, min_blob_area: int = MIN_BLOB_AREA_DEFAULT,
                 background: np.ndarray | None = None,
                 threshold: float = BLOB_THRESHOLD) -> BlobSet:
    """Median the 5-frame buffer, threshold, and label 8-connected blobs.

    An underfull buffer is a no-op and yields an empty set.
    """
    frames = list(frames)
    if len(frames) < BLOB_BUFFER_LEN:
        return BlobSet()
    stacks = []
    for f in frames[-BLOB_BUFFER_LEN:]:
        vals = f.as_grid() if isinstance(f, ImageFrame) else np.asarray(f, dtype=float)
        if background is not None:
            vals = np.maximum(vals - background, 0.0)
        stacks.append(vals)
    med = np.median(np.stack(stacks), axis=0)
    med[med < threshold] = 0.0
    binary = med > 0
    labels, n = ndimage.label(binary, structure=_EIGHT_CONNECTED)
    blobs = []
    for idx in range(1, n + 1):
        vs, us = np.nonzero(labels == idx)
        if vs.size < min_blob_area:
            continue
        blobs.append(Blob(
            pixel_count=int(vs.size),
            bbox=(int(us.min()), int(vs.min()), int(us.max()), int(vs.max())),
            centroid=(float(us.mean()), float(vs.mean())),
        ))
    return BlobSet(blobs)


@dataclass
class PopularityScores:
    counts: dict[int, int] = field(default_factory=dict)

    def increment(self, category: int):
        self.counts[category] = self.counts.get(category, 0) + 1

    def get(self, category: int) -> int:
        return self.counts.get(category, 0)


def update_popularity(blobs: BlobSet, layout: CategoryLayout, plane: ImagePlane,
                      eta2: float, scores: PopularityScores) -> set[int]:
    """Credit every category whose centroid lies within eta2 voxels of a
    blob centroid; returns the categories credited this call."""
    centroids = layout.centroids(plane)
    credited = set()
    for blob in blobs:
        bu, bv = blob.centroid
        for cid, (cu, cv) in centroids.items():
            if math.hypot(bu - cu, bv - cv) <= eta2:
                scores.increment(cid)
                credited.add(cid)
    return credited


class PopularitySession:
    """Stateful per-shelf tracker: rolling frame buffer, background model,
    and per-tick popularity credits.

    Ticks that produced no image (power gate closed) must still be fed with
    frame=None so the buffer decays and the tick clock stays honest.
    """

    def __init__(self, layout: CategoryLayout, plane: ImagePlane,
                 eta2: float = ETA2_DEFAULT,
                 min_blob_area: int = MIN_BLOB_AREA_DEFAULT,
                 background_frames: int = BACKGROUND_FRAMES_DEFAULT,
                 threshold: float = BLOB_THRESHOLD):
        self.layout = layout
        self.plane = plane
        self.eta2 = eta2
        self.min_blob_area = min_blob_area
        self.threshold = threshold
        self.scores = PopularityScores()
        self.events: list[tuple[float, frozenset[int]]] = []
        self._buffer: deque[np.ndarray] = deque(maxlen=BLOB_BUFFER_LEN)
        self._background_frames = background_frames
        self._bg_accum: list[np.ndarray] = []
        self._background: np.ndarray | None = None
        self._shape = (plane.height_vox, plane.width_vox)

    def _zero_frame(self) -> np.ndarray:
        return np.zeros(self._shape)

    def feed(self, frame: ImageFrame | None, t: float) -> tuple[BlobSet, set[int]]:
        grid = frame.as_grid() if frame is not None else self._zero_frame()
        if self._background is None:
            self._bg_accum.append(grid)
            if len(self._bg_accum) >= self._background_frames:
                self._background = np.mean(self._bg_accum, axis=0)
                self._bg_accum.clear()
        self._buffer.append(grid)
        blobs = detect_blobs(self._buffer, self.min_blob_area,
                             background=self._background,
                             threshold=self.threshold)
        credited = update_popularity(blobs, self.layout, self.plane,
                                     self.eta2, self.scores)
        self.events.append((t, frozenset(credited)))
        return blobs, credited


def evaluate(events: list[tuple[float, frozenset[int]]],
             windows: list[tuple[float, float, set[int]]]) -> dict:
    """Score per-tick category credits against ground-truth windows.

    A window is a true positive when every tested category was credited at
    least once inside it; it is a false positive when any category outside
    its tested set was credited.  TPR is taken over windows with a nonempty
    tested set, FPR over all windows.
    """
    if not windows:
        raise ValueError("evaluation needs at least one window")
    tested_windows = 0
    tp = 0
    fp = 0
    for t_lo, t_hi, truth in windows:
        scored = set()
        for t, cats in events:
            if t_lo <= t < t_hi:
                scored |= cats
        if truth:
            tested_windows += 1
            if truth <= scored:
                tp += 1
        if scored - set(truth):
            fp += 1
    tpr = tp / tested_windows if tested_windows else 0.0
    fpr = fp / len(windows)
    return {"tpr": tpr, "fpr": fpr, "mr": 1.0 - tpr,
            "n_windows": len(windows), "n_tested_windows": tested_windows}


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("scenario", "k_cw", "training_users", "tpr", "fpr", "mr")

    def add(self, scenario: str, k_cw: int, training_users: int, result: dict):
        self.rows.append({
            "scenario": scenario, "k_cw": k_cw,
            "training_users": training_users,
            "tpr": result["tpr"], "fpr": result["fpr"], "mr": result["mr"],
        })

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.COLUMNS)
            for row in self.rows:
                writer.writerow([
                    row["scenario"], row["k_cw"], row["training_users"],
                    f"{row['tpr']:.6f}", f"{row['fpr']:.6f}", f"{row['mr']:.6f}",
                ])

    def format_table(self) -> str:
        header = f"{'scenario':<12} {'k_cw':>4} {'users':>5} " \
                 f"{'TPR':>7} {'FPR':>7} {'MR':>7}"
        lines = [header, "-" * len(header)]
        for row in self.rows:
            lines.append(
                f"{row['scenario']:<12} {row['k_cw']:>4} "
                f"{row['training_users']:>5} {row['tpr']:>7.3f} "
                f"{row['fpr']:>7.3f} {row['mr']:>7.3f}")
        return "\n".join(lines)


def write_scores_jsonl(events, path):
    """Per-tick credited categories as JSON Lines."""
    with open(path, "w") as fh:
        for t, cats in events:
            fh.write(json.dumps({"t": round(float(t), 6),
                                 "categories": sorted(cats)}) + "\n")
