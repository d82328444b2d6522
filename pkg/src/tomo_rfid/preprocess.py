"""Read-stream preprocessing: calibration capture, monitoring-buffer ticks,
smoothing, phase-difference filtering, frequency-diversity medians and the
power gate that decides whether a tick is worth imaging."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .channel_sim import ReadLog
from .geometry import AntennaArray, TagGrid

N_MON_DEFAULT = 2000       # monitoring buffer capacity (reads)
T_MON_DEFAULT = 1.0        # tick period (seconds)
PHASE_GATE_RAD = math.pi / 4.0
POWER_THRESHOLD_DEFAULT = 10.0


class CalibrationError(ValueError):
    """Calibration stream left some (antenna, channel, tag) cells empty."""

    def __init__(self, missing_pairs):
        self.missing_pairs = list(missing_pairs)
        shown = ", ".join(f"(a={a},f={f},k={k})" for a, f, k in self.missing_pairs[:8])
        more = "" if len(self.missing_pairs) <= 8 else \
            f" and {len(self.missing_pairs) - 8} more"
        super().__init__(
            f"calibration incomplete: no reads for {shown}{more}")


def _moving(x: np.ndarray, reduce) -> np.ndarray:
    """Window-5 moving reduction with shrunken symmetric edge windows."""
    n = x.size
    if n <= 2:
        return x.astype(float, copy=True)
    out = np.empty(n)
    out[0] = x[0]
    out[-1] = x[-1]
    if n >= 5:
        out[2:n - 2] = reduce(sliding_window_view(x, 5), axis=1)
        out[1] = reduce(x[0:3])
        out[n - 2] = reduce(x[n - 3:n])
    else:
        out[1:n - 1] = reduce(sliding_window_view(x, 3), axis=1)
    return out


def smooth(series) -> np.ndarray:
    """Moving median then moving average (window 5), length preserving."""
    x = np.asarray(series, dtype=float)
    if x.size == 0:
        return x.copy()
    return _moving(_moving(x, np.median), np.mean)


@dataclass
class CalibrationProfile:
    """Background RSS/phase matrices plus no-obstruction difference statistics.

    rss_cal and phase_cal have shape (A, F, K); diff_mu / diff_sigma hold the
    per-(antenna, tag) Gaussian fit of tick-wise signed RSS differences seen
    during calibration.
    """

    rss_cal: np.ndarray
    phase_cal: np.ndarray
    diff_mu: np.ndarray
    diff_sigma: np.ndarray
    sigma_y_cal: float

    @property
    def n_antennas(self) -> int:
        return self.rss_cal.shape[0]

    @property
    def n_channels(self) -> int:
        return self.rss_cal.shape[1]

    @property
    def n_tags(self) -> int:
        return self.rss_cal.shape[2]

    def save(self, path):
        doc = {
            "n_antennas": self.n_antennas,
            "n_channels": self.n_channels,
            "n_tags": self.n_tags,
            "sigma_y_cal": round(float(self.sigma_y_cal), 6),
            "rss_cal": np.round(self.rss_cal, 6).tolist(),
            "phase_cal": np.round(self.phase_cal, 6).tolist(),
            "diff_mu": np.round(self.diff_mu, 6).tolist(),
            "diff_sigma": np.round(self.diff_sigma, 6).tolist(),
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)

    @classmethod
    def load(cls, path) -> "CalibrationProfile":
        with open(path) as fh:
            doc = json.load(fh)
        prof = cls(
            rss_cal=np.asarray(doc["rss_cal"], dtype=float),
            phase_cal=np.asarray(doc["phase_cal"], dtype=float),
            diff_mu=np.asarray(doc["diff_mu"], dtype=float),
            diff_sigma=np.asarray(doc["diff_sigma"], dtype=float),
            sigma_y_cal=float(doc["sigma_y_cal"]),
        )
        expect = (doc["n_antennas"], doc["n_channels"], doc["n_tags"])
        if prof.rss_cal.shape != expect:
            raise ValueError("calibration file dimensions are inconsistent")
        return prof


@dataclass
class RssDifferenceVector:
    """Filtered per-tag RSS difference magnitudes for one antenna tick."""

    antenna_id: int
    values: np.ndarray
    timestamp_s: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)


def _segment_bounds(sorted_keys: np.ndarray):
    ukeys, starts = np.unique(sorted_keys, return_index=True)
    ends = np.append(starts[1:], sorted_keys.size)
    return ukeys, starts, ends


def run_calibration(log: ReadLog, grid: TagGrid, array: AntennaArray,
                    n_channels: int) -> CalibrationProfile:
    """Build the calibration profile from an obstruction-free stream.

    Every (antenna, channel, tag) cell must appear at least once or a
    CalibrationError lists the missing cells.
    """
    K, A, F = grid.n_tags, array.n_antennas, n_channels
    a = log.antenna_id
    f = log.channel_index
    k = log.tag_id
    cell_key = (a * F + f) * K + k
    order = np.lexsort((log.timestamp_s, cell_key))
    keys = cell_key[order]
    rss = log.rss_dbm[order]
    phase = log.phase_rad[order]

    ukeys, starts, ends = _segment_bounds(keys)
    present = np.zeros(A * F * K, dtype=bool)
    present[ukeys] = True
    if not present.all():
        missing = np.flatnonzero(~present)
        pairs = [(int(m // (F * K)), int((m // K) % F), int(m % K)) for m in missing]
        raise CalibrationError(pairs)

    rss_cal = np.empty(A * F * K)
    phase_cal = np.empty(A * F * K)
    residual_sq_sum = 0.0
    residual_n = 0
    for i in range(ukeys.size):
        seg_r = smooth(rss[starts[i]:ends[i]])
        seg_p = smooth(phase[starts[i]:ends[i]])
        med = np.median(seg_r)
        rss_cal[ukeys[i]] = med
        phase_cal[ukeys[i]] = np.median(seg_p)
        residual_sq_sum += float(np.sum((seg_r - med) ** 2))
        residual_n += seg_r.size
    rss_cal = rss_cal.reshape(A, F, K)
    phase_cal = phase_cal.reshape(A, F, K)
    sigma_y = math.sqrt(residual_sq_sum / residual_n) if residual_n else 0.0

    diff_mu, diff_sigma = _fit_diff_stats(log, rss_cal, K, A, F)
    return CalibrationProfile(rss_cal, phase_cal, diff_mu, diff_sigma, sigma_y)


def _fit_diff_stats(log: ReadLog, rss_cal: np.ndarray, K: int, A: int, F: int):
    """Gaussian fit of tick-wise signed RSS differences per (antenna, tag).

    Per tick and (antenna, tag): the signed difference between the
    calibrated value and the tick's per-channel medians, reduced by a
    median over the channels actually read that tick.  No phase filter and
    no substitution here, so the fit reflects the raw no-obstruction spread.
    """
    tick = np.floor(log.timestamp_s).astype(np.int64)
    n_ticks = int(tick.max()) + 1 if len(log) else 0
    a, f, k = log.antenna_id, log.channel_index, log.tag_id
    cell_key = (((a * F + f) * K) + k) * n_ticks + tick
    order = np.lexsort((log.timestamp_s, cell_key))
    keys = cell_key[order]
    rss = log.rss_dbm[order]
    ukeys, starts, ends = _segment_bounds(keys)
    cell_med = np.empty(ukeys.size)
    single = ends - starts == 1
    cell_med[single] = rss[starts[single]]
    for i in np.flatnonzero(~single):
        cell_med[i] = np.median(rss[starts[i]:ends[i]])

    u_tick = ukeys % n_ticks
    rest = ukeys // n_ticks
    u_k = rest % K
    u_f = (rest // K) % F
    u_a = rest // (K * F)
    signed = rss_cal[u_a, u_f, u_k] - cell_med

    tag_key = (u_a * K + u_k) * n_ticks + u_tick
    order2 = np.argsort(tag_key, kind="stable")
    tkeys, tstarts, tends = _segment_bounds(tag_key[order2])
    signed = signed[order2]
    tick_diff = np.empty(tkeys.size)
    single = tends - tstarts == 1
    tick_diff[single] = signed[tstarts[single]]
    for i in np.flatnonzero(~single):
        tick_diff[i] = np.median(signed[tstarts[i]:tends[i]])

    ak_key = tkeys // n_ticks
    order3 = np.argsort(ak_key, kind="stable")
    akeys, astarts, aends = _segment_bounds(ak_key[order3])
    tick_diff = tick_diff[order3]
    diff_mu = np.zeros(A * K)
    diff_sigma = np.zeros(A * K)
    for i in range(akeys.size):
        seg = tick_diff[astarts[i]:aends[i]]
        diff_mu[akeys[i]] = np.mean(seg)
        diff_sigma[akeys[i]] = np.std(seg)
    return diff_mu.reshape(A, K), diff_sigma.reshape(A, K)


class MonitorBuffer:
    """Ring buffer of the latest N_mon reads, time ordered."""

    def __init__(self, capacity: int = N_MON_DEFAULT, t_mon: float = T_MON_DEFAULT):
        self.capacity = capacity
        self.t_mon = t_mon
        self._log = ReadLog.empty()

    def __len__(self) -> int:
        return len(self._log)

    def extend(self, log: ReadLog):
        if len(self._log) == 0:
            merged = log
        else:
            merged = ReadLog(
                np.concatenate([self._log.timestamp_s, log.timestamp_s]),
                np.concatenate([self._log.tag_id, log.tag_id]),
                np.concatenate([self._log.antenna_id, log.antenna_id]),
                np.concatenate([self._log.channel_index, log.channel_index]),
                np.concatenate([self._log.rss_dbm, log.rss_dbm]),
                np.concatenate([self._log.phase_rad, log.phase_rad]),
            )
        if len(merged) > self.capacity:
            merged = merged.slice(slice(len(merged) - self.capacity, None))
        self._log = merged

    @property
    def log(self) -> ReadLog:
        return self._log


def tick(buffer: MonitorBuffer, profile: CalibrationProfile, antenna: int) -> np.ndarray:
    """Per-(channel, tag) monitored RSS matrix for one antenna.

    Buffered series are smoothed, phase-gated against the calibration
    phases, and reduced to a median; cells with no surviving samples fall
    back to their calibrated value.
    """
    F, K = profile.n_channels, profile.n_tags
    out = profile.rss_cal[antenna].copy()
    log = buffer.log
    sel = log.antenna_id == antenna
    if not sel.any():
        return out
    f = log.channel_index[sel]
    k = log.tag_id[sel]
    t = log.timestamp_s[sel]
    rss = log.rss_dbm[sel]
    phase = log.phase_rad[sel]
    key = f * K + k
    order = np.lexsort((t, key))
    keys = key[order]
    rss = rss[order]
    phase = phase[order]

    ukeys, starts, ends = _segment_bounds(keys)
    lengths = ends - starts
    cal_phase = profile.phase_cal[antenna].ravel()

    single = lengths == 1
    s_idx = starts[single]
    s_keys = ukeys[single]
    keep = np.abs(phase[s_idx] - cal_phase[s_keys]) >= PHASE_GATE_RAD
    out.ravel()[s_keys[keep]] = rss[s_idx[keep]]

    for i in np.flatnonzero(~single):
        seg_r = smooth(rss[starts[i]:ends[i]])
        seg_p = smooth(phase[starts[i]:ends[i]])
        kept = np.abs(seg_p - cal_phase[ukeys[i]]) >= PHASE_GATE_RAD
        if kept.any():
            out.ravel()[ukeys[i]] = np.median(seg_r[kept])
    return out


def freq_median(profile: CalibrationProfile, monitored: np.ndarray,
                antenna: int, timestamp_s: float = 0.0) -> RssDifferenceVector:
    """Median over channels of |calibrated - monitored| per tag."""
    if monitored.shape != profile.rss_cal[antenna].shape:
        raise ValueError("monitored matrix shape does not match calibration")
    diff = np.abs(profile.rss_cal[antenna] - monitored)
    return RssDifferenceVector(antenna, np.median(diff, axis=0), timestamp_s)


def power_gate(y: RssDifferenceVector, threshold: float = POWER_THRESHOLD_DEFAULT) -> bool:
    """True when the squared L2 power of the difference vector clears the bar."""
    return float(np.sum(y.values ** 2)) >= threshold


def monitor_ticks(log: ReadLog, profile: CalibrationProfile,
                  capacity: int = N_MON_DEFAULT, t_mon: float = T_MON_DEFAULT):
    """Replay a read log through the monitoring pipeline.

    Yields (tick_time, [RssDifferenceVector per antenna]) on the tick clock
    derived from read timestamps (first tick one period after the stream
    start).
    """
    A = profile.n_antennas
    buffer = MonitorBuffer(capacity=capacity, t_mon=t_mon)
    if len(log) == 0:
        return
    t_end = float(log.timestamp_s[-1])
    n_ticks = int(math.floor(t_end / t_mon)) + 1
    times = log.timestamp_s
    for n in range(1, n_ticks + 1):
        t_hi = n * t_mon
        t_lo = t_hi - t_mon
        sel = (times >= t_lo) & (times < t_hi)
        buffer.extend(log.slice(sel))
        vectors = []
        for a in range(A):
            monitored = tick(buffer, profile, a)
            vectors.append(freq_median(profile, monitored, a, t_hi))
        yield t_hi, vectors
