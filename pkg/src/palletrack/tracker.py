"""Multi-target track lifecycle: constant-velocity Kalman filtering,
Hungarian assignment on box overlap, and confirm/delete rules driven by the
windowed confidence mean.

State is in pixel coordinates: (x, y, vx, vy) with one frame as the time
unit.  Pallets are static; their apparent per-frame displacement comes from
the sensor platform's own motion, which enters prediction as a control
offset on the position.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detector import Detection
from .geometry import BoundingBox, iou
from .scan import IMAGE_SIZE, PIXEL_SIDE
from .seqdecision import MISSED, ConfidenceWindow


@dataclass(frozen=True)
class TrackerConfig:
    overlap_threshold: float = 0.2
    accept_threshold: float = 0.6
    reject_threshold: float = 0.35
    min_detections: int = 10
    timeout_seconds: float = 0.6
    window_size: int = 6
    ego_velocity: float = 0.0  # m/s toward the scene, i.e. +y pixel rows
    frame_rate: float = 4.0
    pixel_side: float = PIXEL_SIDE
    process_noise: tuple[float, float, float, float] = (1.0, 1.0, 4.0, 4.0)
    measurement_noise: tuple[float, float] = (4.0, 4.0)

    def __post_init__(self):
        if self.accept_threshold <= self.reject_threshold:
            raise ValueError("accept threshold must exceed reject threshold")
        if self.min_detections < 1:
            raise ValueError("min_detections must be >= 1")

    @property
    def ego_shift(self) -> float:
        """Apparent displacement of static objects in pixel rows per frame."""
        return self.ego_velocity / (self.pixel_side * self.frame_rate)

    @property
    def invisible_limit(self) -> float:
        return self.timeout_seconds * self.frame_rate


_TRANSITION = np.array([[1.0, 0.0, 1.0, 0.0],
                        [0.0, 1.0, 0.0, 1.0],
                        [0.0, 0.0, 1.0, 0.0],
                        [0.0, 0.0, 0.0, 1.0]])
_MEASURE = np.array([[1.0, 0.0, 0.0, 0.0],
                     [0.0, 1.0, 0.0, 0.0]])


@dataclass
class KalmanState:
    mean: np.ndarray       # (x, y, vx, vy)
    covariance: np.ndarray  # 4x4 symmetric positive-definite

    def symmetrized(self) -> "KalmanState":
        return KalmanState(self.mean,
                           (self.covariance + self.covariance.T) / 2.0)


def kalman_init(centroid: tuple[float, float], cfg: TrackerConfig
                ) -> KalmanState:
    """New-track state: detection centroid, ego-induced expected velocity,
    and an inflated (10x) initial covariance."""
    mean = np.array([centroid[0], centroid[1], 0.0, cfg.ego_shift])
    r = cfg.measurement_noise
    q = cfg.process_noise
    cov = np.diag([10.0 * r[0], 10.0 * r[1], 10.0 * q[2], 10.0 * q[3]])
    return KalmanState(mean, cov)


def kalman_predict(state: KalmanState, ego_shift: float,
                   process_noise=(1.0, 1.0, 4.0, 4.0)) -> KalmanState:
    """Constant-velocity transition over one frame plus the ego offset."""
    mean = _TRANSITION @ state.mean
    mean[1] += ego_shift
    cov = _TRANSITION @ state.covariance @ _TRANSITION.T + np.diag(process_noise)
    return KalmanState(mean, cov).symmetrized()


def kalman_update(state: KalmanState, measurement: tuple[float, float],
                  confidence: float,
                  measurement_noise=(4.0, 4.0)) -> KalmanState:
    """Linear update with measurement covariance R0 / confidence.

    Joseph-form covariance update keeps the result symmetric positive
    semidefinite.  Zero confidence would mean an infinitely uncertain
    measurement and is rejected.
    """
    if not 0.0 < confidence <= 1.0:
        raise ValueError(f"confidence must lie in (0, 1], got {confidence}")
    r = np.diag(measurement_noise) / confidence
    h = _MEASURE
    innovation = np.asarray(measurement, dtype=float) - h @ state.mean
    s = h @ state.covariance @ h.T + r
    gain = state.covariance @ h.T @ np.linalg.inv(s)
    mean = state.mean + gain @ innovation
    ikh = np.eye(4) - gain @ h
    cov = ikh @ state.covariance @ ikh.T + gain @ r @ gain.T
    return KalmanState(mean, cov).symmetrized()


def hungarian(cost: np.ndarray) -> list[tuple[int, int]]:
    """Minimum-total-cost assignment pairs for a rectangular cost matrix."""
    if cost.size == 0:
        return []
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


class TrackStatus(enum.Enum):
    TENTATIVE = "Tentative"
    CONFIRMED = "Confirmed"
    DELETED = "Deleted"


@dataclass
class Track:
    track_id: int
    kalman: KalmanState
    box_size: tuple[float, float]  # from the last matched detection
    window: ConfidenceWindow
    hits: int = 1
    invisible_frames: int = 0
    status: TrackStatus = TrackStatus.TENTATIVE
    created_frame: int = 0
    stable_after: int = 5  # presentation only: min_detections / 2 sightings

    @property
    def mean_confidence(self) -> float:
        return self.window.mean

    @property
    def box(self) -> BoundingBox:
        """Centroid from the filter, size from the last matched detection."""
        w, h = self.box_size
        cx, cy = self.kalman.mean[0], self.kalman.mean[1]
        x0 = min(max(0.0, cx - w / 2.0), IMAGE_SIZE - w)
        y0 = min(max(0.0, cy - h / 2.0), IMAGE_SIZE - h)
        return BoundingBox(x0, y0, w, h)

    @property
    def stable(self) -> bool:
        return self.hits >= self.stable_after


@dataclass(frozen=True)
class TrackEvent:
    frame: int
    track_id: int
    kind: str  # CONFIRMED or DELETED


@dataclass(frozen=True)
class TrackRecord:
    """One track-log row: `frame;id;status;x;y;vx;vy;S_avg;d;invisible`."""

    frame: int
    track_id: int
    status: str
    x: float
    y: float
    vx: float
    vy: float
    mean_confidence: float
    hits: int
    invisible: int

    def format(self) -> str:
        return (f"{self.frame};{self.track_id};{self.status};"
                f"{self.x:.6f};{self.y:.6f};{self.vx:.6f};{self.vy:.6f};"
                f"{self.mean_confidence:.6f};{self.hits};{self.invisible}")


def assign(tracks: list[Track], detections: list[Detection],
           overlap_threshold: float
           ) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """Hungarian assignment on 1 - IoU of predicted boxes vs detection ROIs.

    Pairs whose overlap falls below the threshold are stripped from the
    solution.  Returns (matches, unmatched detection indices, unmatched
    track indices).
    """
    if not tracks or not detections:
        return [], list(range(len(detections))), list(range(len(tracks)))
    cost = np.ones((len(tracks), len(detections)))
    for ti, track in enumerate(tracks):
        for di, det in enumerate(detections):
            cost[ti, di] = 1.0 - iou(track.box, det.roi)
    matches = []
    matched_t, matched_d = set(), set()
    for ti, di in hungarian(cost):
        if 1.0 - cost[ti, di] >= overlap_threshold:
            matches.append((ti, di))
            matched_t.add(ti)
            matched_d.add(di)
    unmatched_d = [d for d in range(len(detections)) if d not in matched_d]
    unmatched_t = [t for t in range(len(tracks)) if t not in matched_t]
    return matches, unmatched_d, unmatched_t


class Tracker:
    """Sequential multi-target tracker; one instance per scan stream."""

    def __init__(self, cfg: TrackerConfig):
        self.cfg = cfg
        self.tracks: list[Track] = []
        self._ids = itertools.count(1)
        self.last_frame: int | None = None

    def step(self, frame: int, detections: list[Detection]
             ) -> tuple[list[TrackRecord], list[TrackEvent]]:
        """Advance one frame: predict, associate, update, apply lifecycle.

        Frames must arrive in strictly increasing order.  Returns the
        per-track records for this frame and any confirm/delete events.
        """
        if self.last_frame is not None and frame <= self.last_frame:
            raise ValueError(f"frame {frame} arrived after {self.last_frame}")
        self.last_frame = frame
        cfg = self.cfg

        for track in self.tracks:
            track.kalman = kalman_predict(track.kalman, cfg.ego_shift,
                                          cfg.process_noise)

        matches, unmatched_d, unmatched_t = assign(self.tracks, detections,
                                                   cfg.overlap_threshold)
        for ti, di in matches:
            track, det = self.tracks[ti], detections[di]
            track.kalman = kalman_update(track.kalman, det.roi.center,
                                         det.confidence,
                                         cfg.measurement_noise)
            track.box_size = (det.roi.x_len, det.roi.y_len)
            track.hits += 1
            track.invisible_frames = 0
            track.window.push(det.confidence)

        for di in unmatched_d:
            det = detections[di]
            track = Track(
                track_id=next(self._ids),
                kalman=kalman_init(det.roi.center, cfg),
                box_size=(det.roi.x_len, det.roi.y_len),
                window=ConfidenceWindow(cfg.window_size),
                created_frame=frame,
                stable_after=(cfg.min_detections + 1) // 2)
            track.window.push(det.confidence)
            self.tracks.append(track)

        for ti in unmatched_t:
            track = self.tracks[ti]
            track.invisible_frames += 1
            track.window.push(MISSED)

        events = []
        survivors = []
        records = []
        for track in self.tracks:
            mean = track.mean_confidence
            if mean > cfg.accept_threshold and track.hits > cfg.min_detections:
                if track.status is not TrackStatus.CONFIRMED:
                    track.status = TrackStatus.CONFIRMED
                    events.append(TrackEvent(frame, track.track_id,
                                             "CONFIRMED"))
                survivors.append(track)
            elif (mean < cfg.reject_threshold
                  or track.invisible_frames > cfg.invisible_limit):
                track.status = TrackStatus.DELETED
                events.append(TrackEvent(frame, track.track_id, "DELETED"))
            else:
                survivors.append(track)
            records.append(TrackRecord(
                frame, track.track_id, track.status.value,
                float(track.kalman.mean[0]), float(track.kalman.mean[1]),
                float(track.kalman.mean[2]), float(track.kalman.mean[3]),
                mean, track.hits, track.invisible_frames))
        self.tracks = survivors
        return records, events


def write_track_log(path, records: list[TrackRecord],
                    events: list[TrackEvent]) -> None:
    """Track log: one record line per frame per track plus event lines."""
    with open(path, "w", encoding="ascii") as fh:
        for rec in records:
            fh.write(rec.format() + "\n")
        for ev in events:
            fh.write(f"{ev.frame};{ev.track_id};{ev.kind}\n")


def read_track_log(path) -> tuple[list[TrackRecord], list[TrackEvent]]:
    records, events = [], []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            parts = line.strip().split(";")
            if len(parts) == 3:
                events.append(TrackEvent(int(parts[0]), int(parts[1]),
                                         parts[2]))
            elif len(parts) == 10:
                records.append(TrackRecord(
                    int(parts[0]), int(parts[1]), parts[2],
                    *(float(v) for v in parts[3:8]),
                    int(parts[8]), int(parts[9])))
            elif parts and parts[0]:
                raise ValueError(f"malformed track log line: {line!r}")
    return records, events
