"""Rangefinder frames and their conversion to binary occupancy bitmaps.

A frame is a sequence of (range, bearing) samples.  Frames are converted to
Cartesian points, windowed to a fixed metric rectangle in front of the
sensor, and rasterized onto a 250x250 binary grid where one pixel covers
4.5 cm^2.  All types are immutable values; the operations are pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .geometry import BoundingBox

# Sensor defaults: 761 beams, 0.25 deg steps over a 190 deg fan.
DEFAULT_POINT_COUNT = 761
DEFAULT_ANGULAR_RESOLUTION_DEG = 0.25
DEFAULT_MAX_FOV_DEG = 190.0
DEFAULT_RANGE_SIGMA = 0.003  # empirical 1-sigma range error in meters
DEFAULT_DEPTH_CAP = 6.0
DEFAULT_FRAME_RATE = 4.0

IMAGE_SIZE = 250
WINDOW_HALF_WIDTH = 2.65   # x in [-2.65, +2.65] m
WINDOW_DEPTH = 5.3         # y in [0, 5.3] m
PIXEL_SIDE = WINDOW_DEPTH / IMAGE_SIZE  # 0.0212 m, 4.4944 cm^2 per pixel


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class PolarScan:
    """One rangefinder frame: (range, bearing) samples plus sensor metadata."""

    points: np.ndarray  # shape (M, 2): range in meters, bearing in radians
    timestamp: float = 0.0
    angular_resolution: float = DEFAULT_ANGULAR_RESOLUTION_DEG
    max_fov: float = DEFAULT_MAX_FOV_DEG

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if pts.size and pts[:, 0].min() < 0:
            raise ValueError("ranges must be non-negative")
        half = math.radians(self.max_fov) / 2 + 1e-12
        if pts.size and (np.abs(pts[:, 1]) > half).any():
            raise ValueError("bearing outside the sensor field of view")
        object.__setattr__(self, "points", _readonly(pts))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class CartesianCloud:
    points: np.ndarray  # shape (N, 2): x, y in meters

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        object.__setattr__(self, "points", _readonly(pts))

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class BitmapImage:
    """Binary occupancy raster of one scan over the fixed metric window."""

    occupancy: np.ndarray = field(
        default_factory=lambda: np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool))
    width: int = IMAGE_SIZE
    height: int = IMAGE_SIZE
    pixel_side: float = PIXEL_SIDE

    def __post_init__(self):
        occ = np.asarray(self.occupancy, dtype=bool)
        if occ.shape != (self.height, self.width):
            raise ValueError(f"occupancy shape {occ.shape} does not match "
                             f"{self.height}x{self.width}")
        object.__setattr__(self, "occupancy", _readonly(occ))

    @property
    def occupied_count(self) -> int:
        return int(self.occupancy.sum())


def polar_to_cartesian(scan: PolarScan,
                       depth_cap: float = DEFAULT_DEPTH_CAP) -> CartesianCloud:
    """Convert retained samples to (x, y); samples beyond depth_cap are dropped."""
    if depth_cap <= 0:
        raise ValueError("depth_cap must be positive")
    pts = scan.points
    keep = pts[:, 0] <= depth_cap
    r = pts[keep, 0]
    phi = pts[keep, 1]
    return CartesianCloud(np.column_stack([r * np.cos(phi), r * np.sin(phi)]))


def point_to_pixel(x: float, y: float) -> tuple[int, int] | None:
    """Map one in-window metric point to its (col, row) pixel, else None.

    The window is closed on all sides; points landing exactly on the far
    boundary belong to the last row/column.
    """
    if not (-WINDOW_HALF_WIDTH <= x <= WINDOW_HALF_WIDTH and 0.0 <= y <= WINDOW_DEPTH):
        return None
    col = min(int(math.floor((x + WINDOW_HALF_WIDTH) / PIXEL_SIDE)), IMAGE_SIZE - 1)
    row = min(int(math.floor((WINDOW_DEPTH - y) / PIXEL_SIDE)), IMAGE_SIZE - 1)
    return col, row


def rasterize(cloud: CartesianCloud) -> BitmapImage:
    """OR-rasterize a cloud onto the metric window; out-of-window points drop."""
    occ = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    pts = cloud.points
    if pts.size:
        x, y = pts[:, 0], pts[:, 1]
        keep = ((x >= -WINDOW_HALF_WIDTH) & (x <= WINDOW_HALF_WIDTH)
                & (y >= 0.0) & (y <= WINDOW_DEPTH))
        cols = np.floor((x[keep] + WINDOW_HALF_WIDTH) / PIXEL_SIDE).astype(np.intp)
        rows = np.floor((WINDOW_DEPTH - y[keep]) / PIXEL_SIDE).astype(np.intp)
        np.minimum(cols, IMAGE_SIZE - 1, out=cols)
        np.minimum(rows, IMAGE_SIZE - 1, out=rows)
        occ[rows, cols] = True
    return BitmapImage(occ)


def _rotate_box_cw(b: BoundingBox, size: int) -> BoundingBox:
    return BoundingBox(size - b.y_min - b.y_len, b.x_min, b.y_len, b.x_len)


def _rotate_box_ccw(b: BoundingBox, size: int) -> BoundingBox:
    return BoundingBox(b.y_min, size - b.x_min - b.x_len, b.y_len, b.x_len)


def rotate(image: BitmapImage, labels: Sequence[BoundingBox],
           quarter_turns: int) -> tuple[BitmapImage, list[BoundingBox]]:
    """Rotate by +90 deg clockwise (quarter_turns=+1) or anticlockwise (-1).

    Pure index permutation on the square grid, no interpolation; labels are
    transformed consistently so the inverse turn restores the input exactly.
    """
    if quarter_turns == 1:
        occ = np.rot90(image.occupancy, k=-1)
        boxes = [_rotate_box_cw(b, image.width) for b in labels]
    elif quarter_turns == -1:
        occ = np.rot90(image.occupancy, k=1)
        boxes = [_rotate_box_ccw(b, image.width) for b in labels]
    else:
        raise ValueError("quarter_turns must be +1 or -1")
    return BitmapImage(np.ascontiguousarray(occ)), boxes


def augment(image: BitmapImage, labels: Sequence[BoundingBox]
            ) -> list[tuple[BitmapImage, list[BoundingBox]]]:
    """Original plus the two quarter-turn rotations, labels transformed."""
    for b in labels:
        if b.x_max > image.width or b.y_max > image.height:
            raise ValueError(f"label {b} extends outside the image")
    return [
        (image, list(labels)),
        rotate(image, labels, +1),
        rotate(image, labels, -1),
    ]


# --- playback and bitmap files -------------------------------------------

def format_playback_line(scan: PolarScan) -> str:
    """`timestamp;r_1,phi_1;...;r_M,phi_M` in plain decimal text."""
    parts = [repr(float(scan.timestamp))]
    parts.extend(f"{float(r)!r},{float(phi)!r}" for r, phi in scan.points)
    return ";".join(parts)


def parse_playback_line(line: str) -> PolarScan:
    fields = line.strip().split(";")
    if not fields or not fields[0]:
        raise ValueError("empty playback line")
    timestamp = float(fields[0])
    pts = []
    for tok in fields[1:]:
        r_s, phi_s = tok.split(",")
        pts.append((float(r_s), float(phi_s)))
    return PolarScan(np.array(pts, dtype=np.float64).reshape(-1, 2),
                     timestamp=timestamp)


def write_playback(path, scans: Iterable[PolarScan]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for scan in scans:
            fh.write(format_playback_line(scan) + "\n")


def read_playback(path) -> list[PolarScan]:
    scans = []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            if line.strip():
                scans.append(parse_playback_line(line))
    return scans


def write_pgm(path, image: BitmapImage) -> None:
    """Binary PGM (P5), occupied pixels white (255) on black."""
    data = np.where(image.occupancy, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> BitmapImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":  # comment line
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    width, height, maxval = (int(f) for f in fields)
    if maxval > 255:
        raise ValueError(f"{path}: unsupported 16-bit PGM")
    pos += 1  # single whitespace after maxval
    raster = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos)
    return BitmapImage(raster.reshape(height, width) > 127,
                       width=width, height=height)
