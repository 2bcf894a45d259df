"""Deterministic rendering of frames and track boxes to PGM and SVG."""

from __future__ import annotations

import numpy as np

from .geometry import BoundingBox
from .scan import BitmapImage
from .tracker import TrackRecord

# grayscale levels for box outlines, brightest for confirmed tracks
LEVEL_TENTATIVE = 90
LEVEL_STABLE = 160
LEVEL_CONFIRMED = 230

SVG_COLORS = {
    "Tentative": "#d9c400",
    "Stable": "#ff8c00",
    "Confirmed": "#e00000",
    "Deleted": "#555555",
}


def display_state(record: TrackRecord, stable_after: int) -> str:
    """Presentation bucket: confirmed beats stable beats tentative."""
    if record.status == "Confirmed":
        return "Confirmed"
    if record.status == "Deleted":
        return "Deleted"
    if record.hits >= stable_after:
        return "Stable"
    return "Tentative"


def _outline(canvas: np.ndarray, box: BoundingBox, level: int,
             thickness: int) -> None:
    h, w = canvas.shape
    c0, c1, r0, r1 = box.pixel_bounds(w)
    r1 = min(r1, h)
    c1 = min(c1, w)
    for t in range(thickness):
        rr0, rr1 = min(r0 + t, h - 1), max(min(r1 - 1 - t, h - 1), 0)
        cc0, cc1 = min(c0 + t, w - 1), max(min(c1 - 1 - t, w - 1), 0)
        canvas[rr0, cc0:cc1 + 1] = level
        canvas[rr1, cc0:cc1 + 1] = level
        canvas[rr0:rr1 + 1, cc0] = level
        canvas[rr0:rr1 + 1, cc1] = level


def render_frame_pgm(image: BitmapImage, records: list[TrackRecord],
                     stable_after: int = 5) -> np.ndarray:
    """Grayscale frame: occupancy in white, track outlines by status."""
    canvas = np.where(image.occupancy, 255, 0).astype(np.uint8)
    order = {"Tentative": 0, "Deleted": 1, "Stable": 2, "Confirmed": 3}
    for rec in sorted(records, key=lambda r: (order[display_state(
            r, stable_after)], r.track_id)):
        state = display_state(rec, stable_after)
        if state == "Deleted":
            continue
        level = {"Tentative": LEVEL_TENTATIVE, "Stable": LEVEL_STABLE,
                 "Confirmed": LEVEL_CONFIRMED}[state]
        box = _record_box(rec, image.width)
        if box is not None:
            _outline(canvas, box, level, 2 if state == "Confirmed" else 1)
    return canvas


def _record_box(rec: TrackRecord, image_size: int) -> BoundingBox | None:
    # track logs carry the centroid; standard display size is the EUR
    # footprint unless the log row came with an explicit box
    w, h = 57.0, 38.0
    x0 = min(max(0.0, rec.x - w / 2), image_size - w)
    y0 = min(max(0.0, rec.y - h / 2), image_size - h)
    try:
        return BoundingBox(x0, y0, w, h)
    except ValueError:
        return None


def write_frame_pgm(path, canvas: np.ndarray) -> None:
    h, w = canvas.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(canvas.tobytes())


def render_frame_svg(image: BitmapImage, records: list[TrackRecord],
                     stable_after: int = 5) -> str:
    size = image.width
    rows, cols = np.nonzero(image.occupancy)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
        f'height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect width="{size}" height="{size}" fill="black"/>',
    ]
    for r, c in zip(rows.tolist(), cols.tolist()):
        parts.append(f'<rect x="{c}" y="{r}" width="1" height="1" '
                     f'fill="white"/>')
    for rec in sorted(records, key=lambda r: r.track_id):
        state = display_state(rec, stable_after)
        if state == "Deleted":
            continue
        box = _record_box(rec, size)
        if box is None:
            continue
        color = SVG_COLORS[state]
        parts.append(
            f'<rect x="{box.x_min:.2f}" y="{box.y_min:.2f}" '
            f'width="{box.x_len:.2f}" height="{box.y_len:.2f}" '
            f'fill="none" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{box.x_min:.2f}" y="{box.y_min - 2:.2f}" '
                     f'fill="{color}" font-size="10">T{rec.track_id}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
