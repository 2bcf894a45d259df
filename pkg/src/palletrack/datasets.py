"""Dataset handling: labeled-corpus I/O, classifier-set construction, and a
deterministic ray-casting generator for synthetic desk-scale scenes.

Scenes live in world coordinates; each frame the primitives are transformed
into the sensor frame and 761 beams are cast over the 190 degree fan.  The
bearing convention follows the scan model (x = r cos phi), so the fully
visible part of the raster window is the cone phi in [0, 95] degrees;
scene helpers place content inside it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BACKGROUND_IOU, OBJECT_IOU, BoundingBox, iou
from .scan import (
    DEFAULT_ANGULAR_RESOLUTION_DEG,
    DEFAULT_FRAME_RATE,
    DEFAULT_MAX_FOV_DEG,
    DEFAULT_POINT_COUNT,
    DEFAULT_RANGE_SIGMA,
    IMAGE_SIZE,
    PIXEL_SIDE,
    WINDOW_DEPTH,
    WINDOW_HALF_WIDTH,
    BitmapImage,
    PolarScan,
    read_pgm,
    write_pgm,
)

MISS_RANGE = 49.0  # sensor maximum range; beyond the depth cap, so dropped

# EUR pallet footprint is 1.2 m by 0.8 m.  The front face shows three blocks
# separated by two 0.2275 m gaps, which fixes the block width at
# (1.2 - 2 * 0.2275) / 3.
PALLET_WIDTH = 1.2
PALLET_DEPTH = 0.8
GAP_WIDTH = 0.2275
BLOCK_WIDTH = (PALLET_WIDTH - 2 * GAP_WIDTH) / 3


@dataclass(frozen=True)
class LabeledFrame:
    image: BitmapImage
    truths: tuple[BoundingBox, ...]
    labels: tuple[str, ...] = ()
    source: str = ""

    def __post_init__(self):
        if not self.labels:
            object.__setattr__(self, "labels",
                               tuple("pallet" for _ in self.truths))


@dataclass(frozen=True)
class SyntheticScene:
    """World-frame scene: pallet poses, clutter primitives, ego trajectory."""

    pallets: tuple[tuple[float, float, float], ...] = ()   # x, y, theta
    segments: tuple[tuple[float, float, float, float], ...] = ()
    arcs: tuple[tuple[float, float, float, float, float], ...] = ()
    ego: tuple[tuple[float, float, float], ...] = ((0.0, 0.0, 0.0),)
    noise_sigma: float = DEFAULT_RANGE_SIGMA
    dropout: float = 0.0
    seed: int = 0

    @property
    def frames(self) -> int:
        return len(self.ego)


def linear_trajectory(start: tuple[float, float, float], forward_speed: float,
                      frames: int, frame_rate: float = 4.0
                      ) -> tuple[tuple[float, float, float], ...]:
    """Constant-velocity ego poses advancing along the sensor's deep axis."""
    x0, y0, heading = start
    step = forward_speed / frame_rate
    return tuple((x0, y0 + i * step, heading) for i in range(frames))


# --- ray casting ------------------------------------------------------------

def _to_sensor(points: np.ndarray, pose: tuple[float, float, float]
               ) -> np.ndarray:
    x, y, heading = pose
    shifted = points - np.array([x, y])
    c, s = math.cos(-heading), math.sin(-heading)
    rot = np.array([[c, -s], [s, c]])
    return shifted @ rot.T


def _pallet_face_segments(pose: tuple[float, float, float]) -> np.ndarray:
    """World-frame endpoints of the three visible front-face blocks."""
    x, y, theta = pose
    half_w, half_d = PALLET_WIDTH / 2, PALLET_DEPTH / 2
    spans = [(-half_w, -half_w + BLOCK_WIDTH),
             (-BLOCK_WIDTH / 2, BLOCK_WIDTH / 2),
             (half_w - BLOCK_WIDTH, half_w)]
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    segs = []
    for a, b in spans:
        local = np.array([[a, -half_d], [b, -half_d]])
        segs.append(local @ rot.T + np.array([x, y]))
    return np.array(segs)  # (3, 2, 2)


def _footprint_corners(pose: tuple[float, float, float]) -> np.ndarray:
    x, y, theta = pose
    half_w, half_d = PALLET_WIDTH / 2, PALLET_DEPTH / 2
    local = np.array([[-half_w, -half_d], [half_w, -half_d],
                      [half_w, half_d], [-half_w, half_d]])
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([x, y])


def _ray_segment_ranges(dirs: np.ndarray, p: np.ndarray, q: np.ndarray
                        ) -> np.ndarray:
    """Distance from the origin to segment pq along each beam, inf on miss."""
    e = q - p
    denom = dirs[:, 0] * e[1] - dirs[:, 1] * e[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (p[0] * e[1] - p[1] * e[0]) / denom
        u = (p[0] * dirs[:, 1] - p[1] * dirs[:, 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (t >= 0) & (u >= 0.0) & (u <= 1.0)
    return np.where(hit, t, np.inf)


def _ray_arc_ranges(dirs: np.ndarray, center: np.ndarray, radius: float,
                    a0: float, a1: float) -> np.ndarray:
    """Distance along each beam to a circular arc, inf on miss."""
    b = dirs @ center
    c = float(center @ center) - radius * radius
    disc = b * b - c
    out = np.full(dirs.shape[0], np.inf)
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    span = (a1 - a0) % (2 * math.pi)
    if span == 0.0:
        span = 2 * math.pi
    for t in (b - sq, b + sq):
        valid = ok & (t > 1e-12) & (t < out)
        if not valid.any():
            continue
        hits = dirs[valid] * t[valid, None] - center
        ang = np.arctan2(hits[:, 1], hits[:, 0])
        on_arc = ((ang - a0) % (2 * math.pi)) <= span
        idx = np.nonzero(valid)[0][on_arc]
        out[idx] = np.minimum(out[idx], t[valid][on_arc])
    return out


def beam_angles(count: int = DEFAULT_POINT_COUNT,
                resolution_deg: float = DEFAULT_ANGULAR_RESOLUTION_DEG,
                fov_deg: float = DEFAULT_MAX_FOV_DEG) -> np.ndarray:
    start = -math.radians(fov_deg) / 2
    return start + np.arange(count) * math.radians(resolution_deg)


def cast_scan(scene: SyntheticScene, pose: tuple[float, float, float]
              ) -> np.ndarray:
    """Noise-free ranges of all beams from one ego pose (inf on miss)."""
    angles = beam_angles()
    dirs = np.column_stack([np.cos(angles), np.sin(angles)])
    ranges = np.full(angles.size, np.inf)
    for pallet in scene.pallets:
        for seg in _pallet_face_segments(pallet):
            p, q = _to_sensor(seg, pose)
            ranges = np.minimum(ranges, _ray_segment_ranges(dirs, p, q))
    for x1, y1, x2, y2 in scene.segments:
        p, q = _to_sensor(np.array([[x1, y1], [x2, y2]]), pose)
        ranges = np.minimum(ranges, _ray_segment_ranges(dirs, p, q))
    for cx, cy, radius, a0, a1 in scene.arcs:
        center = _to_sensor(np.array([[cx, cy]]), pose)[0]
        shifted = (a0 - pose[2], a1 - pose[2])
        ranges = np.minimum(ranges, _ray_arc_ranges(dirs, center, radius,
                                                    *shifted))
    return ranges


def _truth_box(pose, ego_pose) -> BoundingBox | None:
    corners = _to_sensor(_footprint_corners(pose), ego_pose)
    x0 = (corners[:, 0].min() + WINDOW_HALF_WIDTH) / PIXEL_SIDE
    x1 = (corners[:, 0].max() + WINDOW_HALF_WIDTH) / PIXEL_SIDE
    y0 = (WINDOW_DEPTH - corners[:, 1].max()) / PIXEL_SIDE
    y1 = (WINDOW_DEPTH - corners[:, 1].min()) / PIXEL_SIDE
    x0, y0 = max(0.0, x0), max(0.0, y0)
    x1, y1 = min(float(IMAGE_SIZE), x1), min(float(IMAGE_SIZE), y1)
    if x1 - x0 < 1.0 or y1 - y0 < 1.0:
        return None
    return BoundingBox(x0, y0, x1 - x0, y1 - y0)


def synthesize(scene: SyntheticScene
               ) -> list[tuple[PolarScan, list[BoundingBox]]]:
    """Per-frame scans with Gaussian range noise and dropout, plus the
    projected pallet-footprint truth boxes in bitmap coordinates.

    Deterministic for a fixed scene seed.  A pallet that never enters the
    raster window still produces frames, just without its truth box.
    """
    rng = np.random.default_rng(scene.seed)
    angles = beam_angles()
    frames = []
    any_truth = False
    for index, pose in enumerate(scene.ego):
        ranges = cast_scan(scene, pose)
        hit = np.isfinite(ranges)
        noisy = np.where(hit, ranges + rng.normal(0.0, scene.noise_sigma,
                                                  ranges.size), MISS_RANGE)
        if scene.dropout > 0.0:
            lost = rng.random(ranges.size) < scene.dropout
            noisy = np.where(lost, MISS_RANGE, noisy)
        noisy = np.maximum(noisy, 0.0)
        scan = PolarScan(np.column_stack([noisy, angles]),
                         timestamp=index / DEFAULT_FRAME_RATE)
        truths = []
        for pallet in scene.pallets:
            box = _truth_box(pallet, pose)
            if box is not None:
                truths.append(box)
                any_truth = True
        frames.append((scan, truths))
    if scene.pallets and not any_truth:
        warnings.warn("no pallet enters the raster window in any frame",
                      stacklevel=2)
    return frames


def _visible_pose(rng: np.random.Generator
                  ) -> tuple[float, float, float]:
    """Random pallet pose whose footprint sits inside the sensor's cone."""
    while True:
        bearing = rng.uniform(math.radians(30), math.radians(82))
        distance = rng.uniform(1.6, 4.3)
        x = distance * math.cos(bearing)
        y = distance * math.sin(bearing)
        theta = rng.uniform(-0.25, 0.25)
        corners = _footprint_corners((x, y, theta))
        angles = np.degrees(np.arctan2(corners[:, 1], corners[:, 0]))
        if (angles.min() > 4.0 and angles.max() < 91.0
                and corners[:, 1].min() > 0.25
                and corners[:, 1].max() < 5.1
                and abs(x) < 1.95):
            return (x, y, theta)


def synthetic_corpus(count: int, seed: int = 0, clutter: bool = True,
                     noise_sigma: float = DEFAULT_RANGE_SIGMA
                     ) -> list[LabeledFrame]:
    """Randomized single-pallet frames for training and evaluation.

    Each frame comes from its own one-shot scene: a pallet at a random
    visible pose, optionally with a wall segment and a pillar arc as
    clutter.  Deterministic for a fixed seed.
    """
    from .scan import polar_to_cartesian, rasterize

    rng = np.random.default_rng(seed)
    frames = []
    for index in range(count):
        pose = _visible_pose(rng)
        segments = []
        arcs = []
        if clutter:
            wall_y = rng.uniform(pose[1] + 0.9, 5.6)
            x0 = rng.uniform(-1.5, 0.5)
            segments.append((x0, wall_y, x0 + rng.uniform(1.0, 3.0),
                             wall_y + rng.uniform(-0.3, 0.3)))
            if rng.random() < 0.5:
                cx = rng.uniform(0.2, 2.0)
                cy = rng.uniform(1.0, 4.5)
                arcs.append((cx, cy, rng.uniform(0.08, 0.3), 0.0,
                             2 * math.pi))
        scene = SyntheticScene(
            pallets=(pose,), segments=tuple(segments), arcs=tuple(arcs),
            noise_sigma=noise_sigma, seed=int(rng.integers(0, 2 ** 31)))
        scan, truths = synthesize(scene)[0]
        image = rasterize(polar_to_cartesian(scan))
        frames.append(LabeledFrame(image, tuple(truths),
                                   source=f"synthetic_{index:05d}.pgm"))
    return frames


# --- scene files ------------------------------------------------------------

def format_scene(scene: SyntheticScene) -> str:
    lines = [f"seed {scene.seed}",
             f"noise {scene.noise_sigma!r}",
             f"dropout {scene.dropout!r}"]
    for x, y, theta in scene.pallets:
        lines.append(f"pallet {x!r} {y!r} {theta!r}")
    for x1, y1, x2, y2 in scene.segments:
        lines.append(f"segment {x1!r} {y1!r} {x2!r} {y2!r}")
    for cx, cy, r, a0, a1 in scene.arcs:
        lines.append(f"arc {cx!r} {cy!r} {r!r} {a0!r} {a1!r}")
    for x, y, heading in scene.ego:
        lines.append(f"ego {x!r} {y!r} {heading!r}")
    return "\n".join(lines) + "\n"


def parse_scene(text: str) -> SyntheticScene:
    pallets, segments, arcs, ego = [], [], [], []
    seed, noise, dropout = 0, DEFAULT_RANGE_SIGMA, 0.0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *args = line.split()
        try:
            vals = [float(a) for a in args]
            if kind == "seed":
                seed = int(args[0])
            elif kind == "noise":
                noise = vals[0]
            elif kind == "dropout":
                dropout = vals[0]
            elif kind == "pallet":
                pallets.append(tuple(vals[:3]))
            elif kind == "segment":
                segments.append(tuple(vals[:4]))
            elif kind == "arc":
                arcs.append(tuple(vals[:5]))
            elif kind == "ego":
                ego.append(tuple(vals[:3]))
            else:
                raise ValueError(f"unknown directive {kind!r}")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"scene line {lineno}: {exc}") from exc
    if not ego:
        ego = [(0.0, 0.0, 0.0)]
    return SyntheticScene(tuple(pallets), tuple(segments), tuple(arcs),
                          tuple(ego), noise, dropout, seed)


def read_scene(path) -> SyntheticScene:
    return parse_scene(Path(path).read_text(encoding="ascii"))


def write_scene(path, scene: SyntheticScene) -> None:
    Path(path).write_text(format_scene(scene), encoding="ascii")


# --- corpus index files -----------------------------------------------------

@dataclass
class CorpusLoadResult:
    frames: list[LabeledFrame]
    errors: list[tuple[int, str]]


def _parse_box(token: str) -> tuple[str, BoundingBox]:
    label, *coords = token.split(":")
    if len(coords) != 4:
        raise ValueError(f"box needs label:x_min:y_min:x_len:y_len, "
                         f"got {token!r}")
    x0, y0, w, h = (float(c) for c in coords)
    box = BoundingBox(x0, y0, w, h)
    if box.x_max > IMAGE_SIZE or box.y_max > IMAGE_SIZE:
        raise ValueError(f"box {token!r} extends past {IMAGE_SIZE} px")
    return label, box


def load_corpus(index_path) -> CorpusLoadResult:
    """Read an index CSV: `path,label:x_min:y_min:x_len:y_len[,...]`.

    Image paths are resolved relative to the index file.  Malformed lines
    are reported with their line numbers and skipped; the load continues.
    """
    index_path = Path(index_path)
    base = index_path.parent
    frames: list[LabeledFrame] = []
    errors: list[tuple[int, str]] = []
    text = index_path.read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        rel, *tokens = line.split(",")
        try:
            labels, boxes = [], []
            for token in tokens:
                label, box = _parse_box(token)
                labels.append(label)
                boxes.append(box)
            image = read_pgm(base / rel)
            frames.append(LabeledFrame(image, tuple(boxes), tuple(labels),
                                       source=rel))
        except (ValueError, OSError) as exc:
            errors.append((lineno, str(exc)))
    return CorpusLoadResult(frames, errors)


def save_corpus(index_path, frames: list[LabeledFrame],
                prefix: str = "frame") -> None:
    index_path = Path(index_path)
    index_path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, frame in enumerate(frames):
        rel = frame.source or f"{prefix}_{i:05d}.pgm"
        write_pgm(index_path.parent / rel, frame.image)
        tokens = [rel]
        for label, box in zip(frame.labels, frame.truths):
            tokens.append(f"{label}:{box.x_min!r}:{box.y_min!r}"
                          f":{box.x_len!r}:{box.y_len!r}")
        lines.append(",".join(tokens))
    index_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- anchor-based training samples -------------------------------------------

def _anchor_overlaps(boxes: list[BoundingBox], truths) -> np.ndarray:
    """Best IoU of each box against the frame's truths."""
    if not truths:
        return np.zeros(len(boxes))
    best = np.zeros(len(boxes))
    for truth in truths:
        best = np.maximum(best, [iou(b, truth) for b in boxes])
    return best


def sample_training_rois(frames, *, positives: int = 4, negatives: int = 4,
                         seed: int = 0, detector_config=None
                         ) -> list[list[BoundingBox]]:
    """Per-frame ROI lists drawn from the anchor lattice.

    Positive ROIs overlap a truth above the object threshold, negatives sit
    below the background threshold and contain at least one occupied pixel.
    The draw is seeded and balanced per frame where availability allows.
    """
    from .detector import DetectorConfig

    cfg = detector_config or DetectorConfig()
    plan = cfg.plan()
    boxes = [a.box for a in plan.anchors]
    rng = np.random.default_rng(seed)
    rois = []
    for frame in frames:
        overlap = _anchor_overlaps(boxes, list(frame.truths))
        occ = frame.image.occupancy
        ii = np.zeros((occ.shape[0] + 1, occ.shape[1] + 1), dtype=np.int32)
        ii[1:, 1:] = occ.cumsum(axis=0).cumsum(axis=1)
        content = (ii[plan.r1, plan.c1] - ii[plan.r0, plan.c1]
                   - ii[plan.r1, plan.c0] + ii[plan.r0, plan.c0]) > 0
        pos_pool = np.nonzero((overlap > OBJECT_IOU) & content)[0]
        neg_pool = np.nonzero((overlap < BACKGROUND_IOU) & content)[0]
        chosen = []
        if pos_pool.size:
            take = min(positives, pos_pool.size)
            chosen.extend(rng.choice(pos_pool, take, replace=False))
        if neg_pool.size:
            take = min(negatives, neg_pool.size)
            chosen.extend(rng.choice(neg_pool, take, replace=False))
        rois.append([boxes[i] for i in chosen])
    return rois


def anchor_training_patches(frames, *, positives: int = 8, negatives: int = 8,
                            seed: int = 0, detector_config=None
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Objectness training set: downscaled anchor crops with 0/1 labels.

    Anchors in the uncertain overlap band are excluded, mirroring the
    objectness labeling rule.
    """
    from .detector import PATCH_SIZE, DetectorConfig, downscale_crop

    cfg = detector_config or DetectorConfig()
    plan = cfg.plan()
    boxes = [a.box for a in plan.anchors]
    rng = np.random.default_rng(seed)
    patches, labels = [], []
    for frame in frames:
        overlap = _anchor_overlaps(boxes, list(frame.truths))
        occ = frame.image.occupancy
        ii = np.zeros((occ.shape[0] + 1, occ.shape[1] + 1), dtype=np.int32)
        ii[1:, 1:] = occ.cumsum(axis=0).cumsum(axis=1)
        content = (ii[plan.r1, plan.c1] - ii[plan.r0, plan.c1]
                   - ii[plan.r1, plan.c0] + ii[plan.r0, plan.c0]) > 0
        pools = ((np.nonzero((overlap > OBJECT_IOU) & content)[0], 1,
                  positives),
                 (np.nonzero((overlap < BACKGROUND_IOU) & content)[0], 0,
                  negatives))
        for pool, label, count in pools:
            if not pool.size:
                continue
            for i in rng.choice(pool, min(count, pool.size), replace=False):
                c0, c1, r0, r1 = plan.c0[i], plan.c1[i], plan.r0[i], plan.r1[i]
                patches.append(downscale_crop(occ[r0:r1, c0:c1]))
                labels.append(label)
    if not patches:
        return (np.zeros((0, 32, 32), dtype=bool), np.zeros(0, dtype=np.intp))
    return np.stack(patches), np.array(labels, dtype=np.intp)


# --- classifier dataset -----------------------------------------------------

def build_classifier_set(frames: list[LabeledFrame],
                         rois_per_frame: list[list[BoundingBox]]
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Masked full-size images labeled by overlap with the frame's truths.

    An ROI whose best truth overlap exceeds the object threshold becomes a
    class-1 sample, below the background threshold class 0; the uncertain
    band in between is excluded.  Returns (images, labels) with images as
    a boolean (n, 250, 250) stack.
    """
    if len(frames) != len(rois_per_frame):
        raise ValueError("one ROI list per frame required")
    images, labels = [], []
    for frame, rois in zip(frames, rois_per_frame):
        occ = frame.image.occupancy
        for roi in rois:
            best = max((iou(roi, t) for t in frame.truths), default=0.0)
            if best > OBJECT_IOU:
                label = 1
            elif best < BACKGROUND_IOU:
                label = 0
            else:
                continue
            c0, c1, r0, r1 = roi.pixel_bounds(frame.image.width)
            masked = np.zeros_like(occ)
            masked[r0:r1, c0:c1] = occ[r0:r1, c0:c1]
            images.append(masked)
            labels.append(label)
    if not images:
        return (np.zeros((0, IMAGE_SIZE, IMAGE_SIZE), dtype=bool),
                np.zeros(0, dtype=np.intp))
    return np.stack(images), np.array(labels, dtype=np.intp)
