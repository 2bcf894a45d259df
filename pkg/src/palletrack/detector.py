"""Two-stage per-frame detection: anchor proposals scored for objectness by
the proposal CNN, NMS, then ROI classification on masked full-size images.

Anchors whose crop contains no occupied pixel are skipped outright; the
remaining crops are OR-downscaled to the proposal network's 32x32 input,
deduplicated (identical crops score identically), and scored in one batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import cnn, fastscore
from .geometry import (
    DEFAULT_RATIOS,
    DEFAULT_SCALES,
    DEFAULT_STRIDE,
    Anchor,
    BoundingBox,
    generate_anchors,
    nms,
)
from .scan import IMAGE_SIZE, BitmapImage

PATCH_SIZE = 32  # proposal network input side


def proposal_network() -> cnn.Network:
    """Objectness CNN over 32x32 crops: two 3x3x40 conv stages, 3x3 pool,
    a 64-unit hidden layer, and a 2-class softmax."""
    return cnn.Network(
        (PATCH_SIZE, PATCH_SIZE, 1),
        [cnn.Conv(40, 3, 1, 1), cnn.Relu(),
         cnn.Conv(40, 3, 1, 1), cnn.Relu(),
         cnn.MaxPool(3, 1),
         cnn.Dense(64), cnn.Relu(),
         cnn.Dense(2), cnn.Softmax()])


def roi_classifier_network() -> cnn.Network:
    """Confidence CNN over masked 250x250 images: one 20x20x25 conv stage,
    5x5 stride-2 pool, and a 2-class softmax."""
    return cnn.Network(
        (IMAGE_SIZE, IMAGE_SIZE, 1),
        [cnn.Conv(25, 20, 1, 1), cnn.Relu(),
         cnn.MaxPool(5, 2),
         cnn.Dense(2), cnn.Softmax()])


@dataclass(frozen=True)
class Detection:
    """One candidate pallet: ROI with objectness and classifier confidence."""

    roi: BoundingBox
    objectness: float
    confidence: float
    frame: int = 0


@dataclass(frozen=True)
class DetectorConfig:
    objectness_threshold: float = 0.5
    candidate_threshold: float = 0.5
    nms_threshold: float = 0.3
    image_size: int = IMAGE_SIZE
    stride: int = DEFAULT_STRIDE
    scales: tuple[float, ...] = DEFAULT_SCALES
    ratios: tuple[float, ...] = DEFAULT_RATIOS

    def __post_init__(self):
        for name in ("objectness_threshold", "candidate_threshold",
                     "nms_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")

    def anchors(self) -> list[Anchor]:
        return _anchor_plan(self).anchors

    def plan(self) -> "_AnchorPlan":
        return _anchor_plan(self)


class _AnchorPlan:
    """Anchor lattice with precomputed pixel bounds, grouped by crop shape
    so whole groups can be cropped and OR-downscaled in one shot."""

    def __init__(self, cfg: "DetectorConfig"):
        self.anchors = generate_anchors(cfg.image_size, cfg.stride,
                                        cfg.scales, cfg.ratios)
        bounds = np.array([a.box.pixel_bounds(cfg.image_size)
                           for a in self.anchors], dtype=np.intp)
        self.c0, self.c1, self.r0, self.r1 = bounds.T
        shapes = np.column_stack([self.r1 - self.r0, self.c1 - self.c0])
        self.groups: list[tuple[int, int, np.ndarray]] = []
        for shape in np.unique(shapes, axis=0):
            idx = np.nonzero((shapes == shape).all(axis=1))[0]
            self.groups.append((int(shape[0]), int(shape[1]), idx))


_PLANS: dict[tuple, _AnchorPlan] = {}


def _anchor_plan(cfg: DetectorConfig) -> _AnchorPlan:
    key = (cfg.image_size, cfg.stride, tuple(cfg.scales), tuple(cfg.ratios))
    if key not in _PLANS:
        _PLANS[key] = _AnchorPlan(cfg)
    return _PLANS[key]


def downscale_crop(occ: np.ndarray, size: int = PATCH_SIZE) -> np.ndarray:
    """OR-pool a binary crop onto a size x size grid.

    Bins partition the crop when shrinking and replicate rows/columns when
    growing, so every occupied pixel survives into exactly one cell.
    """
    h, w = occ.shape
    rows = (np.arange(size) * h) // size
    cols = (np.arange(size) * w) // size
    data = occ.astype(np.uint8)
    pooled = np.maximum.reduceat(data, rows, axis=0)
    pooled = np.maximum.reduceat(pooled, cols, axis=1)
    return pooled.astype(bool)


def _integral(occ: np.ndarray) -> np.ndarray:
    ii = np.zeros((occ.shape[0] + 1, occ.shape[1] + 1), dtype=np.int32)
    ii[1:, 1:] = occ.cumsum(axis=0).cumsum(axis=1)
    return ii


def _box_sum(ii: np.ndarray, r0, r1, c0, c1):
    return ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]


def extract_patches(image: BitmapImage, anchors: Sequence[Anchor]
                    ) -> tuple[np.ndarray, list[int]]:
    """Downscaled 32x32 crops for anchors with any occupied pixel.

    Returns (patches, kept_indices); all-empty anchors are skipped.
    """
    occ = image.occupancy
    ii = _integral(occ)
    patches = []
    kept = []
    for idx, anchor in enumerate(anchors):
        c0, c1, r0, r1 = anchor.box.pixel_bounds(image.width)
        if _box_sum(ii, r0, r1, c0, c1) == 0:
            continue
        patches.append(downscale_crop(occ[r0:r1, c0:c1]))
        kept.append(idx)
    if not patches:
        return np.zeros((0, PATCH_SIZE, PATCH_SIZE), dtype=bool), []
    return np.stack(patches), kept


def extract_patches_planned(image: BitmapImage, plan: _AnchorPlan
                            ) -> tuple[np.ndarray, np.ndarray]:
    """Grouped-by-shape variant of extract_patches for the full lattice.

    Equivalent output (crops of all non-empty anchors, anchor indices) but
    crops sharing a shape are gathered and OR-pooled as one batch.
    """
    occ = image.occupancy
    ii = _integral(occ)
    sums = _box_sum(ii, plan.r0, plan.r1, plan.c0, plan.c1)
    data = occ.astype(np.uint8)
    chunks: list[np.ndarray] = []
    indices: list[np.ndarray] = []
    for ch, cw, idx in plan.groups:
        sel = idx[sums[idx] > 0]
        if sel.size == 0:
            continue
        rows = plan.r0[sel, None] + np.arange(ch)
        cols = plan.c0[sel, None] + np.arange(cw)
        crops = data[rows[:, :, None], cols[:, None, :]]
        rbins = (np.arange(PATCH_SIZE) * ch) // PATCH_SIZE
        cbins = (np.arange(PATCH_SIZE) * cw) // PATCH_SIZE
        pooled = np.maximum.reduceat(crops, rbins, axis=1)
        pooled = np.maximum.reduceat(pooled, cbins, axis=2)
        chunks.append(pooled.astype(bool))
        indices.append(sel)
    if not chunks:
        return np.zeros((0, PATCH_SIZE, PATCH_SIZE), dtype=bool), \
            np.zeros(0, dtype=np.intp)
    order = np.argsort(np.concatenate(indices), kind="stable")
    return np.concatenate(chunks)[order], np.concatenate(indices)[order]


def score_patches(net: cnn.Network, patches: np.ndarray) -> np.ndarray:
    """Class-1 probability per binary patch, deduplicating identical crops."""
    net.require_params()
    if patches.shape[0] == 0:
        return np.zeros(0)
    flat = np.packbits(patches.reshape(patches.shape[0], -1), axis=1)
    uniq, first, inverse = np.unique(flat, axis=0, return_index=True,
                                     return_inverse=True)
    scores = _score_engine(net).score(patches[first])
    return scores[inverse]


def propose(image: BitmapImage, net: cnn.Network, cfg: DetectorConfig
            ) -> list[tuple[BoundingBox, float]]:
    """NMS-filtered (box, objectness) proposals over the anchor lattice."""
    plan = cfg.plan()
    patches, kept = extract_patches_planned(image, plan)
    if kept.size == 0:
        return []
    scores = score_patches(net, patches)
    scored = [(plan.anchors[i].box, float(s)) for i, s in zip(kept, scores)]
    return nms(scored, cfg.nms_threshold)


def _clipped_bounds(roi: BoundingBox, size: int) -> tuple[int, int, int, int]:
    c0 = min(max(0, int(math.floor(roi.x_min))), size)
    c1 = min(max(0, int(math.ceil(roi.x_max))), size)
    r0 = min(max(0, int(math.floor(roi.y_min))), size)
    r1 = min(max(0, int(math.ceil(roi.y_max))), size)
    if r1 <= r0 or c1 <= c0:
        raise ValueError(f"degenerate ROI {roi}: zero area after clipping")
    return c0, c1, r0, r1


def mask_roi(image: BitmapImage, roi: BoundingBox) -> np.ndarray:
    """Full-size occupancy with everything outside the ROI zeroed."""
    c0, c1, r0, r1 = _clipped_bounds(roi, image.width)
    masked = np.zeros((image.height, image.width), dtype=cnn.DTYPE)
    masked[r0:r1, c0:c1] = image.occupancy[r0:r1, c0:c1]
    return masked


def classify_roi(image: BitmapImage, roi: BoundingBox,
                 net: cnn.Network) -> float:
    """Class-1 confidence of the classifier on the ROI-masked image."""
    net.require_params()
    engine = _mask_engine(net)
    if engine is not None:
        c0, c1, r0, r1 = _clipped_bounds(roi, image.width)
        masked = np.zeros((image.height, image.width), dtype=bool)
        masked[r0:r1, c0:c1] = image.occupancy[r0:r1, c0:c1]
        return engine.score(masked)
    return float(cnn.forward(net, mask_roi(image, roi)[..., None])[1])


def acquire(image: BitmapImage, proposal_net: cnn.Network,
            classifier_net: cnn.Network, cfg: DetectorConfig,
            frame: int = 0) -> list[Detection]:
    """Candidate pallets for one frame.

    Proposals above the objectness threshold are classified on their masked
    image; survivors of both thresholds form the candidate set.
    """
    candidates = []
    for box, objectness in propose(image, proposal_net, cfg):
        if objectness <= cfg.objectness_threshold:
            continue
        confidence = classify_roi(image, box, classifier_net)
        if confidence > cfg.candidate_threshold:
            candidates.append(Detection(box, objectness, confidence, frame))
    return candidates


# --- scoring engine dispatch -------------------------------------------------
#
# Inference goes through the sparsity-aware evaluators in fastscore when the
# network matches one of the two canonical architectures; anything else falls
# back to the plain batched forward pass.  Engines cache per-network
# precomputation and are rebuilt when the parameters change.

_ENGINES: dict[int, object] = {}


class _DenseEngine:
    """Straight batched forward pass, chunked to bound memory."""

    def __init__(self, net: cnn.Network):
        self.net = net
        self.fingerprint = None

    def score(self, patches: np.ndarray, chunk: int = 256) -> np.ndarray:
        out = np.empty(patches.shape[0])
        x = patches.astype(cnn.DTYPE)[..., None]
        for lo in range(0, x.shape[0], chunk):
            probs = cnn.forward_batch(self.net, x[lo:lo + chunk])
            out[lo:lo + probs.shape[0]] = probs[:, 1]
        return out


def _cached_engine(net: cnn.Network, build) -> object:
    eng = _ENGINES.get(id(net))
    if (eng is None or getattr(eng, "net", None) is not net
            or (eng.fingerprint is not None
                and eng.fingerprint != fastscore._fingerprint(net))):
        eng = build(net)
        _ENGINES[id(net)] = eng
    return eng


def _score_engine(net: cnn.Network):
    def build(net):
        if fastscore.ProposalScorer.supports(net):
            return fastscore.ProposalScorer(net)
        return _DenseEngine(net)
    return _cached_engine(net, build)


def _mask_engine(net: cnn.Network):
    if not fastscore.MaskedImageScorer.supports(net):
        return None
    return _cached_engine(net, fastscore.MaskedImageScorer)
