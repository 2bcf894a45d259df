"""Command-line surface: synthesis, training, detection, tracking,
evaluation, and rendering.

Every command exits nonzero with a single-line `error: <reason>` on
failure, takes its randomness from `--seed`, and reads optional config
overrides from an INI file whose sections mirror the config dataclasses
field by field.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import cnn, render
from .datasets import (
    LabeledFrame,
    anchor_training_patches,
    build_classifier_set,
    load_corpus,
    read_scene,
    sample_training_rois,
    save_corpus,
    synthesize,
    synthetic_corpus,
)
from .detector import (
    Detection,
    DetectorConfig,
    acquire,
    proposal_network,
    roi_classifier_network,
)
from .geometry import BoundingBox, iou
from .modelio import load_network, save_network
from .scan import (
    DEFAULT_DEPTH_CAP,
    polar_to_cartesian,
    rasterize,
    read_playback,
    write_playback,
)
from .tracker import Tracker, TrackerConfig, read_track_log, write_track_log
from .training import TrainConfig, accuracy, fold_partition, kfold_cv, train_sgd


class CliError(Exception):
    pass


@dataclasses.dataclass
class RunReport:
    """Machine-readable summary: accuracies, confusion, timing, events."""

    fold_accuracies: list[float] | None = None
    mean_accuracy: float | None = None
    confusion: dict[str, int] | None = None
    frame_times: list[float] | None = None
    frames_per_second: float | None = None
    events: list[dict] | None = None
    extras: dict | None = None

    def to_json(self) -> str:
        body = {k: v for k, v in dataclasses.asdict(self).items()
                if v is not None}
        if self.frame_times:
            body["frames_per_second"] = len(self.frame_times) / sum(
                self.frame_times)
        return json.dumps(body, indent=2, sort_keys=True)


def _emit_report(report: RunReport, out: str | None) -> None:
    text = report.to_json()
    print(text)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")


# --- config files ------------------------------------------------------------

def _coerce(current, raw: str):
    if isinstance(current, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        return tuple(float(v) for v in raw.replace(",", " ").split())
    return raw


def _apply_section(cfg, parser: configparser.ConfigParser, section: str):
    if not parser.has_section(section):
        return cfg
    updates = {}
    fields = {f.name: f for f in dataclasses.fields(cfg)}
    for key, raw in parser.items(section):
        if key not in fields:
            raise CliError(f"unknown {section} option {key!r}")
        updates[key] = _coerce(getattr(cfg, key), raw)
    return dataclasses.replace(cfg, **updates)


def load_configs(path: str | None, seed: int
                 ) -> tuple[DetectorConfig, TrackerConfig, TrainConfig]:
    detector = DetectorConfig()
    tracker = TrackerConfig()
    train = TrainConfig(seed=seed)
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise CliError(f"config file {path} not readable")
        detector = _apply_section(detector, parser, "detector")
        tracker = _apply_section(tracker, parser, "tracker")
        train = _apply_section(train, parser, "train")
    if train.seed != seed and seed != 0:
        train = dataclasses.replace(train, seed=seed)
    return detector, tracker, train


# --- shared helpers -----------------------------------------------------------

def _load_frames(args) -> list[LabeledFrame]:
    if getattr(args, "corpus", None):
        result = load_corpus(args.corpus)
        for lineno, message in result.errors:
            print(f"warning: {args.corpus}:{lineno}: {message}",
                  file=sys.stderr)
        if not result.frames:
            raise CliError(f"corpus {args.corpus} contains no usable frames")
        return result.frames
    if getattr(args, "playback", None):
        scans = read_playback(args.playback)
        return [LabeledFrame(rasterize(polar_to_cartesian(
            s, DEFAULT_DEPTH_CAP)), ()) for s in scans]
    raise CliError("provide --corpus or --playback")


def _load_models(args) -> tuple[cnn.Network, cnn.Network]:
    for name in ("detector_model", "classifier_model"):
        path = getattr(args, name)
        if not Path(path).exists():
            raise CliError(f"model file {path} not found")
    return load_network(args.detector_model), load_network(
        args.classifier_model)


def _augmented(frames: list[LabeledFrame]) -> list[LabeledFrame]:
    from .scan import augment

    out = []
    for frame in frames:
        for image, labels in augment(frame.image, list(frame.truths)):
            out.append(LabeledFrame(image, tuple(labels)))
    return out


# --- commands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    scene = read_scene(args.scene)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = synthesize(scene)
    write_playback(out / "playback.txt", [scan for scan, _ in frames])
    labeled = []
    for index, (scan, truths) in enumerate(frames):
        image = rasterize(polar_to_cartesian(scan, DEFAULT_DEPTH_CAP))
        labeled.append(LabeledFrame(image, tuple(truths),
                                    source=f"frame_{index:05d}.pgm"))
    save_corpus(out / "index.csv", labeled)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_corpus(args) -> int:
    frames = synthetic_corpus(args.count, seed=args.seed,
                              clutter=not args.no_clutter)
    if args.augment:
        frames = _augmented(frames)
        frames = [dataclasses.replace(f, source=f"frame_{i:05d}.pgm")
                  for i, f in enumerate(frames)]
    save_corpus(Path(args.out) / "index.csv", frames)
    print(f"wrote {len(frames)} labeled frames to {args.out}")
    return 0


def _train_detector(frames, detector_cfg, train_cfg, args) -> tuple:
    patches, labels = anchor_training_patches(
        frames, positives=args.positives, negatives=args.negatives,
        seed=train_cfg.seed, detector_config=detector_cfg)
    if patches.shape[0] < 10:
        raise CliError("corpus yields too few anchor samples to train on")
    folds = fold_partition(patches.shape[0], 10, train_cfg.seed)
    test_idx = np.concatenate(folds[:3])  # seeded 70/30 split
    train_mask = np.ones(patches.shape[0], dtype=bool)
    train_mask[test_idx] = False
    net = proposal_network().init_parameters(train_cfg.seed)
    train_sgd(net, patches[train_mask], labels[train_mask], train_cfg)
    predictions = []
    for lo in range(0, test_idx.size, 256):
        probs = cnn.forward_batch(net, patches[test_idx][lo:lo + 256])
        predictions.extend(probs.argmax(axis=1).tolist())
    truth = labels[test_idx]
    predictions = np.array(predictions)
    confusion = {
        "tp": int(((predictions == 1) & (truth == 1)).sum()),
        "tn": int(((predictions == 0) & (truth == 0)).sum()),
        "fp": int(((predictions == 1) & (truth == 0)).sum()),
        "fn": int(((predictions == 0) & (truth == 1)).sum()),
    }
    mean_acc = (confusion["tp"] + confusion["tn"]) / max(1, truth.size)
    return net, RunReport(mean_accuracy=mean_acc, confusion=confusion,
                          extras={"train_samples": int(train_mask.sum()),
                                  "test_samples": int(test_idx.size)})


def _train_classifier(frames, detector_cfg, train_cfg, args) -> tuple:
    if args.detector_model:
        pnet = load_network(args.detector_model)
        rois = []
        for frame in frames:
            from .detector import propose
            props = propose(frame.image, pnet, detector_cfg)
            rois.append([box for box, score in props
                         if score > detector_cfg.objectness_threshold])
    else:
        rois = sample_training_rois(
            frames, positives=args.positives, negatives=args.negatives,
            seed=train_cfg.seed, detector_config=detector_cfg)
    images, labels = build_classifier_set(frames, rois)
    if images.shape[0] < train_cfg.folds:
        raise CliError("classifier set smaller than the fold count")
    accs, mean = kfold_cv(images, labels, train_cfg, roi_classifier_network)
    net = roi_classifier_network().init_parameters(train_cfg.seed)
    train_sgd(net, images, labels, train_cfg)
    confusion = {"class1": int((labels == 1).sum()),
                 "class0": int((labels == 0).sum())}
    return net, RunReport(fold_accuracies=accs, mean_accuracy=mean,
                          extras={"set_composition": confusion})


def cmd_train(args) -> int:
    detector_cfg, _, train_cfg = load_configs(args.config, args.seed)
    if args.lr:
        train_cfg = dataclasses.replace(train_cfg, learning_rate=args.lr)
    if args.epochs:
        train_cfg = dataclasses.replace(train_cfg, epochs=args.epochs)
    frames = _load_frames(args)
    if args.augment:
        frames = _augmented(frames)
    if args.network == "detector":
        net, report = _train_detector(frames, detector_cfg, train_cfg, args)
    else:
        net, report = _train_classifier(frames, detector_cfg, train_cfg, args)
    save_network(args.out, net)
    _emit_report(report, args.report)
    return 0


def cmd_detect(args) -> int:
    detector_cfg, _, _ = load_configs(args.config, args.seed)
    pnet, cnet = _load_models(args)
    frames = _load_frames(args)
    lines = []
    for index, frame in enumerate(frames, start=1):
        for det in acquire(frame.image, pnet, cnet, detector_cfg, index):
            lines.append(f"{det.frame};{det.roi.x_min!r};{det.roi.y_min!r};"
                         f"{det.roi.x_len!r};{det.roi.y_len!r};"
                         f"{det.objectness!r};{det.confidence!r}")
    text = "\n".join(lines) + ("\n" if lines else "")
    if args.out:
        Path(args.out).write_text(text, encoding="ascii")
    else:
        sys.stdout.write(text)
    return 0


def read_detections(path) -> dict[int, list[Detection]]:
    by_frame: dict[int, list[Detection]] = {}
    for line in Path(path).read_text(encoding="ascii").splitlines():
        if not line.strip():
            continue
        parts = line.split(";")
        if len(parts) != 7:
            raise CliError(f"malformed detection line: {line!r}")
        frame = int(parts[0])
        box = BoundingBox(*(float(v) for v in parts[1:5]))
        by_frame.setdefault(frame, []).append(
            Detection(box, float(parts[5]), float(parts[6]), frame))
    return by_frame


def cmd_track(args) -> int:
    detector_cfg, tracker_cfg, _ = load_configs(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tracker = Tracker(tracker_cfg)
    records, events, frame_times = [], [], []

    if args.detections:
        by_frame = read_detections(args.detections)
        if not by_frame:
            last = 0
        else:
            last = max(by_frame)
        for frame in range(1, last + 1):
            t0 = time.perf_counter()
            recs, evs = tracker.step(frame, by_frame.get(frame, []))
            frame_times.append(time.perf_counter() - t0)
            records.extend(recs)
            events.extend(evs)
    else:
        pnet, cnet = _load_models(args)
        if args.scene:
            scans = [scan for scan, _ in synthesize(read_scene(args.scene))]
        elif args.playback:
            scans = read_playback(args.playback)
        else:
            raise CliError("provide --scene, --playback, or --detections")
        for frame, scan in enumerate(scans, start=1):
            t0 = time.perf_counter()
            image = rasterize(polar_to_cartesian(scan, DEFAULT_DEPTH_CAP))
            detections = acquire(image, pnet, cnet, detector_cfg, frame)
            recs, evs = tracker.step(frame, detections)
            frame_times.append(time.perf_counter() - t0)
            records.extend(recs)
            events.extend(evs)

    write_track_log(out / "track.log", records, events)
    report = RunReport(
        frame_times=[round(t, 6) for t in frame_times],
        frames_per_second=(len(frame_times) / sum(frame_times)
                           if frame_times else None),
        events=[dataclasses.asdict(e) for e in events])
    _emit_report(report, str(out / "report.json"))
    return 0


def cmd_eval(args) -> int:
    frames = _load_frames(args)
    by_frame = read_detections(args.detections)
    hits = 0
    false_total = 0
    best_ious = []
    for index, frame in enumerate(frames, start=1):
        dets = by_frame.get(index, [])
        best = 0.0
        for det in dets:
            overlap = max((iou(det.roi, t) for t in frame.truths),
                          default=0.0)
            best = max(best, overlap)
            if overlap < 0.3:
                false_total += 1
        best_ious.append(best)
        hits += best > 0.7
    report = RunReport(extras={
        "frames": len(frames),
        "hit_rate": hits / max(1, len(frames)),
        "false_candidates_per_frame": false_total / max(1, len(frames)),
        "mean_best_iou": float(np.mean(best_ious)) if best_ious else 0.0,
    })
    _emit_report(report, args.report)
    return 0


def cmd_render(args) -> int:
    _, tracker_cfg, _ = load_configs(args.config, args.seed)
    frames = _load_frames(args)
    records, _events = read_track_log(args.log)
    by_frame: dict[int, list] = {}
    for rec in records:
        by_frame.setdefault(rec.frame, []).append(rec)
    if records and max(by_frame) > len(frames):
        raise CliError(f"track log references frame {max(by_frame)} but "
                       f"only {len(frames)} frames are available")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stable_after = (tracker_cfg.min_detections + 1) // 2
    for index, frame in enumerate(frames, start=1):
        recs = by_frame.get(index, [])
        canvas = render.render_frame_pgm(frame.image, recs, stable_after)
        render.write_frame_pgm(out / f"frame_{index:05d}.pgm", canvas)
        if args.svg:
            svg = render.render_frame_svg(frame.image, recs, stable_after)
            (out / f"frame_{index:05d}.svg").write_text(svg,
                                                        encoding="ascii")
    print(f"rendered {len(frames)} frames to {out}")
    return 0


# --- argument wiring ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="palletrack",
        description="Pallet detection and tracking in 2D laser scans")
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for all randomness")
    parser.add_argument("--config", help="INI file with config overrides")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="ray-cast a scene file into frames")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("corpus", help="generate a random labeled corpus")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--augment", action="store_true",
                   help="add the two quarter-turn rotations")
    p.add_argument("--no-clutter", action="store_true")
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("train", help="train the detector or the classifier")
    p.add_argument("network", choices=["detector", "classifier"])
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--positives", type=int, default=4)
    p.add_argument("--negatives", type=int, default=8)
    p.add_argument("--detector-model",
                   help="proposal model generating classifier ROIs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="run two-stage detection per frame")
    p.add_argument("--corpus")
    p.add_argument("--playback")
    p.add_argument("--detector-model", required=True)
    p.add_argument("--classifier-model", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("track", help="track candidates over a scan stream")
    p.add_argument("--playback")
    p.add_argument("--scene")
    p.add_argument("--detections",
                   help="precomputed detection file instead of models")
    p.add_argument("--detector-model")
    p.add_argument("--classifier-model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score detections against a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="draw frames with track boxes")
    p.add_argument("--corpus")
    p.add_argument("--playback")
    p.add_argument("--log", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
