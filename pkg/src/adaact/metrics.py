"""Frame accuracy and segment overlap metrics for predicted label sequences."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    pass


@dataclass
class LabeledVideo:
    gt: np.ndarray
    pred: np.ndarray
    background: frozenset = field(default_factory=frozenset)
    video_id: str = ""

    def __post_init__(self):
        self.gt = np.asarray(self.gt)
        self.pred = np.asarray(self.pred)
        if self.gt.shape != self.pred.shape or self.gt.ndim != 1 or self.gt.size == 0:
            raise ValidationError(
                f"{self.video_id or 'video'}: gt has {self.gt.size} frames, pred has {self.pred.size}")
        self.background = frozenset(self.background)


def gt_segments(gt: np.ndarray) -> list[tuple[int, int]]:
    cuts = np.flatnonzero(gt[1:] != gt[:-1]) + 1
    starts = np.concatenate([[0], cuts])
    ends = np.concatenate([cuts, [gt.size]])
    return list(zip(starts.tolist(), ends.tolist()))


def segment_overlaps(v: LabeledVideo) -> list[tuple[float, float]]:
    """(IoU, IoD) for each ground-truth segment.

    ``correct`` is the set of the segment's frames predicted with the
    segment's label, so it never leaves the segment.
    """
    out = []
    for s, e in gt_segments(v.gt):
        gt_set = set(range(s, e))
        correct = {t for t in gt_set if v.pred[t] == v.gt[s]}
        inter = len(gt_set & correct)
        out.append((inter / len(gt_set | correct), inter / len(gt_set)))
    return out


def video_metrics(v: LabeledVideo) -> dict:
    hits = v.gt == v.pred
    fg = np.array([g not in v.background for g in v.gt.tolist()], dtype=bool)
    overlaps = segment_overlaps(v)
    return {
        "video_id": v.video_id,
        "frames": int(v.gt.size),
        "correct": int(hits.sum()),
        "fg_frames": int(fg.sum()),
        "fg_correct": int((hits & fg).sum()),
        "mof": float(hits.mean()),
        "iou": float(np.mean([o[0] for o in overlaps])),
        "iod": float(np.mean([o[1] for o in overlaps])),
        "segments": len(overlaps),
    }


def metrics(corpus: Sequence[LabeledVideo]) -> dict:
    """MoF and MoF-BG pooled over frames; IoU and IoD averaged over GT segments.

    ``mof_bg`` is ``None`` when every frame is background.
    """
    if not corpus:
        raise ValidationError("empty corpus")
    per_video = [video_metrics(v) for v in corpus]
    overlaps = [o for v in corpus for o in segment_overlaps(v)]
    frames = sum(p["frames"] for p in per_video)
    fg = sum(p["fg_frames"] for p in per_video)
    return {
        "mof": sum(p["correct"] for p in per_video) / frames,
        "mof_bg": sum(p["fg_correct"] for p in per_video) / fg if fg else None,
        "iou": float(np.mean([o[0] for o in overlaps])),
        "iod": float(np.mean([o[1] for o in overlaps])),
        "per_video": per_video,
    }


# --------------------------------------------------------------------------- segmentation files


def format_segmentation_line(video_id: str, segments: Sequence[tuple[int, int]], names: Sequence[str]) -> str:
    body = ",".join(f"{names[a]}:{l}" for a, l in segments)
    return f"{video_id}\t{body}"


def read_segmentation_file(path, names: Sequence[str]) -> dict[str, list[tuple[int, int]]]:
    """Parse ``video_id<TAB>name:len,...`` lines; ``#`` lines are footer comments."""
    index = {n: i for i, n in enumerate(names)}
    out: dict[str, list[tuple[int, int]]] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            vid, body = line.split("\t")
            segs = []
            for item in body.split(","):
                name, length = item.rsplit(":", 1)
                segs.append((index[name], int(length)))
        except (ValueError, KeyError) as exc:
            raise ValidationError(f"{path}:{lineno}: malformed segmentation line ({exc})") from exc
        if any(l < 1 for _, l in segs):
            raise ValidationError(f"{path}:{lineno}: segment lengths must be positive")
        out[vid] = segs
    return out


def read_segmentation_footer(path) -> dict[str, float]:
    """Scores written as ``# score<TAB>video_id<TAB>value`` footer lines."""
    scores = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# score\t"):
            _, vid, val = line.split("\t")
            scores[vid] = float(val)
    return scores


def evaluate_files(pred_file, gt_dir, names: Sequence[str], background: Sequence[str] = ("SIL",)) -> dict:
    from .data import read_frame_labels

    index = {n: i for i, n in enumerate(names)}
    bg = frozenset(index[b] for b in background if b in index)
    preds = read_segmentation_file(pred_file, names)
    videos = []
    for vid, segs in preds.items():
        gt = read_frame_labels(Path(gt_dir) / f"{vid}.txt", names)
        pred = np.repeat([a for a, _ in segs], [l for _, l in segs])
        videos.append(LabeledVideo(gt, pred, bg, vid))
    return metrics(videos)


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
