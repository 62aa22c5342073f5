"""Corpus file formats and the seeded synthetic corpus generator.

The synthetic corpus reproduces the situation the model is built for: two
activities whose transcripts differ only in one action, and those two
actions draw frame features from the same distribution. Only the
interaction detections (object-crop embeddings clustered per activity) tell
the videos apart.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decode import Segmentation, Transcript
from .hoi import HoiDetection, load_detection_file, write_detections

FEATURE_MAGIC = b"AAFT0001"


class FormatError(ValueError):
    pass


# --------------------------------------------------------------------------- features


@dataclass
class FeatureSequence:
    video_id: str
    X: np.ndarray

    @property
    def T(self) -> int:
        return self.X.shape[0]


def write_features(path, X: np.ndarray) -> None:
    X = np.ascontiguousarray(X, dtype="<f8")
    if X.ndim != 2:
        raise ValueError("features must be a T x F matrix")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", *X.shape))
        fh.write(X.tobytes())


def read_features(path) -> FeatureSequence:
    raw = Path(path).read_bytes()
    if raw[:8] != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    T, F = struct.unpack("<II", raw[8:16])
    if T == 0 or F == 0:
        raise FormatError(f"{path}: empty feature matrix ({T} x {F})")
    payload = raw[16:]
    if len(payload) != 8 * T * F:
        raise FormatError(f"{path}: expected {8 * T * F} payload bytes, found {len(payload)}")
    X = np.frombuffer(payload, dtype="<f8").reshape(T, F).astype(np.float64)
    return FeatureSequence(Path(path).stem, X)


def load_feature_dir(directory) -> list[FeatureSequence]:
    return [read_features(p) for p in sorted(Path(directory).glob("*.feat"))]


# --------------------------------------------------------------------------- text formats


def write_action_map(path, names: Sequence[str]) -> None:
    Path(path).write_text("".join(f"{n}\t{i}\n" for i, n in enumerate(names)), encoding="utf-8")


def read_action_map(path) -> list[str]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            name, idx = line.split("\t")
            pairs.append((int(idx), name))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: expected name<TAB>id") from exc
    pairs.sort()
    if [i for i, _ in pairs] != list(range(len(pairs))):
        raise FormatError(f"{path}: action ids must be 0..A-1")
    return [n for _, n in pairs]


def write_transcripts(path, items: Sequence[tuple[str, Transcript]], names: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, tr in items:
            fh.write(f"{vid}\t{' '.join(names[a] for a in tr.actions)}\n")


def read_transcripts(path, names: Sequence[str]) -> dict[str, Transcript]:
    index = {n: i for i, n in enumerate(names)}
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            vid, body = line.split("\t")
            out[vid] = Transcript(index[n] for n in body.split())
        except (ValueError, KeyError) as exc:
            raise FormatError(f"{path}:{lineno}: bad transcript line ({exc})") from exc
    return out


def write_frame_labels(path, labels: Sequence[int], names: Sequence[str]) -> None:
    Path(path).write_text("".join(names[a] + "\n" for a in labels), encoding="utf-8")


def read_frame_labels(path, names: Sequence[str]) -> np.ndarray:
    index = {n: i for i, n in enumerate(names)}
    try:
        return np.array([index[l] for l in Path(path).read_text(encoding="utf-8").split()], dtype=int)
    except KeyError as exc:
        raise FormatError(f"{path}: unknown action {exc}") from exc


# --------------------------------------------------------------------------- corpus


@dataclass
class Video:
    video_id: str
    activity: str
    X: np.ndarray
    detections: list[HoiDetection]
    transcript: Transcript
    gt: Segmentation | None = None

    @property
    def T(self) -> int:
        return self.X.shape[0]


@dataclass
class Corpus:
    actions: list[str]
    videos: list[Video]
    split: dict[str, str] = field(default_factory=dict)
    embedding_dim: int = 0
    background: tuple[str, ...] = ("SIL",)

    def subset(self, which: str) -> list[Video]:
        return [v for v in self.videos if self.split.get(v.video_id, "train") == which]

    @property
    def train(self) -> list[Video]:
        return self.subset("train")

    @property
    def test(self) -> list[Video]:
        return self.subset("test")


def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    for sub in ("features", "detections", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    write_action_map(out / "actions.txt", corpus.actions)
    write_transcripts(out / "transcripts.txt", [(v.video_id, v.transcript) for v in corpus.videos], corpus.actions)
    (out / "splits.txt").write_text(
        "".join(f"{v.video_id}\t{corpus.split.get(v.video_id, 'train')}\n" for v in corpus.videos), encoding="utf-8")
    for v in corpus.videos:
        write_features(out / "features" / f"{v.video_id}.feat", v.X)
        write_detections(out / "detections" / f"{v.video_id}.jsonl", v.video_id, corpus.embedding_dim, v.detections)
        if v.gt is not None:
            write_frame_labels(out / "gt" / f"{v.video_id}.txt", v.gt.labels, corpus.actions)


def load_corpus(directory) -> Corpus:
    d = Path(directory)
    actions = read_action_map(d / "actions.txt")
    transcripts = read_transcripts(d / "transcripts.txt", actions)
    split = {}
    if (d / "splits.txt").exists():
        for line in (d / "splits.txt").read_text(encoding="utf-8").splitlines():
            if line.strip():
                vid, which = line.split("\t")
                split[vid] = which
    videos = []
    dim = 0
    for fs in load_feature_dir(d / "features"):
        header, dets = load_detection_file(d / "detections" / f"{fs.video_id}.jsonl")
        dim = int(header["embedding_dim"])
        gt_path = d / "gt" / f"{fs.video_id}.txt"
        gt = None
        if gt_path.exists():
            gt = Segmentation.from_labels(read_frame_labels(gt_path, actions))
        videos.append(Video(fs.video_id, fs.video_id.rsplit("_", 1)[0], fs.X, dets,
                            transcripts[fs.video_id], gt))
    return Corpus(actions, videos, split, dim)


# --------------------------------------------------------------------------- synthetic generator


@dataclass
class Activity:
    name: str
    transcript: list[str]


def _default_actions() -> list[str]:
    return ["SIL", "take_cup", "pour_coffee", "pour_juice", "stir", "drink"]


def _default_activities() -> list[Activity]:
    return [
        Activity("coffee", ["SIL", "take_cup", "pour_coffee", "stir", "drink", "SIL"]),
        Activity("juice", ["SIL", "take_cup", "pour_juice", "stir", "drink", "SIL"]),
    ]


def _default_lengths() -> dict[str, float]:
    return {"SIL": 12.0, "take_cup": 20.0, "pour_coffee": 30.0, "pour_juice": 30.0, "stir": 24.0, "drink": 20.0}


@dataclass
class SynthConfig:
    actions: list[str] = field(default_factory=_default_actions)
    activities: list[Activity] = field(default_factory=_default_activities)
    mean_lengths: dict[str, float] = field(default_factory=_default_lengths)
    ambiguous_pairs: list[tuple[str, str]] = field(default_factory=lambda: [("pour_coffee", "pour_juice")])
    F: int = 16
    E: int = 32
    T_min: int = 80
    T_max: int = 200
    videos_per_activity: int = 20
    sigma_feat: float = 1.0
    mean_scale: float = 1.0
    sigma_hoi: float = 0.5
    min_events: int = 3
    max_events: int = 8
    holdout_every: int = 4
    seed: int = 0

    def validate(self) -> None:
        names = set(self.actions)
        for a, b in self.ambiguous_pairs:
            if a == b or a not in names or b not in names:
                raise ValueError(f"ambiguous pair ({a}, {b}) must name two distinct actions")
        for act in self.activities:
            missing = set(act.transcript) - names
            if missing:
                raise ValueError(f"activity {act.name} uses unknown actions {sorted(missing)}")
        if not 1 <= self.T_min <= self.T_max:
            raise ValueError("need 1 <= T_min <= T_max")
        if self.F < 1 or self.E < 1 or self.videos_per_activity < 1:
            raise ValueError("F, E and videos_per_activity must be positive")
        if not 0 <= self.min_events <= self.max_events:
            raise ValueError("need 0 <= min_events <= max_events")


def _box(rng: np.random.Generator, width: float = 640.0, height: float = 480.0) -> list[float]:
    w, h = rng.uniform(40, 200), rng.uniform(40, 200)
    x1, y1 = rng.uniform(0, width - w), rng.uniform(0, height - h)
    return [x1, y1, x1 + w, y1 + h]


def generate_corpus(cfg: SynthConfig | None = None) -> Corpus:
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    A = len(cfg.actions)
    index = {n: i for i, n in enumerate(cfg.actions)}

    means = rng.normal(0.0, cfg.mean_scale, size=(A, cfg.F))
    for a, b in cfg.ambiguous_pairs:
        means[index[b]] = means[index[a]]

    # activity interaction clusters, kept at least 4 sigma apart
    while True:
        clusters = rng.normal(0.0, 1.0, size=(len(cfg.activities), cfg.E))
        dists = [np.linalg.norm(clusters[i] - clusters[j])
                 for i in range(len(clusters)) for j in range(i + 1, len(clusters))]
        if not dists or min(dists) >= 4 * cfg.sigma_hoi:
            break

    videos, split = [], {}
    for ai, act in enumerate(cfg.activities):
        tr = Transcript(index[n] for n in act.transcript)
        lam = np.array([cfg.mean_lengths.get(n, 20.0) for n in act.transcript])
        for vi in range(cfg.videos_per_activity):
            for _ in range(10000):
                lengths = np.maximum(rng.poisson(lam), 1)
                if cfg.T_min <= lengths.sum() <= cfg.T_max:
                    break
            else:
                raise ValueError("could not draw segment lengths inside [T_min, T_max]")
            gt = Segmentation([(a, int(l)) for a, l in zip(tr.actions, lengths)])
            labels = gt.labels
            X = means[labels] + rng.normal(0.0, cfg.sigma_feat, size=(len(labels), cfg.F))
            n_events = int(rng.integers(cfg.min_events, cfg.max_events + 1))
            times = np.sort(rng.integers(0, len(labels), size=n_events))
            dets = []
            for t in times:
                dets.append(HoiDetection(
                    t=int(t), hand_box=_box(rng), obj_box=_box(rng),
                    score=float(rng.uniform(0.5, 1.0)),
                    embedding=clusters[ai] + rng.normal(0.0, cfg.sigma_hoi, size=cfg.E)))
            vid = f"{act.name}_{vi:03d}"
            videos.append(Video(vid, act.name, X, dets, tr, gt))
            held = cfg.holdout_every > 0 and vi % cfg.holdout_every == cfg.holdout_every - 1
            split[vid] = "test" if held else "train"
    videos.sort(key=lambda v: v.video_id)
    return Corpus(list(cfg.actions), videos, split, cfg.E)
