"""Hand-object interaction detections: spatio-temporal NMS selection, and the
class-token transformer that turns the selection into one knowledge vector."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import Tensor


class DetectionFormatError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class HoiDetection:
    t: int
    hand_box: tuple[float, float, float, float]
    obj_box: tuple[float, float, float, float]
    score: float
    embedding: np.ndarray

    def __post_init__(self):
        if int(self.t) != self.t or self.t < 0:
            raise DetectionFormatError(f"frame index must be a nonnegative integer, got {self.t}")
        if not 0.0 <= self.score <= 1.0:
            raise DetectionFormatError(f"score {self.score} outside [0, 1]")
        for name, box in (("hand_box", self.hand_box), ("obj_box", self.obj_box)):
            if len(box) != 4 or not (box[0] < box[2] and box[1] < box[3]):
                raise DetectionFormatError(f"{name} {list(box)} has no positive area")
        self.t = int(self.t)
        self.hand_box = tuple(float(v) for v in self.hand_box)
        self.obj_box = tuple(float(v) for v in self.obj_box)
        self.embedding = np.asarray(self.embedding, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "hand_box": list(self.hand_box),
            "obj_box": list(self.obj_box),
            "score": self.score,
            "embedding": self.embedding.tolist(),
        }


@dataclass
class HoiSelection:
    items: list[HoiDetection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def embeddings(self, dim: int) -> np.ndarray:
        if not self.items:
            return np.zeros((0, dim))
        return np.stack([d.embedding for d in self.items])


# --------------------------------------------------------------------------- file format


def write_detections(path, video_id: str, embedding_dim: int, dets: Sequence[HoiDetection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"version": 1, "embedding_dim": embedding_dim, "video_id": video_id}) + "\n")
        for d in dets:
            fh.write(json.dumps(d.to_json()) + "\n")


def load_detection_file(path) -> tuple[dict, list[HoiDetection]]:
    """Read a detection file and return ``(header, detections)`` in file order."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DetectionFormatError(f"{path}: missing header line")
    try:
        header = json.loads(lines[0])
        dim = int(header["embedding_dim"])
        if header.get("version") != 1:
            raise DetectionFormatError(f"{path}:1: unsupported version {header.get('version')!r}")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DetectionFormatError):
            raise
        raise DetectionFormatError(f"{path}:1: bad header ({exc})") from exc

    dets = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            det = HoiDetection(
                t=rec["t"],
                hand_box=rec["hand_box"],
                obj_box=rec["obj_box"],
                score=float(rec["score"]),
                embedding=rec["embedding"],
            )
        except DetectionFormatError as exc:
            raise DetectionFormatError(f"{path}:{lineno}: {exc}") from exc
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DetectionFormatError(f"{path}:{lineno}: malformed detection ({exc})") from exc
        if det.embedding.shape != (dim,):
            raise DetectionFormatError(
                f"{path}:{lineno}: embedding length {det.embedding.size} != header embedding_dim {dim}")
        dets.append(det)
    return header, dets


def load_detections(path) -> list[HoiDetection]:
    return load_detection_file(path)[1]


# --------------------------------------------------------------------------- selection


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def video_nms(
    dets: Sequence[HoiDetection],
    iou_thresh: float = 0.5,
    time_gap: int = 30,
    K: int = 10,
    score_thresh: float = 0.5,
) -> HoiSelection:
    """Greedy top-K selection with a joint spatial/temporal suppression rule.

    A detection is suppressed by a kept one only when their object boxes
    overlap by more than ``iou_thresh`` *and* they are fewer than
    ``time_gap`` frames apart. Kept items come back in timestamp order.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ConfigurationError("iou_thresh must lie in (0, 1)")
    if K < 1:
        raise ConfigurationError("K must be at least 1")
    pool = [d for d in dets if d.score >= score_thresh]
    # highest score first; equal scores go to the earlier frame
    order = sorted(range(len(pool)), key=lambda i: (-pool[i].score, pool[i].t, i))
    alive = [True] * len(pool)
    kept: list[HoiDetection] = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        best = pool[i]
        kept.append(best)
        if len(kept) == K:
            break
        for j in order[pos + 1:]:
            if alive[j] and abs(pool[j].t - best.t) < time_gap and iou(best.obj_box, pool[j].obj_box) > iou_thresh:
                alive[j] = False
    kept.sort(key=lambda d: (d.t, -d.score))
    return HoiSelection(kept)


# --------------------------------------------------------------------------- integrator


def _dense(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    return nc.parameter(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out)), name)


class IntegratorParams:
    """Weights of the interaction transformer.

    Layer blocks are pre-norm: attention then MLP, each inside a residual.
    ``output_proj`` is only a parameter when ``d_model != out_dim``.
    """

    def __init__(self, embed_dim: int, d_model: int = 128, out_dim: int = 128, K: int = 10,
                 layers: int = 2, heads: int = 4, mlp_hidden: int | None = None,
                 rng: np.random.Generator | None = None):
        if d_model % heads:
            raise ConfigurationError(f"d_model={d_model} is not divisible by heads={heads}")
        rng = rng or np.random.default_rng(0)
        mlp_hidden = mlp_hidden or 2 * d_model
        self.embed_dim, self.d_model, self.out_dim = embed_dim, d_model, out_dim
        self.K, self.heads = K, heads
        self.input_proj = _dense(rng, embed_dim, d_model, "hoi.input_proj")
        self.class_token = nc.parameter(rng.normal(0, 0.02, d_model), "hoi.class_token")
        self.pos = nc.parameter(rng.normal(0, 0.02, (K + 1, d_model)), "hoi.pos")
        self.layers = []
        for n in range(layers):
            p = f"hoi.layer{n}."
            self.layers.append({
                "ln1_g": nc.parameter(np.ones(d_model), p + "ln1_g"),
                "ln1_b": nc.parameter(np.zeros(d_model), p + "ln1_b"),
                "wq": _dense(rng, d_model, d_model, p + "wq"),
                "wk": _dense(rng, d_model, d_model, p + "wk"),
                "wv": _dense(rng, d_model, d_model, p + "wv"),
                "wo": _dense(rng, d_model, d_model, p + "wo"),
                "ln2_g": nc.parameter(np.ones(d_model), p + "ln2_g"),
                "ln2_b": nc.parameter(np.zeros(d_model), p + "ln2_b"),
                "w1": _dense(rng, d_model, mlp_hidden, p + "w1"),
                "b1": nc.parameter(np.zeros(mlp_hidden), p + "b1"),
                "w2": _dense(rng, mlp_hidden, d_model, p + "w2"),
                "b2": nc.parameter(np.zeros(d_model), p + "b2"),
            })
        self.output_proj = None if d_model == out_dim else _dense(rng, d_model, out_dim, "hoi.output_proj")

    def parameters(self) -> list[Tensor]:
        out = [self.input_proj, self.class_token, self.pos]
        for layer in self.layers:
            out.extend(layer.values())
        if self.output_proj is not None:
            out.append(self.output_proj)
        return out


def _attention(x: Tensor, layer: dict, heads: int) -> Tensor:
    d = x.shape[1]
    dh = d // heads
    q, k, v = x @ layer["wq"], x @ layer["wk"], x @ layer["wv"]
    outs = []
    for h in range(heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        qh, kh, vh = q[cols], k[cols], v[cols]
        att = nc.softmax_rows(nc.scale(qh @ kh.T, 1.0 / np.sqrt(dh)))
        outs.append(att @ vh)
    merged = outs[0] if heads == 1 else nc.concat(outs, axis=1)
    return merged @ layer["wo"]


def integrate(sel: HoiSelection, params: IntegratorParams) -> Tensor:
    """Knowledge vector read from the class token after the block stack."""
    n = len(sel)
    if n > params.K:
        raise ConfigurationError(f"{n} detections exceed K={params.K}")
    emb = sel.embeddings(params.embed_dim)
    if emb.shape[1] != params.embed_dim:
        raise ConfigurationError(f"embedding length {emb.shape[1]} != {params.embed_dim}")
    tok = nc.reshape(params.class_token, (1, params.d_model))
    if n:
        seq = nc.concat([tok, Tensor(emb) @ params.input_proj], axis=0)
    else:
        seq = tok
    x = seq + params.pos[: n + 1]
    for layer in params.layers:
        x = x + _attention(nc.layernorm(x, layer["ln1_g"], layer["ln1_b"]), layer, params.heads)
        hidden = nc.relu(nc.layernorm(x, layer["ln2_g"], layer["ln2_b"]) @ layer["w1"] + layer["b1"])
        x = x + (hidden @ layer["w2"] + layer["b2"])
    s = x[0:1]
    if params.output_proj is not None:
        s = s @ params.output_proj
    return nc.reshape(s, (s.shape[1],))
