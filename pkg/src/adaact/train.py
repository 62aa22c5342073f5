"""Model assembly, weakly-supervised losses, the training loop and checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .data import Corpus, Video
from .decode import (FreeGrammar, Grammar, InfeasibleError, LengthModel, Segmentation, Transcript, align,
                     estimate_models, log_partition, segment)
from .encoder import GruParams, log_posteriors, scores_from_log_posteriors
from .hoi import IntegratorParams, integrate, video_nms
from .hypernet import HyperNetwork
from .numcore import Tensor

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ADAACT01"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 2000
    K: int = 10
    D: int = 128
    m: int = 8
    C_out: int = 64
    w: int = 21
    seed: int = 0
    loss_mode: str = "discriminative"
    reestimate_every: int = 10
    heads: int = 4
    layers: int = 2
    branch_hidden: int = 256
    iou_thresh: float = 0.5
    time_gap: int = 30
    score_thresh: float = 0.5
    max_seg_len: int = 0
    negatives: int = 0
    use_dependent: bool = True
    zero_s: bool = False
    prior_alpha: float = 1.0
    clip_norm: float = 20.0
    competitors: str = "free"

    def validate(self) -> None:
        if self.C_out % self.m:
            raise ConfigError(f"C_out={self.C_out} is not divisible by m={self.m}")
        if self.D % self.heads:
            raise ConfigError(f"D={self.D} is not divisible by heads={self.heads}")
        if self.loss_mode not in ("discriminative", "pseudo_label"):
            raise ConfigError(f"unknown loss_mode {self.loss_mode!r}")
        for name in ("epochs", "K", "D", "m", "C_out", "w", "reestimate_every", "heads", "layers", "branch_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.competitors not in ("free", "edits"):
            raise ConfigError(f"unknown competitors {self.competitors!r} (free or edits)")
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be nonnegative (0 disables clipping)")
        if self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.w % 2 == 0:
            raise ConfigError("w must be odd")

    @property
    def seg_cap(self) -> int | None:
        return self.max_seg_len or None


class AdaAct:
    """Interaction integrator + HyperNetwork + windowed GRU, plus the
    decoding state (class prior, length model, grammar)."""

    def __init__(self, cfg: TrainConfig, feat_dim: int, embed_dim: int, num_actions: int):
        cfg.validate()
        self.cfg = cfg
        self.feat_dim, self.embed_dim, self.num_actions = feat_dim, embed_dim, num_actions
        rng = np.random.default_rng(cfg.seed)
        self.integrator = IntegratorParams(embed_dim, d_model=cfg.D, out_dim=cfg.D, K=cfg.K,
                                           layers=cfg.layers, heads=cfg.heads, rng=rng)
        self.hyper = HyperNetwork(dim=cfg.D, m=cfg.m, c_out=cfg.C_out, A=num_actions,
                                  hidden=cfg.branch_hidden, rng=rng,
                                  use_dependent=cfg.use_dependent, zero_s=cfg.zero_s)
        self.gru = GruParams(feat_dim, cfg.C_out, rng)
        self.prior = np.full(num_actions, 1.0 / num_actions)
        self.length_model = LengthModel(np.full(num_actions, 20.0))
        self.grammar = Grammar()

    # parameters -----------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        params = self.integrator.parameters() + self.hyper.all_parameters() + self.gru.parameters()
        return [(p.name, p) for p in params]

    def trainable(self) -> list[Tensor]:
        """Parameters that actually influence the output under the ablation flags."""
        out = list(self.hyper.parameters()) + self.gru.parameters()
        if self.cfg.use_dependent and not self.cfg.zero_s:
            out = self.integrator.parameters() + out
        return out

    # forward --------------------------------------------------------------
    def knowledge(self, video: Video) -> Tensor:
        sel = video_nms(video.detections, self.cfg.iou_thresh, self.cfg.time_gap, self.cfg.K,
                        self.cfg.score_thresh)
        return integrate(sel, self.integrator)

    def log_posteriors(self, video: Video) -> Tensor:
        if self.cfg.use_dependent and not self.cfg.zero_s:
            s = self.knowledge(video)
        else:
            s = Tensor(np.zeros(self.cfg.D))
        head = self.hyper(s)
        return log_posteriors(video.X, head, self.gru, self.cfg.w)

    def scores(self, video: Video) -> Tensor:
        return scores_from_log_posteriors(self.log_posteriors(video), self.prior)

    # inference ------------------------------------------------------------
    def segment(self, video: Video) -> tuple[Transcript, Segmentation, float]:
        return segment(self.scores(video).data, self.grammar, self.length_model, self.cfg.seg_cap)

    def align(self, video: Video) -> tuple[Segmentation, float]:
        return align(self.scores(video).data, video.transcript, self.length_model, self.cfg.seg_cap)

    # decoding state -------------------------------------------------------
    def init_decoding_state(self, videos: Sequence[Video]) -> None:
        """Uniform prior, one shared Poisson mean (average frames per action)
        and the grammar of training transcripts."""
        mean_len = np.mean([v.T / len(v.transcript) for v in videos])
        self.prior = np.full(self.num_actions, 1.0 / self.num_actions)
        self.length_model = LengthModel(np.full(self.num_actions, mean_len))
        self.grammar = Grammar.uniform(v.transcript for v in videos)

    def reestimate(self, videos: Sequence[Video]) -> None:
        pseudo = []
        for v in videos:
            try:
                pseudo.append(self.align(v)[0])
            except InfeasibleError:
                continue
        if pseudo:
            self.prior, self.length_model, self.grammar = estimate_models(
                pseudo, self.num_actions, self.cfg.prior_alpha)


# --------------------------------------------------------------------------- losses


def loss_discriminative(S: Tensor, tr: Transcript, g: Grammar | FreeGrammar, lm: LengthModel,
                        max_len: int | None = None) -> Tensor:
    """-log of the path mass of ``tr`` relative to the whole grammar."""
    if isinstance(g, FreeGrammar):
        if not g.admits(tr):
            raise ValueError(f"transcript {tr.actions} repeats an action back to back")
        return log_partition(S, g, lm, max_len) - log_partition(S, tr, lm, max_len)
    g = g.with_transcript(tr)
    idx = g.transcripts.index(tr)
    valid = log_partition(S, tr, lm, max_len) + g.log_prior[idx]
    return log_partition(S, g, lm, max_len) - valid


def loss_pseudo_label(logP: Tensor, S, tr: Transcript, lm: LengthModel, max_len: int | None = None) -> Tensor:
    """Frame cross-entropy against the Viterbi alignment of ``tr`` (labels are constants)."""
    S_arr = S.data if isinstance(S, Tensor) else np.asarray(S)
    seg, _ = align(S_arr, tr, lm, max_len)
    labels = seg.labels
    T = labels.size
    picked = logP[np.arange(T), labels]
    return -nc.mean_all(picked)


def competitor_grammar(tr: Transcript, base: Grammar, num_actions: int,
                       negatives: int = 0, rng: np.random.Generator | None = None) -> Grammar:
    """Training grammar: the known transcripts plus hard negatives one edit
    away from ``tr`` (single-action substitutions, swaps of neighbouring
    actions, and single deletions).

    Swaps and deletions can only be told apart from ``tr`` by *when* the
    actions happen, which is what pushes the scores to localize segments.
    ``negatives > 0`` keeps a random subset of that many negatives.
    """
    acts = tr.actions
    subs = []
    for o, a in enumerate(acts):
        for b in range(num_actions):
            if b != a:
                subs.append(Transcript(acts[:o] + (b,) + acts[o + 1:]))
    for o in range(len(acts) - 1):
        subs.append(Transcript(acts[:o] + (acts[o + 1], acts[o]) + acts[o + 2:]))
    if len(acts) > 1:
        for o in range(len(acts)):
            subs.append(Transcript(acts[:o] + acts[o + 1:]))
    subs = [c for c in subs if c != tr and c not in base.transcripts]
    subs = list(dict.fromkeys(subs))
    if negatives and negatives < len(subs):
        rng = rng or np.random.default_rng(0)
        keep = np.sort(rng.choice(len(subs), negatives, replace=False))
        subs = [subs[i] for i in keep]
    entries = list(base.transcripts)
    if tr not in entries:
        entries.append(tr)
    return Grammar.uniform(entries + subs)


# --------------------------------------------------------------------------- loop


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    skipped: int


@dataclass
class TrainState:
    model: AdaAct
    epoch: int = 0
    history: list[EpochReport] = field(default_factory=list)


def video_loss(model: AdaAct, video: Video, rng: np.random.Generator) -> Tensor:
    """Training objective for one video."""
    cfg = model.cfg
    logP = model.log_posteriors(video)
    S = scores_from_log_posteriors(logP, model.prior)
    if cfg.loss_mode == "pseudo_label":
        return loss_pseudo_label(logP, S, video.transcript, model.length_model, cfg.seg_cap)
    if cfg.competitors == "free":
        g = FreeGrammar(model.num_actions)
    else:
        g = competitor_grammar(video.transcript, model.grammar, model.num_actions, cfg.negatives, rng)
    return loss_discriminative(S, video.transcript, g, model.length_model, cfg.seg_cap)


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients so their joint L2 norm is at most ``max_norm``
    (0 disables). Returns the norm before clipping."""
    norm = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params)))
    if max_norm and norm > max_norm:
        for p in params:
            p.grad *= max_norm / norm
    return norm


def train_epoch(videos: Sequence[Video], state: TrainState) -> EpochReport:
    """One pass over ``videos`` in an order fixed by (seed, epoch)."""
    if not videos:
        raise ConfigError("training corpus is empty")
    model, cfg = state.model, state.model.cfg
    if not len(model.grammar):
        model.init_decoding_state(videos)
    if state.epoch > 0 and state.epoch % cfg.reestimate_every == 0:
        model.reestimate(videos)
    rng = np.random.default_rng([cfg.seed, state.epoch])
    order = rng.permutation(len(videos))
    params = model.trainable()
    losses, skipped = [], 0
    for i in order:
        v = videos[i]
        try:
            loss = video_loss(model, v, rng)
        except InfeasibleError:
            skipped += 1
            continue
        nc.backward(loss)
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        clip_gradients(params, cfg.clip_norm)
        nc.sgd_step(params, cfg.lr)
        losses.append(loss.item())
    state.epoch += 1
    report = EpochReport(state.epoch, float(np.mean(losses)) if losses else float("nan"), skipped)
    state.history.append(report)
    log.info("epoch %d loss %.6f skipped %d", report.epoch, report.mean_loss, report.skipped)
    return report


def fit(corpus: Corpus, cfg: TrainConfig, state: TrainState | None = None,
        videos: Sequence[Video] | None = None) -> TrainState:
    videos = list(videos if videos is not None else corpus.train)
    if not videos:
        raise ConfigError("training corpus is empty")
    if state is None:
        model = AdaAct(cfg, videos[0].X.shape[1], corpus.embedding_dim, len(corpus.actions))
        model.init_decoding_state(videos)
        state = TrainState(model)
    while state.epoch < cfg.epochs:
        train_epoch(videos, state)
    return state


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path, state: TrainState) -> None:
    """Binary parameter file plus a JSON sidecar (``<path>.json``)."""
    model = state.model
    buf = bytearray(CHECKPOINT_MAGIC)
    for name, p in model.named_parameters():
        raw = name.encode("utf-8")
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", p.data.ndim)
        buf += struct.pack(f"<{p.data.ndim}I", *p.data.shape)
        buf += np.ascontiguousarray(p.data, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))
    side = {
        "config": dataclasses.asdict(model.cfg),
        "dims": {"feat_dim": model.feat_dim, "embed_dim": model.embed_dim, "num_actions": model.num_actions},
        "epoch": state.epoch,
        "history": [dataclasses.asdict(r) for r in state.history],
        "prior": model.prior.tolist(),
        "lambda": model.length_model.lam.tolist(),
        "grammar": {"transcripts": [list(t.actions) for t in model.grammar.transcripts],
                    "log_prior": list(map(float, model.grammar.log_prior))},
    }
    Path(str(path) + ".json").write_text(json.dumps(side, indent=1) + "\n", encoding="utf-8")


def read_parameter_file(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos, out = 8, {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            if pos + 8 * count > len(raw):
                raise ValueError("truncated payload")
            out[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out


def load_checkpoint(path, overrides: dict | None = None) -> TrainState:
    side = json.loads(Path(str(path) + ".json").read_text(encoding="utf-8"))
    cfg_dict = dict(side["config"])
    cfg_dict.update(overrides or {})
    cfg = TrainConfig(**cfg_dict)
    dims = side["dims"]
    model = AdaAct(cfg, dims["feat_dim"], dims["embed_dim"], dims["num_actions"])
    values = read_parameter_file(path)
    for name, p in model.named_parameters():
        if name not in values:
            raise ValueError(f"{path}: missing parameter {name}")
        if values[name].shape != p.shape:
            raise ValueError(f"{path}: {name} has shape {values[name].shape}, expected {p.shape}")
        p.data = values[name].copy()
    model.prior = np.array(side["prior"])
    model.length_model = LengthModel(side["lambda"])
    model.grammar = Grammar([Transcript(t) for t in side["grammar"]["transcripts"]],
                            side["grammar"]["log_prior"])
    history = [EpochReport(**r) for r in side["history"]]
    return TrainState(model, side["epoch"], history)
