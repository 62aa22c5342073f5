"""Duration-constrained decoding over frame log-scores.

A path assigns each transcript action a contiguous run of frames. Its score
is the sum of frame scores under the assigned actions plus a Poisson
log-duration term per segment (plus the transcript log-prior when searching
a grammar). ``align`` maximizes over paths of one transcript, ``segment``
over a grammar, and ``log_partition`` replaces max by log-sum-exp.

All recurrences run over segment end points. ``alpha[o][e]`` is the best (or
log-summed) score of covering frames ``[0, e)`` with the first ``o``
segments.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

from . import numcore as nc
from .numcore import Tensor

NEG_INF = -np.inf


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class Transcript:
    actions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple(int(a) for a in self.actions))
        if not self.actions:
            raise ValueError("a transcript needs at least one action")

    def __len__(self) -> int:
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)


@dataclass
class LengthModel:
    lam: np.ndarray

    def __post_init__(self):
        self.lam = np.asarray(self.lam, dtype=np.float64)
        if np.any(self.lam <= 0):
            raise ValueError("Poisson means must be positive")


@dataclass
class Grammar:
    transcripts: list[Transcript] = field(default_factory=list)
    log_prior: list[float] = field(default_factory=list)

    @classmethod
    def uniform(cls, transcripts: Iterable[Transcript]) -> "Grammar":
        seen: list[Transcript] = []
        for tr in transcripts:
            tr = tr if isinstance(tr, Transcript) else Transcript(tr)
            if tr not in seen:
                seen.append(tr)
        return cls(seen, [-np.log(len(seen))] * len(seen))

    def __len__(self) -> int:
        return len(self.transcripts)

    def with_transcript(self, tr: Transcript) -> "Grammar":
        """Grammar guaranteed to contain ``tr``; an absent one is added with
        the mass of an average entry and all priors renormalized."""
        if tr in self.transcripts:
            return self
        n = len(self)
        lp = np.asarray(self.log_prior, dtype=np.float64) + np.log(n / (n + 1))
        return Grammar(self.transcripts + [tr], list(lp) + [-np.log(n + 1)])


@dataclass(frozen=True)
class FreeGrammar:
    """Every action sequence in which no action directly repeats, each with
    log-prior 0. Only usable as a ``log_partition`` target: it sums over all
    segmentations of the video into runs of distinct neighbouring actions."""
    num_actions: int

    def admits(self, tr: Transcript) -> bool:
        acts = tr.actions
        return all(0 <= a < self.num_actions for a in acts) and all(x != y for x, y in zip(acts, acts[1:]))


@dataclass
class Segmentation:
    segments: list[tuple[int, int]]

    @property
    def T(self) -> int:
        return sum(l for _, l in self.segments)

    @property
    def labels(self) -> np.ndarray:
        return np.repeat([a for a, _ in self.segments], [l for _, l in self.segments]).astype(int)

    @property
    def transcript(self) -> Transcript:
        return Transcript(a for a, _ in self.segments)

    @classmethod
    def from_labels(cls, labels: Sequence[int]) -> "Segmentation":
        segs: list[tuple[int, int]] = []
        for lab in labels:
            lab = int(lab)
            if segs and segs[-1][0] == lab:
                segs[-1] = (lab, segs[-1][1] + 1)
            else:
                segs.append((lab, 1))
        return cls(segs)


# --------------------------------------------------------------------------- durations


def duration_logpmf(l, a: int, lm: LengthModel):
    """Poisson log-probability of a segment of ``l`` frames for action ``a``."""
    l_arr = np.asarray(l, dtype=np.float64)
    if np.any(l_arr < 1):
        raise nc.DomainError("segment length must be at least 1")
    lam = lm.lam[a]
    out = l_arr * np.log(lam) - lam - gammaln(l_arr + 1.0)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------- core recurrences

TIE_TOL = 1e-9


def _tie_tol(score: float) -> float:
    """Scores this close count as equal, so exact ties that differ only by
    summation order still follow the declared tie-break."""
    return TIE_TOL * max(1.0, abs(score)) if np.isfinite(score) else 0.0


def _lse(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


class _Lattice:
    """Segment lattice for N transcripts of equal length over one score matrix.

    Arrays are laid out (end, length, transcript): entry ``[e-1, l-1, n]``
    describes a segment of ``l`` frames ending at boundary ``e``.
    """

    def __init__(self, S: np.ndarray, trs: Sequence[Transcript], lm: LengthModel, max_len: int | None,
                 check: bool = True):
        S = np.asarray(S, dtype=np.float64)
        T, A = S.shape
        self.acts = np.array([tr.actions for tr in trs], dtype=np.int64)
        if self.acts.min() < 0 or self.acts.max() >= A:
            raise ValueError(f"transcript ids outside [0, {A})")
        self.T, self.N, self.O = T, self.acts.shape[0], self.acts.shape[1]
        self.L = T if max_len is None else max(1, min(int(max_len), T))
        if check and (self.O > T or self.O * self.L < T):
            raise InfeasibleError(f"transcript of {self.O} actions cannot cover {T} frames")
        # -inf scores are kept out of the cumulative sums (inf - inf would
        # give nan) and tracked by a separate count
        finite = np.isfinite(S)
        self.C = np.zeros((T + 1, A))
        np.cumsum(np.where(finite, S, 0.0), axis=0, out=self.C[1:])
        self.bad = np.zeros((T + 1, A), dtype=np.int64)
        np.cumsum(~finite, axis=0, out=self.bad[1:])
        self.has_bad = not finite.all()
        ls = np.arange(1, self.L + 1, dtype=np.float64)
        lam = lm.lam[:A]
        self.dur_all = ls[None, :] * np.log(lam)[:, None] - lam[:, None] - gammaln(ls + 1.0)[None, :]
        starts = np.arange(1, T + 1)[:, None] - np.arange(1, self.L + 1)[None, :]
        self.ok = starts >= 0
        self.starts_c = np.where(self.ok, starts, 0)

    def segment_scores(self, o: int) -> np.ndarray:
        a = self.acts[:, o]
        Ca = self.C[:, a]
        s = Ca[1:, None, :] - Ca[self.starts_c]
        s = s + self.dur_all[a].T[None, :, :]
        mask = self.ok[:, :, None]
        if self.has_bad:
            Ba = self.bad[:, a]
            mask = mask & ((Ba[1:, None, :] - Ba[self.starts_c]) == 0)
        return np.where(mask, s, NEG_INF)

    def candidates(self, prev: np.ndarray, seg: np.ndarray) -> np.ndarray:
        return np.where(self.ok[:, :, None], prev[self.starts_c], NEG_INF) + seg

    def candidate_row(self, prev: np.ndarray, o: int, e: int) -> np.ndarray:
        """``candidates(prev, segment_scores(o))[e-1, :, 0]`` with the same float ops."""
        a = self.acts[0, o]
        c = self.C[:, a]
        st, ok = self.starts_c[e - 1], self.ok[e - 1]
        s = (c[e] - c[st]) + self.dur_all[a]
        if self.has_bad:
            ok = ok & (self.bad[e, a] - self.bad[st, a] == 0)
        s = np.where(ok, s, NEG_INF)
        return np.where(self.ok[e - 1], prev[st, 0], NEG_INF) + s

    def reachable(self, o: int) -> np.ndarray:
        """Structural feasibility of boundary e after o segments (ignores scores)."""
        e = np.arange(self.T + 1)
        rest = self.T - e
        return (e >= o) & (e <= o * self.L) & (rest >= self.O - o) & (rest <= (self.O - o) * self.L)


def _forward(lat: _Lattice, reduce: str) -> list[np.ndarray]:
    first = np.full((lat.T + 1, lat.N), NEG_INF)
    first[0] = 0.0
    alphas = [first]
    for o in range(lat.O):
        cand = lat.candidates(alphas[-1], lat.segment_scores(o))
        nxt = np.full((lat.T + 1, lat.N), NEG_INF)
        nxt[1:] = cand.max(axis=1) if reduce == "max" else _lse(cand, 1)
        alphas.append(nxt)
    return alphas


def _backward_lse(lat: _Lattice) -> list[np.ndarray]:
    """``beta[o][s]``: log-summed score of covering ``[s, T)`` with segments o, o+1, ..."""
    T, L = lat.T, lat.L
    ends = np.arange(T)[:, None] + np.arange(1, L + 1)[None, :]
    ok = ends <= T
    rows = np.where(ok, ends - 1, 0)
    cols = np.broadcast_to(np.arange(L)[None, :], ends.shape)
    ends_c = np.where(ok, ends, 0)
    betas: list[np.ndarray] = [np.empty(0)] * (lat.O + 1)
    betas[lat.O] = np.full((T + 1, lat.N), NEG_INF)
    betas[lat.O][T] = 0.0
    for o in range(lat.O - 1, -1, -1):
        seg = lat.segment_scores(o)
        val = np.where(ok[:, :, None], seg[rows, cols] + betas[o + 1][ends_c], NEG_INF)
        cur = np.full((T + 1, lat.N), NEG_INF)
        cur[:T] = _lse(val, 1)
        betas[o] = cur
    return betas


def align(S, tr: Transcript, lm: LengthModel, max_len: int | None = None) -> tuple[Segmentation, float]:
    """Best segmentation of ``S`` under transcript ``tr``.

    Among equal-scoring paths the one whose last segment is shortest wins,
    then the one whose second-to-last segment is shortest, and so on.
    """
    tr = tr if isinstance(tr, Transcript) else Transcript(tr)
    S = S.data if isinstance(S, Tensor) else np.asarray(S, dtype=np.float64)
    lat = _Lattice(S, [tr], lm, max_len)
    alphas = _forward(lat, "max")
    best = float(alphas[lat.O][lat.T, 0])
    if best == NEG_INF:
        raise InfeasibleError("every segmentation has score -inf")
    # paths within the tolerance of the best count as tied; ``need`` is the
    # score the remaining prefix plus current segment must still reach
    need = best - _tie_tol(best)
    lengths = []
    e = lat.T
    for o in range(lat.O - 1, -1, -1):
        row = lat.candidate_row(alphas[o], o, e)
        feasible = lat.ok[e - 1] & lat.reachable(o)[lat.starts_c[e - 1]]
        row = np.where(feasible, row, NEG_INF)
        hits = np.flatnonzero((row >= need) & feasible)
        if not hits.size:
            hits = np.flatnonzero((row == row.max()) & feasible)
        l = int(hits[0]) + 1
        need -= row[l - 1] - alphas[o][e - l, 0]
        lengths.append(l)
        e -= l
    lengths.reverse()
    return Segmentation(list(zip(tr.actions, lengths))), best


def segment(S, g: Grammar, lm: LengthModel, max_len: int | None = None) -> tuple[Transcript, Segmentation, float]:
    """Best (transcript, segmentation) over a grammar; earlier entries win ties."""
    if not len(g):
        raise ValueError("empty grammar")
    best = None
    for tr, lp in zip(g.transcripts, g.log_prior):
        try:
            seg, score = align(S, tr, lm, max_len)
        except InfeasibleError:
            continue
        total = score + lp
        if best is None or total > best[2] + _tie_tol(best[2]):
            best = (tr, seg, total)
    if best is None:
        raise InfeasibleError("no transcript in the grammar fits the video")
    return best


# --------------------------------------------------------------------------- log-partition


def _batch_log_z(S: np.ndarray, trs: Sequence[Transcript], lm: LengthModel, max_len: int | None,
                 want_grad: bool):
    """log Z per transcript, and (if asked) a closure mapping per-transcript
    weights to the weighted sum of their gradients w.r.t. ``S``."""
    lat = _Lattice(S, trs, lm, max_len)
    alphas = _forward(lat, "lse")
    logz = alphas[lat.O][lat.T].copy()
    if not want_grad:
        return logz, None
    betas = _backward_lse(lat)
    # frame t lies in segment o iff B_{o-1} <= t < B_o, where B_o is the
    # boundary after o segments, so occupancy is a difference of two CDFs
    safe = np.where(np.isfinite(logz), logz, 0.0)
    cdfs = []
    for o in range(lat.O + 1):
        with np.errstate(invalid="ignore", over="ignore"):
            p = np.exp(alphas[o] + betas[o] - safe[None, :])
        p = np.where(np.isfinite(logz)[None, :], np.nan_to_num(p, nan=0.0), 0.0)
        cdfs.append(np.cumsum(p, axis=0)[:-1])

    def weighted(w: np.ndarray) -> np.ndarray:
        grad = np.zeros_like(S)
        for o in range(lat.O):
            occ = (cdfs[o] - cdfs[o + 1]) * w[None, :]
            np.add.at(grad.T, lat.acts[:, o], occ.T)
        return grad

    return logz, weighted


def _free_log_z(S: np.ndarray, lm: LengthModel, max_len: int | None, want_grad: bool):
    """log-partition over all segmentations into runs of distinct
    neighbouring actions, and (if asked) its gradient w.r.t. ``S``.

    ``F[e, a]``: paths covering ``[0, e)`` whose last segment is ``a``.
    ``G[s, a]``: paths covering ``[0, s)`` that may be followed by ``a``
    (the empty prefix, or a last action other than ``a``).
    ``B[e, a]``: paths covering ``[e, T)`` that may follow a segment of ``a``.
    """
    A = S.shape[1]
    # only the shared cumulative sums and duration table are used
    lat = _Lattice(S, [Transcript([0])], lm, max_len, check=False)
    T, L = lat.T, lat.L
    if A == 1 and T > L:
        raise InfeasibleError(f"a single action cannot cover {T} frames with segments of at most {L}")
    # SD[e-1, l-1, a]: frame scores plus duration of a segment of a ending at e
    SD = lat.C[1:, None, :] - lat.C[lat.starts_c] + lat.dur_all.T[None, :, :]
    mask = lat.ok[:, :, None]
    if lat.has_bad:
        mask = mask & ((lat.bad[1:, None, :] - lat.bad[lat.starts_c]) == 0)
    SD = np.where(mask, SD, NEG_INF)
    off = np.where(np.eye(A, dtype=bool), NEG_INF, 0.0)

    def follow(row: np.ndarray) -> np.ndarray:
        # entry a: log-sum of row over actions other than a
        return _lse(row[None, :] + off, 1)

    G = np.full((T + 1, A), NEG_INF)
    G[0] = 0.0
    F = np.full((T + 1, A), NEG_INF)
    ls = np.arange(1, L + 1)
    for e in range(1, T + 1):
        n = min(L, e)
        F[e] = _lse(G[e - ls[:n]] + SD[e - 1, :n], 0)
        G[e] = follow(F[e])
    logz = float(_lse(F[T], 0))
    if not want_grad:
        return logz, None
    B = np.full((T + 1, A), NEG_INF)
    B[T] = 0.0
    for e in range(T - 1, -1, -1):
        n = min(L, T - e)
        H = _lse(SD[e + ls[:n] - 1, ls[:n] - 1] + B[e + ls[:n]], 0)
        B[e] = follow(H)
    grad = np.zeros_like(S)
    if not np.isfinite(logz):
        return logz, grad
    ends = np.arange(1, T + 1)[:, None]
    starts = ends - ls[None, :]
    with np.errstate(invalid="ignore", over="ignore"):
        M = np.exp(G[lat.starts_c] + SD + B[1:, None, :] - logz)
    M = np.where(mask, np.nan_to_num(M, nan=0.0), 0.0)
    # occupancy: segment (start, end) covers frames start..end-1
    diff = np.zeros((T + 1, A))
    np.add.at(diff, np.where(lat.ok, starts, 0).ravel(), M.reshape(-1, A))
    np.subtract.at(diff, np.broadcast_to(ends, starts.shape).ravel(), M.reshape(-1, A))
    grad = np.cumsum(diff, axis=0)[:T]
    return logz, grad


def log_partition(S, target, lm: LengthModel, max_len: int | None = None):
    """log of the summed exp-scores of all paths.

    ``target`` is a Transcript (sum over its segmentations), a Grammar
    (prior-weighted sum over transcripts; infeasible ones contribute nothing)
    or a FreeGrammar (sum over every segmentation without repeated
    neighbouring actions). Returns a float for array input and a scalar tape
    node for a Tensor.
    """
    is_tensor = isinstance(S, Tensor)
    arr = S.data if is_tensor else np.asarray(S, dtype=np.float64)
    want = is_tensor and S.requires_grad
    if isinstance(target, FreeGrammar):
        if target.num_actions != arr.shape[1]:
            raise nc.DimensionError(f"grammar has {target.num_actions} actions, scores have {arr.shape[1]}")
        total, grad = _free_log_z(arr, lm, max_len, want)
        if not is_tensor:
            return total
        if not want:
            return Tensor(np.array(total))
        grad[~np.isfinite(arr)] = 0.0
        return nc.make(np.array(total), (S,), lambda g: (g * grad,))
    if isinstance(target, Grammar):
        entries = list(zip(target.transcripts, target.log_prior))
    else:
        entries = [(target if isinstance(target, Transcript) else Transcript(target), 0.0)]
    groups: dict[int, list[tuple[Transcript, float]]] = {}
    for tr, lp in entries:
        groups.setdefault(len(tr), []).append((tr, lp))
    parts, grad_fns = [], []
    for items in groups.values():
        try:
            logz, fn = _batch_log_z(arr, [t for t, _ in items], lm, max_len, want)
        except InfeasibleError:
            continue
        parts.append(logz + np.array([lp for _, lp in items]))
        grad_fns.append(fn)
    if not parts:
        raise InfeasibleError("no transcript fits the video")
    total = float(_lse(np.concatenate(parts), 0))
    if not is_tensor:
        return total

    def bw(g):
        grad = np.zeros_like(arr)
        if np.isfinite(total):
            for part, fn in zip(parts, grad_fns):
                grad += fn(np.exp(part - total))
        grad[~np.isfinite(arr)] = 0.0
        return (g * grad,)
    return nc.make(np.array(total), (S,), bw)


# --------------------------------------------------------------------------- model estimation


def estimate_models(segmentations: Sequence[Segmentation], num_actions: int,
                    alpha: float = 1.0) -> tuple[np.ndarray, LengthModel, Grammar]:
    """Re-estimate the decoding state from labeled videos.

    Returns ``(prior, length_model, grammar)``; the grammar is uniform over
    the distinct transcripts.
    """
    if not segmentations:
        raise ValueError("need at least one segmentation")
    frames = np.zeros(num_actions)
    seg_len_sum = np.zeros(num_actions)
    seg_count = np.zeros(num_actions)
    for seg in segmentations:
        for a, l in seg.segments:
            frames[a] += l
            seg_len_sum[a] += l
            seg_count[a] += 1
    prior = (frames + alpha) / (frames.sum() + alpha * num_actions)
    mean_T = np.mean([s.T for s in segmentations])
    mean_O = np.mean([len(s.segments) for s in segmentations])
    fallback = mean_T / mean_O
    lam = np.where(seg_count > 0, seg_len_sum / np.maximum(seg_count, 1), fallback)
    grammar = Grammar.uniform(s.transcript for s in segmentations)
    return prior, LengthModel(lam), grammar


def transcript_counts(segmentations: Sequence[Segmentation]) -> Counter:
    return Counter(s.transcript for s in segmentations)
