"""Windowed GRU temporal encoder with a generated linear head.

Frame ``t`` is encoded by running a GRU from a zero state over the frames
``t - w//2 .. t + w//2`` (truncated at the sequence ends) and reading the
final state. All frames are processed together: row ``t`` of the batch is
frame ``t``'s window, and steps that fall outside the sequence leave that
row's state untouched, which is identical to truncating the window.
"""
from __future__ import annotations

import numpy as np

from . import numcore as nc
from .hypernet import GeneratedHead
from .numcore import Tensor

PRIOR_FLOOR = 1e-6


class GruParams:
    def __init__(self, in_dim: int, hidden: int = 64, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.hidden = in_dim, hidden
        sx, sh = 1 / np.sqrt(in_dim), 1 / np.sqrt(hidden)
        for g in "zrh":
            setattr(self, f"W_{g}", nc.parameter(rng.normal(0, sx, (in_dim, hidden)), f"gru.W_{g}"))
            setattr(self, f"U_{g}", nc.parameter(rng.normal(0, sh, (hidden, hidden)), f"gru.U_{g}"))
            setattr(self, f"b_{g}", nc.parameter(np.zeros(hidden), f"gru.b_{g}"))

    def parameters(self) -> list[Tensor]:
        return [getattr(self, f"{k}_{g}") for g in "zrh" for k in ("W", "U", "b")]


def _input_terms(x: Tensor, p: GruParams) -> Tensor:
    wx = nc.concat([p.W_z, p.W_r, p.W_h], axis=1)
    bx = nc.concat([p.b_z, p.b_r, p.b_h], axis=0)
    return x @ wx + bx


def _step(xt: Tensor, h: Tensor, p: GruParams, u_zr: Tensor) -> Tensor:
    c = p.hidden
    hz = h @ u_zr
    z = nc.sigmoid(xt[:, :c] + hz[:, :c])
    r = nc.sigmoid(xt[:, c:2 * c] + hz[:, c:])
    cand = nc.tanh(xt[:, 2 * c:] + nc.mul(r, h) @ p.U_h)
    return h + nc.mul(z, cand - h)


def window_states(x: np.ndarray, p: GruParams, w: int = 21) -> Tensor:
    """Hidden state for every frame's window, as a T x hidden tensor."""
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window length must be odd and positive, got {w}")
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    if x.shape[1] != p.in_dim:
        raise nc.DimensionError(f"feature dim {x.shape[1]} != GRU input dim {p.in_dim}")
    half = w // 2
    xt_all = _input_terms(Tensor(x), p)
    u_zr = nc.concat([p.U_z, p.U_r], axis=1)
    if half:
        pad = Tensor(np.zeros((half, 3 * p.hidden)))
        xt_all = nc.concat([pad, xt_all, pad], axis=0)
    h = Tensor(np.zeros((T, p.hidden)))
    centers = np.arange(T)
    for j in range(w):
        frame = centers - half + j
        valid = (frame >= 0) & (frame < T)
        if not valid.any():
            continue
        # padded row j + t holds frame t - half + j
        xt = xt_all[j:j + T]
        h_new = _step(xt, h, p, u_zr)
        h = h_new if valid.all() else nc.select_rows(valid, h_new, h)
    return h


def gru_window(x: np.ndarray, t: int, w: int, p: GruParams) -> Tensor:
    """Final state of the GRU run over the (truncated) window centred on ``t``."""
    x = np.asarray(x, dtype=np.float64)
    T = x.shape[0]
    if not 0 <= t < T:
        raise IndexError(f"frame {t} outside [0, {T})")
    if w < 1 or w % 2 == 0:
        raise ValueError(f"window length must be odd and positive, got {w}")
    lo, hi = max(0, t - w // 2), min(T, t + w // 2 + 1)
    xt_all = _input_terms(Tensor(x[lo:hi]), p)
    u_zr = nc.concat([p.U_z, p.U_r], axis=1)
    h = Tensor(np.zeros((1, p.hidden)))
    for i in range(hi - lo):
        h = _step(xt_all[i:i + 1], h, p, u_zr)
    return nc.reshape(h, (p.hidden,))


def logits(x: np.ndarray, head: GeneratedHead, p: GruParams, w: int = 21) -> Tensor:
    if head.W.shape[0] != p.hidden:
        raise nc.DimensionError(f"head expects {head.W.shape[0]} inputs, GRU gives {p.hidden}")
    return window_states(x, p, w) @ head.W + head.b


def posteriors(x: np.ndarray, head: GeneratedHead, p: GruParams, w: int = 21) -> Tensor:
    """T x A matrix of frame-wise action posteriors."""
    return nc.softmax_rows(logits(x, head, p, w))


def log_posteriors(x: np.ndarray, head: GeneratedHead, p: GruParams, w: int = 21) -> Tensor:
    return nc.log_softmax_rows(logits(x, head, p, w))


def floor_prior(prior) -> np.ndarray:
    prior = np.maximum(np.asarray(prior, dtype=np.float64), PRIOR_FLOOR)
    return prior / prior.sum()


def class_scores(P, prior) -> Tensor:
    """log p(a|x_t) - log p(a); the normalizing constant is dropped."""
    P = P if isinstance(P, Tensor) else Tensor(P)
    return scores_from_log_posteriors(nc.log(P), prior)


def scores_from_log_posteriors(logP: Tensor, prior) -> Tensor:
    log_prior = np.log(floor_prior(prior))
    return logP - Tensor(np.broadcast_to(log_prior, logP.shape).copy())
