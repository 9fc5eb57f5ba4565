"""Event proposal network.

A two-layer GRU scans the segment features once. Each segment t is treated
as a candidate ending point and the top-layer hidden state is projected to K
logits: column k scores the proposal of length k+1, i.e. the interval
[t-k, t]. Proposals whose implied start precedes segment 0 are invalid and
masked everywhere. Surviving high-confidence proposals go through temporal
NMS to form the candidate pool handed to the selector.

Desk-scale defaults (hidden 32, K=8, top_n=200, M_max=32) mirror a
reference configuration of hidden 512, K=128, top 1000 at full scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import GruCellParams, gru_cell, gru_step, init_gru
from .params import ParamStore, uniform_init


@dataclass
class Proposal:
    start_seg: int
    end_seg: int
    score: float
    vis: np.ndarray | None = field(default=None, compare=False, repr=False)

    @property
    def interval(self):
        return (self.start_seg, self.end_seg)

    @property
    def length(self) -> int:
        return self.end_seg - self.start_seg + 1


@dataclass
class EpnParams:
    gru0: GruCellParams
    gru1: GruCellParams
    w_out: Tensor  # (H, K)
    b_out: Tensor  # (K,)

    @property
    def k(self) -> int:
        return self.w_out.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.gru1.hidden_dim

    @property
    def d_feat(self) -> int:
        return self.gru0.input_dim


def init_epn(store: ParamStore, rng: np.random.Generator, d_feat: int = 16,
             hidden: int = 32, k: int = 8, scale: float = 0.08) -> EpnParams:
    return EpnParams(
        gru0=init_gru(store, "epn.gru0", d_feat, hidden, rng, scale),
        gru1=init_gru(store, "epn.gru1", hidden, hidden, rng, scale),
        w_out=uniform_init(store, "epn.out.w", (hidden, k), rng, scale),
        b_out=uniform_init(store, "epn.out.b", (k,), rng, scale),
    )


def epn_params(store: ParamStore) -> EpnParams:
    return EpnParams(
        gru0=gru_cell(store, "epn.gru0"),
        gru1=gru_cell(store, "epn.gru1"),
        w_out=store["epn.out.w"],
        b_out=store["epn.out.b"],
    )


def tiou(a, b) -> float:
    """Intersection over union of two inclusive segment intervals."""
    (a0, a1), (b0, b1) = a, b
    if a0 > a1 or b0 > b1:
        raise ValueError(f"malformed interval: {a} vs {b}")
    inter = min(a1, b1) - max(a0, b0) + 1
    if inter <= 0:
        return 0.0
    union = (a1 - a0 + 1) + (b1 - b0 + 1) - inter
    return inter / union


def valid_mask(t_c: int, k: int) -> np.ndarray:
    """(T_c, K) 0/1 mask; entry (t, j) is valid iff start t-j >= 0."""
    t_idx = np.arange(t_c)[:, None]
    k_idx = np.arange(k)[None, :]
    return (t_idx - k_idx >= 0).astype(np.float64)


def score_proposals(params: EpnParams, segments: np.ndarray):
    """One scan over the video.

    Returns (logits, hiddens): a (T_c, K) logit tensor and the (T_c, H)
    top-layer hidden states, both still on the tape so the loss and any
    Vis(p) read-outs differentiate through the scan.
    """
    segments = np.asarray(segments, dtype=np.float64)
    if segments.ndim != 2 or segments.shape[1] != params.d_feat:
        raise ValueError(
            f"expected (T_c, {params.d_feat}) segment features, got {segments.shape}")
    h0 = Tensor(np.zeros(params.gru0.hidden_dim))
    h1 = Tensor(np.zeros(params.gru1.hidden_dim))
    tops = []
    for t in range(segments.shape[0]):
        h0 = gru_step(params.gru0, Tensor(segments[t]), h0)
        h1 = gru_step(params.gru1, h0, h1)
        tops.append(h1)
    hiddens = ad.stack_rows(tops)
    logits = ad.add(ad.matmul(hiddens, params.w_out), params.b_out)
    return logits, hiddens


def label_proposals(video, k: int) -> np.ndarray:
    """(T_c, K) binary labels: 1 iff tIoU with some GT event exceeds 0.5.

    Strictly greater than 0.5; invalid (t, j) slots stay 0 and are excluded
    from the loss by the validity mask.
    """
    t_c = video.num_segments
    y = np.zeros((t_c, k))
    for t in range(t_c):
        for j in range(min(k, t + 1)):
            interval = (t - j, t)
            best = max(tiou(interval, e.interval) for e in video.events)
            if best > 0.5:
                y[t, j] = 1.0
    return y


def epn_loss(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Class-rebalanced BCE over valid proposal slots.

    Positives are upweighted by the per-video negative/positive count ratio,
    clamped to [1, 100]; invalid slots contribute exactly zero.
    """
    pos = float((labels * mask).sum())
    neg = float(mask.sum()) - pos
    w = float(np.clip(neg / max(pos, 1.0), 1.0, 100.0))
    return ad.bce_with_logits(logits, labels, pos_weight=w, mask=mask)


def _suppress_order(p: Proposal):
    return (-p.score, p.start_seg, p.length)


def nms(proposals, threshold: float, cap: int):
    """Greedy temporal non-maximum suppression.

    Scans by descending score (ties: earlier start, then shorter), drops any
    proposal whose tIoU with an already-kept one exceeds the threshold, and
    stops once `cap` proposals are kept. Output is re-sorted by start time
    for the selector's encoder.
    """
    kept = []
    for p in sorted(proposals, key=_suppress_order):
        if len(kept) >= cap:
            break
        if all(tiou(p.interval, q.interval) <= threshold for q in kept):
            kept.append(p)
    kept.sort(key=lambda p: (p.start_seg, p.end_seg, -p.score))
    return kept


def extract_candidates(params: EpnParams, segments: np.ndarray,
                       top_n: int = 200, threshold: float = 0.8,
                       cap: int = 32):
    """Candidate pool for one video: score, take top_n, suppress, attach Vis.

    Vis(p) concatenates the top-layer hidden states at the proposal's start
    and end segments. Runs off-tape; use score_proposals directly when
    gradients are needed.
    """
    with ad.no_grad():
        logits, hiddens = score_proposals(params, segments)
    conf = _sigmoid_scores(logits.data)
    h = hiddens.data
    t_c = conf.shape[0]
    pool = []
    for t in range(t_c):
        for j in range(min(params.k, t + 1)):
            pool.append(Proposal(t - j, t, float(conf[t, j])))
    pool.sort(key=_suppress_order)
    kept = nms(pool[:top_n], threshold, cap)
    for p in kept:
        p.vis = np.concatenate([h[p.start_seg], h[p.end_seg]])
    return kept


def _sigmoid_scores(logits: np.ndarray) -> np.ndarray:
    from .autodiff import _sigmoid_np

    return _sigmoid_np(logits)
