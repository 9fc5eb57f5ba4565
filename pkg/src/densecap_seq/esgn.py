"""Event sequence selection over the candidate proposal pool.

A GRU encodes the candidates in start-time order; its final hidden state
seeds a pointer LSTM. At every step the LSTM state is scored against a
learned END embedding (index 0) plus every still-available candidate with
elementwise additive attention, and the argmax is selected. Selection stops
at END, at a hard cap, or when the pool runs dry.

Scores are independent sigmoids rather than a softmax because training
targets are per-candidate tIoU values, which do not sum to one; argmax
selection is unaffected by the difference.

Candidate embeddings are u(p) = [Loc(p); Vis(p)] where Loc rasterizes the
proposal's interval onto a fixed number of bins of the video extent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, _sigmoid_np
from .cells import (
    GruCellParams,
    LstmCellParams,
    gru_cell,
    gru_step,
    init_gru,
    init_lstm,
    lstm_cell,
    lstm_step,
)
from .epn import tiou
from .params import ParamStore, uniform_init

END_INDEX = 0


@dataclass
class EsgnParams:
    enc: GruCellParams  # over Vis(p), start-time order
    ptr: LstmCellParams  # over u(selected), hidden seeded by encoder
    att_w1: Tensor  # (u_dim, A)
    att_w2: Tensor  # (H, A)
    att_v: Tensor  # (A,)
    u_end: Tensor  # (u_dim,) learned END embedding
    u_start: Tensor  # (u_dim,) learned first pointer input

    @property
    def vis_dim(self) -> int:
        return self.enc.input_dim

    @property
    def u_dim(self) -> int:
        return self.ptr.input_dim

    @property
    def l_loc(self) -> int:
        return self.u_dim - self.vis_dim

    @property
    def hidden_dim(self) -> int:
        return self.ptr.hidden_dim


@dataclass
class EventSequence:
    events: list
    terminated: bool

    def __len__(self):
        return len(self.events)


def init_esgn(store: ParamStore, rng: np.random.Generator, vis_dim: int = 64,
              l_loc: int = 20, hidden: int = 32, att: int = 32,
              scale: float = 0.08) -> EsgnParams:
    u_dim = l_loc + vis_dim
    return EsgnParams(
        enc=init_gru(store, "esgn.enc", vis_dim, hidden, rng, scale),
        ptr=init_lstm(store, "esgn.ptr", u_dim, hidden, rng, scale),
        att_w1=uniform_init(store, "esgn.att.w1", (u_dim, att), rng, scale),
        att_w2=uniform_init(store, "esgn.att.w2", (hidden, att), rng, scale),
        att_v=uniform_init(store, "esgn.att.v", (att,), rng, scale),
        u_end=uniform_init(store, "esgn.u_end", (u_dim,), rng, scale),
        u_start=uniform_init(store, "esgn.u_start", (u_dim,), rng, scale),
    )


def esgn_params(store: ParamStore) -> EsgnParams:
    return EsgnParams(
        enc=gru_cell(store, "esgn.enc"),
        ptr=lstm_cell(store, "esgn.ptr"),
        att_w1=store["esgn.att.w1"],
        att_w2=store["esgn.att.w2"],
        att_v=store["esgn.att.v"],
        u_end=store["esgn.u_end"],
        u_start=store["esgn.u_start"],
    )


def loc_mask(start_seg: int, end_seg: int, t_c: int, l_loc: int) -> np.ndarray:
    """Binary location vector: the interval rasterized onto l_loc bins.

    The number of ones is round(l_loc * len / t_c) (half rounds up), at
    least 1, contiguous, anchored at the bin containing the start segment
    and clamped so the run fits.
    """
    if not (0 <= start_seg <= end_seg < t_c):
        raise ValueError("interval outside the video extent")
    length = end_seg - start_seg + 1
    count = max(1, int(np.floor(l_loc * length / t_c + 0.5)))
    count = min(count, l_loc)
    first = min(int(start_seg * l_loc // t_c), l_loc - count)
    mask = np.zeros(l_loc)
    mask[first : first + count] = 1.0
    return mask


def candidate_embeddings(params: EsgnParams, candidates, t_c: int) -> np.ndarray:
    """(M, u_dim) matrix of [Loc; Vis] rows; constant w.r.t. ESGN params."""
    rows = [
        np.concatenate([loc_mask(p.start_seg, p.end_seg, t_c, params.l_loc), p.vis])
        for p in candidates
    ]
    return np.stack(rows, axis=0)


def encode_candidates(params: EsgnParams, candidates) -> Tensor:
    """Final encoder hidden state over Vis(p) in start-time order."""
    if not candidates:
        raise ValueError(
            "empty candidate set; fall back to an empty event sequence")
    h = Tensor(np.zeros(params.enc.hidden_dim))
    for p in candidates:
        h = gru_step(params.enc, Tensor(np.asarray(p.vis)), h)
    return h


def _embedding_matrix(params: EsgnParams, u_rows: np.ndarray) -> Tensor:
    """END embedding stacked on top of constant candidate rows."""
    return ad.concat(
        [ad.reshape(params.u_end, (1, params.u_dim)), Tensor(u_rows)], axis=0
    )


def attention_logits(params: EsgnParams, h: Tensor, emb: Tensor) -> Tensor:
    """Additive attention logits per embedding row: w . tanh(W1 u + W2 h)."""
    if emb.shape[1] != params.u_dim:
        raise ValueError(f"embedding dim {emb.shape[1]} != {params.u_dim}")
    mixed = ad.tanh(ad.add(ad.matmul(emb, params.att_w1),
                           ad.matmul(h, params.att_w2)))
    return ad.matmul(mixed, params.att_v)


def attention_scores(params: EsgnParams, h: Tensor, emb: Tensor) -> Tensor:
    """Per-row likelihood in (0,1); row 0 is END."""
    return ad.sigmoid(attention_logits(params, h, emb))


def select_sequence(params: EsgnParams, candidates, t_c: int,
                    n_max: int = 8, rng=None) -> EventSequence:
    """Pointer decoding; argmax by default, pure for fixed params and
    candidates. With an rng, each step instead samples an index with
    probability proportional to its sigmoid attention score (stochastic
    event-sequence exploration for reward fine-tuning)."""
    if not candidates:
        return EventSequence(events=[], terminated=True)
    with ad.no_grad():
        h = encode_candidates(params, candidates)
        c = Tensor(np.zeros(params.hidden_dim))
        u_all = candidate_embeddings(params, candidates, t_c)
        available = list(range(len(candidates)))
        chosen = []
        u_prev = params.u_start
        terminated = False
        while available and len(chosen) < n_max:
            h, c = lstm_step(params.ptr, u_prev, (h, c))
            emb = _embedding_matrix(params, u_all[available])
            scores = attention_logits(params, h, emb).data
            if rng is None:
                j = int(np.argmax(scores))
            else:
                probs = _sigmoid_np(scores)
                probs = probs / probs.sum()
                j = int(rng.choice(probs.size, p=probs))
            if j == END_INDEX:
                terminated = True
                break
            idx = available.pop(j - 1)
            chosen.append(idx)
            u_prev = Tensor(u_all[idx])
    return EventSequence(events=[candidates[i] for i in chosen],
                         terminated=terminated)


def _best_match(candidates, event) -> int:
    """Index of the candidate with maximum tIoU to the event (ties: earlier
    start, then shorter)."""
    scored = [
        (-tiou(p.interval, event.interval), p.start_seg, p.length, i)
        for i, p in enumerate(candidates)
    ]
    return min(scored)[3]


def esgn_targets(candidates, gt_events) -> np.ndarray:
    """(N+1, M+1) soft targets: column 0 is END (0 until the terminal row,
    then 1); column m+1 at row n is tIoU(p_m, e_n); terminal row zero."""
    n, m = len(gt_events), len(candidates)
    y = np.zeros((n + 1, m + 1))
    for i, e in enumerate(gt_events):
        for j, p in enumerate(candidates):
            y[i, j + 1] = tiou(p.interval, e.interval)
    y[n, END_INDEX] = 1.0
    return y


def esgn_loss(params: EsgnParams, candidates, gt_events, t_c: int) -> Tensor:
    """Teacher-forced BCE against soft tIoU targets.

    Step n scores END plus every candidate against the ground-truth event
    e_n; the pointer input at step n is u of the best-matching candidate
    for e_{n-1} (the learned start input at n=1). One terminal step targets
    END alone.
    """
    if not candidates or not gt_events:
        raise ValueError("need at least one candidate and one ground-truth event")
    u_all = candidate_embeddings(params, candidates, t_c)
    inputs = [params.u_start] + [
        Tensor(u_all[_best_match(candidates, e)]) for e in gt_events
    ]
    targets = esgn_targets(candidates, gt_events)

    h = encode_candidates(params, candidates)
    c = Tensor(np.zeros(params.hidden_dim))
    emb = _embedding_matrix(params, u_all)
    logit_rows = []
    for u_prev in inputs:
        h, c = lstm_step(params.ptr, u_prev, (h, c))
        logit_rows.append(attention_logits(params, h, emb))
    logits = ad.stack_rows(logit_rows)
    return ad.bce_with_logits(logits, targets)
