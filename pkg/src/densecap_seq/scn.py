"""Sequential captioning: an episode-level LSTM threads context across the
selected events while an event-level LSTM decodes each caption.

Per event the episode LSTM consumes concat(Vis(e), g_prev) where g_prev is
the caption feature of the previous event (zero before the first); its
hidden state r seeds the word decoder's hidden state (cell starts at zero).
Each word step attends over the event's segment features (softmax weights
conditioned on the previous decoder hidden), gates the attended vector
against the event-level visual vector, and feeds concat(gated, word
embedding) to the decoder LSTM. The caption feature g is the decoder hidden
at the step that emitted EOS.

All decode paths run row-parallel: B independent continuations share one
graph, which is what makes sampled-rollout training affordable here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cells import LstmCellParams, init_lstm, lstm_cell, lstm_step
from .params import ParamStore, uniform_init
from .synthdata import BOS_ID, EOS_ID, PAD_ID, CaptionTokens


@dataclass
class ScnParams:
    episode: LstmCellParams  # input concat(vis, g_prev)
    event: LstmCellParams  # input concat(o_t, x_t)
    wemb: Tensor  # (V, emb)
    w_out: Tensor  # (event_hidden, V)
    b_out: Tensor  # (V,)
    tda_wc: Tensor  # (d_feat, att)
    tda_wv: Tensor  # (vis_dim, att)
    tda_wh: Tensor  # (event_hidden, att)
    tda_v: Tensor  # (att,)
    cg_wz: Tensor  # (d_feat, gate)
    cg_wvb: Tensor  # (vis_dim, gate)
    cg_wk: Tensor  # (2*gate + emb + event_hidden, gate)

    @property
    def vocab_size(self) -> int:
        return self.wemb.shape[0]

    @property
    def emb_dim(self) -> int:
        return self.wemb.shape[1]

    @property
    def event_hidden(self) -> int:
        return self.event.hidden_dim

    @property
    def episode_hidden(self) -> int:
        return self.episode.hidden_dim

    @property
    def gate_dim(self) -> int:
        return self.cg_wz.shape[1]

    @property
    def vis_dim(self) -> int:
        return self.tda_wv.shape[0]

    @property
    def d_feat(self) -> int:
        return self.tda_wc.shape[0]


@dataclass
class EventContext:
    """Per-event decoder inputs: raw segment features inside the proposal
    interval plus the proposal-level visual vector."""

    seg_feats: np.ndarray  # (S, d_feat)
    vis: np.ndarray  # (vis_dim,)

    def __post_init__(self):
        if self.seg_feats.ndim != 2 or self.seg_feats.shape[0] < 1:
            raise ValueError("event needs at least one segment row")


def event_context(segments: np.ndarray, hiddens: np.ndarray, start: int,
                  end: int) -> EventContext:
    """Assemble an EventContext from video segments and scan hiddens."""
    return EventContext(
        seg_feats=np.asarray(segments[start : end + 1], dtype=np.float64),
        vis=np.concatenate([hiddens[start], hiddens[end]]),
    )


def init_scn(store: ParamStore, rng: np.random.Generator, vocab_size: int,
             d_feat: int = 16, vis_dim: int = 64, episode_hidden: int = 64,
             event_hidden: int = 64, emb: int = 32, att: int = 32,
             gate: int = 32, scale: float = 0.08) -> ScnParams:
    if episode_hidden != event_hidden:
        # the episodic feature r is used directly as the decoder's h_0
        raise ValueError("episode and event hidden sizes must match")
    return ScnParams(
        episode=init_lstm(store, "scn.episode", vis_dim + event_hidden,
                          episode_hidden, rng, scale),
        event=init_lstm(store, "scn.event", 2 * gate + emb, event_hidden,
                        rng, scale),
        wemb=uniform_init(store, "scn.wemb", (vocab_size, emb), rng, scale),
        w_out=uniform_init(store, "scn.out.w", (event_hidden, vocab_size), rng, scale),
        b_out=uniform_init(store, "scn.out.b", (vocab_size,), rng, scale),
        tda_wc=uniform_init(store, "scn.tda.wc", (d_feat, att), rng, scale),
        tda_wv=uniform_init(store, "scn.tda.wv", (vis_dim, att), rng, scale),
        tda_wh=uniform_init(store, "scn.tda.wh", (event_hidden, att), rng, scale),
        tda_v=uniform_init(store, "scn.tda.v", (att,), rng, scale),
        cg_wz=uniform_init(store, "scn.cg.wz", (d_feat, gate), rng, scale),
        cg_wvb=uniform_init(store, "scn.cg.wvb", (vis_dim, gate), rng, scale),
        cg_wk=uniform_init(store, "scn.cg.wk",
                           (2 * gate + emb + event_hidden, gate), rng, scale),
    )


def scn_params(store: ParamStore) -> ScnParams:
    return ScnParams(
        episode=lstm_cell(store, "scn.episode"),
        event=lstm_cell(store, "scn.event"),
        wemb=store["scn.wemb"],
        w_out=store["scn.out.w"],
        b_out=store["scn.out.b"],
        tda_wc=store["scn.tda.wc"],
        tda_wv=store["scn.tda.wv"],
        tda_wh=store["scn.tda.wh"],
        tda_v=store["scn.tda.v"],
        cg_wz=store["scn.cg.wz"],
        cg_wvb=store["scn.cg.wvb"],
        cg_wk=store["scn.cg.wk"],
    )


def episode_step(params: ScnParams, vis, g_prev, state):
    """One episode-LSTM step; returns (r, new_state). Accepts vectors or
    (B, dim) rows."""
    vis = vis if isinstance(vis, Tensor) else Tensor(vis)
    x = ad.concat([vis, g_prev], axis=-1)
    h, c = lstm_step(params.episode, x, state)
    return h, (h, c)


def episode_zero_state(params: ScnParams, batch=None):
    shape = ((params.episode_hidden,) if batch is None
             else (batch, params.episode_hidden))
    return Tensor(np.zeros(shape)), Tensor(np.zeros(shape))


def zero_g(params: ScnParams, batch=None) -> Tensor:
    shape = ((params.event_hidden,) if batch is None
             else (batch, params.event_hidden))
    return Tensor(np.zeros(shape))


def _tda_scores(cs_a: Tensor, hw: Tensor, v: Tensor) -> Tensor:
    """Fused attention logits: tanh(cs_a[s] + hw[b]) . v -> (B, S).

    One tape node instead of S per-segment chains; the (B, S, A) tanh
    activation is kept in the closure for the backward pass.
    """
    t = np.tanh(cs_a.data[None, :, :] + hw.data[:, None, :])
    out = t @ v.data

    def vjp(g):
        dt = (1.0 - t * t) * (g[:, :, None] * v.data[None, None, :])
        return dt.sum(axis=0), dt.sum(axis=1), np.einsum("bsa,bs->a", t, g)

    return ad.node(out, (cs_a, hw, v), vjp)


def _seg_projection(params: ScnParams, ctx: EventContext) -> Tensor:
    """(S, att) term shared by every word step of one event."""
    return ad.add(ad.matmul(Tensor(ctx.seg_feats), params.tda_wc),
                  ad.matmul(Tensor(ctx.vis), params.tda_wv))


def tda_attend(params: ScnParams, seg_feats, vis, h_prev: Tensor):
    """Attended segment vector z plus the softmax weights.

    h_prev may be a vector or (B, H) rows; outputs follow suit.
    """
    ctx = EventContext(np.asarray(seg_feats, dtype=np.float64),
                       np.asarray(vis, dtype=np.float64))
    single = h_prev.ndim == 1
    h_rows = ad.reshape(h_prev, (1, -1)) if single else h_prev
    cs_a = _seg_projection(params, ctx)
    scores = _tda_scores(cs_a, ad.matmul(h_rows, params.tda_wh), params.tda_v)
    weights = ad.softmax(scores, axis=-1)
    z = ad.matmul(weights, Tensor(ctx.seg_feats))
    if single:
        return ad.reshape(z, (-1,)), ad.reshape(weights, (-1,))
    return z, weights


def context_gate(params: ScnParams, z: Tensor, vis, x: Tensor,
                 h_prev: Tensor) -> Tensor:
    """Gated fusion of attended segments and event-level visual vector.

    Returns concat((1-k) * tanh(W_z z), k * tanh(W_vb vis)) with
    k = sigmoid(W_k [z_bar; v_bar; x; h_prev]).
    """
    single = z.ndim == 1
    if single:
        z, x, h_prev = (ad.reshape(t, (1, -1)) for t in (z, x, h_prev))
    b = z.shape[0]
    vis_t = vis if isinstance(vis, Tensor) else Tensor(np.asarray(vis, dtype=np.float64))
    v_bar = ad.tanh(ad.matmul(vis_t, params.cg_wvb))
    v_rows = ad.tile_rows(ad.reshape(v_bar, (1, -1)), b)
    z_bar = ad.tanh(ad.matmul(z, params.cg_wz))
    k = ad.sigmoid(ad.matmul(ad.concat([z_bar, v_rows, x, h_prev], axis=-1),
                             params.cg_wk))
    o = ad.concat([ad.mul(ad.sub(1.0, k), z_bar), ad.mul(k, v_rows)], axis=-1)
    return ad.reshape(o, (-1,)) if single else o


def _decode_rows(params: ScnParams, ctx: EventContext, r_rows: Tensor,
                 mode: str = "greedy", max_len: int = 20,
                 temperature: float = 1.0, rng=None, forced=None):
    """Row-parallel caption decode for one event.

    Every row of r_rows is an independent continuation sharing the same
    event context. In free-running mode tokens come from argmax or
    temperature-scaled sampling; with `forced` (B, L) the given tokens are
    teacher-forced and scored instead (PAD marks finished rows).

    Returns (tokens, logp, g): per-row emitted ids ending in EOS, the
    per-row summed log-probability of the emitted tokens under the
    untempered model, and the per-row caption feature (decoder hidden at
    the EOS-emitting step, last step when EOS never fires). A row still
    open at step max_len has EOS forced and scored there, so the decoder
    defines a proper distribution over captions of at most max_len tokens
    and logp always matches a teacher-forced rescore of the tokens.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample" and rng is None and forced is None:
        raise ValueError("sampling requires an rng")
    b = r_rows.shape[0]
    steps = max_len if forced is None else forced.shape[1]

    h, c = r_rows, Tensor(np.zeros((b, params.event_hidden)))
    cs_a = _seg_projection(params, ctx)
    seg_const = Tensor(ctx.seg_feats)
    v_bar = ad.tanh(ad.matmul(Tensor(ctx.vis), params.cg_wvb))
    v_rows = ad.tile_rows(ad.reshape(v_bar, (1, -1)), b)

    ids = np.full(b, BOS_ID, dtype=np.int64)
    alive = np.ones(b)
    logp = Tensor(np.zeros(b))
    g_acc = Tensor(np.zeros((b, params.event_hidden)))
    emitted = []

    for t in range(steps):
        if not alive.any():
            break
        x = ad.embed(params.wemb, ids)
        hw = ad.matmul(h, params.tda_wh)
        weights = ad.softmax(_tda_scores(cs_a, hw, params.tda_v), axis=-1)
        z = ad.matmul(weights, seg_const)
        z_bar = ad.tanh(ad.matmul(z, params.cg_wz))
        k = ad.sigmoid(ad.matmul(ad.concat([z_bar, v_rows, x, h], axis=-1),
                                 params.cg_wk))
        o = ad.concat([ad.mul(ad.sub(1.0, k), z_bar), ad.mul(k, v_rows)], axis=-1)
        h, c = lstm_step(params.event, ad.concat([o, x], axis=-1), (h, c))
        logits = ad.add(ad.matmul(h, params.w_out), params.b_out)

        if forced is not None:
            chosen = forced[:, t].astype(np.int64)
            step_alive = alive * (chosen != PAD_ID)
            chosen = np.where(step_alive > 0, chosen, PAD_ID)
        elif t == steps - 1:
            # close every still-open caption at the cap; the forced EOS is
            # scored like any other token so reported log-probabilities
            # always equal a teacher-forced recompute of the output
            chosen = np.where(alive > 0, EOS_ID, PAD_ID)
            step_alive = alive
        else:
            # PAD/BOS are input-side markers, never emitted; logp still
            # scores the chosen token under the full output distribution
            avail = logits.data.copy()
            avail[:, PAD_ID] = -np.inf
            avail[:, BOS_ID] = -np.inf
            if mode == "greedy":
                picked = avail.argmax(axis=-1)
            else:
                scaled = avail / temperature
                scaled = scaled - scaled.max(axis=-1, keepdims=True)
                probs = np.exp(scaled)
                probs /= probs.sum(axis=-1, keepdims=True)
                picked = ad.sample_rows(probs, rng)
            chosen = np.where(alive > 0, picked, PAD_ID)
            step_alive = alive
        safe = np.where(step_alive > 0, chosen, EOS_ID)  # PAD rows score EOS, masked out
        logp = ad.add(logp, ad.mul(ad.log_prob_from_logits(logits, safe),
                                   step_alive))
        finished_now = step_alive * (chosen == EOS_ID)
        g_acc = ad.add(g_acc, ad.mul(h, finished_now[:, None]))
        alive = step_alive * (chosen != EOS_ID)
        emitted.append(chosen)
        ids = np.where(chosen != PAD_ID, chosen, PAD_ID).astype(np.int64)

    g = ad.add(g_acc, ad.mul(h, alive[:, None]))
    tok_matrix = (np.stack(emitted, axis=1) if emitted
                  else np.zeros((b, 0), dtype=np.int64))
    tokens = []
    for row in tok_matrix:
        ids_row = [int(i) for i in row if i != PAD_ID]
        if EOS_ID not in ids_row:
            ids_row.append(EOS_ID)  # length cap hit; close the caption
        tokens.append(ids_row)
    return tokens, logp, g


def decode_caption(params: ScnParams, ctx: EventContext, r: Tensor,
                   mode: str = "greedy", max_len: int = 20,
                   temperature: float = 1.0, rng=None):
    """Decode one caption from episodic feature r.

    Returns (CaptionTokens, g vector, total log-probability as float).
    """
    with ad.no_grad():
        r_rows = ad.reshape(r, (1, -1))
        tokens, logp, g = _decode_rows(params, ctx, r_rows, mode=mode,
                                       max_len=max_len,
                                       temperature=temperature, rng=rng)
    return CaptionTokens(tuple(tokens[0])), g.data[0].copy(), float(logp.data[0])


def caption_sequence(params: ScnParams, contexts, mode: str = "greedy",
                     max_len: int = 20, temperature: float = 1.0, rng=None):
    """Caption every event of a detected sequence in order, threading the
    episode state. Returns a list of (CaptionTokens, logprob) pairs."""
    out = []
    with ad.no_grad():
        state = episode_zero_state(params)
        g = zero_g(params)
        for ctx in contexts:
            r, state = episode_step(params, ctx.vis, g, state)
            cap, g_vec, lp = decode_caption(params, ctx, r, mode=mode,
                                            max_len=max_len,
                                            temperature=temperature, rng=rng)
            g = Tensor(g_vec)
            out.append((cap, lp))
    return out


def forced_matrix(caption: CaptionTokens, batch: int = 1) -> np.ndarray:
    return np.tile(np.asarray(caption.ids, dtype=np.int64), (batch, 1))


def scn_nll(params: ScnParams, contexts, captions) -> Tensor:
    """Teacher-forced negative log-likelihood over a whole event sequence.

    Ground-truth captions drive both the word inputs and the episode
    threading (g comes from the forced decode of the true caption).
    """
    if len(contexts) != len(captions):
        raise ValueError("one caption per event required")
    for cap in captions:
        if any(i >= params.vocab_size for i in cap.ids):
            raise ValueError("caption token outside the vocabulary")
    state = episode_zero_state(params, batch=1)
    g = zero_g(params, batch=1)
    total = None
    for ctx, cap in zip(contexts, captions):
        vis_row = Tensor(np.asarray(ctx.vis)[None, :])
        r, state = episode_step(params, vis_row, g, state)
        _, logp, g = _decode_rows(params, ctx, r, forced=forced_matrix(cap))
        total = ad.neg(logp) if total is None else ad.sub(total, logp)
    return ad.tsum(total)


def rollout_sequences(params: ScnParams, contexts, n_rollouts: int, rng,
                      max_len: int = 20, temperature: float = 1.0):
    """Sample n_rollouts caption sets for one event sequence in parallel.

    Returns (captions, logps): captions[n][b] is the CaptionTokens of event
    n in rollout b; logps[n] is the (B,) log-probability tensor, still on
    the tape so a reward-weighted surrogate can backpropagate.
    """
    b = n_rollouts
    state = episode_zero_state(params, batch=b)
    g = zero_g(params, batch=b)
    captions, logps = [], []
    for ctx in contexts:
        vis_rows = ad.tile_rows(Tensor(np.asarray(ctx.vis)[None, :]), b)
        r, state = episode_step(params, vis_rows, g, state)
        tokens, logp, g = _decode_rows(params, ctx, r, mode="sample",
                                       max_len=max_len,
                                       temperature=temperature, rng=rng)
        captions.append([CaptionTokens(tuple(t)) for t in tokens])
        logps.append(logp)
    return captions, logps
