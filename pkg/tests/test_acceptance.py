"""Release gate: six numbered guarantees, one test per guarantee.

Each test prints a single [GATE] PASS/FAIL line (visible with -s or in the
captured output on failure; the -v test status line mirrors it). The
guarantees:

  1. every parameterized operation passes finite-difference gradient
     checks (rel. error < 1e-4, dims <= 8, >= 20 seeds, under 60 s);
  2. interval and caption metrics match independent brute-force oracles
     on >= 100 random instances each, and hand fixtures to 1e-9;
  3. the full default pipeline trains on CPU in <= 30 minutes and clears
     fixed quality bars, including the ablation ordering;
  4. the Monte-Carlo policy gradient over 1e5 decoder rollouts matches
     exhaustive enumeration within 3 standard errors componentwise;
  5. corpus, checkpoints, and dumps are byte-deterministic and round-trip
     bit-exactly;
  6. sequence selection compresses candidates (ratio < 0.25) and is
     invariant under monotone transforms of its pointer logits.
"""

from __future__ import annotations

import json
import math
import random
import time
from pathlib import Path

import numpy as np
import pytest

from densecap_seq import autodiff as ad
from densecap_seq import cli
from densecap_seq import esgn as esgn_mod
from densecap_seq.autodiff import Tensor
from densecap_seq.cells import gru_cell, gru_step, init_gru, init_lstm, lstm_cell, lstm_step
from densecap_seq.epn import (
    Proposal,
    epn_loss,
    init_epn,
    label_proposals,
    nms,
    score_proposals,
    tiou,
    valid_mask,
)
from densecap_seq.esgn import esgn_loss, init_esgn, select_sequence
from densecap_seq.metrics import (
    CiderIdf,
    bleu,
    cider,
    dense_caption_scores,
    detection_scores,
)
from densecap_seq.params import ParamStore, save_checkpoint, store_from_checkpoint
from densecap_seq.scn import (
    EventContext,
    context_gate,
    episode_step,
    episode_zero_state,
    init_scn,
    rollout_sequences,
    scn_nll,
    scn_params,
    tda_attend,
    zero_g,
)
from densecap_seq.synthdata import (
    EOS_ID,
    CaptionTokens,
    CorpusSpec,
    GroundTruthEvent,
    generate_corpus,
    read_corpus,
    split_corpus,
    write_corpus,
)
from densecap_seq.training import (
    epn_params,
    match_reference_sequence,
    unigram_perplexity,
    scn_perplexity,
)

from helpers import brute_tiou, fd_gradcheck, random_leaf
from test_epn import brute_nms
from test_metrics import brute_bleu, brute_cider, brute_dense, brute_detection

THRESHOLDS = (0.3, 0.5, 0.7, 0.9)


def _verdict(num: int, label: str, failures: list):
    status = "PASS" if not failures else "FAIL"
    print(f"\n[GATE] criterion {num} ({label}): {status}")
    for msg in failures:
        print(f"  - {msg}")
    assert not failures, f"criterion {num} failed:\n" + "\n".join(failures)


# --- criterion 1: gradient suite ------------------------------------------


def _wsum(t: Tensor, rng) -> Tensor:
    """Random fixed-weight scalarization so every output entry matters."""
    return ad.tsum(ad.mul(t, Tensor(rng.normal(size=t.data.shape))))


def _build_gru(rng):
    din, dh = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    store = ParamStore()
    init_gru(store, "g", din, dh, rng)
    cell = gru_cell(store, "g")
    x, h = random_leaf(rng, (din,)), random_leaf(rng, (dh,))
    w = rng.normal(size=dh)
    loss = lambda: ad.tsum(ad.mul(gru_step(cell, x, h), Tensor(w)))
    return loss, [t for _, t in store.items()] + [x, h]


def _build_lstm(rng):
    din, dh = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    store = ParamStore()
    init_lstm(store, "l", din, dh, rng)
    cell = lstm_cell(store, "l")
    x, h, c = (random_leaf(rng, (d,)) for d in (din, dh, dh))
    wh, wc = rng.normal(size=dh), rng.normal(size=dh)

    def loss():
        h2, c2 = lstm_step(cell, x, (h, c))
        return ad.add(ad.tsum(ad.mul(h2, Tensor(wh))),
                      ad.tsum(ad.mul(c2, Tensor(wc))))

    return loss, [t for _, t in store.items()] + [x, h, c]


def _build_epn(rng):
    t_c, k = int(rng.integers(4, 9)), int(rng.integers(2, 5))
    d, hid = int(rng.integers(2, 5)), int(rng.integers(2, 6))
    store = ParamStore()
    params = init_epn(store, rng, d_feat=d, hidden=hid, k=k)
    segments = rng.normal(size=(t_c, d))
    labels = (rng.random((t_c, k)) < 0.4).astype(np.float64)
    mask = valid_mask(t_c, k)
    loss = lambda: epn_loss(score_proposals(params, segments)[0], labels, mask)
    return loss, [t for _, t in store.items()]


def _gt(s, e):
    return GroundTruthEvent(start_seg=s, end_seg=e,
                            caption=CaptionTokens((3, EOS_ID)))


def _build_esgn(rng):
    vis = int(rng.integers(2, 6))
    store = ParamStore()
    params = init_esgn(store, rng, vis_dim=vis,
                       l_loc=int(rng.integers(3, 7)),
                       hidden=int(rng.integers(2, 6)),
                       att=int(rng.integers(2, 6)))
    t_c = 10
    cands = []
    for _ in range(int(rng.integers(2, 5))):
        s = int(rng.integers(0, t_c))
        e = int(rng.integers(s, t_c))
        cands.append(Proposal(start_seg=s, end_seg=e,
                              score=float(rng.random()),
                              vis=rng.normal(size=vis)))
    gts = [_gt(int(rng.integers(0, 5)), int(rng.integers(5, t_c)))
           for _ in range(int(rng.integers(1, 3)))]
    loss = lambda: esgn_loss(params, cands, gts, t_c)
    return loss, [t for _, t in store.items()]


def _tiny_scn(rng, vocab=6):
    d, v = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    hid, emb = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    att, gate = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    store = ParamStore()
    params = init_scn(store, rng, vocab_size=vocab, d_feat=d, vis_dim=v,
                      episode_hidden=hid, event_hidden=hid, emb=emb,
                      att=att, gate=gate)
    ctx = EventContext(rng.normal(size=(int(rng.integers(1, 5)), d)),
                       rng.normal(size=v))
    return store, params, ctx


def _build_tda(rng):
    store, params, ctx = _tiny_scn(rng)
    h_prev = random_leaf(rng, (params.event_hidden,))
    w = rng.normal(size=ctx.seg_feats.shape[1])

    def loss():
        z, _ = tda_attend(params, ctx.seg_feats, ctx.vis, h_prev)
        return ad.tsum(ad.mul(z, Tensor(w)))

    names = ("scn.tda.wc", "scn.tda.wv", "scn.tda.wh", "scn.tda.v")
    return loss, [store[n] for n in names] + [h_prev]


def _build_cg(rng):
    store, params, ctx = _tiny_scn(rng)
    d = ctx.seg_feats.shape[1]
    z = random_leaf(rng, (d,))
    x = random_leaf(rng, (params.wemb.data.shape[1],))
    h_prev = random_leaf(rng, (params.event_hidden,))
    gate = params.cg_wz.data.shape[1]
    w = rng.normal(size=2 * gate)
    loss = lambda: ad.tsum(ad.mul(
        context_gate(params, z, ctx.vis, x, h_prev), Tensor(w)))
    names = ("scn.cg.wz", "scn.cg.wvb", "scn.cg.wk")
    return loss, [store[n] for n in names] + [z, x, h_prev]


def _rand_caption(rng, vocab=6, max_body=3):
    body = tuple(int(rng.integers(3, vocab))
                 for _ in range(int(rng.integers(1, max_body + 1))))
    return CaptionTokens(body + (EOS_ID,))


def _build_scn_nll(rng):
    store, params, ctx = _tiny_scn(rng)
    ctx2 = EventContext(rng.normal(size=(2, ctx.seg_feats.shape[1])),
                        rng.normal(size=ctx.vis.shape[0]))
    caps = [_rand_caption(rng), _rand_caption(rng)]
    loss = lambda: scn_nll(params, [ctx, ctx2], caps)
    return loss, [t for _, t in store.items()]


def _build_rl_surrogate(rng):
    """Reward-weighted sum of caption log-probabilities with the sampled
    captions held fixed, the differentiable core of a policy-gradient step."""
    store, params, ctx = _tiny_scn(rng)
    caps, _ = rollout_sequences(params, [ctx], 2,
                                np.random.default_rng(int(rng.integers(1 << 30))),
                                max_len=4)
    weights = rng.normal(size=2)

    def loss():
        total = None
        for j, w in enumerate(weights):
            term = ad.mul(scn_nll(params, [ctx], [caps[0][j]]), float(w))
            total = term if total is None else ad.add(total, term)
        return total

    return loss, [t for _, t in store.items()]


_GRAD_BUILDERS = (
    ("gru_step", _build_gru),
    ("lstm_step", _build_lstm),
    ("proposal_scorer", _build_epn),
    ("selection_loss", _build_esgn),
    ("segment_attention", _build_tda),
    ("context_gate", _build_cg),
    ("caption_nll", _build_scn_nll),
    ("reward_surrogate", _build_rl_surrogate),
)


def test_criterion_1_gradient_suite_matches_finite_differences():
    failures = []
    start = time.monotonic()
    for name, builder in _GRAD_BUILDERS:
        for seed in range(20):
            rng = np.random.default_rng([17, seed])
            loss_fn, tensors = builder(rng)
            try:
                fd_gradcheck(loss_fn, tensors, rng=rng, max_entries=3)
            except AssertionError as err:
                failures.append(f"{name} seed {seed}: {err}")
                break
    elapsed = time.monotonic() - start
    print(f"gradient suite: {len(_GRAD_BUILDERS)} ops x 20 seeds "
          f"in {elapsed:.1f}s")
    if elapsed >= 60.0:
        failures.append(f"gradient suite took {elapsed:.1f}s (budget 60s)")
    _verdict(1, "finite-difference gradients", failures)


# --- criterion 2: brute-force oracles and hand fixtures -------------------


def _rand_iv(rand, hi=20, span=6):
    s = rand.randint(0, hi)
    return (s, s + rand.randint(0, span))


def test_criterion_2_oracle_equivalence():
    failures = []
    rand = random.Random(29)

    for i in range(300):
        a, b = _rand_iv(rand), _rand_iv(rand)
        if not math.isclose(tiou(a, b), brute_tiou(a, b),
                            rel_tol=1e-12, abs_tol=1e-12):
            failures.append(f"tiou mismatch on {a} vs {b}")
            break

    for i in range(120):
        props = [Proposal(start_seg=s, end_seg=e, score=rand.random())
                 for s, e in (_rand_iv(rand) for _ in range(rand.randint(1, 10)))]
        thr = rand.choice((0.3, 0.5, 0.8))
        cap = rand.randint(1, 6)
        got = nms(props, thr, cap)
        want = brute_nms(props, thr, cap)
        if [id(p) for p in got] != [id(p) for p in want]:
            failures.append(f"nms mismatch (instance {i})")
            break

    class _Vid:
        def __init__(self, t_c, ivs):
            self.num_segments = t_c
            self.events = [_gt(s, e) for s, e in ivs]

    for i in range(120):
        t_c = rand.randint(4, 16)
        ivs = []
        for _ in range(rand.randint(1, 4)):
            s = rand.randint(0, t_c - 1)
            ivs.append((s, min(t_c - 1, s + rand.randint(0, 5))))
        k = rand.randint(2, 6)
        y = label_proposals(_Vid(t_c, ivs), k=k)
        want = np.zeros((t_c, k))
        for t in range(t_c):
            for j in range(k):
                if t - j >= 0 and any(brute_tiou((t - j, t), iv) > 0.5
                                      for iv in ivs):
                    want[t, j] = 1.0
        if not np.array_equal(y, want):
            failures.append(f"label grid mismatch (instance {i})")
            break

    for i in range(120):
        gts = sorted((_gt(*_rand_iv(rand)) for _ in range(rand.randint(1, 5))),
                     key=lambda e: e.start_seg)
        dets = [Proposal(start_seg=s, end_seg=e, score=1.0)
                for s, e in (_rand_iv(rand) for _ in range(rand.randint(1, 4)))]
        m = match_reference_sequence(dets, gts)
        ok = True
        for d, got in zip(dets, m.events):
            best, best_key = None, None
            for e in gts:
                key = (-brute_tiou(d.interval, e.interval), e.start_seg)
                if best_key is None or key < best_key:
                    best, best_key = e, key
            ok = ok and got is best
        if not ok:
            failures.append(f"reference match mismatch (instance {i})")
            break

    for i in range(120):
        videos = []
        for _ in range(rand.randint(1, 4)):
            preds = [_rand_iv(rand) for _ in range(rand.randint(0, 4))]
            gts = [_rand_iv(rand) for _ in range(rand.randint(1, 4))]
            videos.append((preds, gts))
        score = detection_scores(videos)
        rec, prec = brute_detection(videos, THRESHOLDS)
        for t, r, p in zip(THRESHOLDS, rec, prec):
            if abs(score.recall[t] - r) > 1e-12 or abs(score.precision[t] - p) > 1e-12:
                failures.append(f"detection mismatch at {t} (instance {i})")
        if failures and failures[-1].startswith("detection"):
            break

    rand_d = random.Random(31)
    for i in range(100):
        videos = []
        for _ in range(rand_d.randint(1, 3)):
            def cap():
                return tuple(rand_d.randint(3, 8)
                             for _ in range(rand_d.randint(1, 4))) + (EOS_ID,)
            preds = [(_rand_iv(rand_d, hi=12), cap())
                     for _ in range(rand_d.randint(0, 3))]
            gts = [(_rand_iv(rand_d, hi=12), cap())
                   for _ in range(rand_d.randint(1, 3))]
            videos.append((preds, gts))
        idf = CiderIdf([[c for _, c in gts] for _, gts in videos])
        got = dense_caption_scores(videos, idf=idf)
        want_c, want_b = brute_dense(videos, THRESHOLDS)
        for t in THRESHOLDS:
            if abs(got.cider_by_threshold[t] - want_c[t]) > 1e-9:
                failures.append(f"dense cider mismatch at {t} (instance {i})")
            for k in range(4):
                if abs(got.bleu_by_threshold[t][k] - want_b[t][k]) > 1e-9:
                    failures.append(f"dense bleu mismatch at {t} (instance {i})")
        if any(f.startswith("dense") for f in failures):
            break

    rand_m = random.Random(41)
    for i in range(120):
        cand = tuple(rand_m.randint(3, 9) for _ in range(rand_m.randint(1, 6)))
        refs = [tuple(rand_m.randint(3, 9)
                      for _ in range(rand_m.randint(1, 6)))
                for _ in range(rand_m.randint(1, 3))]
        n = rand_m.randint(1, 4)
        if abs(bleu(cand, refs, n=n) - float(brute_bleu(cand, refs, n))) > 1e-9:
            failures.append(f"bleu oracle mismatch (instance {i})")
            break
        docs = [[r] for r in refs] + [[cand]]
        idf = CiderIdf(docs)
        if abs(cider(cand, refs, idf) - float(brute_cider(cand, refs, docs))) > 1e-9:
            failures.append(f"cider oracle mismatch (instance {i})")
            break

    A, B, C, D, E, F = range(3, 9)
    docs = [[(A, B, C, D, EOS_ID)], [(C, D, EOS_ID)], [(A, E, F, EOS_ID)]]
    idf = CiderIdf(docs)
    fixtures = [
        ("bleu identity", bleu((A, B, C, D), [(A, B, C, D)], n=4), 1.0),
        ("bleu disjoint", bleu((A, B), [(C, D)], n=2), 0.0),
        ("bleu half precision", bleu((A, B), [(A, C)], n=1), 0.5),
        ("bleu brevity penalty", bleu((A, B, C), [(A, B, C, D, E)], n=1),
         math.exp(1.0 - 5.0 / 3.0)),
        ("cider identity", cider((A, B, C, D), [(A, B, C, D)], idf), 10.0),
        ("cider disjoint", cider((C, D, E), [(A, F, B)], idf), 0.0),
    ]
    for name, got, want in fixtures:
        if abs(got - want) > 1e-9:
            failures.append(f"{name}: got {got!r}, want {want!r}")

    _verdict(2, "brute-force oracle equivalence", failures)


# --- criterion 4: policy gradient vs exhaustive enumeration ----------------


WORD = 3  # the single real token in the 4-entry toy vocabulary


def _toy_decoder():
    rng = np.random.default_rng(91)
    store = ParamStore()
    params = init_scn(store, rng, vocab_size=4, d_feat=2, vis_dim=2,
                      episode_hidden=3, event_hidden=3, emb=2, att=2, gate=2,
                      scale=0.6)
    ctx = EventContext(rng.normal(size=(2, 2)), rng.normal(size=2))
    return store, params, ctx


def _step_distributions(params, ctx, tokens):
    """Per-step full-softmax distributions along one caption, built from
    the public pieces; verified below against the fused scorer."""
    with ad.no_grad():
        state = episode_zero_state(params, batch=1)
        g = zero_g(params, batch=1)
        r, _ = episode_step(params, Tensor(ctx.vis[None, :]), g, state)
        h = r
        c = Tensor(np.zeros((1, params.event_hidden)))
        prev = np.array([1], dtype=np.int64)  # begin-of-caption marker
        dists = []
        for tok in tokens:
            x = ad.embed(params.wemb, prev)
            z, _ = tda_attend(params, ctx.seg_feats, ctx.vis, h)
            o = context_gate(params, z, ctx.vis, x, h)
            h, c = lstm_step(params.event, ad.concat([o, x], axis=-1), (h, c))
            logits = ad.add(ad.matmul(h, params.w_out), params.b_out).data[0]
            p = np.exp(logits - logits.max())
            dists.append(p / p.sum())
            prev = np.array([tok], dtype=np.int64)
    return dists


def _flat_grads(store):
    return np.concatenate([t.grad.reshape(-1) for _, t in store.items()])


def test_criterion_4_sampled_gradient_matches_enumeration():
    failures = []
    store, params, ctx = _toy_decoder()
    seqs = [(EOS_ID,), (WORD, EOS_ID), (WORD, WORD, EOS_ID)]
    rewards = {seqs[0]: 0.2, seqs[1]: 1.0, seqs[2]: 0.5}

    # scored log-probability and exact parameter gradient per sequence
    logq, grads = {}, {}
    for s in seqs:
        nll = scn_nll(params, [ctx], [CaptionTokens(s)])
        logq[s] = -float(nll.data)
        store.zero_grad()
        ad.backward(nll)
        grads[s] = -_flat_grads(store)

    # sampling probabilities: the decoder draws from the full softmax with
    # the two input-side marker tokens masked out, then renormalized; the
    # final step of a capped sequence is a forced stop with probability 1
    pi = {}
    for s in seqs:
        dists = _step_distributions(params, ctx, s)
        stepwise_logq = 0.0
        p = 1.0
        for t, (tok, d) in enumerate(zip(s, dists)):
            stepwise_logq += math.log(d[tok])
            if t == len(s) - 1 and len(s) == 3:
                continue  # forced stop at the cap, not a sampling event
            p *= d[tok] / (d[EOS_ID] + d[WORD])
        pi[s] = p
        if abs(stepwise_logq - logq[s]) > 1e-10:
            failures.append(f"stepwise rescore of {s} deviates from the "
                            f"fused scorer: {stepwise_logq} vs {logq[s]}")
    if abs(sum(pi.values()) - 1.0) > 1e-12:
        failures.append(f"toy sequence space does not exhaust sampling "
                        f"probability: sum {sum(pi.values())!r}")

    exact = sum(pi[s] * rewards[s] * grads[s] for s in seqs)
    second = sum(pi[s] * (rewards[s] * grads[s]) ** 2 for s in seqs)
    n_total = 100_000
    se = np.sqrt(np.maximum(second - exact**2, 0.0) / n_total)

    # small on-tape batch: backprop through the true sampled surrogate
    # must equal the count-weighted combination of per-sequence gradients
    n_small = 400
    caps, logps = rollout_sequences(params, [ctx], n_small,
                                    np.random.default_rng(5), max_len=3)
    weights = np.array([rewards[c.ids] / n_small for c in caps[0]])
    store.zero_grad()
    ad.backward(ad.tsum(ad.mul(logps[0], weights)))
    got_small = _flat_grads(store)
    counts_small = {s: sum(1 for c in caps[0] if c.ids == s) for s in seqs}
    want_small = sum((counts_small[s] / n_small) * rewards[s] * grads[s]
                     for s in seqs)
    err = np.max(np.abs(got_small - want_small))
    if err > 1e-10 * max(1.0, float(np.max(np.abs(want_small)))):
        failures.append(f"surrogate backprop deviates from count-weighted "
                        f"per-sequence gradients by {err}")

    # full Monte-Carlo estimate from 1e5 genuine sampler draws
    rng = np.random.default_rng(6)
    counts = dict.fromkeys(seqs, 0)
    drawn = 0
    with ad.no_grad():
        while drawn < n_total:
            chunk = min(5000, n_total - drawn)
            caps, _ = rollout_sequences(params, [ctx], chunk, rng, max_len=3)
            for c in caps[0]:
                if c.ids not in counts:
                    failures.append(f"sampler produced out-of-space {c.ids}")
                    break
                counts[c.ids] += 1
            drawn += chunk
    estimate = sum((counts[s] / n_total) * rewards[s] * grads[s] for s in seqs)
    gap = np.abs(estimate - exact)
    bound = 3.0 * se + 1e-12
    n_over = int(np.sum(gap > bound))
    print(f"policy-gradient check: counts {[counts[s] for s in seqs]}, "
          f"max |mc - exact| = {gap.max():.3e}, "
          f"max allowed = {bound.max():.3e}")
    if n_over:
        failures.append(
            f"{n_over} gradient components outside 3 standard errors "
            f"(worst gap {gap.max()!r} vs bound {bound[np.argmax(gap)]!r})"
        )
    _verdict(4, "sampled policy gradient vs enumeration", failures)


# --- criterion 5: byte determinism ----------------------------------------


def _chain_args(workdir: Path):
    return [
        "--paths.workdir", str(workdir),
        "--corpus.num_videos", "10",
        "--corpus.t_min", "12",
        "--corpus.t_max", "18",
        "--corpus.d_feat", "6",
        "--corpus.num_templates", "6",
        "--corpus.max_events", "3",
        "--corpus.max_event_len", "5",
        "--dims.epn_hidden", "6",
        "--dims.k", "5",
        "--dims.loc_bins", "6",
        "--dims.esgn_hidden", "5",
        "--dims.esgn_att", "4",
        "--dims.episode_hidden", "8",
        "--dims.embed_dim", "4",
        "--dims.scn_att", "4",
        "--dims.gate_dim", "3",
        "--dims.max_len", "12",
        "--dims.top_n", "40",
        "--dims.m_max", "6",
        "--dims.n_max", "4",
        "--train.epn_epochs", "1",
        "--train.esgn_epochs", "1",
        "--train.scn_epochs", "1",
        "--train.rl_epochs", "1",
        "--train.rollouts", "2",
    ]


def test_criterion_5_byte_determinism(tmp_path):
    failures = []

    spec = CorpusSpec(seed=7, num_videos=12, t_min=12, t_max=18, d_feat=6,
                      num_templates=6, max_events=3, max_event_len=5)
    paths = [tmp_path / "c1.jsonl", tmp_path / "c2.jsonl"]
    for p in paths:
        videos, vocab = generate_corpus(spec)
        write_corpus(p, videos, vocab, spec)
    if paths[0].read_bytes() != paths[1].read_bytes():
        failures.append("same-seed corpus files differ")
    videos, vocab, spec_dict = read_corpus(paths[0])
    round_trip = tmp_path / "c3.jsonl"
    write_corpus(round_trip, videos, vocab, CorpusSpec(**spec_dict))
    if round_trip.read_bytes() != paths[0].read_bytes():
        failures.append("corpus read/write round trip is not bit-exact")

    dirs = [tmp_path / "runA", tmp_path / "runB"]
    for d in dirs:
        args = _chain_args(d)
        codes = [cli.main(["synth", *args])]
        codes += [cli.main(["train", s, *args])
                  for s in ("epn", "esgn", "scn", "rl")]
        if any(codes):
            failures.append(f"pipeline exit codes {codes} in {d.name}")
    for name in ("corpus.jsonl", "epn.ckpt", "esgn.ckpt", "scn.ckpt",
                 "rl.ckpt"):
        if (dirs[0] / name).read_bytes() != (dirs[1] / name).read_bytes():
            failures.append(f"same-seed {name} differs between runs")

    ckpt = dirs[0] / "scn.ckpt"
    resaved = tmp_path / "resaved.ckpt"
    save_checkpoint(store_from_checkpoint(ckpt), resaved)
    if resaved.read_bytes() != ckpt.read_bytes():
        failures.append("checkpoint load/save round trip is not bit-exact")

    args = _chain_args(dirs[0])
    for tag in ("d1", "d2"):
        if cli.main(["generate", "--tag", tag, *args]) != 0:
            failures.append(f"generate {tag} failed")
    for kind in ("captions", "proposals"):
        b1 = (dirs[0] / f"d1.{kind}.jsonl").read_bytes()
        b2 = (dirs[0] / f"d2.{kind}.jsonl").read_bytes()
        if b1 != b2:
            failures.append(f"same-seed {kind} dump differs between calls")

    _verdict(5, "byte-deterministic artifacts", failures)


# --- criterion 3: the full pipeline on the default corpus ------------------


SYSTEMS = (("esgn-seq", "scn"), ("esgn-ind", "scn"), ("epn-ind", "scn"),
           ("esgn-seq", "rl"))


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """Default-config pipeline: corpus, four stages, dumps, evaluations.

    Everything downstream reads from this one run, so the gate measures
    exactly what a fresh `synth`/`train`/`generate`/`eval` session gets.
    """
    workdir = tmp_path_factory.mktemp("gate") / "run"
    args = ["--paths.workdir", str(workdir)]
    start = time.monotonic()
    codes = {"synth": cli.main(["synth", *args])}
    for stage in ("epn", "esgn", "scn", "rl"):
        codes[f"train-{stage}"] = cli.main(["train", stage, *args])
    for system, captioner in SYSTEMS:
        codes[f"gen-{system}-{captioner}"] = cli.main(
            ["generate", "--system", system, "--captioner", captioner, *args])
        codes[f"eval-{system}-{captioner}"] = cli.main(
            ["eval", "--dump", f"{system}-{captioner}-val", *args])
    wall = time.monotonic() - start

    reports = {}
    for system, captioner in SYSTEMS:
        path = workdir / f"{system}-{captioner}-val.eval.json"
        reports[(system, captioner)] = (
            json.loads(path.read_text()) if path.exists() else None)

    ppl = unigram = gt_mean = None
    corpus = workdir / "corpus.jsonl"
    if corpus.exists():
        videos, vocab, _ = read_corpus(corpus)
        gt_mean = sum(len(v.events) for v in videos) / len(videos)
        train, val = split_corpus(videos)
        unigram = unigram_perplexity(train, val, len(vocab))
        if (workdir / "scn.ckpt").exists():
            eparams = epn_params(store_from_checkpoint(workdir / "epn.ckpt"))
            sparams = scn_params(store_from_checkpoint(workdir / "scn.ckpt"))
            ppl = scn_perplexity(sparams, eparams, val)
    return {"codes": codes, "wall": wall, "reports": reports,
            "ppl": ppl, "unigram": unigram, "gt_mean": gt_mean}


def test_criterion_3_pipeline_learns_on_default_corpus(default_run):
    failures = []
    bad = {k: v for k, v in default_run["codes"].items() if v != 0}
    if bad:
        failures.append(f"nonzero exit codes: {bad}")
    wall = default_run["wall"]
    print(f"default pipeline wall time: {wall:.0f}s (budget 1800s)")
    if wall > 1800.0:
        failures.append(f"pipeline took {wall:.0f}s, budget is 1800s")

    main = default_run["reports"].get(("esgn-seq", "scn"))
    if main is None:
        failures.append("missing evaluation report for the full system")
    else:
        cand_recall = main["candidates"]["recall"]["0.5"]
        print(f"(a) candidate recall@0.5 = {cand_recall:.3f} (bar 0.80)")
        if cand_recall < 0.80:
            failures.append(f"candidate recall@0.5 {cand_recall:.3f} < 0.80")

        mean_events = main["mean_events"]
        gt_mean = default_run["gt_mean"]
        ar = main["detection"]["average_recall"]
        ap = main["detection"]["average_precision"]
        print(f"(b) events/video {mean_events:.2f} vs corpus mean "
              f"{gt_mean:.2f}; AR {ar:.3f}, AP {ap:.3f} (bars +-0.5 / 0.60)")
        if abs(mean_events - gt_mean) > 0.5:
            failures.append(
                f"mean detected events {mean_events:.2f} not within 0.5 "
                f"of corpus mean {gt_mean:.2f}")
        if ar < 0.60:
            failures.append(f"average recall {ar:.3f} < 0.60")
        if ap < 0.60:
            failures.append(f"average precision {ap:.3f} < 0.60")

    ppl, unigram = default_run["ppl"], default_run["unigram"]
    if ppl is None or unigram is None:
        failures.append("perplexity could not be computed")
    else:
        print(f"(c) caption perplexity {ppl:.2f} vs unigram {unigram:.2f} "
              f"(bar: at least 20% below)")
        if not ppl < 0.8 * unigram:
            failures.append(
                f"perplexity {ppl:.2f} not 20% below unigram {unigram:.2f}")

    ciders = {}
    for key, report in default_run["reports"].items():
        if report is not None:
            ciders[key] = report["captions"]["cider"]
    if len(ciders) == 4:
        seq = ciders[("esgn-seq", "scn")]
        ind = ciders[("esgn-ind", "scn")]
        allc = ciders[("epn-ind", "scn")]
        tuned = ciders[("esgn-seq", "rl")]
        print(f"(d) CIDEr: all-candidates {allc:.3f} < selected {ind:.3f} "
              f"<= episode-aware {seq:.3f} < reward-tuned {tuned:.3f}")
        if not ind > allc:
            failures.append(f"selection gain missing: {ind:.3f} <= {allc:.3f}")
        if not seq >= ind:
            failures.append(f"episode-state gain missing: {seq:.3f} < {ind:.3f}")
        if not tuned > seq:
            failures.append(f"reward tuning gain missing: {tuned:.3f} <= {seq:.3f}")
    else:
        failures.append("not all four system evaluations are available")

    _verdict(3, "default pipeline quality bars", failures)


# --- criterion 6: compression and pointer-logit invariance -----------------


def test_criterion_6_selection_compresses_and_ignores_monotone_transforms(
        default_run):
    failures = []

    main = default_run["reports"].get(("esgn-seq", "scn"))
    if main is None or main.get("compression") is None:
        failures.append("no compression block in the evaluation report")
    else:
        ratio = main["compression"]["ratio"]
        print(f"selection compression: {main['compression']['mean_events']:.2f} "
              f"of {main['compression']['mean_candidates']:.2f} candidates, "
              f"ratio {ratio:.3f} (bar 0.25)")
        if not ratio < 0.25:
            failures.append(f"compression ratio {ratio:.3f} not < 0.25")

    transforms = (
        lambda s: 2.5 * s + 1.0,
        lambda s: np.exp(s),
        lambda s: s**3 + 0.5 * s,
        lambda s: np.tanh(s),
    )
    original = esgn_mod.attention_logits
    checked = 0
    try:
        for seed in range(30):
            rng = np.random.default_rng([43, seed])
            store = ParamStore()
            params = init_esgn(store, rng, vis_dim=4, l_loc=6, hidden=5, att=4)
            t_c = 12
            cands = []
            for _ in range(int(rng.integers(2, 7))):
                s = int(rng.integers(0, t_c))
                cands.append(Proposal(
                    start_seg=s, end_seg=int(rng.integers(s, t_c)),
                    score=float(rng.random()), vis=rng.normal(size=4)))
            base = select_sequence(params, cands, t_c, n_max=4)
            for f in transforms:
                def warped(p, h, emb, _f=f):
                    return Tensor(_f(original(p, h, emb).data))

                esgn_mod.attention_logits = warped
                try:
                    out = select_sequence(params, cands, t_c, n_max=4)
                finally:
                    esgn_mod.attention_logits = original
                same = ([id(p) for p in out.events]
                        == [id(p) for p in base.events]
                        and out.terminated == base.terminated)
                checked += 1
                if not same:
                    failures.append(
                        f"selection changed under a monotone transform "
                        f"(seed {seed})")
                    break
            if failures:
                break
    finally:
        esgn_mod.attention_logits = original
    if checked < 100 and not failures:
        failures.append(f"only {checked} transform instances checked")

    _verdict(6, "candidate compression and logit invariance", failures)
