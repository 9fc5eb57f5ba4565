"""Stage orchestration for the full pipeline.

Four stages run in order: the proposal scorer first, then the event
selector and the captioner supervised against ground truth, then reward
fine-tuning of the captioner. Each stage owns a checkpoint file whose
parameter names live in a disjoint namespace, so earlier stages are frozen
by construction once written; later stages load them read-only.

Reward fine-tuning is self-critical REINFORCE: for each video we sample
caption sets on the detected event sequence, score them against matched
ground-truth captions, subtract a greedy-decoded baseline produced on the
reference events, and descend the reward-weighted negative log-likelihood.
Each per-event reward adds an event-level term (sampled vs reference
caption) and a shared episode-level term (whole temporally ordered
paragraphs), and the baseline is refreshed once per video per epoch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .epn import (
    epn_params,
    extract_candidates,
    init_epn,
    label_proposals,
    epn_loss,
    score_proposals,
    tiou,
    valid_mask,
)
from .esgn import esgn_loss, esgn_params, init_esgn, select_sequence
from .metrics import CiderIdf, bleu, cider, strip_eos
from .optim import Adam
from .params import ParamStore, clip_grad_norm, save_checkpoint, store_from_checkpoint
from .scn import (
    caption_sequence,
    event_context,
    init_scn,
    rollout_sequences,
    scn_nll,
    scn_params,
)
from .synthdata import split_corpus

STAGES = ("epn", "esgn", "scn", "rl")
CHECKPOINT_NAMES = {
    "epn": "epn.ckpt",
    "esgn": "esgn.ckpt",
    "scn": "scn.ckpt",
    "rl": "rl.ckpt",
}
LOG_NAME = "logs.jsonl"
REWARDS = ("cider", "bleu4")


@dataclass(frozen=True)
class ModelDims:
    """Desk-scale architecture extents shared by every stage."""

    epn_hidden: int = 32
    k: int = 8
    loc_bins: int = 20
    esgn_hidden: int = 32
    esgn_att: int = 32
    episode_hidden: int = 64
    embed_dim: int = 32
    scn_att: int = 32
    gate_dim: int = 32
    max_len: int = 20
    top_n: int = 200
    nms_threshold: float = 0.8
    m_max: int = 32
    n_max: int = 8

    def __post_init__(self):
        for name in ("epn_hidden", "k", "loc_bins", "esgn_hidden", "esgn_att",
                     "episode_hidden", "embed_dim", "scn_att", "gate_dim",
                     "max_len", "top_n", "m_max", "n_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ValueError("nms threshold must lie in [0, 1]")

    @property
    def vis_dim(self) -> int:
        return 2 * self.epn_hidden

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    epochs: int
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    rollouts: int = 16
    reward: str = "cider"
    sample_events: bool = False
    temperature: float = 1.0
    clip_norm: float = 5.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; one of {STAGES}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0 or self.eps <= 0 or self.temperature <= 0:
            raise ValueError("lr, eps and temperature must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.rollouts < 1:
            raise ValueError("need at least one rollout")
        if self.reward not in REWARDS:
            raise ValueError(f"reward must be one of {REWARDS}")
        if self.clip_norm <= 0:
            raise ValueError("clip norm must be positive")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# --- reference matching and rewards ---------------------------------------


@dataclass(frozen=True)
class ReferenceMatch:
    """Ground-truth events and captions paired to each detected event.

    zero_overlap flags detections whose best match still has tIoU 0; they
    keep a reference (the argmax is well defined) but the pairing carries
    no temporal evidence.
    """

    events: tuple
    captions: tuple
    zero_overlap: tuple


@dataclass(frozen=True)
class RewardReport:
    """Per-event rewards for one sampled caption set.

    total[n] = event_term[n] + episode_term, exactly.
    """

    event_terms: tuple
    episode_term: float
    totals: tuple

    def __post_init__(self):
        vals = list(self.event_terms) + [self.episode_term] + list(self.totals)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("reward terms must be finite")

    @property
    def mean_total(self) -> float:
        return float(np.mean(self.totals))


def match_reference_sequence(detected, gt_events) -> ReferenceMatch:
    """Best-overlap ground-truth event for each detected event.

    Ties go to the earlier ground-truth start; several detections may share
    one reference.
    """
    detected = list(getattr(detected, "events", detected))
    if not detected or not gt_events:
        raise ValueError("need non-empty detected and ground-truth sets")
    events, caps, zeros = [], [], []
    for d in detected:
        best = min(
            (-tiou(d.interval, e.interval), e.start_seg, i)
            for i, e in enumerate(gt_events)
        )
        e = gt_events[best[2]]
        events.append(e)
        caps.append(e.caption)
        zeros.append(best[0] == 0.0)
    return ReferenceMatch(tuple(events), tuple(caps), tuple(zeros))


def _ids(caption) -> tuple:
    return tuple(getattr(caption, "ids", caption))


def paragraph(captions, starts=None) -> tuple:
    """Concatenate caption contents (EOS stripped) in temporal order."""
    caps = [strip_eos(_ids(c)) for c in captions]
    if starts is not None:
        order = np.argsort(np.asarray(starts), kind="stable")
        caps = [caps[i] for i in order]
    return tuple(t for c in caps for t in c)


def reward_fn(name: str, idf: CiderIdf):
    """Caption-level reward: tokens x single reference -> score."""
    if name == "cider":
        return lambda cand, ref: cider(cand, [ref], idf)
    if name == "bleu4":
        return lambda cand, ref: bleu(cand, [ref], n=4)
    raise ValueError(f"reward must be one of {REWARDS}")


def compute_rewards(sampled, baseline, references, f, starts=None) -> RewardReport:
    """Two-level self-critical rewards for one sampled caption set.

    Event terms compare each sampled caption to its reference with the
    greedy baseline subtracted; the episode term does the same on whole
    concatenated paragraphs and is added to every event's total.
    """
    n = len(references)
    if not (len(sampled) == len(baseline) == n) or n < 1:
        raise ValueError("sampled, baseline and reference sets must align")
    event_terms = tuple(
        f(_ids(s), _ids(r)) - f(_ids(b), _ids(r))
        for s, b, r in zip(sampled, baseline, references)
    )
    ref_par = paragraph(references, starts)
    episode_term = f(paragraph(sampled, starts), ref_par) - f(
        paragraph(baseline, starts), ref_par
    )
    totals = tuple(e + episode_term for e in event_terms)
    return RewardReport(event_terms, episode_term, totals)


def rl_step(store: ParamStore, params, opt: Adam, contexts, starts,
            match: ReferenceMatch, baselines, f, config: TrainConfig,
            rng, max_len: int = 20):
    """One video's REINFORCE update from config.rollouts sampled caption
    sets. Returns (surrogate loss, per-rollout RewardReports), or None when
    the detected sequence is empty (callers count the skip)."""
    if not contexts:
        return None
    n_events = len(contexts)
    b = config.rollouts
    captions, logps = rollout_sequences(
        params, contexts, b, rng, max_len=max_len,
        temperature=config.temperature,
    )
    reports = [
        compute_rewards(
            [captions[n][j] for n in range(n_events)],
            baselines, match.captions, f, starts,
        )
        for j in range(b)
    ]
    surrogate = None
    for n in range(n_events):
        w = np.array([reports[j].totals[n] for j in range(b)])
        term = ad.tsum(ad.mul(logps[n], -w / b))
        surrogate = term if surrogate is None else ad.add(surrogate, term)
    store.zero_grad()
    ad.backward(surrogate)
    clip_grad_norm(store, config.clip_norm)
    opt.step()
    return float(surrogate.data), reports


# --- shared inference helpers ---------------------------------------------


def epn_scan(eparams, video) -> np.ndarray:
    """Frozen-scorer hidden states (T_c, H) for captioner inputs."""
    with ad.no_grad():
        _, hiddens = score_proposals(eparams, video.segments)
    return hiddens.data


def video_candidates(eparams, video, dims: ModelDims):
    return extract_candidates(
        eparams, video.segments, top_n=dims.top_n,
        threshold=dims.nms_threshold, cap=dims.m_max,
    )


def event_contexts(video, hiddens, events):
    """EventContext list (plus starts) for proposals or ground-truth events,
    kept in the order given."""
    ctxs = [
        event_context(video.segments, hiddens, e.start_seg, e.end_seg)
        for e in events
    ]
    return ctxs, [e.start_seg for e in events]


def caption_events(params, contexts, max_len: int = 20,
                   independent: bool = False):
    """Greedy captions for an ordered event list.

    Sequential mode threads the episode state across events; independent
    mode resets it per event, captioning each in isolation (selection and
    context ablations).
    """
    if independent:
        out = []
        for ctx in contexts:
            out.extend(caption_sequence(params, [ctx], max_len=max_len))
        return out
    return caption_sequence(params, contexts, max_len=max_len)


def predict_video(eparams, gparams, sparams, video, dims: ModelDims,
                  system: str = "esgn-seq"):
    """(interval, caption, score) triples for one video under a system.

    esgn-seq: selector events, episode-threaded captions.
    esgn-ind: selector events, per-event independent captions.
    epn-ind: every suppressed candidate, independent captions.
    """
    if system not in ("esgn-seq", "esgn-ind", "epn-ind"):
        raise ValueError(f"unknown system {system!r}")
    hiddens = epn_scan(eparams, video)
    candidates = video_candidates(eparams, video, dims)
    if system == "epn-ind":
        events = candidates
    else:
        events = select_sequence(
            gparams, candidates, video.num_segments, n_max=dims.n_max
        ).events
    contexts, _ = event_contexts(video, hiddens, events)
    caps = caption_events(
        params=sparams, contexts=contexts, max_len=dims.max_len,
        independent=system != "esgn-seq",
    )
    return [
        (p.interval, cap, p.score)
        for p, (cap, _) in zip(events, caps)
    ]


# --- perplexity helpers ---------------------------------------------------


def unigram_perplexity(train_videos, eval_videos, vocab_size: int) -> float:
    """Held-out perplexity of an add-one-smoothed unigram model fit on the
    training captions (EOS included, like the captioner's objective)."""
    counts = np.ones(vocab_size)
    total = float(vocab_size)
    for v in train_videos:
        for e in v.events:
            for t in e.caption.ids:
                counts[t] += 1
                total += 1
    logp = np.log(counts / total)
    nll = 0.0
    n_tokens = 0
    for v in eval_videos:
        for e in v.events:
            for t in e.caption.ids:
                nll -= logp[t]
                n_tokens += 1
    return float(np.exp(nll / max(1, n_tokens)))


def scn_perplexity(sparams, eparams, videos) -> float:
    """Teacher-forced per-token perplexity on ground-truth sequences."""
    nll = 0.0
    n_tokens = 0
    with ad.no_grad():
        for v in videos:
            hiddens = epn_scan(eparams, v)
            contexts, _ = event_contexts(v, hiddens, v.events)
            loss = scn_nll(sparams, contexts, [e.caption for e in v.events])
            nll += float(loss.data)
            n_tokens += sum(len(e.caption.ids) for e in v.events)
    return float(np.exp(nll / max(1, n_tokens)))


# --- the stage loop -------------------------------------------------------


def _checkpoint_path(workdir, stage: str) -> Path:
    return Path(workdir) / CHECKPOINT_NAMES[stage]


def _require_checkpoint(workdir, stage: str) -> ParamStore:
    path = _checkpoint_path(workdir, stage)
    if not path.exists():
        raise FileNotFoundError(
            f"missing prerequisite checkpoint for stage order: {path}"
        )
    return store_from_checkpoint(path)


def _check_finite(value: float, stage: str, epoch: int, video_id: str):
    if not np.isfinite(value):
        raise FloatingPointError(
            f"non-finite loss in stage {stage!r}, epoch {epoch}, "
            f"video {video_id}: {value!r}"
        )


def _append_log(workdir, record: dict):
    with open(Path(workdir) / LOG_NAME, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def _log_record(stage, epoch, loss, reward_mean=None, reward_std=None,
                skipped=0):
    return {
        "stage": stage,
        "epoch": epoch,
        "loss": loss,
        "reward_mean": reward_mean,
        "reward_std": reward_std,
        "skipped": skipped,
        "eval": None,
    }


def reference_documents(videos):
    return [[e.caption.ids for e in v.events] for v in videos]


def train_stage(videos, vocab, config: TrainConfig, dims: ModelDims,
                workdir) -> Path:
    """Run one stage over the corpus and write its checkpoint.

    Uses the deterministic 80/20 split; only the training side is touched
    here, held-out videos are reserved for evaluation commands. Three
    independent seeded streams drive initialization, epoch shuffling, and
    sampling, so a (seed, config) pair fixes every byte of the result.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    train, _ = split_corpus(videos)
    if not train:
        raise ValueError("empty training split")
    d_feat = train[0].segments.shape[1]
    init_rng = np.random.default_rng([config.seed, 0])
    shuffle_rng = np.random.default_rng([config.seed, 1])
    sample_rng = np.random.default_rng([config.seed, 2])

    if config.stage == "epn":
        store = ParamStore()
        params = init_epn(store, init_rng, d_feat=d_feat,
                          hidden=dims.epn_hidden, k=dims.k)
        opt = Adam(store, config.lr, (config.beta1, config.beta2), config.eps)
        labels = {v.id: label_proposals(v, dims.k) for v in train}
        masks = {v.id: valid_mask(v.num_segments, dims.k) for v in train}
        for epoch in range(config.epochs):
            total = 0.0
            for i in shuffle_rng.permutation(len(train)):
                v = train[i]
                logits, _ = score_proposals(params, v.segments)
                loss = epn_loss(logits, labels[v.id], masks[v.id])
                value = float(loss.data)
                _check_finite(value, "epn", epoch, v.id)
                store.zero_grad()
                ad.backward(loss)
                opt.step()
                total += value
            _append_log(workdir, _log_record("epn", epoch, total / len(train)))
        path = _checkpoint_path(workdir, "epn")
        save_checkpoint(store, path)
        return path

    if config.stage == "esgn":
        eparams = epn_params(_require_checkpoint(workdir, "epn"))
        cands = {v.id: video_candidates(eparams, v, dims) for v in train}
        store = ParamStore()
        params = init_esgn(store, init_rng, vis_dim=dims.vis_dim,
                           l_loc=dims.loc_bins, hidden=dims.esgn_hidden,
                           att=dims.esgn_att)
        opt = Adam(store, config.lr, (config.beta1, config.beta2), config.eps)
        for epoch in range(config.epochs):
            total = 0.0
            skipped = 0
            for i in shuffle_rng.permutation(len(train)):
                v = train[i]
                if not cands[v.id]:
                    skipped += 1
                    continue
                loss = esgn_loss(params, cands[v.id], v.events, v.num_segments)
                value = float(loss.data)
                _check_finite(value, "esgn", epoch, v.id)
                store.zero_grad()
                ad.backward(loss)
                opt.step()
                total += value
            _append_log(workdir, _log_record(
                "esgn", epoch, total / max(1, len(train) - skipped),
                skipped=skipped))
        path = _checkpoint_path(workdir, "esgn")
        save_checkpoint(store, path)
        return path

    if config.stage == "scn":
        eparams = epn_params(_require_checkpoint(workdir, "epn"))
        ctx_cache = {}
        for v in train:
            hiddens = epn_scan(eparams, v)
            ctx_cache[v.id], _ = event_contexts(v, hiddens, v.events)
        store = ParamStore()
        params = init_scn(store, init_rng, vocab_size=len(vocab),
                          d_feat=d_feat, vis_dim=dims.vis_dim,
                          episode_hidden=dims.episode_hidden,
                          event_hidden=dims.episode_hidden,
                          emb=dims.embed_dim, att=dims.scn_att,
                          gate=dims.gate_dim)
        opt = Adam(store, config.lr, (config.beta1, config.beta2), config.eps)
        for epoch in range(config.epochs):
            total_nll = 0.0
            total_tokens = 0
            for i in shuffle_rng.permutation(len(train)):
                v = train[i]
                loss = scn_nll(params, ctx_cache[v.id],
                               [e.caption for e in v.events])
                value = float(loss.data)
                _check_finite(value, "scn", epoch, v.id)
                store.zero_grad()
                ad.backward(loss)
                opt.step()
                total_nll += value
                total_tokens += sum(len(e.caption.ids) for e in v.events)
            _append_log(workdir, _log_record(
                "scn", epoch, total_nll / max(1, total_tokens)))
        path = _checkpoint_path(workdir, "scn")
        save_checkpoint(store, path)
        return path

    # rl: fine-tune the captioner against its frozen upstream stages
    eparams = epn_params(_require_checkpoint(workdir, "epn"))
    gparams = esgn_params(_require_checkpoint(workdir, "esgn"))
    store = _require_checkpoint(workdir, "scn")
    params = scn_params(store)
    opt = Adam(store, config.lr, (config.beta1, config.beta2), config.eps)
    idf = CiderIdf(reference_documents(train))
    f = reward_fn(config.reward, idf)

    per_video = {}
    for v in train:
        hiddens = epn_scan(eparams, v)
        candidates = video_candidates(eparams, v, dims)
        per_video[v.id] = (hiddens, candidates)

    def detection_state(v, rng=None):
        hiddens, candidates = per_video[v.id]
        detected = select_sequence(gparams, candidates, v.num_segments,
                                   n_max=dims.n_max, rng=rng)
        if not detected.events:
            return None
        contexts, starts = event_contexts(v, hiddens, detected.events)
        match = match_reference_sequence(detected.events, v.events)
        ref_contexts, _ = event_contexts(v, hiddens, match.events)
        return contexts, starts, match, ref_contexts

    fixed_state = {}
    if not config.sample_events:
        for v in train:
            fixed_state[v.id] = detection_state(v)

    for epoch in range(config.epochs):
        baselines = {}
        for v in train:
            state = fixed_state.get(v.id)
            if config.sample_events:
                state = detection_state(v, rng=sample_rng)
            if state is None:
                continue
            _, _, match, ref_contexts = state
            caps = caption_sequence(params, ref_contexts, max_len=dims.max_len)
            baselines[v.id] = ([c for c, _ in caps], state)
        total = 0.0
        rewards = []
        skipped = 0
        n_steps = 0
        for i in shuffle_rng.permutation(len(train)):
            v = train[i]
            if v.id not in baselines:
                skipped += 1
                continue
            base_caps, state = baselines[v.id]
            contexts, starts, match, _ = state
            out = rl_step(store, params, opt, contexts, starts, match,
                          base_caps, f, config, sample_rng,
                          max_len=dims.max_len)
            if out is None:
                skipped += 1
                continue
            value, reports = out
            _check_finite(value, "rl", epoch, v.id)
            total += value
            n_steps += 1
            rewards.extend(r.mean_total for r in reports)
        rewards = np.asarray(rewards if rewards else [0.0])
        _append_log(workdir, _log_record(
            "rl", epoch, total / max(1, n_steps),
            reward_mean=float(rewards.mean()),
            reward_std=float(rewards.std()),
            skipped=skipped))
    path = _checkpoint_path(workdir, "rl")
    save_checkpoint(store, path)
    return path
