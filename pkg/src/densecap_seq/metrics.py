"""Detection and captioning metrics.

Detection: recall/precision at tIoU thresholds {0.3, 0.5, 0.7, 0.9},
averaged over videos and then over thresholds.

Captioning: BLEU@N (clipped n-gram precision, geometric mean, brevity
penalty, no smoothing) and CIDEr (plain TF-IDF n-gram cosine averaged over
n = 1..4, scaled by 10; no length penalty). Captions enter as token-id
tuples; the trailing EOS is stripped before n-gram extraction so the stop
marker never counts as shared content.

The dense protocol scores each predicted proposal against the ground-truth
captions whose events overlap it at tIoU >= theta (zero when none do, and
many predictions may match one ground-truth event), averages over
predictions, videos, and finally thresholds.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .epn import tiou
from .synthdata import EOS_ID

THRESHOLDS = (0.3, 0.5, 0.7, 0.9)


@dataclass(frozen=True)
class DetectionScore:
    recall: dict  # theta -> mean over videos
    precision: dict

    @property
    def average_recall(self) -> float:
        return sum(self.recall.values()) / len(self.recall)

    @property
    def average_precision(self) -> float:
        return sum(self.precision.values()) / len(self.precision)


@dataclass(frozen=True)
class CaptionScore:
    cider_by_threshold: dict  # theta -> float
    bleu_by_threshold: dict  # theta -> tuple of 4

    @property
    def cider(self) -> float:
        return sum(self.cider_by_threshold.values()) / len(self.cider_by_threshold)

    @property
    def bleu(self) -> tuple:
        ts = sorted(self.bleu_by_threshold)
        return tuple(
            sum(self.bleu_by_threshold[t][k] for t in ts) / len(ts)
            for k in range(4)
        )


def strip_eos(tokens) -> tuple:
    toks = tuple(tokens)
    while toks and toks[-1] == EOS_ID:
        toks = toks[:-1]
    return toks


def ngrams(tokens, n: int):
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


# --- detection ------------------------------------------------------------


def detection_scores(videos, thresholds=THRESHOLDS) -> DetectionScore:
    """videos: iterable of (predicted_intervals, gt_intervals) pairs.

    recall@t: fraction of GT events matched by some prediction at tIoU >= t;
    precision@t: fraction of predictions matching some GT event. A video
    with no predictions scores 0 on both.
    """
    videos = list(videos)
    recall = {t: 0.0 for t in thresholds}
    precision = {t: 0.0 for t in thresholds}
    for preds, gts in videos:
        for t in thresholds:
            if preds and gts:
                r_hit = sum(
                    1 for g in gts if any(tiou(p, g) >= t for p in preds)
                )
                p_hit = sum(
                    1 for p in preds if any(tiou(p, g) >= t for g in gts)
                )
                recall[t] += r_hit / len(gts)
                precision[t] += p_hit / len(preds)
    n = max(1, len(videos))
    return DetectionScore(
        recall={t: v / n for t, v in recall.items()},
        precision={t: v / n for t, v in precision.items()},
    )


# --- BLEU -----------------------------------------------------------------


def bleu(candidate, references, n: int = 4) -> float:
    """Clipped-precision BLEU@n with brevity penalty, smoothing off.

    Any order with zero precision (including a candidate shorter than n)
    zeroes the whole score. The effective reference length is the one
    closest to the candidate's (ties go to the shorter reference).
    """
    if not 1 <= n <= 4:
        raise ValueError("BLEU order must be in 1..4")
    cand = strip_eos(candidate)
    refs = [strip_eos(r) for r in references]
    if not cand or not refs:
        return 0.0
    log_sum = 0.0
    for k in range(1, n + 1):
        c_counts = Counter(ngrams(cand, k))
        total = sum(c_counts.values())
        if total == 0:
            return 0.0
        max_ref = Counter()
        for r in refs:
            for g, c in Counter(ngrams(r, k)).items():
                if c > max_ref[g]:
                    max_ref[g] = c
        clipped = sum(min(c, max_ref[g]) for g, c in c_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    c_len = len(cand)
    r_len = min((abs(len(r) - c_len), len(r)) for r in refs)[1]
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / max(1, c_len))
    return bp * math.exp(log_sum / n)


# --- CIDEr ----------------------------------------------------------------


class CiderIdf:
    """Document frequencies over per-video reference documents.

    A "document" is the union of one video's reference captions; the IDF of
    an n-gram is log(N_docs / max(1, df)). Built once per evaluation corpus.
    """

    def __init__(self, reference_documents, n_max: int = 4):
        self.n_max = n_max
        self.df = Counter()
        self.n_docs = 0
        for doc in reference_documents:
            self.n_docs += 1
            seen = set()
            for caption in doc:
                toks = strip_eos(caption)
                for k in range(1, n_max + 1):
                    seen.update(ngrams(toks, k))
            self.df.update(seen)
        if self.n_docs == 0:
            raise ValueError("CIDEr needs a non-empty reference corpus")

    def idf(self, gram) -> float:
        return math.log(self.n_docs / max(1, self.df[gram]))


def _tfidf_vector(tokens, k: int, idf: CiderIdf) -> dict:
    return {g: c * idf.idf(g) for g, c in Counter(ngrams(tokens, k)).items()}


def _cosine(a: dict, b: dict) -> float:
    num = sum(v * b[g] for g, v in a.items() if g in b)
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return num / (na * nb)


def cider(candidate, references, idf: CiderIdf) -> float:
    """Mean over n of refs-averaged TF-IDF cosine, scaled to [0, 10]."""
    cand = strip_eos(candidate)
    refs = [strip_eos(r) for r in references]
    if not cand or not refs:
        return 0.0
    total = 0.0
    for k in range(1, idf.n_max + 1):
        vc = _tfidf_vector(cand, k, idf)
        sim = sum(_cosine(vc, _tfidf_vector(r, k, idf)) for r in refs)
        total += sim / len(refs)
    return 10.0 * total / idf.n_max


# --- dense protocol -------------------------------------------------------


def reference_idf(videos) -> CiderIdf:
    """IDF corpus from (preds, gts) pairs: one document per video's GT."""
    return CiderIdf([[cap for _, cap in gts] for _, gts in videos])


def dense_caption_scores(videos, idf: CiderIdf | None = None,
                         thresholds=THRESHOLDS) -> CaptionScore:
    """videos: iterable of (preds, gts); preds are (interval, tokens) pairs,
    gts likewise. Returns per-threshold and averaged BLEU/CIDEr."""
    videos = list(videos)
    if idf is None:
        idf = reference_idf(videos)
    cider_t, bleu_t = {}, {}
    for t in thresholds:
        c_sum = 0.0
        b_sum = [0.0] * 4
        for preds, gts in videos:
            if not preds:
                continue
            vc = 0.0
            vb = [0.0] * 4
            for interval, cap in preds:
                refs = [g_cap for g_iv, g_cap in gts if tiou(interval, g_iv) >= t]
                if refs:
                    vc += cider(cap, refs, idf)
                    for k in range(4):
                        vb[k] += bleu(cap, refs, k + 1)
            c_sum += vc / len(preds)
            for k in range(4):
                b_sum[k] += vb[k] / len(preds)
        n = max(1, len(videos))
        cider_t[t] = c_sum / n
        bleu_t[t] = tuple(b / n for b in b_sum)
    return CaptionScore(cider_by_threshold=cider_t, bleu_by_threshold=bleu_t)
