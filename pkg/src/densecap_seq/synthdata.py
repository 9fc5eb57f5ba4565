"""Synthetic episode corpus: temporal segment features plus templated captions.

Each video is a short sequence of feature vectors (one per non-overlapping
time segment).  Ground-truth events occupy contiguous segment intervals and
carry captions realized from a tiny grammar with subject continuity: the
first event of a video names its subject, later events may refer back with a
pronoun.  That continuity is the linguistic context signal the episode-level
captioner is supposed to pick up, so the generator keeps it deterministic
and measurable.
"""

from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
RESERVED = ("<pad>", "<bos>", "<eos>")

CORPUS_MAGIC = "densecap-seq-corpus"
CORPUS_VERSION = 1

# Action phrases, one per template.  Past tense on purpose: it reads fine
# after both "the man" and "they", so the opener can vary freely without
# breaking agreement.
_ACTION_PHRASES = (
    "ran along the sandy track",
    "mixed flour in a metal bowl",
    "climbed up the steep wall",
    "threw a ball across the yard",
    "played a song on the piano",
    "painted the fence with a brush",
    "jumped over a wooden bar",
    "rode a bike down the hill",
    "washed a car with soapy water",
    "kicked the ball toward the goal",
    "lifted a heavy box onto the shelf",
    "read a book under a shady tree",
)

_SUBJECTS = ("man", "woman", "girl", "boy", "dog", "chef", "dancer", "coach")
_PRONOUN = "they"
_LINKER = "then"
_ARTICLE = "the"


class Vocabulary:
    """Frozen bidirectional token <-> index map. Index 0/1/2 are reserved."""

    def __init__(self, words):
        words = list(words)
        if words[: len(RESERVED)] != list(RESERVED):
            raise ValueError("vocabulary must start with reserved tokens")
        if len(set(words)) != len(words):
            raise ValueError("duplicate token in vocabulary")
        self._words = tuple(words)
        self._index = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return len(self._words)

    def __contains__(self, word):
        return word in self._index

    def id(self, word: str) -> int:
        return self._index[word]

    def word(self, idx: int) -> str:
        return self._words[idx]

    @property
    def words(self):
        return self._words

    def encode(self, words) -> list:
        """Token ids for a list of words, with a trailing EOS appended."""
        return [self._index[w] for w in words] + [EOS_ID]

    def decode(self, ids) -> list:
        """Words before the first EOS; PAD is dropped."""
        out = []
        for i in ids:
            if i == EOS_ID:
                break
            if i in (PAD_ID, BOS_ID):
                continue
            out.append(self._words[i])
        return out


@dataclass(frozen=True)
class CaptionTokens:
    """Content token ids plus one trailing EOS. BOS is never stored; the
    decoder prepends it at training/inference time."""

    ids: tuple

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        object.__setattr__(self, "ids", ids)
        if len(ids) < 1 or ids[-1] != EOS_ID:
            raise ValueError("caption must end with EOS")
        if EOS_ID in ids[:-1] or PAD_ID in ids or BOS_ID in ids:
            raise ValueError("caption body may not contain reserved tokens")

    def __len__(self):
        return len(self.ids)

    @property
    def content(self) -> tuple:
        return self.ids[:-1]


@dataclass(frozen=True)
class GroundTruthEvent:
    start_seg: int
    end_seg: int
    caption: CaptionTokens
    template_id: int = -1

    def __post_init__(self):
        if not (0 <= self.start_seg <= self.end_seg):
            raise ValueError("malformed event interval")
        if len(self.caption.content) < 1:
            raise ValueError("ground-truth caption needs content before EOS")

    @property
    def interval(self):
        return (self.start_seg, self.end_seg)

    @property
    def length(self) -> int:
        return self.end_seg - self.start_seg + 1


@dataclass
class SyntheticVideo:
    id: str
    segments: np.ndarray  # (T_c, D_feat) float64
    events: list

    @property
    def num_segments(self) -> int:
        return self.segments.shape[0]

    def check(self):
        if self.segments.ndim != 2 or self.segments.shape[0] < 1:
            raise ValueError(f"{self.id}: segment matrix must be (T_c, D)")
        if not self.events:
            raise ValueError(f"{self.id}: needs at least one event")
        starts = [e.start_seg for e in self.events]
        if starts != sorted(starts):
            raise ValueError(f"{self.id}: events not sorted by start")
        for e in self.events:
            if e.end_seg >= self.num_segments:
                raise ValueError(f"{self.id}: event exceeds segment range")
        return self


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 7
    num_videos: int = 500
    t_min: int = 24
    t_max: int = 64
    d_feat: int = 16
    num_templates: int = 12
    noise_sigma: float = 0.2
    min_events: int = 2
    max_events: int = 4
    event_count_spread: float = 0.8
    min_event_len: int = 3
    max_event_len: int = 8
    overlap_prob: float = 0.25
    pronoun_prob: float = 0.8

    def __post_init__(self):
        if not (1 <= self.t_min <= self.t_max):
            raise ValueError("bad segment-count range")
        if self.d_feat < 1 or self.num_videos < 1 or self.num_templates < 1:
            raise ValueError("extents must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if not (1 <= self.min_events <= self.max_events):
            raise ValueError("bad event-count range")
        if not (1 <= self.min_event_len <= self.max_event_len):
            raise ValueError("bad event-length range")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def build_vocabulary(spec: CorpusSpec) -> Vocabulary:
    """Vocabulary over the grammar closure for the first num_templates
    phrases. Independent of sampling, so any two corpora with the same
    template count share indices."""
    if spec.num_templates > len(_ACTION_PHRASES):
        raise ValueError(
            f"template library has {len(_ACTION_PHRASES)} phrases, "
            f"{spec.num_templates} requested"
        )
    bag = {_ARTICLE, _LINKER, _PRONOUN}
    bag.update(_SUBJECTS)
    for phrase in _ACTION_PHRASES[: spec.num_templates]:
        bag.update(phrase.split())
    return Vocabulary(list(RESERVED) + sorted(bag))


def _event_count_weights(spec: CorpusSpec) -> np.ndarray:
    counts = np.arange(spec.min_events, spec.max_events + 1, dtype=np.float64)
    mid = 0.5 * (spec.min_events + spec.max_events)
    w = np.exp(-0.5 * ((counts - mid) / spec.event_count_spread) ** 2)
    return w / w.sum()


def _place_events(rng, spec: CorpusSpec, n_events: int):
    """Sorted (start, end) intervals, occasionally overlapping, plus T_c."""
    for _ in range(100):
        lengths = rng.integers(spec.min_event_len, spec.max_event_len + 1, size=n_events)
        intervals = []
        start = int(rng.integers(0, 3))
        for i, ln in enumerate(lengths):
            ln = int(ln)
            if i > 0:
                ps, pe = intervals[-1]
                if rng.random() < spec.overlap_prob and pe - ps >= 1:
                    # start strictly after the previous start but inside it
                    start = int(rng.integers(ps + 1, pe + 1))
                else:
                    start = pe + 1 + int(rng.integers(0, 3))
            intervals.append((start, start + ln - 1))
        last_end = intervals[-1][1]
        if last_end + 1 <= spec.t_max:
            t_c = min(spec.t_max, max(spec.t_min, last_end + 1 + int(rng.integers(0, 4))))
            return intervals, t_c
    raise ValueError("could not place events inside t_max; widen the range")


def _realize_caption(rng, spec, vocab, subject, template_id, event_index):
    words = []
    if event_index == 0:
        words += [_ARTICLE, subject]
    else:
        words.append(_LINKER)
        if rng.random() < spec.pronoun_prob:
            words.append(_PRONOUN)
        else:
            words += [_ARTICLE, subject]
    words += _ACTION_PHRASES[template_id].split()
    return CaptionTokens(tuple(vocab.encode(words)))


def generate_video(spec: CorpusSpec, vocab: Vocabulary, template_means,
                   video_index: int, child_seed) -> SyntheticVideo:
    rng = np.random.default_rng(child_seed)
    n_events = int(rng.choice(
        np.arange(spec.min_events, spec.max_events + 1),
        p=_event_count_weights(spec)))
    if spec.num_templates < n_events:
        raise ValueError(
            f"{spec.num_templates} templates cannot cover {n_events} distinct events")
    intervals, t_c = _place_events(rng, spec, n_events)
    templates = rng.choice(spec.num_templates, size=n_events, replace=False)
    subject = _SUBJECTS[int(rng.integers(0, len(_SUBJECTS)))]

    feats = np.zeros((t_c, spec.d_feat))
    hits = np.zeros(t_c)
    for (s, e), tpl in zip(intervals, templates):
        feats[s : e + 1] += template_means[tpl]
        hits[s : e + 1] += 1.0
    feats[hits > 0] /= hits[hits > 0, None]
    feats += spec.noise_sigma * rng.standard_normal(feats.shape)

    events = []
    for i, ((s, e), tpl) in enumerate(zip(intervals, templates)):
        cap = _realize_caption(rng, spec, vocab, subject, int(tpl), i)
        events.append(GroundTruthEvent(s, e, cap, template_id=int(tpl)))
    return SyntheticVideo(id=f"vid{video_index:04d}", segments=feats,
                          events=events).check()


def generate_corpus(spec: CorpusSpec):
    """All videos plus the (frozen) vocabulary. Deterministic in spec.seed;
    each video derives its own child seed so generation order is immaterial."""
    if spec.num_templates < spec.max_events:
        raise ValueError(
            f"template library ({spec.num_templates}) smaller than the "
            f"largest per-video event count ({spec.max_events})")
    vocab = build_vocabulary(spec)
    master = np.random.SeedSequence(spec.seed)
    children = master.spawn(spec.num_videos + 1)
    tpl_rng = np.random.default_rng(children[0])
    template_means = tpl_rng.standard_normal((spec.num_templates, spec.d_feat))
    videos = [
        generate_video(spec, vocab, template_means, i, children[i + 1])
        for i in range(spec.num_videos)
    ]
    return videos, vocab


# --- serialization --------------------------------------------------------
#
# Line-oriented: a magic+version line, one JSON header line (vocabulary and
# a spec echo), then one JSON record per video with base64 little-endian
# float64 features in row-major order.


def _video_record(video: SyntheticVideo) -> dict:
    blob = np.ascontiguousarray(video.segments, dtype="<f8").tobytes()
    return {
        "id": video.id,
        "t_c": video.num_segments,
        "d_feat": video.segments.shape[1],
        "features_b64": base64.b64encode(blob).decode("ascii"),
        "events": [
            {
                "start": e.start_seg,
                "end": e.end_seg,
                "template": e.template_id,
                "caption": list(e.caption.ids),
            }
            for e in video.events
        ],
    }


def write_corpus(path, videos, vocab: Vocabulary, spec: CorpusSpec = None):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"{CORPUS_MAGIC} {CORPUS_VERSION}\n")
        header = {
            "vocabulary": list(vocab.words),
            "spec": spec.to_dict() if spec is not None else None,
        }
        f.write(json.dumps(header, sort_keys=True) + "\n")
        for v in videos:
            f.write(json.dumps(_video_record(v), sort_keys=True) + "\n")


def _parse_video(rec: dict, vocab_size: int) -> SyntheticVideo:
    vid = rec.get("id", "<missing id>")
    t_c, d_feat = int(rec["t_c"]), int(rec["d_feat"])
    blob = base64.b64decode(rec["features_b64"])
    if len(blob) != t_c * d_feat * 8:
        raise ValueError(
            f"video {vid}: feature block has {len(blob)} bytes, "
            f"expected {t_c * d_feat * 8} for {t_c}x{d_feat}")
    feats = np.frombuffer(blob, dtype="<f8").reshape(t_c, d_feat).astype(np.float64)
    events = []
    for ev in rec["events"]:
        ids = tuple(int(i) for i in ev["caption"])
        if any(i >= vocab_size or i < 0 for i in ids):
            raise ValueError(f"video {vid}: unknown token index in caption")
        events.append(GroundTruthEvent(int(ev["start"]), int(ev["end"]),
                                       CaptionTokens(ids),
                                       template_id=int(ev.get("template", -1))))
    return SyntheticVideo(id=vid, segments=feats, events=events).check()


def read_corpus(path):
    """Returns (videos, vocabulary, spec_dict_or_None)."""
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline().strip()
        parts = first.split()
        if len(parts) != 2 or parts[0] != CORPUS_MAGIC:
            raise ValueError("not a corpus file (bad magic line)")
        if int(parts[1]) != CORPUS_VERSION:
            raise ValueError(f"unsupported corpus version {parts[1]}")
        header_line = f.readline()
        if not header_line:
            raise ValueError("truncated corpus: missing header")
        header = json.loads(header_line)
        vocab = Vocabulary(header["vocabulary"])
        videos = []
        for line in f:
            if not line.strip():
                continue
            videos.append(_parse_video(json.loads(line), len(vocab)))
    return videos, vocab, header.get("spec")


def split_corpus(videos):
    """Deterministic 80/20 train/val split keyed on a hash of the video id."""
    train, val = [], []
    for v in videos:
        digest = hashlib.md5(v.id.encode("utf-8")).hexdigest()
        (val if int(digest, 16) % 5 == 0 else train).append(v)
    return train, val
