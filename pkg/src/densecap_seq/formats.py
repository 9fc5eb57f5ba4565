"""Prediction dump files.

Two JSON-lines formats share one envelope: a header record naming the kind
and version plus arbitrary provenance fields, then one record per video.
A video with nothing detected still gets a record (with an empty event
list), so consumers can tell "no events" from "never processed". Keys are
sorted on write; identical inputs produce identical bytes.

Proposal records carry the scored candidate pool per video; caption
records carry the final captioned events with their order index, token
ids, and detokenized text.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

DUMP_VERSION = 1
PROPOSAL_KIND = "proposals"
CAPTION_KIND = "captions"


def _check_interval(rec, where):
    s, e = rec.get("start"), rec.get("end")
    if not (isinstance(s, int) and isinstance(e, int) and 0 <= s <= e):
        raise ValueError(f"{where}: bad interval {s!r}..{e!r}")


def _check_score(rec, where):
    score = rec.get("score")
    if not isinstance(score, (int, float)) or not math.isfinite(score):
        raise ValueError(f"{where}: bad score {score!r}")


def _write(path, kind, meta, rows):
    header = {"kind": kind, "version": DUMP_VERSION}
    overlap = set(header) & set(meta)
    if overlap:
        raise ValueError(f"meta may not override envelope keys: {overlap}")
    header.update(meta)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read(path, kind):
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise ValueError(f"{path}: empty dump, missing header")
        header = json.loads(first)
        if header.get("kind") != kind:
            raise ValueError(
                f"{path}: expected a {kind} dump, found {header.get('kind')!r}"
            )
        if header.get("version") != DUMP_VERSION:
            raise ValueError(
                f"{path}: unsupported dump version {header.get('version')!r}"
            )
        rows = [json.loads(line) for line in fh if line.strip()]
    seen = set()
    for i, row in enumerate(rows):
        vid = row.get("video")
        if not isinstance(vid, str) or not vid:
            raise ValueError(f"{path} row {i}: missing video id")
        if vid in seen:
            raise ValueError(f"{path} row {i}: duplicate video {vid}")
        seen.add(vid)
    return header, rows


# --- proposals ------------------------------------------------------------


def proposal_row(video_id: str, proposals) -> dict:
    return {
        "video": video_id,
        "proposals": [
            {"start": int(p.start_seg), "end": int(p.end_seg),
             "score": float(p.score)}
            for p in proposals
        ],
    }


def write_proposal_dump(path, rows, meta=None):
    _write(path, PROPOSAL_KIND, dict(meta or {}), rows)


def read_proposal_dump(path):
    header, rows = _read(path, PROPOSAL_KIND)
    for i, row in enumerate(rows):
        for j, rec in enumerate(row.get("proposals", [])):
            where = f"{path} row {i} proposal {j}"
            _check_interval(rec, where)
            _check_score(rec, where)
    return header, rows


# --- captions -------------------------------------------------------------


def caption_row(video_id: str, predictions, vocab) -> dict:
    """predictions: ordered (interval, CaptionTokens, score) triples."""
    events = []
    for order, (interval, cap, score) in enumerate(predictions):
        events.append({
            "start": int(interval[0]),
            "end": int(interval[1]),
            "order": order,
            "score": float(score),
            "tokens": [int(t) for t in cap.ids],
            "text": " ".join(vocab.decode(cap.ids)),
        })
    return {"video": video_id, "events": events}


def write_caption_dump(path, rows, meta=None):
    _write(path, CAPTION_KIND, dict(meta or {}), rows)


def read_caption_dump(path):
    header, rows = _read(path, CAPTION_KIND)
    for i, row in enumerate(rows):
        events = row.get("events")
        if not isinstance(events, list):
            raise ValueError(f"{path} row {i}: missing event list")
        for j, rec in enumerate(events):
            where = f"{path} row {i} event {j}"
            _check_interval(rec, where)
            _check_score(rec, where)
            if rec.get("order") != j:
                raise ValueError(f"{where}: order index out of sequence")
            toks = rec.get("tokens")
            if (not isinstance(toks, list) or not toks
                    or not all(isinstance(t, int) and t >= 0 for t in toks)):
                raise ValueError(f"{where}: bad token list {toks!r}")
            if not isinstance(rec.get("text"), str):
                raise ValueError(f"{where}: missing text field")
    return header, rows


def rows_by_video(rows) -> dict:
    return {row["video"]: row for row in rows}
