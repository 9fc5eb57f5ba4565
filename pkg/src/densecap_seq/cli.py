"""Command-line entry point.

Grammar: densecap-seq {synth|train|generate|eval|report}
         [--config PATH] [--seed N] [--workers N] [--key value ...]

Dotted override keys (for example --train.lr 0.0005 or
--corpus.num_videos 200) patch the config file; the fully-resolved result
is echoed to the work directory on every command.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure
(non-finite loss), 3 missing prerequisite file (corpus, checkpoint, dump).
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import sys
from pathlib import Path

from .config import RunConfig, UsageError, echo_config, load_config
from .epn import epn_params
from .esgn import esgn_params, select_sequence
from .formats import (
    caption_row,
    proposal_row,
    read_caption_dump,
    read_proposal_dump,
    rows_by_video,
    write_caption_dump,
    write_proposal_dump,
)
from .metrics import dense_caption_scores, detection_scores, reference_idf
from .params import store_from_checkpoint
from .scn import scn_params
from .synthdata import generate_corpus, read_corpus, split_corpus, write_corpus
from .training import (
    CHECKPOINT_NAMES,
    LOG_NAME,
    STAGES,
    caption_events,
    epn_scan,
    event_contexts,
    train_stage,
    video_candidates,
)

SYSTEMS = ("esgn-seq", "esgn-ind", "epn-ind")
CAPTIONERS = ("scn", "rl")
SPLITS = ("train", "val")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="densecap-seq",
        description="event proposal, selection and captioning pipeline",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
        sp.add_argument("--workers", type=int, default=None,
                        help="worker processes for generation")

    sp = sub.add_parser("synth", help="write the synthetic corpus")
    common(sp)
    sp.add_argument("--force", action="store_true",
                    help="overwrite an existing corpus file")

    sp = sub.add_parser("train", help="run one training stage")
    sp.add_argument("stage", choices=STAGES)
    common(sp)

    sp = sub.add_parser("generate", help="write prediction dumps")
    common(sp)
    sp.add_argument("--split", choices=SPLITS, default="val")
    sp.add_argument("--system", choices=SYSTEMS, default="esgn-seq")
    sp.add_argument("--captioner", choices=CAPTIONERS, default="scn")
    sp.add_argument("--tag", default=None,
                    help="dump basename (default system-captioner-split)")

    sp = sub.add_parser("eval", help="score a caption dump against the corpus")
    common(sp)
    sp.add_argument("--dump", required=True,
                    help="dump tag from generate, or a .captions.jsonl path")
    sp.add_argument("--per-video", action="store_true",
                    help="append a per-video breakdown to the report")

    sp = sub.add_parser("report", help="summarize training logs")
    common(sp)
    sp.add_argument("--plot", action="store_true",
                    help="write score-vs-epoch charts next to the logs")
    return p


def _collect_overrides(extra) -> list:
    pairs = []
    i = 0
    while i < len(extra):
        key = extra[i]
        if not key.startswith("--") or len(key) <= 2:
            raise UsageError(f"unexpected argument {key!r}")
        if i + 1 >= len(extra):
            raise UsageError(f"override {key!r} is missing a value")
        pairs.append((key[2:], extra[i + 1]))
        i += 2
    return pairs


def _build_config(args, extra) -> RunConfig:
    pairs = _collect_overrides(extra)
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    if args.workers is not None:
        pairs.append(("workers", str(args.workers)))
    return load_config(args.config, pairs)


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True))


def _load_corpus(config: RunConfig):
    path = config.paths.corpus_path()
    if not path.exists():
        raise FileNotFoundError(f"corpus not found: {path}; run synth first")
    return read_corpus(path)


def _pick_split(videos, split: str):
    train, val = split_corpus(videos)
    return train if split == "train" else val


# --- synth ----------------------------------------------------------------


def cmd_synth(args, config: RunConfig) -> int:
    path = config.paths.corpus_path()
    if path.exists() and not args.force:
        raise UsageError(f"corpus already exists: {path} (use --force)")
    path.parent.mkdir(parents=True, exist_ok=True)
    videos, vocab = generate_corpus(config.corpus)
    write_corpus(path, videos, vocab, config.corpus)
    echo_config(config, config.paths.workdir_path())
    train, val = split_corpus(videos)
    _emit({
        "corpus": str(path),
        "videos": len(videos),
        "mean_events": sum(len(v.events) for v in videos) / len(videos),
        "vocab_size": len(vocab),
        "train_videos": len(train),
        "val_videos": len(val),
    })
    return 0


# --- train ----------------------------------------------------------------


def cmd_train(args, config: RunConfig) -> int:
    videos, vocab, _ = _load_corpus(config)
    stage_cfg = config.train.build(args.stage, config.seed)
    workdir = config.paths.workdir_path()
    path = train_stage(videos, vocab, stage_cfg, config.dims, workdir)
    echo_config(config, workdir)
    log_path = workdir / LOG_NAME
    last = None
    if log_path.exists():
        for line in log_path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            if rec["stage"] == args.stage:
                last = rec
    _emit({"checkpoint": str(path), "stage": args.stage,
           "epochs": stage_cfg.epochs, "last_record": last})
    return 0


# --- generate -------------------------------------------------------------


_WORKER: dict = {}


def _worker_init(workdir: str, captioner: str, dims_dict: dict):
    from .training import ModelDims

    dims = ModelDims.from_dict(dims_dict)
    workdir = Path(workdir)
    _WORKER["dims"] = dims
    _WORKER["eparams"] = epn_params(
        store_from_checkpoint(workdir / CHECKPOINT_NAMES["epn"]))
    _WORKER["gparams"] = esgn_params(
        store_from_checkpoint(workdir / CHECKPOINT_NAMES["esgn"]))
    _WORKER["sparams"] = scn_params(
        store_from_checkpoint(workdir / CHECKPOINT_NAMES[captioner]))


def _generate_one(task):
    video, system = task
    dims = _WORKER["dims"]
    eparams = _WORKER["eparams"]
    hiddens = epn_scan(eparams, video)
    candidates = video_candidates(eparams, video, dims)
    if system == "epn-ind":
        events = candidates
    else:
        events = select_sequence(
            _WORKER["gparams"], candidates, video.num_segments,
            n_max=dims.n_max,
        ).events
    contexts, _ = event_contexts(video, hiddens, events)
    caps = caption_events(_WORKER["sparams"], contexts, max_len=dims.max_len,
                          independent=system != "esgn-seq")
    preds = [(p.interval, cap, p.score)
             for p, (cap, _) in zip(events, caps)]
    return video.id, candidates, preds


def cmd_generate(args, config: RunConfig) -> int:
    videos, vocab, _ = _load_corpus(config)
    workdir = config.paths.workdir_path()
    for stage in ("epn", "esgn", args.captioner):
        ckpt = workdir / CHECKPOINT_NAMES[stage]
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint: {ckpt}")
    scn_store = store_from_checkpoint(workdir / CHECKPOINT_NAMES[args.captioner])
    ckpt_vocab = scn_store["scn.wemb"].data.shape[0]
    if ckpt_vocab != len(vocab):
        raise UsageError(
            f"checkpoint vocabulary size {ckpt_vocab} does not match "
            f"corpus vocabulary size {len(vocab)}"
        )
    subset = _pick_split(videos, args.split)
    tasks = [(v, args.system) for v in subset]
    if config.workers > 1 and len(tasks) > 1:
        ctx = multiprocessing.get_context("fork")
        with ctx.Pool(
            processes=config.workers, initializer=_worker_init,
            initargs=(str(workdir), args.captioner, config.dims.to_dict()),
        ) as pool:
            results = pool.map(_generate_one, tasks, chunksize=8)
    else:
        _worker_init(str(workdir), args.captioner, config.dims.to_dict())
        results = [_generate_one(t) for t in tasks]

    tag = args.tag or f"{args.system}-{args.captioner}-{args.split}"
    meta = {"system": args.system, "captioner": args.captioner,
            "split": args.split, "seed": config.seed}
    prop_rows = [proposal_row(vid, cands) for vid, cands, _ in results]
    cap_rows = [caption_row(vid, preds, vocab) for vid, _, preds in results]
    prop_path = workdir / f"{tag}.proposals.jsonl"
    cap_path = workdir / f"{tag}.captions.jsonl"
    write_proposal_dump(prop_path, prop_rows, meta)
    write_caption_dump(cap_path, cap_rows, meta)
    echo_config(config, workdir)
    n_events = sum(len(r["events"]) for r in cap_rows)
    _emit({
        "captions": str(cap_path),
        "proposals": str(prop_path),
        "videos": len(results),
        "mean_events": n_events / max(1, len(results)),
    })
    return 0


# --- eval -----------------------------------------------------------------


def _resolve_dump(config: RunConfig, dump: str) -> Path:
    p = Path(dump)
    if p.suffix == ".jsonl":
        return p
    return config.paths.workdir_path() / f"{dump}.captions.jsonl"


def _detection_block(score) -> dict:
    return {
        "recall": {str(t): v for t, v in sorted(score.recall.items())},
        "precision": {str(t): v for t, v in sorted(score.precision.items())},
        "average_recall": score.average_recall,
        "average_precision": score.average_precision,
    }


def cmd_eval(args, config: RunConfig) -> int:
    videos, vocab, _ = _load_corpus(config)
    cap_path = _resolve_dump(config, args.dump)
    if not cap_path.exists():
        raise FileNotFoundError(f"caption dump not found: {cap_path}")
    meta, cap_rows = read_caption_dump(cap_path)
    split = meta.get("split")
    if split not in SPLITS:
        raise UsageError(f"dump {cap_path} carries no valid split tag")
    subset = _pick_split(videos, split)
    by_id = {v.id: v for v in subset}
    dump_ids = {r["video"] for r in cap_rows}
    dangling = sorted(dump_ids - set(by_id))
    missing = sorted(set(by_id) - dump_ids)
    if dangling:
        raise UsageError(f"dump names unknown videos: {dangling[:5]}")
    if missing:
        raise UsageError(f"dump is missing split videos: {missing[:5]}")

    det_pairs = []
    cap_pairs = []
    for row in cap_rows:
        v = by_id[row["video"]]
        pred_iv = [(e["start"], e["end"]) for e in row["events"]]
        pred_cap = [((e["start"], e["end"]), tuple(e["tokens"]))
                    for e in row["events"]]
        gts_iv = [e.interval for e in v.events]
        gts_cap = [(e.interval, e.caption.ids) for e in v.events]
        det_pairs.append((pred_iv, gts_iv))
        cap_pairs.append((pred_cap, gts_cap))
    detection = detection_scores(det_pairs)
    captions = dense_caption_scores(cap_pairs, idf=reference_idf(cap_pairs))

    report = {
        "dump": str(cap_path),
        "system": meta.get("system"),
        "captioner": meta.get("captioner"),
        "split": split,
        "videos": len(cap_rows),
        "mean_events": sum(len(r["events"]) for r in cap_rows) / len(cap_rows),
        "mean_gt_events": sum(len(v.events) for v in subset) / len(subset),
        "detection": _detection_block(detection),
        "captions": {
            "cider": captions.cider,
            "bleu": list(captions.bleu),
            "cider_by_threshold": {
                str(t): v for t, v in sorted(captions.cider_by_threshold.items())
            },
            "bleu_by_threshold": {
                str(t): list(v)
                for t, v in sorted(captions.bleu_by_threshold.items())
            },
        },
        "candidates": None,
        "compression": None,
    }

    prop_path = cap_path.with_name(
        cap_path.name.replace(".captions.jsonl", ".proposals.jsonl"))
    if prop_path.exists():
        _, prop_rows = read_proposal_dump(prop_path)
        prop_by_id = rows_by_video(prop_rows)
        pairs = []
        n_cands = 0
        for row in cap_rows:
            v = by_id[row["video"]]
            cands = prop_by_id.get(v.id, {"proposals": []})["proposals"]
            pairs.append((
                [(c["start"], c["end"]) for c in cands],
                [e.interval for e in v.events],
            ))
            n_cands += len(cands)
        cand_score = detection_scores(pairs)
        mean_cands = n_cands / len(cap_rows)
        mean_events = report["mean_events"]
        report["candidates"] = _detection_block(cand_score)
        report["compression"] = {
            "mean_candidates": mean_cands,
            "mean_events": mean_events,
            "ratio": (mean_events / mean_cands) if mean_cands else None,
        }

    if args.per_video:
        breakdown = []
        for (pred_iv, gts_iv), row in zip(det_pairs, cap_rows):
            one = detection_scores([(pred_iv, gts_iv)])
            breakdown.append({
                "video": row["video"],
                "events": len(pred_iv),
                "average_recall": one.average_recall,
                "average_precision": one.average_precision,
            })
        report["per_video"] = breakdown

    out_path = cap_path.with_name(
        cap_path.name.replace(".captions.jsonl", ".eval.json"))
    out_path.write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(json.dumps(report, sort_keys=True))
    return 0


# --- report ---------------------------------------------------------------


def cmd_report(args, config: RunConfig) -> int:
    workdir = config.paths.workdir_path()
    log_path = workdir / LOG_NAME
    if not log_path.exists():
        raise FileNotFoundError(f"no training log at {log_path}")
    records = [json.loads(line)
               for line in log_path.read_text(encoding="utf-8").splitlines()]
    stages = {}
    for rec in records:
        stages.setdefault(rec["stage"], []).append(rec)
    summary = {
        stage: {
            "epochs": len(recs),
            "first_loss": recs[0]["loss"],
            "last_loss": recs[-1]["loss"],
            "last_reward_mean": recs[-1].get("reward_mean"),
        }
        for stage, recs in stages.items()
    }
    payload = {"log": str(log_path), "stages": summary}
    if args.plot:
        payload["plot"] = _plot_logs(workdir, stages)
    _emit(payload)
    return 0


def _plot_logs(workdir: Path, stages: dict) -> str:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = [s for s in STAGES if s in stages]
    fig, axes = plt.subplots(1, max(1, len(names)),
                             figsize=(4 * max(1, len(names)), 3))
    if len(names) <= 1:
        axes = [axes]
    for ax, stage in zip(axes, names):
        recs = stages[stage]
        xs = [r["epoch"] for r in recs]
        ax.plot(xs, [r["loss"] for r in recs], marker="o", label="loss")
        if stage == "rl":
            ax2 = ax.twinx()
            ax2.plot(xs, [r["reward_mean"] for r in recs], marker="s",
                     color="tab:green", label="reward")
            ax2.set_ylabel("mean reward")
        ax.set_title(stage)
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
    fig.tight_layout()
    out = workdir / "training_curves.png"
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return str(out)


# --- dispatch -------------------------------------------------------------


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _parser()
    try:
        args, extra = parser.parse_known_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        config = _build_config(args, extra)
        return COMMANDS[args.command](args, config)
    except FloatingPointError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
