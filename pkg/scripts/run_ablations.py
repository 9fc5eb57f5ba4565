#!/usr/bin/env python3
"""Ablation table over decoders and captioners.

Assumes a work directory that already holds a corpus and all four stage
checkpoints (scripts/run_pipeline.py produces one). Generates and scores
dumps for every decoder variant, then prints a comparison table:

    epn-ind    all scored candidates, each captioned in isolation
    esgn-ind   pointer-selected events, each captioned in isolation
    esgn-seq   pointer-selected events captioned with the threaded
               episode state (the full system)

crossed with the supervised captioner (scn) and the reward-tuned one (rl).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from densecap_seq import cli  # noqa: E402

SYSTEMS = ("epn-ind", "esgn-ind", "esgn-seq")
CAPTIONERS = ("scn", "rl")


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/base")
    ap.add_argument("--config", default=None)
    ap.add_argument("--split", default="val", choices=("train", "val"))
    ap.add_argument("--override", nargs=2, action="append", default=[],
                    metavar=("KEY", "VALUE"))
    args = ap.parse_args()

    config = args.config
    if config is None:
        echoed = Path(args.workdir) / "config_resolved.json"
        if echoed.exists():
            config = str(echoed)  # reuse the dims the checkpoints saw
    common = ["--paths.workdir", args.workdir]
    if config is not None:
        common += ["--config", config]
    for key, value in args.override:
        common += [f"--{key}", value]

    rows = []
    for system in SYSTEMS:
        for captioner in CAPTIONERS:
            tag = f"{system}-{captioner}-{args.split}"
            for argv in (
                ["generate", "--split", args.split, "--system", system,
                 "--captioner", captioner, *common],
                ["eval", "--dump", tag, *common],
            ):
                rc = cli.main(argv)
                if rc != 0:
                    print(f"## {' '.join(argv[:2])} failed with exit {rc}",
                          file=sys.stderr)
                    return rc
            report = json.loads(
                (Path(args.workdir) / f"{tag}.eval.json").read_text())
            rows.append((system, captioner, report))

    print(f"{'system':9s} {'cap':4s} {'events':>6s} {'AR':>6s} {'AP':>6s} "
          f"{'CIDEr':>7s} {'BLEU4':>7s}")
    for system, captioner, r in rows:
        print(f"{system:9s} {captioner:4s} "
              f"{r['mean_events']:6.2f} "
              f"{r['detection']['average_recall']:6.3f} "
              f"{r['detection']['average_precision']:6.3f} "
              f"{r['captions']['cider']:7.3f} "
              f"{r['captions']['bleu'][3]:7.3f}")

    by = {(s, c): r["captions"]["cider"] for s, c, r in rows}
    checks = [
        ("selection beats raw candidates",
         by[("esgn-ind", "scn")] - by[("epn-ind", "scn")]),
        ("episode state helps or ties",
         by[("esgn-seq", "scn")] - by[("esgn-ind", "scn")]),
        ("reward tuning beats supervised",
         by[("esgn-seq", "rl")] - by[("esgn-seq", "scn")]),
    ]
    print()
    for label, gap in checks:
        print(f"{label}: CIDEr gap {gap:+.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
