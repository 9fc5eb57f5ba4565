#!/usr/bin/env python3
"""Run the whole pipeline once: corpus, four training stages, a prediction
dump and its evaluation.

    python3 scripts/run_pipeline.py --workdir runs/base
    python3 scripts/run_pipeline.py --workdir runs/tiny \
        --override corpus.num_videos 60 --override train.epn_epochs 2

Every --override pair is forwarded verbatim to the command line tool, so
anything configurable there is configurable here.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from densecap_seq import cli  # noqa: E402


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="runs/base")
    ap.add_argument("--config", default=None, help="JSON config file")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--split", default="val", choices=("train", "val"))
    ap.add_argument("--system", default="esgn-seq",
                    choices=("esgn-seq", "esgn-ind", "epn-ind"))
    ap.add_argument("--captioner", default="scn", choices=("scn", "rl"))
    ap.add_argument("--force", action="store_true",
                    help="regenerate the corpus if it already exists")
    ap.add_argument("--override", nargs=2, action="append", default=[],
                    metavar=("KEY", "VALUE"),
                    help="dotted config override, may repeat")
    args = ap.parse_args()

    common = ["--paths.workdir", args.workdir]
    if args.config is not None:
        common += ["--config", args.config]
    if args.seed is not None:
        common += ["--seed", str(args.seed)]
    for key, value in args.override:
        common += [f"--{key}", value]

    steps = [("synth", ["synth", *(["--force"] if args.force else []), *common])]
    steps += [(f"train {s}", ["train", s, *common])
              for s in ("epn", "esgn", "scn", "rl")]
    gen = ["generate", "--split", args.split, "--system", args.system,
           "--captioner", args.captioner, *common]
    tag = f"{args.system}-{args.captioner}-{args.split}"
    steps += [("generate", gen),
              ("eval", ["eval", "--dump", tag, *common]),
              ("report", ["report", "--plot", *common])]

    t0 = time.time()
    for name, argv in steps:
        start = time.time()
        rc = cli.main(argv)
        print(f"## {name}: exit {rc} ({time.time() - start:.1f}s)",
              file=sys.stderr)
        if rc != 0:
            return rc
    print(f"## total {time.time() - t0:.1f}s", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
