"""Run the whole pipeline for one config: data, GATE, both diffusion stages, evaluation.

    python3 scripts/run_pipeline.py configs/acceptance.json --out runs/acceptance

Each verb resumes from its checkpoint, so an interrupted run can simply be restarted.
"""

import argparse
import sys
import time

from longdiff.cli import main

VERBS = (["gen-data"], ["train-gate"], ["train-diffusion", "--stage", "1"], ["train-diffusion", "--stage", "2"],
         ["evaluate"])


def run(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--out")
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args(argv)
    common = ["--config", args.config, "--threads", str(args.threads)] + (["--out", args.out] if args.out else [])
    for verb in VERBS:
        t0 = time.perf_counter()
        code = main(verb + common)
        print(f"# {' '.join(verb)}: {time.perf_counter() - t0:.0f} s", file=sys.stderr)
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
