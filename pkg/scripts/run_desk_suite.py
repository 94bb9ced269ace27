"""Run every shipped config through the CLI and print a one-line summary each.

    python3 scripts/run_desk_suite.py [--out runs] [--seed 0] [kind ...]

Kinds default to: attack augment uncertainty spectra ifa.  The full set takes
roughly 20 minutes on one CPU core.
"""

import argparse
import json
import sys
import time
from pathlib import Path

from robustlab.cli import main as cli_main

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DEFAULT_KINDS = ["attack", "augment", "uncertainty", "spectra", "ifa"]


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("kinds", nargs="*", default=DEFAULT_KINDS)
    ap.add_argument("--out", default="runs")
    ap.add_argument("--seed", default="0")
    args = ap.parse_args()
    worst = 0
    for kind in args.kinds:
        out = Path(args.out) / kind
        t0 = time.perf_counter()
        code = cli_main([kind, "--config", str(CONFIGS / f"{kind}.json"), "--seed", args.seed,
                         "--out", str(out)])
        print(f"[{kind}] exit {code} in {time.perf_counter() - t0:.0f} s -> {out}", flush=True)
        if (out / "report.json").exists():
            stages = json.loads((out / "report.json").read_text())["stages"]
            print(json.dumps(stages.get(kind, {}), indent=1, sort_keys=True)[:2000])
        worst = max(worst, code)
    return worst


if __name__ == "__main__":
    sys.exit(main())
