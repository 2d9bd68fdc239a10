"""All six channel-mask x loss arms, printed as the comparison table.

    python3 scripts/run_ablation.py --repeats 5 --out runs/ablation
"""

import argparse
import logging
from pathlib import Path

from dlrrec.experiments import BENCH_EPOCHS, build_benchmark, run_ablation
from dlrrec.trainer import TABLE_ORDER


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--epochs", type=int, default=BENCH_EPOCHS)
    p.add_argument("--out", default=None)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("dlrrec.trainer").setLevel(logging.WARNING)

    arms = [(mask, mode != "bce") for mask, mode in TABLE_ORDER]
    table, _ = run_ablation(build_benchmark(), arms, args.repeats, args.epochs, args.out)
    print(table.to_markdown(), end="")
    if args.out:
        (Path(args.out) / "table.md").write_text(table.to_markdown())


if __name__ == "__main__":
    main()
