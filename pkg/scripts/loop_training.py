"""Train from the start-to-end gap of one closed loop and test on held-out loops.

    python3 scripts/loop_training.py --seeds 10
"""

import argparse
import json
import logging
from pathlib import Path

from probe_vio.experiments import LoopConfig, loop_benchmark


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--train-seed", type=int, default=2000)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--out", type=Path)
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)

    res = loop_benchmark(LoopConfig(args.seeds, args.train_seed, args.frames, args.iterations))
    summary = res.summary()
    summary["model"] = res.model.report()
    print(f"training mode {res.model.outcome.mode}, gamma {res.model.model.gamma}, K {res.model.model.k}")
    print(f"{'seed':>4}  {'nominal':>9}  {'probe':>9}")
    for seed, (n, q) in enumerate(zip(res.nominal, res.probe)):
        print(f"{seed:>4}  {n:9.4f}  {q:9.4f}")
    print(f"median loop gap: nominal {summary['median_nominal']:.4f} m, probe {summary['median_probe']:.4f} m")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
