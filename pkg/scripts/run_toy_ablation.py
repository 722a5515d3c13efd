#!/usr/bin/env python3
"""Run the toy ablation sweep and write per-seed results + summary as JSON.

Four arms per seed on the synthetic corpus: pre-trained vs scratch,
multi-modal vs text+spatial-only (visual values zeroed), and shared vs
unshared spatial projections. See mmdoc.experiments for the protocol.

Usage:
    python scripts/run_toy_ablation.py --out ablation.json
    python scripts/run_toy_ablation.py --quick   # tiny corpus smoke run
"""

import argparse
import json
import sys

from mmdoc.experiments import AblationSettings, run_toy_ablation


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", help="write full results JSON here")
    parser.add_argument("--seeds", default="1,2,3", help="comma-separated seeds")
    parser.add_argument("--train-docs", type=int, default=500)
    parser.add_argument("--test-docs", type=int, default=100)
    parser.add_argument("--quick", action="store_true",
                        help="small corpus, one seed (sanity run, not the real sweep)")
    args = parser.parse_args(argv)

    settings = AblationSettings(
        n_train=args.train_docs,
        n_test=args.test_docs,
        seeds=tuple(int(s) for s in args.seeds.split(",")),
    )
    if args.quick:
        settings = AblationSettings(n_train=80, n_test=20, seeds=(1,),
                                    pretrain_epochs=2, finetune_epochs=2,
                                    sharing_epochs=3)
    results = run_toy_ablation(settings, log=lambda m: print(m, flush=True))
    print(json.dumps(results["summary"], indent=2, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(results, f, indent=1, sort_keys=True)
            f.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
