"""Learn copy, then reverse, with and without the attribution gate.

The default is a shortened run of a few minutes. Pass ``--full`` for the
2000-step configuration used by the acceptance suite (about 7 minutes per
seed).

Run:
    python3 demos/continual_copy_reverse.py [--seed 0] [--full]
"""

import argparse
import dataclasses
import logging

from lrpcl.experiment import ExperimentConfig, run_seed
from lrpcl.numerics import tune_allocator

parser = argparse.ArgumentParser()
parser.add_argument("--seed", type=int, default=0)
parser.add_argument("--full", action="store_true")
args = parser.parse_args()
logging.basicConfig(level=logging.INFO, format="%(message)s")
tune_allocator()

cfg = ExperimentConfig()
if not args.full:
    cfg = dataclasses.replace(cfg, steps=600, n_train=1500, n_eval=100, max_len=8)
res = run_seed(args.seed, cfg)

(t1, t2) = res["tasks"]
print(f"\n{'arm':6s} {t1 + ' after 1':>14s} {t1 + ' after 2':>14s} {t2 + ' after 2':>16s}")
for arm in ("naive", "gated"):
    a = res["accuracy"][arm]
    print(f"{arm:6s} {a[0][0]:14.3f} {a[0][1]:14.3f} {a[1][1]:16.3f}")

print("\nimportance-prior similarity between the two tasks")
for setting, s in res["similarity"].items():
    print(f"  {setting:12s} top-k overlap {s['mean_topk_overlap']:.3f}   spearman {s['mean_spearman']:.3f}")
print(f"\n{res['seconds']:.0f}s")
