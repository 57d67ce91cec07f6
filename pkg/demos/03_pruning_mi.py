"""Does a compressed model remember more of its parent than a pruned one?

Mutual information between parameter values is estimated with a 32-bin
joint histogram.  Models of different sizes are paired by rank after
sorting, so the number compares value distributions rather than positions.
The pruned models keep the same number of parameters as the compressed one.

    python3 demos/03_pruning_mi.py [--config demos/configs/small.yaml] [--sr 0.5]
"""
import argparse
from pathlib import Path

from fedconv.config import load_config
from fedconv.diagnostics import pruning_mi_study

HERE = Path(__file__).parent

parser = argparse.ArgumentParser()
parser.add_argument("--config", default=HERE / "configs" / "small.yaml")
parser.add_argument("--sr", type=float, default=0.5)
args = parser.parse_args()

rows = pruning_mi_study(load_config(args.config), sr=args.sr)
print(f"{'model':16s} {'MI (bits)':>10s} {'accuracy':>9s} {'params':>7s}")
for name, row in rows.items():
    print(f"{name:16s} {row['mi_bits']:10.4f} {row['accuracy']:9.3f} {row['params']:7d}")
