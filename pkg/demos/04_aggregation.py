"""Naive averaging against learned weighted aggregation.

Both arms share the data, partitions and seeds; only the server's merge
step differs.  The weighted arm tunes one scalar per uploaded model and
layer on the server split, penalized by how far each model's parameter
histogram drifts from the previous global model.

    python3 demos/04_aggregation.py [--config demos/configs/small.yaml] [--rounds N]
"""
import argparse
from pathlib import Path

from fedconv.config import load_config
from fedconv.diagnostics import ablation_runs

HERE = Path(__file__).parent

parser = argparse.ArgumentParser()
parser.add_argument("--config", default=HERE / "configs" / "small.yaml")
parser.add_argument("--rounds", type=int)
args = parser.parse_args()

runs = ablation_runs(load_config(args.config), "naive-agg", rounds=args.rounds)
print("round  weighted  naive")
for w, n in zip(runs["weighted"], runs["naive"]):
    print(f"{w['round']:5d}  {w['global_accuracy']:8.3f}  {n['global_accuracy']:5.3f}")
