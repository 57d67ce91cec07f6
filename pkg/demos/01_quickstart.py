"""A first federated run, end to end, on synthetic data.

Four clients with different shrinkage ratios each receive a sub-model
generated from the global model by small learned convolutions.  After
local training the server dilates every upload back to full size with
transposed convolutions and merges them with learned per-layer weights.

    python3 demos/01_quickstart.py [--config demos/configs/small.yaml]
"""
import argparse
from pathlib import Path

from fedconv import federation as F
from fedconv.config import load_config

HERE = Path(__file__).parent

parser = argparse.ArgumentParser()
parser.add_argument("--config", default=HERE / "configs" / "small.yaml")
args = parser.parse_args()
cfg = load_config(args.config)

# The environment fixes the data splits, client partitions and one
# compression plan per shrinkage ratio.  Nothing has been trained yet.
env, state = F.setup(cfg)
for sr, plan in sorted(env.plans.items()):
    print(f"SR {sr:.2f}: sub-model has {plan.sub_spec.num_params():5d} parameters "
          f"(global {env.spec.num_params()})")

# Pre-train on the server split, then run the rounds.
state = F.pretrain_global(env, state, cfg.pretrain_epochs)
for _ in range(cfg.rounds):
    state, report = F.run_round(env, state)
    v = report["weight_vectors"]
    print(f"round {report['round']}: global acc {report['global_accuracy']:.3f}, "
          f"mean client acc {report['mean_client_accuracy']:.3f}, "
          f"weight vectors in [{min(map(min, v)):.3f}, {max(map(max, v)):.3f}]")
