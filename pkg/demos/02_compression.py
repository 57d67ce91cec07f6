"""How a global layer becomes a sub-model layer, and back.

A conv weight of shape (O, I, k1, k2) is viewed as k1*k2 single-channel
"images" of size O x I.  One small convolution per slice shrinks each
image to the sub-model's channel counts; a transposed convolution with
the same kernel size grows it back.  The kernel size follows from the
output-size formula, so no padding or stride tuning is needed.

The second half trains the compression of a small CNN on the MNIST subset
(downsampled to 14x14) and shows how each pipeline stage changes the
sub-model's accuracy.

    python3 demos/02_compression.py [--epochs 5]
"""
import argparse

import numpy as np

from fedconv import compression as C
from fedconv import dilation as Dl
from fedconv import federation as F
from fedconv import models as M
from fedconv.config import from_dict

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=5)
args = parser.parse_args()

# Shape algebra for a (32, 16, 3, 3) conv at SR 0.75.
spec = M.cnn_spec((1, 16, 16), (16, 32), (3, 3))
plan = C.derive_plan(spec, 0.75)
for layer in plan.layers:
    print(f"{layer.layer_name:6s} slice {layer.global_slice} -> {layer.sub_slice}, "
          f"kernel {layer.kernel}, {layer.slice_count} slice(s)")

g = M.init_params(spec, np.random.default_rng(0))
sub = C.compress_model(g, plan, C.init_pipeline_params(plan, np.random.default_rng(1)))
tc = Dl.derive_tc_plan(plan)
back = Dl.dilate_model(sub, tc, Dl.init_tc_params(tc, np.random.default_rng(2)))
print("conv2 weight:", g["conv2.weight"].shape, "->", sub["conv2.weight"].shape, "->", back["conv2.weight"].shape)

# Train a small global model, then fine-tune its compression to SR 0.5
# with progressively more of the pipeline switched on.
data = F.load_dataset(from_dict({"dataset": "mnist-subset", "downsample": 2}))
idx = F.split_indices(data.y, 0, (0.8, 0.2))
train, test = data.subset(idx["server_train"]), data.subset(idx["server_test"])
spec = M.cnn_spec((1, 14, 14), (8, 16), (3, 3))
g = M.local_train(spec, M.init_params(spec, np.random.default_rng(0)), train, 5, 2e-3, 0, optimizer="adam")
print(f"\nglobal model accuracy {M.evaluate(spec, g, test)['accuracy']:.3f}")

# Expect the leaky ReLU rung to cost accuracy on this data.  Every stage
# before it is affine in the global weights, so negative sub-model weights
# can only survive by being mapped to positive values and back, which the
# short fine-tune does not manage.
plan = C.derive_plan(spec, 0.5)
ladder = {
    "bare convolution": C.PipelineOptions(use_pre=False, use_mlr=False, use_weight_norm=False, use_scheduler=False),
    "+ 1x1 residual": C.PipelineOptions(use_mlr=False, use_weight_norm=False, use_scheduler=False),
    "+ modified leaky ReLU": C.PipelineOptions(use_weight_norm=False, use_scheduler=False),
    "+ weight norm, cosine lr": C.PipelineOptions(),
}
for name, opts in ladder.items():
    cp = C.init_pipeline_params(plan, np.random.default_rng(1), opts)
    cp = C.finetune_compression(g, plan, cp, train, args.epochs, opts, optimizer="adam")
    acc = M.evaluate(plan.sub_spec, C.compress_model(g, plan, cp, opts), test)["accuracy"]
    print(f"{name:26s} sub-model accuracy {acc:.3f}")
