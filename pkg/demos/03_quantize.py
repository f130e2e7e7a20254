"""Post-training int8 quantization: fold, calibrate, compare to float.

Run:  python3 demos/03_quantize.py
"""

import numpy as np

from mmnet.arch import MMNetConfig, build_mmnet, forward, init_weights
from mmnet.data import synth_fixtures
from mmnet.quant import quantize_model, run_quantized
from mmnet.train import TrainConfig, train_loop

cfg = MMNetConfig(width_multiplier=0.35, input_size=32)
graph = build_mmnet(cfg)
weights = init_weights(graph, seed=0)
fixtures = synth_fixtures(4, cfg.input_size, seed=1)
batches = [s.image[None] for s in fixtures]

# a few steps of training so activation ranges are representative
print("warming up the weights with 40 training steps...")
train_loop(graph, weights, fixtures,
           TrainConfig(lr=1e-3, batch_size=4, max_steps=40, seed=0))

print("calibrating activation ranges on 4 synthetic images...")
qm = quantize_model(graph, weights, batches)
print(f"  {len(qm.qweights)} conv layers quantized to u8 weights + i32 bias")
print(f"  softmax head replaced by a {qm.lut.shape} lookup table")

diffs = []
for img in batches:
    a_float = forward(graph, weights, img)
    a_int8 = run_quantized(qm, img)
    diffs.append(np.abs(a_float - a_int8).mean())
print(f"\nmean |alpha_float - alpha_int8| per image: "
      + ", ".join(f"{d:.4f}" for d in diffs))
print(f"counters after {len(batches)} runs: {qm.counters}")

# the integer path is bit-deterministic
a = run_quantized(qm, batches[0])
b = run_quantized(qm, batches[0])
print(f"repeat run bit-identical: {a.tobytes() == b.tobytes()}")
