"""Single-thread latency of the float and int8 paths on one machine.

Run:  python3 demos/04_benchmark.py
"""

import warnings

from mmnet.arch import MMNetConfig, build_mmnet, forward, init_weights
from mmnet.bench import run_benchmark
from mmnet.data import synth_fixtures
from mmnet.quant import quantize_model, run_quantized

cfg = MMNetConfig(width_multiplier=0.5, input_size=64)
graph = build_mmnet(cfg)
weights = init_weights(graph, seed=0)
batches = [s.image[None] for s in synth_fixtures(2, cfg.input_size, seed=0)]
with warnings.catch_warnings():
    # untrained weights give near-zero activations in a few layers; the
    # degenerate-range warning is irrelevant when we only measure latency
    warnings.simplefilter("ignore", UserWarning)
    qm = quantize_model(graph, weights, batches)

shape = (1, 3, cfg.input_size, cfg.input_size)
print(f"width {cfg.width_multiplier}, input {cfg.input_size} px, "
      "20 timed runs each (mean over warm runs only):\n")
for name, fn in [
    ("float32", lambda x: forward(graph, weights, x)),
    ("int8", lambda x: run_quantized(qm, x)),
]:
    rep = run_benchmark(fn, shape, runs=20, warmup=3)
    print(f"  {name:>8}: {rep.mean_ms:8.2f} ms +/- {rep.std_ms:.2f}")

print("\nNote: the int8 path emulates fixed-point arithmetic in numpy for "
      "bit-exactness, so it is slower here than real int8 kernels would be.")
