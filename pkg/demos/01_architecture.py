"""Walk the network structure: block table, shape trace, parameter counts.

Run:  python3 demos/01_architecture.py
"""

from mmnet.arch import (
    MMNetConfig,
    build_mmnet,
    format_shape_trace,
    init_weights,
    param_count,
)

print("Output sizes per block (width multiplier 1.0, 256 px input):\n")
graph = build_mmnet(MMNetConfig(width_multiplier=1.0, input_size=256))
print(format_shape_trace(graph))

print("\nParameter counts across width multipliers:\n")
for mult in (0.5, 0.75, 1.0, 1.4):
    g = build_mmnet(MMNetConfig(width_multiplier=mult))
    n = param_count(init_weights(g))
    print(f"  width {mult:>4}: {n:>8,} trainable parameters")

print(
    "\nThe 2-channel head never scales with the width multiplier; the\n"
    "foreground matte is channel 1 of its softmax."
)
