"""MMNet architecture: graph construction, weights, forward pass.

The network is materialized as a flat list of primitive graph nodes
(conv / concat / resize / softmax2 / slice) in topological order. The
same node list drives the float forward pass, autodiff training, shape
inference, and (after batch-norm folding) the int8 inference path.

Foreground is channel 1 of the two-channel head; channel 0 is background.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .ops import ConvSpec


@dataclass(frozen=True)
class MMNetConfig:
    """Architecture hyperparameters."""

    width_multiplier: float = 1.0
    input_size: int = 256
    channel_rounding: int = 8

    def __post_init__(self):
        if self.width_multiplier <= 0:
            raise ValueError("width_multiplier must be > 0")
        if self.input_size % 16 != 0:
            raise ValueError("input_size must be divisible by 16")
        if self.channel_rounding < 1:
            raise ValueError("channel_rounding must be >= 1")


def scale_channels(base: int, alpha: float, rounding: int = 8) -> int:
    """Apply the width multiplier with rounding to a channel multiple."""
    if base < 1:
        raise ValueError("base channels must be >= 1")
    scaled = base * alpha
    if rounding > 1:
        return max(rounding, int(math.floor(scaled / rounding + 0.5)) * rounding)
    return max(1, int(math.floor(scaled + 0.5)))


@dataclass(frozen=True)
class BlockSpec:
    """One row of the architecture table, with channels already scaled."""

    name: str
    kind: str  # initial | encoder | decoder | refinement | enhancement | final
    dilation_rates: Tuple[int, ...] = ()
    stride: int = 1
    expand_channels: int = 0
    out_channels: int = 0
    skip_source: Optional[str] = None
    upsample_factor: Optional[int] = None
    refine_channels: int = 0


# (name, kind, rates, stride, expand, out, skip, factor, refine) at width 1.0
_BASE_BLOCKS = [
    ("initial", "initial", (), 2, 0, 32, None, None, 0),
    ("enc1", "encoder", (1, 2, 4, 8), 2, 16, 16, None, None, 0),
    ("enc2", "encoder", (1, 2, 4, 8), 1, 16, 24, None, None, 0),
    ("enc3", "encoder", (1, 2, 4, 8), 1, 24, 24, None, None, 0),
    ("enc4", "encoder", (1, 2, 4, 8), 1, 24, 24, None, None, 0),
    ("enc5", "encoder", (1, 2, 4), 2, 32, 40, None, None, 0),
    ("enc6", "encoder", (1, 2, 4), 1, 64, 40, None, None, 0),
    ("enc7", "encoder", (1, 2, 4), 1, 64, 40, None, None, 0),
    ("enc8", "encoder", (1, 2, 4), 1, 64, 40, None, None, 0),
    ("enc9", "encoder", (1, 2), 2, 80, 80, None, None, 0),
    ("enc10", "encoder", (1, 2), 1, 120, 80, None, None, 0),
    ("dec1", "decoder", (), 1, 0, 64, "enc5", 2, 64),
    ("dec2", "decoder", (), 1, 0, 40, "enc1", 2, 40),
    ("enh1", "enhancement", (1, 2, 4), 1, 40, 40, None, None, 0),
    ("enh2", "enhancement", (1, 2, 4), 1, 40, 40, None, None, 0),
    ("dec3", "decoder", (), 1, 0, 16, None, 4, 0),
    ("final", "final", (), 1, 0, 2, None, None, 0),
]

_ROW_TITLES = {
    "initial": "Initial Block",
    "enc1": "Encoder 1", "enc2": "Encoder 2", "enc3": "Encoder 3",
    "enc4": "Encoder 4", "enc5": "Encoder 5", "enc6": "Encoder 6",
    "enc7": "Encoder 7", "enc8": "Encoder 8", "enc9": "Encoder 9",
    "enc10": "Encoder 10",
    "dec1": "Decoder 1", "dec2": "Decoder 2",
    "enh1": "Enhancement 1", "enh2": "Enhancement 2",
    "dec3": "Decoder 3", "final": "Final Block",
}


def mmnet_block_specs(config: MMNetConfig) -> List[BlockSpec]:
    """Scaled block list. The 2-channel head never scales."""
    a, r = config.width_multiplier, config.channel_rounding
    specs = []
    for name, kind, rates, stride, expand, out, skip, factor, refine in _BASE_BLOCKS:
        specs.append(
            BlockSpec(
                name=name,
                kind=kind,
                dilation_rates=rates,
                stride=stride,
                expand_channels=scale_channels(expand, a, r) if expand else 0,
                out_channels=out if kind == "final" else scale_channels(out, a, r),
                skip_source=skip,
                upsample_factor=factor,
                refine_channels=scale_channels(refine, a, r) if refine else 0,
            )
        )
    return specs


# ---------------------------------------------------------------------------
# graph IR


@dataclass(frozen=True)
class GraphNode:
    name: str
    op: str  # input | conv | concat | resize | softmax2 | slice
    inputs: Tuple[str, ...]
    attrs: dict


@dataclass
class Graph:
    config: MMNetConfig
    nodes: List[GraphNode]
    outputs: Dict[str, str]  # logical name -> node name
    block_rows: List[Tuple[str, str, str]] = field(default_factory=list)
    # (row title, component description, node name)

    def node(self, name: str) -> GraphNode:
        return self._index()[name]

    def _index(self):
        if not hasattr(self, "_idx"):
            self._idx = {n.name: n for n in self.nodes}
        return self._idx

    def conv_nodes(self) -> List[GraphNode]:
        return [n for n in self.nodes if n.op == "conv"]


class _Builder:
    def __init__(self):
        self.nodes: List[GraphNode] = []
        self._seen = set()

    def add(self, name: str, op: str, inputs: Sequence[str], **attrs) -> str:
        if name in self._seen:
            raise ValueError(f"duplicate node name {name}")
        self._seen.add(name)
        self.nodes.append(GraphNode(name, op, tuple(inputs), attrs))
        return name

    def conv(
        self, name, src, in_ch, out_ch, k, stride=1, dilation=1,
        groups=1, bn=True, act="relu6", bias=False,
    ) -> str:
        return self.add(
            name, "conv", [src],
            in_ch=in_ch, out_ch=out_ch, kernel=k, stride=stride,
            dilation=dilation, groups=groups, bn=bn, act=act, bias=bias,
        )

    def concat_many(self, name, srcs) -> str:
        out = srcs[0]
        for i, s in enumerate(srcs[1:]):
            suffix = "" if i == len(srcs) - 2 else f".{i}"
            out = self.add(f"{name}{suffix}", "concat", [out, s])
        return out


def build_encoder_block(
    g: _Builder, name: str, src: str, in_ch: int, expand_ch: int,
    out_ch: int, rates: Sequence[int], stride: int,
) -> str:
    """Multi-branch dilated convolution with a linear bottleneck.

    Per branch: 1x1 expansion, 3x3 depthwise at the block stride, 3x3
    depthwise dilated. Branch outputs are concatenated and compressed by a
    1x1 projection with no activation.
    """
    branches = []
    for r in rates:
        p = f"{name}.b{r}"
        n1 = g.conv(f"{p}.expand", src, in_ch, expand_ch, 1)
        n2 = g.conv(
            f"{p}.dw_stride", n1, expand_ch, expand_ch, 3,
            stride=stride, groups=expand_ch,
        )
        n3 = g.conv(
            f"{p}.dw_dilated", n2, expand_ch, expand_ch, 3,
            dilation=r, groups=expand_ch,
        )
        branches.append(n3)
    cat = g.concat_many(f"{name}.cat", branches)
    return g.conv(
        f"{name}.project", cat, len(rates) * expand_ch, out_ch, 1, act=None
    )


def build_enhancement_block(
    g: _Builder, name: str, src: str, in_ch: int, expand_ch: int,
    out_ch: int, rates: Sequence[int],
) -> str:
    """Encoder block with the strided depthwise conv removed; the spatial
    resolution is sustained."""
    branches = []
    for r in rates:
        p = f"{name}.b{r}"
        n1 = g.conv(f"{p}.expand", src, in_ch, expand_ch, 1)
        n2 = g.conv(
            f"{p}.dw_dilated", n1, expand_ch, expand_ch, 3,
            dilation=r, groups=expand_ch,
        )
        branches.append(n2)
    cat = g.concat_many(f"{name}.cat", branches)
    return g.conv(
        f"{name}.project", cat, len(rates) * expand_ch, out_ch, 1, act=None
    )


def build_refinement_block(
    g: _Builder, name: str, skip_src: str, in_ch: int, out_ch: int
) -> str:
    """3x3 depthwise separable conv applied to a skip tensor."""
    n1 = g.conv(f"{name}.dw", skip_src, in_ch, in_ch, 3, groups=in_ch)
    return g.conv(f"{name}.pw", n1, in_ch, out_ch, 1)


def build_decoder_block(
    g: _Builder, name: str, src: str, in_ch: int, out_ch: int,
    factor: int, skip: Optional[str] = None,
) -> str:
    """1x1 conv + bilinear upsample; optionally concat a refined skip."""
    if factor not in (2, 4):
        raise ValueError("upsample factor must be 2 or 4")
    n1 = g.conv(f"{name}.pw", src, in_ch, out_ch, 1)
    up = g.add(f"{name}.up", "resize", [n1], factor=factor)
    if skip is not None:
        return g.add(f"{name}.cat", "concat", [up, skip])
    return up


def build_mmnet(config: MMNetConfig) -> Graph:
    """Materialize the full network graph for the given configuration."""
    specs = {s.name: s for s in mmnet_block_specs(config)}
    g = _Builder()
    g.add("input", "input", [], channels=3)

    block_out: Dict[str, str] = {}
    block_ch: Dict[str, int] = {}
    rows: List[Tuple[str, str, str]] = []

    def emit_row(name, desc, node):
        rows.append((_ROW_TITLES[name], desc, node))

    # initial block
    s = specs["initial"]
    cur = g.conv("initial", "input", 3, s.out_channels, 3, stride=2)
    block_out["initial"], block_ch["initial"] = cur, s.out_channels
    cur_ch = s.out_channels
    emit_row("initial", "Conv 3x3, S2", cur)

    for name in [f"enc{i}" for i in range(1, 11)]:
        s = specs[name]
        cur = build_encoder_block(
            g, name, cur, cur_ch, s.expand_channels, s.out_channels,
            s.dilation_rates, s.stride,
        )
        cur_ch = s.out_channels
        block_out[name], block_ch[name] = cur, cur_ch
        emit_row(name, f"DR {list(s.dilation_rates)}, S{s.stride}", cur)

    # auxiliary head from encoder 10, used only by the training loss
    g.conv("aux_head", cur, cur_ch, 2, 1, bn=False, act=None, bias=True)

    for name in ("dec1", "dec2"):
        s = specs[name]
        refined = build_refinement_block(
            g, f"{name}.refine", block_out[s.skip_source],
            block_ch[s.skip_source], s.refine_channels,
        )
        cur = build_decoder_block(
            g, name, cur, cur_ch, s.out_channels, s.upsample_factor, refined
        )
        cur_ch = s.out_channels + s.refine_channels
        block_out[name], block_ch[name] = cur, cur_ch
        skip_no = s.skip_source.removeprefix("enc")
        emit_row(name, f"Upsample x{s.upsample_factor} (Skip {skip_no})", cur)

    for name in ("enh1", "enh2"):
        s = specs[name]
        cur = build_enhancement_block(
            g, name, cur, cur_ch, s.expand_channels, s.out_channels,
            s.dilation_rates,
        )
        cur_ch = s.out_channels
        block_out[name], block_ch[name] = cur, cur_ch
        emit_row(name, f"DR {list(s.dilation_rates)}, S1", cur)

    s = specs["dec3"]
    cur = build_decoder_block(g, "dec3", cur, cur_ch, s.out_channels, 4)
    cur_ch = s.out_channels
    emit_row("dec3", "Upsample x4", cur)

    logits = g.conv("final", cur, cur_ch, 2, 1, bn=False, act=None, bias=True)
    probs = g.add("final.softmax", "softmax2", [logits])
    emit_row("final", "Conv 1x1, Softmax", probs)
    fg = g.add("final.fg", "slice", [probs], start=1, stop=2)

    return Graph(
        config=config,
        nodes=g.nodes,
        outputs={
            "alpha": fg,
            "fg_prob": fg,
            "probs": probs,
            "logits": logits,
            "aux_logits": "aux_head",
        },
        block_rows=rows,
    )


# ---------------------------------------------------------------------------
# weights


def conv_weight_shape(node: GraphNode) -> Tuple[int, int, int, int]:
    a = node.attrs
    cin_per_group = a["in_ch"] // a["groups"]
    return (a["out_ch"], cin_per_group, a["kernel"], a["kernel"])


def weight_spec(graph: Graph) -> Dict[str, Tuple[int, ...]]:
    """Name -> shape for every stored tensor (incl. running stats)."""
    out: Dict[str, Tuple[int, ...]] = {}
    for n in graph.conv_nodes():
        out[f"{n.name}.w"] = conv_weight_shape(n)
        if n.attrs["bias"]:
            out[f"{n.name}.b"] = (n.attrs["out_ch"],)
        if n.attrs["bn"]:
            c = (n.attrs["out_ch"],)
            for suffix in ("gamma", "beta", "rmean", "rvar"):
                out[f"{n.name}.{suffix}"] = c
    return out


def init_weights(graph: Graph, seed: int = 0) -> Dict[str, np.ndarray]:
    """Deterministic fan-in-scaled uniform init; BN at identity."""
    rng = np.random.default_rng(seed)
    weights: Dict[str, np.ndarray] = {}
    for name, shape in weight_spec(graph).items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
            limit = math.sqrt(6.0 / fan_in)
            weights[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
        elif name.endswith((".b", ".beta", ".rmean")):
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:  # gamma, rvar
            weights[name] = np.ones(shape, dtype=np.float32)
    return weights


TRAINABLE_SUFFIXES = (".w", ".b", ".gamma", ".beta")


def param_count(weights: Dict[str, np.ndarray]) -> int:
    """Trainable element count; running stats excluded."""
    return sum(
        v.size for k, v in weights.items() if k.endswith(TRAINABLE_SUFFIXES)
    )


def architecture_hash(graph: Graph) -> str:
    desc = {
        "config": [
            graph.config.width_multiplier,
            graph.config.input_size,
            graph.config.channel_rounding,
        ],
        "nodes": [
            [n.name, n.op, list(n.inputs), sorted(n.attrs.items())]
            for n in graph.nodes
        ],
    }
    blob = json.dumps(desc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# execution


def _conv_spec(node: GraphNode) -> ConvSpec:
    a = node.attrs
    return ConvSpec(
        a["kernel"], a["kernel"], stride=a["stride"],
        dilation=a["dilation"], groups=a["groups"],
    )


def run_graph(
    graph: Graph,
    params: Dict[str, object],
    image,
    training: bool = False,
    bn_epsilon: float = 1e-5,
    bn_momentum: float = 0.9,
    collect: Optional[Dict[str, np.ndarray]] = None,
) -> Dict[str, ad.Node]:
    """Execute the graph with autodiff ops.

    params maps tensor names to Parameters (training) or plain arrays
    (inference). If ``collect`` is given, every node's output array is
    stored there (used by quantization calibration).
    """

    def p(name):
        v = params[name]
        return v if isinstance(v, ad.Node) else ad.Node(np.asarray(v))

    values: Dict[str, ad.Node] = {}
    for node in graph.nodes:
        if node.op == "input":
            out = image if isinstance(image, ad.Node) else ad.Node(image)
        elif node.op == "conv":
            x = values[node.inputs[0]]
            bias = p(f"{node.name}.b") if node.attrs["bias"] else None
            out = ad.conv2d(x, p(f"{node.name}.w"), bias, _conv_spec(node))
            if node.attrs["bn"]:
                rmean = params[f"{node.name}.rmean"]
                rvar = params[f"{node.name}.rvar"]
                out = ad.batch_norm(
                    out, p(f"{node.name}.gamma"), p(f"{node.name}.beta"),
                    rmean, rvar, epsilon=bn_epsilon, momentum=bn_momentum,
                    training=training,
                )
            if node.attrs["act"] == "relu6":
                out = ad.relu6(out)
        elif node.op == "concat":
            out = ad.concat_channels(values[node.inputs[0]], values[node.inputs[1]])
        elif node.op == "resize":
            x = values[node.inputs[0]]
            f = node.attrs["factor"]
            h, w = x.value.shape[2:]
            out = ad.bilinear_resize(x, h * f, w * f)
        elif node.op == "softmax2":
            out = ad.softmax2(values[node.inputs[0]])
        elif node.op == "slice":
            out = ad.slice_channels(
                values[node.inputs[0]], node.attrs["start"], node.attrs["stop"]
            )
        else:
            raise ValueError(f"unknown op {node.op}")
        values[node.name] = out
        if collect is not None:
            collect[node.name] = out.value
    return values


def forward(graph: Graph, weights: Dict[str, np.ndarray], image: np.ndarray) -> np.ndarray:
    """Inference: (1,3,S,S) image in [0,1] -> (1,1,S,S) alpha matte."""
    s = graph.config.input_size
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (s, s):
        raise ValueError(
            f"expected image of shape (n,3,{s},{s}), got {image.shape}"
        )
    values = run_graph(graph, weights, image)
    return values[graph.outputs["alpha"]].value


# ---------------------------------------------------------------------------
# shape inference


def infer_shapes(graph: Graph, batch: int = 1) -> Dict[str, Tuple[int, int, int, int]]:
    s = graph.config.input_size
    shapes: Dict[str, Tuple[int, int, int, int]] = {}
    for node in graph.nodes:
        if node.op == "input":
            sh = (batch, 3, s, s)
        elif node.op == "conv":
            n, c, h, w = shapes[node.inputs[0]]
            stride = node.attrs["stride"]
            sh = (n, node.attrs["out_ch"], -(-h // stride), -(-w // stride))
        elif node.op == "concat":
            a, b = shapes[node.inputs[0]], shapes[node.inputs[1]]
            sh = (a[0], a[1] + b[1], a[2], a[3])
        elif node.op == "resize":
            n, c, h, w = shapes[node.inputs[0]]
            f = node.attrs["factor"]
            sh = (n, c, h * f, w * f)
        elif node.op in ("softmax2",):
            sh = shapes[node.inputs[0]]
        elif node.op == "slice":
            n, c, h, w = shapes[node.inputs[0]]
            sh = (n, node.attrs["stop"] - node.attrs["start"], h, w)
        shapes[node.name] = sh
    return shapes


def shape_trace(graph: Graph) -> List[Tuple[str, str, Tuple[int, int, int]]]:
    """One entry per architecture-table row: (title, details, (h, w, c))."""
    shapes = infer_shapes(graph)
    trace = []
    for title, desc, node_name in graph.block_rows:
        n, c, h, w = shapes[node_name]
        trace.append((title, desc, (h, w, c)))
    return trace


def format_shape_trace(graph: Graph) -> str:
    lines = []
    for title, desc, (h, w, c) in shape_trace(graph):
        lines.append(f"{title:<16} {desc:<24} {h} x {w}, {c}")
    return "\n".join(lines)
