"""8-bit affine quantization: fake-quant, int8 kernels, softmax LUT.

Activations and weights use asymmetric per-tensor u8 quantization.
Requantization goes through a 32-bit fixed-point multiplier with a
round-half-away-from-zero right shift, so the integer path is
bit-deterministic across platforms. The two-channel softmax at the head
is replaced by an exhaustive 65,536-entry lookup table.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .arch import Graph, GraphNode, _conv_spec
from .ops import ConvSpec, _resize_axis
from .tensor import pad_zero

DEGENERATE_RANGE_EPS = 1e-3
LUT_SCALE = 1.0 / 256.0  # probability encoding of the softmax table


@dataclass(frozen=True)
class QuantParams:
    """Affine u8 mapping: real = (q - zero_point) * scale."""

    scale: float
    zero_point: int
    min_val: float
    max_val: float

    @classmethod
    def from_range(cls, min_val: float, max_val: float) -> "QuantParams":
        """Derive params from an observed range, always covering 0 so the
        zero point is exact."""
        lo = min(float(min_val), 0.0)
        hi = max(float(max_val), 0.0)
        if hi - lo < DEGENERATE_RANGE_EPS:
            warnings.warn(
                f"degenerate quantization range [{lo}, {hi}]; widening",
                stacklevel=2,
            )
            hi = lo + DEGENERATE_RANGE_EPS
        scale = (hi - lo) / 255.0
        zero_point = int(round(-lo / scale))
        zero_point = min(255, max(0, zero_point))
        return cls(scale=scale, zero_point=zero_point, min_val=lo, max_val=hi)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "zero_point": self.zero_point,
            "min_val": self.min_val,
            "max_val": self.max_val,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(**d)


def quantize(x: np.ndarray, p: QuantParams) -> np.ndarray:
    q = np.round(np.asarray(x, dtype=np.float64) / p.scale) + p.zero_point
    return np.clip(q, 0, 255).astype(np.uint8)


def dequantize(q: np.ndarray, p: QuantParams) -> np.ndarray:
    return ((q.astype(np.int32) - p.zero_point) * p.scale).astype(np.float32)


def fake_quant(x: np.ndarray, p: QuantParams) -> np.ndarray:
    """Quantize-dequantize in float; the training-time view of int8."""
    return dequantize(quantize(x, p), p)


def ad_fake_quant(x, p: QuantParams) -> ad.Node:
    """Fake quantization with a straight-through backward: gradients pass
    unchanged inside the representable range and are zero outside."""
    x = x if isinstance(x, ad.Node) else ad.Node(np.asarray(x))
    val = fake_quant(x.value, p).astype(x.value.dtype)
    lo = (0 - p.zero_point) * p.scale
    hi = (255 - p.zero_point) * p.scale
    mask = ((x.value >= lo) & (x.value <= hi)).astype(x.value.dtype)

    def bwd(g):
        ad._accum(x, g * mask)

    return ad.make_op(val, (x,), bwd)


class Calibrator:
    """EMA of per-batch min/max for every observed tensor."""

    def __init__(self, momentum: float = 0.99):
        self.momentum = momentum
        self.ranges: Dict[str, Tuple[float, float]] = {}

    def observe(self, name: str, arr: np.ndarray):
        lo, hi = float(arr.min()), float(arr.max())
        if name not in self.ranges:
            self.ranges[name] = (lo, hi)
        else:
            m = self.momentum
            plo, phi = self.ranges[name]
            self.ranges[name] = (m * plo + (1 - m) * lo, m * phi + (1 - m) * hi)

    def params(self, name: str) -> QuantParams:
        lo, hi = self.ranges[name]
        return QuantParams.from_range(lo, hi)


def calibrate(activation_stream, momentum: float = 0.99) -> Dict[str, QuantParams]:
    """Reduce a stream of {name: array} dicts to per-tensor QuantParams."""
    cal = Calibrator(momentum)
    n = 0
    for batch in activation_stream:
        n += 1
        for name, arr in batch.items():
            cal.observe(name, arr)
    if n == 0:
        raise ValueError("calibration stream is empty")
    return {name: cal.params(name) for name in cal.ranges}


# ---------------------------------------------------------------------------
# fixed-point requantization


def quantize_multiplier(m: float) -> Tuple[int, int]:
    """Represent m > 0 as m0 * 2^-(31+shift) with m0 a Q31 integer."""
    if m <= 0:
        raise ValueError("multiplier must be > 0")
    shift = 0
    while m < 0.5:
        m *= 2
        shift += 1
    while m >= 1.0:
        m /= 2
        shift -= 1
    m0 = int(round(m * (1 << 31)))
    if m0 == 1 << 31:
        m0 //= 2
        shift -= 1
    if 31 + shift < 1:
        raise ValueError("multiplier too large for fixed-point encoding")
    return m0, shift


def rounding_rshift(v: np.ndarray, s: int) -> np.ndarray:
    """Arithmetic right shift with round-half-away-from-zero."""
    v = v.astype(np.int64)
    add = np.int64(1) << np.int64(s - 1)
    return np.where(v >= 0, (v + add) >> s, -((-v + add) >> s))


def fixed_point_scale(v: np.ndarray, m: float) -> np.ndarray:
    """v * m computed entirely in integers via the Q31 multiplier."""
    m0, shift = quantize_multiplier(m)
    return rounding_rshift(v.astype(np.int64) * m0, 31 + shift)


# ---------------------------------------------------------------------------
# int8 kernels


def qconv2d(
    xq: np.ndarray,
    wq: np.ndarray,
    bias_i32: Optional[np.ndarray],
    spec: ConvSpec,
    in_p: QuantParams,
    w_p: QuantParams,
    out_p: QuantParams,
    act_range: Optional[Tuple[float, float]] = None,
    debug_check_accumulator: bool = True,
) -> np.ndarray:
    """Integer convolution with i32 accumulation and fixed-point requant.

    Semantics: dequantized output approximates the float convolution of
    the dequantized operands within quantization error.
    """
    n, cin, h, wd = xq.shape
    cout = wq.shape[0]
    from .ops import conv_output_size, same_padding

    pt, pb, pl, pr = same_padding(h, wd, spec)
    oh, ow = conv_output_size(h, wd, spec)
    # zero padding in the real domain is the zero point in the q domain
    xp = np.pad(
        xq, ((0, 0), (0, 0), (pt, pb), (pl, pr)),
        constant_values=in_p.zero_point,
    )
    xs_all = xp.astype(np.int64) - in_p.zero_point
    ws = wq.astype(np.int64) - w_p.zero_point
    s, d = spec.stride, spec.dilation
    acc = np.zeros((n, cout, oh, ow), dtype=np.int64)
    for i in range(spec.kernel_h):
        for j in range(spec.kernel_w):
            xs = xs_all[
                :,
                :,
                i * d : i * d + (oh - 1) * s + 1 : s,
                j * d : j * d + (ow - 1) * s + 1 : s,
            ]
            if spec.groups == 1:
                acc += np.einsum("nchw,oc->nohw", xs, ws[:, :, i, j])
            else:
                acc += xs * ws[:, 0, i, j][None, :, None, None]
    if bias_i32 is not None:
        acc += bias_i32.astype(np.int64)[None, :, None, None]
    if debug_check_accumulator:
        peak = np.abs(acc).max(initial=0)
        assert peak < 2**31, f"i32 accumulator overflow: |acc| = {peak}"

    m = in_p.scale * w_p.scale / out_p.scale
    q = fixed_point_scale(acc, m) + out_p.zero_point
    q = np.clip(q, 0, 255)
    if act_range is not None:
        qlo = out_p.zero_point + round(act_range[0] / out_p.scale)
        qhi = out_p.zero_point + round(act_range[1] / out_p.scale)
        q = np.clip(q, max(0, qlo), min(255, qhi))
    return q.astype(np.uint8)


def qconv_depthwise(xq, wq, bias_i32, in_p, w_p, out_p, stride=1, dilation=1,
                    act_range=None):
    spec = ConvSpec(wq.shape[2], wq.shape[3], stride=stride, dilation=dilation,
                    groups=xq.shape[1])
    return qconv2d(xq, wq, bias_i32, spec, in_p, w_p, out_p, act_range)


def qconv_pointwise(xq, wq, bias_i32, in_p, w_p, out_p, act_range=None):
    spec = ConvSpec(1, 1)
    return qconv2d(xq, wq, bias_i32, spec, in_p, w_p, out_p, act_range)


def requantize_tensor(q: np.ndarray, src: QuantParams, dst: QuantParams) -> np.ndarray:
    """Map a u8 tensor from one affine encoding to another, in integers."""
    if src == dst:
        return q
    v = q.astype(np.int64) - src.zero_point
    out = fixed_point_scale(v, src.scale / dst.scale) + dst.zero_point
    return np.clip(out, 0, 255).astype(np.uint8)


def quantized_bilinear_resize(q: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize on u8 data with 8-bit fractional weights per axis.

    Quantization parameters are unchanged: interpolation stays within the
    input's value range.
    """
    n, c, h, w = q.shape
    if (out_h, out_w) == (h, w):
        return q.copy()
    y0, y1, fy = _resize_axis(h, out_h, align_corners=False)
    x0, x1, fx = _resize_axis(w, out_w, align_corners=False)
    wy = np.round(fy * 256).astype(np.int64)[None, None, :, None]
    wx = np.round(fx * 256).astype(np.int64)[None, None, None, :]
    qi = q.astype(np.int64)
    rows = qi[:, :, y0, :] * (256 - wy) + qi[:, :, y1, :] * wy
    acc = rows[:, :, :, x0] * (256 - wx) + rows[:, :, :, x1] * wx
    return ((acc + (1 << 15)) >> 16).astype(np.uint8)


def build_softmax_lut(logit_params: QuantParams) -> np.ndarray:
    """(256, 256) u8 table: entry [q0, q1] is the quantized foreground
    probability softmax(x0, x1)[1] with probabilities encoded at scale
    1/256, zero point 0."""
    qs = np.arange(256, dtype=np.float64)
    x = (qs - logit_params.zero_point) * logit_params.scale
    # p1 = 1 / (1 + exp(x0 - x1)); rows index q0, columns q1
    t = x[:, None] - x[None, :]
    p1 = 1.0 / (1.0 + np.exp(t))
    return np.clip(np.round(p1 / LUT_SCALE), 0, 255).astype(np.uint8)


LUT_PARAMS = QuantParams(scale=LUT_SCALE, zero_point=0, min_val=0.0, max_val=255 / 256)


# ---------------------------------------------------------------------------
# batch-norm folding


def fold_batch_norm(graph: Graph, weights: Dict[str, np.ndarray]):
    """Fold every conv's batch norm into its weights and a bias.

    Returns (folded_graph, folded_weights); the float forward of the
    folded pair matches the original within numerical noise.
    """
    new_nodes: List[GraphNode] = []
    new_weights: Dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.op != "conv" or not node.attrs["bn"]:
            new_nodes.append(node)
            if node.op == "conv":
                new_weights[f"{node.name}.w"] = weights[f"{node.name}.w"].copy()
                if node.attrs["bias"]:
                    new_weights[f"{node.name}.b"] = weights[f"{node.name}.b"].copy()
            continue
        name = node.name
        w = weights[f"{name}.w"].astype(np.float64)
        gamma = weights[f"{name}.gamma"].astype(np.float64)
        beta = weights[f"{name}.beta"].astype(np.float64)
        rmean = weights[f"{name}.rmean"].astype(np.float64)
        rvar = weights[f"{name}.rvar"].astype(np.float64)
        inv = gamma / np.sqrt(rvar + 1e-5)
        new_weights[f"{name}.w"] = (w * inv[:, None, None, None]).astype(np.float32)
        new_weights[f"{name}.b"] = (beta - rmean * inv).astype(np.float32)
        attrs = dict(node.attrs)
        attrs["bn"] = False
        attrs["bias"] = True
        new_nodes.append(GraphNode(node.name, node.op, node.inputs, attrs))
    folded = Graph(
        config=graph.config,
        nodes=new_nodes,
        outputs=dict(graph.outputs),
        block_rows=list(graph.block_rows),
    )
    return folded, new_weights


# ---------------------------------------------------------------------------
# whole-model quantization


@dataclass
class QuantizedModel:
    graph: Graph  # folded graph
    act_params: Dict[str, QuantParams]
    qweights: Dict[str, np.ndarray]
    w_params: Dict[str, QuantParams]
    biases: Dict[str, np.ndarray]  # int32
    lut: np.ndarray
    counters: Dict[str, int] = field(default_factory=dict)

    @property
    def config(self):
        return self.graph.config


def _alpha_path_nodes(graph: Graph) -> List[GraphNode]:
    """Nodes needed for the matte output; the auxiliary head is training-only."""
    return [n for n in graph.nodes if n.name != "aux_head"]


def quantize_model(
    graph: Graph,
    weights: Dict[str, np.ndarray],
    calibration_images,
    momentum: float = 0.99,
) -> QuantizedModel:
    """BN-fold, calibrate activation ranges, quantize weights, build LUT.

    calibration_images is a nonempty iterable of (n,3,S,S) float arrays.
    """
    from .arch import run_graph

    folded, fweights = fold_batch_norm(graph, weights)
    cal = Calibrator(momentum)
    n_batches = 0
    for img in calibration_images:
        n_batches += 1
        collect: Dict[str, np.ndarray] = {}
        run_graph(folded, fweights, np.asarray(img, dtype=np.float32),
                  collect=collect)
        for name, arr in collect.items():
            cal.observe(name, arr)
    if n_batches == 0:
        raise ValueError("calibration stream is empty")

    act_params: Dict[str, QuantParams] = {
        name: cal.params(name) for name in cal.ranges
    }
    # u8 resize keeps its input's encoding; softmax output is LUT-encoded
    for node in folded.nodes:
        if node.op == "resize":
            act_params[node.name] = act_params[node.inputs[0]]
        elif node.op in ("softmax2", "slice"):
            act_params[node.name] = LUT_PARAMS

    qweights, w_params, biases = {}, {}, {}
    for node in folded.conv_nodes():
        name = node.name
        w = fweights[f"{name}.w"]
        wp = QuantParams.from_range(w.min(), w.max())
        qweights[name] = quantize(w, wp)
        w_params[name] = wp
        in_p = act_params[node.inputs[0]]
        b = fweights.get(f"{name}.b")
        if b is None:
            b = np.zeros(node.attrs["out_ch"], dtype=np.float32)
        biases[name] = np.round(
            b.astype(np.float64) / (in_p.scale * wp.scale)
        ).astype(np.int32)

    lut = build_softmax_lut(act_params["final"])
    return QuantizedModel(
        graph=folded,
        act_params=act_params,
        qweights=qweights,
        w_params=w_params,
        biases=biases,
        lut=lut,
    )


def run_quantized(qm: QuantizedModel, image: np.ndarray) -> np.ndarray:
    """Int8 inference: float image in [0,1] -> float alpha (n,1,S,S)."""
    image = np.asarray(image, dtype=np.float32)
    values: Dict[str, np.ndarray] = {}
    qm.counters.setdefault("qconv", 0)
    qm.counters.setdefault("qresize", 0)
    qm.counters.setdefault("lut_lookup", 0)
    for node in _alpha_path_nodes(qm.graph):
        if node.op == "input":
            out = quantize(image, qm.act_params["input"])
        elif node.op == "conv":
            act_range = (0.0, 6.0) if node.attrs["act"] == "relu6" else None
            out = qconv2d(
                values[node.inputs[0]],
                qm.qweights[node.name],
                qm.biases[node.name],
                _conv_spec(node),
                qm.act_params[node.inputs[0]],
                qm.w_params[node.name],
                qm.act_params[node.name],
                act_range=act_range,
            )
            qm.counters["qconv"] += 1
        elif node.op == "concat":
            dst = qm.act_params[node.name]
            parts = [
                requantize_tensor(values[src], qm.act_params[src], dst)
                for src in node.inputs
            ]
            out = np.concatenate(parts, axis=1)
        elif node.op == "resize":
            x = values[node.inputs[0]]
            f = node.attrs["factor"]
            out = quantized_bilinear_resize(x, x.shape[2] * f, x.shape[3] * f)
            qm.counters["qresize"] += 1
        elif node.op == "softmax2":
            q = values[node.inputs[0]]
            fg = qm.lut[q[:, 0], q[:, 1]]
            bg = qm.lut[q[:, 1], q[:, 0]]
            out = np.stack([bg, fg], axis=1)
            qm.counters["lut_lookup"] += 1
        elif node.op == "slice":
            out = values[node.inputs[0]][:, node.attrs["start"] : node.attrs["stop"]]
        else:
            raise ValueError(f"unknown op {node.op}")
        values[node.name] = out
    alpha_q = values[qm.graph.outputs["alpha"]]
    return dequantize(alpha_q, LUT_PARAMS)


# ---------------------------------------------------------------------------
# container round-trip


def save_quantized(path, qm: QuantizedModel):
    from . import modelfile

    tensors: Dict[str, np.ndarray] = {"softmax_lut": qm.lut}
    quant_meta: Dict[str, dict] = {}
    for name, q in qm.qweights.items():
        tensors[f"{name}.wq"] = q
        quant_meta[f"{name}.wq"] = qm.w_params[name].to_dict()
        tensors[f"{name}.bias_i32"] = qm.biases[name]
    extras = {
        "kind": "quant",
        "act_params": {k: v.to_dict() for k, v in qm.act_params.items()},
    }
    modelfile.save_model(path, qm.graph, tensors, extras=extras, quant=quant_meta)


def load_quantized(path) -> QuantizedModel:
    from . import modelfile
    from .arch import build_mmnet, init_weights

    config, tensors, extras, quant_meta = modelfile.load_model(path)
    if extras.get("kind") != "quant":
        raise modelfile.ModelFileError("not a quantized model file")
    # rebuild the folded graph structure; stored tensors supply the values
    base = build_mmnet(config)
    folded, _ = fold_batch_norm(base, init_weights(base, 0))
    qweights, w_params, biases = {}, {}, {}
    for node in folded.conv_nodes():
        qweights[node.name] = tensors[f"{node.name}.wq"].astype(np.uint8)
        w_params[node.name] = QuantParams.from_dict(quant_meta[f"{node.name}.wq"])
        biases[node.name] = tensors[f"{node.name}.bias_i32"].astype(np.int32)
    act_params = {
        k: QuantParams.from_dict(v) for k, v in extras["act_params"].items()
    }
    return QuantizedModel(
        graph=folded,
        act_params=act_params,
        qweights=qweights,
        w_params=w_params,
        biases=biases,
        lut=tensors["softmax_lut"].astype(np.uint8),
    )
