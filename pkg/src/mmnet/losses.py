"""Training losses and evaluation metrics for alpha mattes.

The five loss terms are written on top of the autodiff primitives so one
implementation serves both value computation and gradient-based training.
Metrics are plain float64 numpy; they sit outside the training graph.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from . import ops as F

KL_EPSILON = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the five loss terms; defaults are all one."""

    alpha: float = 1.0
    compositional: float = 1.0
    kl: float = 1.0
    gradient: float = 1.0
    aux: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "compositional", "kl", "gradient", "aux"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


@dataclass
class LossBreakdown:
    terms: Dict[str, float]
    total: float
    total_node: Optional[ad.Node] = field(default=None, repr=False)


def _node(x) -> ad.Node:
    return x if isinstance(x, ad.Node) else ad.Node(np.asarray(x))


def _check_same_shape(a, b):
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")


def loss_alpha(pred, gt) -> ad.Node:
    """Mean absolute difference between predicted and ground-truth matte."""
    pred, gt = _node(pred), _node(gt)
    _check_same_shape(pred, gt)
    return ad.mean(ad.absolute(ad.sub(pred, gt)))


def loss_compositional(pred, gt, image) -> ad.Node:
    """Mean absolute difference of alpha-weighted RGB foregrounds."""
    pred, gt, image = _node(pred), _node(gt), _node(image)
    if image.value.shape[1] != 3:
        raise ValueError("compositional loss expects a 3-channel image")
    if pred.value.shape[2:] != image.value.shape[2:]:
        raise ValueError("alpha/image spatial mismatch")
    # alpha (n,1,h,w) broadcasts over the 3 image channels
    return ad.mean(ad.absolute(ad.mul(ad.sub(pred, gt), image)))


def loss_kl(pred, gt, epsilon: float = KL_EPSILON) -> ad.Node:
    """Mean binary cross-entropy between predicted and target mattes.

    This is the KL objective with the constant ground-truth entropy term
    dropped, negated and normalized so it is bounded below by zero.
    """
    pred, gt = _node(pred), _node(gt)
    _check_same_shape(pred, gt)
    p = ad.clamp(pred, epsilon, 1.0 - epsilon)
    one = np.ones((), dtype=pred.value.dtype)
    pos = ad.mul(gt, ad.log(p))
    neg = ad.mul(ad.sub(one, gt), ad.log(ad.sub(one, p)))
    return ad.mul(ad.mean(ad.add(pos, neg)), np.asarray(-1.0, dtype=pred.value.dtype))


def loss_gradient(pred, gt) -> ad.Node:
    """Mean absolute difference of the two-channel Sobel responses."""
    pred, gt = _node(pred), _node(gt)
    _check_same_shape(pred, gt)
    gp = ad.sobel_gradients(pred)
    gg = ad.sobel_gradients(gt)
    # the mean over the 2-channel tensor is exactly (1/2K) * sum of both terms
    return ad.mean(ad.absolute(ad.sub(gp, gg)))


def loss_aux(aux_logits, gt) -> ad.Node:
    """Cross-entropy between the auxiliary head and a downsampled target."""
    aux_logits, gt = _node(aux_logits), _node(gt)
    if aux_logits.value.shape[1] != 2:
        raise ValueError("auxiliary logits must have 2 channels")
    ah, aw = aux_logits.value.shape[2:]
    fg = ad.slice_channels(ad.softmax2(aux_logits), 1, 2)
    gt_small = ad.bilinear_resize(gt, ah, aw)
    return loss_kl(fg, gt_small)


def loss_combined(
    pred, aux_logits, gt, image, w: LossWeights = LossWeights()
) -> LossBreakdown:
    """Weighted sum of the five loss terms, each also reported."""
    nodes = {
        "alpha": loss_alpha(pred, gt),
        "compositional": loss_compositional(pred, gt, image),
        "kl": loss_kl(pred, gt),
        "gradient": loss_gradient(pred, gt),
        "aux": loss_aux(aux_logits, gt),
    }
    total = None
    for name, node in nodes.items():
        term = ad.mul(node, np.asarray(getattr(w, name), dtype=node.value.dtype))
        total = term if total is None else ad.add(total, term)
    return LossBreakdown(
        terms={k: float(v.value) for k, v in nodes.items()},
        total=float(total.value),
        total_node=total,
    )


# ---------------------------------------------------------------------------
# evaluation metrics (float64, outside the training graph)


def _as_single_channel_4d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[1] != 1:
        raise ValueError(f"expected a single-channel matte, got shape {a.shape}")
    return a


def metric_mad(pred_full, gt_full) -> float:
    """Mean absolute difference at the evaluation resolution."""
    pred = _as_single_channel_4d(pred_full)
    gt = _as_single_channel_4d(gt_full)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return float(np.mean(np.abs(pred - gt)))


def metric_gradient_error(
    pred_full, gt_full, sigma: float = 1.4, norm: str = "l2"
) -> float:
    """Mean norm of the Gaussian-derivative gradient difference.

    Gradients are computed by convolving with first-order Gaussian
    derivative filters (default sigma 1.4). norm selects the per-pixel
    Euclidean norm of the 2-vector difference ("l2", default) or the
    per-component absolute difference ("l1").
    """
    pred = _as_single_channel_4d(pred_full)
    gt = _as_single_channel_4d(gt_full)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    kx, ky = F.gaussian_derivative_kernels(sigma)
    weights = np.stack([kx, ky])[:, None]
    k = kx.shape[0]
    spec = F.ConvSpec(k, k)
    gp = F.conv2d(pred, weights, spec=spec)
    gg = F.conv2d(gt, weights, spec=spec)
    diff = gp - gg
    if norm == "l2":
        per_pixel = np.sqrt(diff[:, 0] ** 2 + diff[:, 1] ** 2)
        return float(per_pixel.mean())
    if norm == "l1":
        return float(np.abs(diff).mean())
    raise ValueError("norm must be 'l2' or 'l1'")
