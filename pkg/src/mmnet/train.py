"""Adam training loop over the autodiff graph, with checkpointing.

Training is a pure function of (seed, data, config): batch order and
augmentation draw from counter-based rng streams, so an interrupted run
resumed from a checkpoint reproduces the uninterrupted trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import modelfile
from .arch import Graph, MMNetConfig, TRAINABLE_SUFFIXES, run_graph
from .autodiff import Parameter, Tape
from .data import AugmentConfig, Sample, augment, sample_rng
from .losses import LossBreakdown, LossWeights, loss_combined


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 4e-7
    batch_size: int = 32
    max_steps: int = 1000
    seed: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    augment: Optional[AugmentConfig] = None
    decoupled_weight_decay: bool = True
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    checkpoint_path: Optional[str] = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: Dict[str, Parameter]):
        for name, p in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(p.value)
                self.v[name] = np.zeros_like(p.value)


def adam_step(params: Dict[str, Parameter], state: AdamState, cfg: TrainConfig):
    """Bias-corrected Adam update with decoupled weight decay."""
    state.ensure(params)
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg_beta(state.beta1, t)
    bc2 = 1.0 - cfg_beta(state.beta2, t)
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        if cfg.weight_decay > 0 and cfg.decoupled_weight_decay:
            p.value *= 1.0 - cfg.lr * cfg.weight_decay
        elif cfg.weight_decay > 0:
            g = g + cfg.weight_decay * p.value
        m = state.m[name]
        v = state.v[name]
        m[:] = state.beta1 * m + (1 - state.beta1) * g
        v[:] = state.beta2 * v + (1 - state.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.value -= cfg.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def cfg_beta(beta: float, t: int) -> float:
    return beta**t


@dataclass
class TrainReport:
    records: List[dict] = field(default_factory=list)

    @property
    def final(self) -> Optional[dict]:
        return self.records[-1] if self.records else None

    def log_lines(self) -> List[str]:
        out = []
        for r in self.records:
            terms = " ".join(f"{k}={v:.6f}" for k, v in sorted(r.items()) if k != "step")
            out.append(f"step={r['step']} {terms}")
        return out


def make_parameters(weights: Dict[str, np.ndarray]) -> Dict[str, Parameter]:
    """Wrap the trainable tensors; running stats stay as plain arrays."""
    return {
        name: Parameter(name, arr)
        for name, arr in weights.items()
        if name.endswith(TRAINABLE_SUFFIXES)
    }


def merge_weights(
    weights: Dict[str, np.ndarray], params: Dict[str, Parameter]
) -> Dict[str, np.ndarray]:
    out = dict(weights)
    for name, p in params.items():
        out[name] = p.value
    return out


def _make_batch(data: List[Sample], idx, cfg: TrainConfig, step: int):
    samples = []
    for j, i in enumerate(idx):
        s = data[int(i)]
        if cfg.augment is not None:
            rng = sample_rng(cfg.seed, step * len(idx) + j)
            s = augment(s, cfg.augment, rng)
        samples.append(s)
    images = np.stack([s.image for s in samples]).astype(np.float32)
    alphas = np.stack([s.alpha for s in samples]).astype(np.float32)
    return images, alphas


def _loss_record(step: int, breakdown: LossBreakdown) -> dict:
    rec = {"step": step, "total": breakdown.total}
    rec.update({f"loss_{k}": v for k, v in breakdown.terms.items()})
    return rec


def train_step(
    graph: Graph,
    params: Dict[str, Parameter],
    running: Dict[str, np.ndarray],
    images: np.ndarray,
    alphas: np.ndarray,
    state: AdamState,
    cfg: TrainConfig,
) -> LossBreakdown:
    all_params = {**running, **params}
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        values = run_graph(graph, all_params, images, training=True)
        pred = values[graph.outputs["fg_prob"]]
        aux = values[graph.outputs["aux_logits"]]
        breakdown = loss_combined(pred, aux, alphas, images, cfg.loss_weights)
    tape.backward(breakdown.total_node)
    adam_step(params, state, cfg)
    return breakdown


def train_loop(
    graph: Graph,
    weights: Dict[str, np.ndarray],
    data: List[Sample],
    cfg: TrainConfig,
    state: Optional[AdamState] = None,
    start_step: int = 0,
) -> TrainReport:
    """Run Adam over the combined loss; mutates `weights` in place."""
    if not data:
        raise ValueError("training data must be nonempty")
    params = make_parameters(weights)
    running = {k: v for k, v in weights.items() if k not in params}
    state = state or AdamState()
    report = TrainReport()

    def eval_loss(step):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, step]))
        idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
        images, alphas = _make_batch(data, idx, cfg, step)
        values = run_graph(graph, {**running, **params}, images, training=False)
        return loss_combined(
            values[graph.outputs["fg_prob"]],
            values[graph.outputs["aux_logits"]],
            alphas, images, cfg.loss_weights,
        )

    if cfg.max_steps <= start_step:
        report.records.append(_loss_record(start_step, eval_loss(start_step)))
        return report

    for step in range(start_step, cfg.max_steps):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1, step]))
        idx = rng.integers(0, len(data), size=min(cfg.batch_size, len(data)))
        images, alphas = _make_batch(data, idx, cfg, step)
        breakdown = train_step(graph, params, running, images, alphas, state, cfg)
        report.records.append(_loss_record(step + 1, breakdown))
        if (
            cfg.checkpoint_every
            and cfg.checkpoint_path
            and (step + 1) % cfg.checkpoint_every == 0
        ):
            save_checkpoint(
                cfg.checkpoint_path, graph,
                merge_weights(weights, params), state,
            )

    for name, p in params.items():
        weights[name] = p.value
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, graph: Graph, weights: Dict[str, np.ndarray], state: AdamState):
    extras = {
        "kind": "checkpoint",
        "adam": {
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
            "step": state.step,
        },
    }
    tensors = dict(weights)
    for name, arr in state.m.items():
        tensors[f"adam.m.{name}"] = arr
    for name, arr in state.v.items():
        tensors[f"adam.v.{name}"] = arr
    modelfile.save_model(path, graph, tensors, extras=extras)


def load_checkpoint(path, expected_config: Optional[MMNetConfig] = None):
    """Returns (config, weights, AdamState)."""
    config, tensors, extras, _ = modelfile.load_model(
        path, expected_config=expected_config
    )
    meta = extras.get("adam", {})
    state = AdamState(
        beta1=meta.get("beta1", 0.9),
        beta2=meta.get("beta2", 0.999),
        eps=meta.get("eps", 1e-8),
        step=meta.get("step", 0),
    )
    weights = {}
    for name, arr in tensors.items():
        if name.startswith("adam.m."):
            state.m[name[len("adam.m.") :]] = arr
        elif name.startswith("adam.v."):
            state.v[name[len("adam.v.") :]] = arr
        else:
            weights[name] = arr
    return config, weights, state
