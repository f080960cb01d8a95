"""Losses and the training loop.

The CA slots carry no fixed meaning, so every step each image's ground-truth
terrain regions are matched to slots by minimum-cost assignment on the current
predictions. The matched target then feeds an ordinary per-pixel cross-entropy
over all K + M channels. An auxiliary binary loss pushes the split queries
towards CS (resp. CA) parts of the feature map.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .assignment import Assignment, hungarian
from .backbone import FeatureMap
from .dataset_io import LabelMap
from .errors import ConfigError, ContractError, DimensionError
from .model import ModelOutput, TrinityNet
from .tensor import IGNORE, Tensor

log = logging.getLogger(__name__)

DICE_EPS = 1e-7


@dataclass
class TrainConfig:
    lr: float = 3e-4
    steps: int = 100
    batch_size: int = 4
    aux_weight: float = 0.5
    seed: int = 0
    checkpoint_every: int = 0
    match_cost: str = "dice"
    class_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"train.lr must be non-negative, got {self.lr}")
        if self.steps < 1:
            raise ConfigError(f"train.steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.match_cost not in ("dice", "ce"):
            raise ConfigError(f"train.match_cost must be 'dice' or 'ce', got {self.match_cost!r}")


@dataclass
class MatchedTarget:
    target: np.ndarray  # [H, W] int64 channel index or IGNORE
    assignment: Assignment
    regions: list[int]  # GT region id for each assignment column


# -- auxiliary split supervision ----------------------------------------------------
def binary_split_target(labels: LabelMap, patch_size: int) -> np.ndarray:
    """1 where a patch is mostly class-specific, 0 otherwise (exact halves count as CA)."""
    h, w = labels.codes.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(f"label map {h}x{w} is not a multiple of patch size {p}")
    cs = labels.cs_mask.reshape(h // p, p, w // p, p).sum(axis=(1, 3))
    return (2 * cs > p * p).astype(np.float64)


def aux_split_loss(aux_logits: Tensor, binary_target: np.ndarray, n_split_cs: int) -> Tensor:
    n = aux_logits.shape[0]
    if aux_logits.shape[1:] != binary_target.shape:
        raise DimensionError(f"aux logits {aux_logits.shape[1:]} vs target {binary_target.shape}")
    tgt = np.empty(aux_logits.shape)
    tgt[:n_split_cs] = binary_target
    tgt[n_split_cs:n] = 1.0 - binary_target
    return T.bce_with_logits(aux_logits, tgt)


# -- matching ----------------------------------------------------------------------
def soft_dice(p: np.ndarray, g: np.ndarray) -> float:
    return 2.0 * float((p * g).sum()) / (float(p.sum()) + float(g.sum()) + DICE_EPS)


def match_cost_matrix(ca_probs: np.ndarray, gt_regions: Sequence[np.ndarray], kind: str = "dice"):
    """Cost of explaining each GT region with each CA slot.

    Returns ``(costs [M, R'], kept)`` where ``kept`` lists the indices of the
    non-empty regions that became columns.
    """
    kept = []
    for r, m in enumerate(gt_regions):
        if m.any():
            kept.append(r)
        else:
            log.warning("ground-truth region %d is empty; left out of matching", r)
    n_slots = ca_probs.shape[0]
    costs = np.zeros((n_slots, len(kept)))
    flat = ca_probs.reshape(n_slots, -1)
    for col, r in enumerate(kept):
        g = gt_regions[r].reshape(-1).astype(np.float64)
        if kind == "dice":
            inter = flat @ g
            costs[:, col] = 1.0 - 2.0 * inter / (flat.sum(axis=1) + g.sum() + DICE_EPS)
        else:
            sel = flat[:, g > 0]
            costs[:, col] = -np.log(np.clip(sel, 1e-12, None)).mean(axis=1)
    return costs, kept


def build_matched_target(labels: LabelMap, assignment: Assignment, regions: Sequence[int] | None = None) -> MatchedTarget:
    k = labels.num_cs
    codes = labels.codes.astype(np.int64)
    target = np.full(codes.shape, IGNORE, dtype=np.int64)
    cs = codes < k
    target[cs] = codes[cs]
    n_regions = labels.num_regions
    regions = list(range(n_regions)) if regions is None else list(regions)
    slot_of = {regions[g]: p for p, g in assignment.pairs}
    for r in range(n_regions):
        mask = codes == k + r
        if not mask.any():
            continue
        if r not in slot_of:
            raise ContractError(f"ground-truth region {r} has no assigned slot")
        target[mask] = k + slot_of[r]
    return MatchedTarget(target, assignment, regions)


def match_output(output: ModelOutput, labels: LabelMap, kind: str = "dice") -> MatchedTarget:
    logits = output.logits.data
    z = logits - logits.max(axis=0, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=0, keepdims=True)
    costs, kept = match_cost_matrix(probs[labels.num_cs:], labels.region_masks(), kind)
    return build_matched_target(labels, hungarian(costs), kept)


# -- objective ------------------------------------------------------------------------
def matched_cross_entropy(logits: Tensor, target: np.ndarray, weights=None) -> Tensor:
    c = logits.shape[0]
    flat = T.transpose(T.reshape(logits, (c, logits.size // c)))
    return T.cross_entropy(flat, target.reshape(-1), weights)


def total_loss(output: ModelOutput, labels: LabelMap, aux_weight: float, patch_size: int,
               n_split_cs: int, weights=None, match: MatchedTarget | None = None,
               kind: str = "dice"):
    """Matched cross-entropy plus ``aux_weight`` times the split loss.

    Returns ``(loss, ce, aux, matched)``. Passing ``match`` freezes the
    assignment instead of recomputing it from the current predictions.
    """
    if output.logits.shape[1:] != labels.codes.shape:
        raise DimensionError(f"logits {output.logits.shape[1:]} vs labels {labels.codes.shape}")
    matched = match if match is not None else match_output(output, labels, kind)
    ce = matched_cross_entropy(output.logits, matched.target, weights)
    aux = aux_split_loss(output.aux_split_logits, binary_split_target(labels, patch_size), n_split_cs)
    loss = ce + T.mul(aux, aux_weight)
    return loss, ce, aux, matched


# -- loop --------------------------------------------------------------------------------
@dataclass
class TrainResult:
    trace: list[tuple[int, float, float, float]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)

    def csv(self) -> str:
        rows = ["step,total,ce,aux"]
        rows += [f"{s},{t:.9g},{c:.9g},{a:.9g}" for s, t, c, a in self.trace]
        return "\n".join(rows) + "\n"


def train(model: TrinityNet, dataset: Sequence[tuple[FeatureMap, LabelMap]], cfg: TrainConfig,
          checkpoint_dir: Path | None = None,
          progress: Callable[[int, float], None] | None = None) -> TrainResult:
    """Adam on the summed batch loss; features are precomputed since the encoder is frozen."""
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    mcfg = model.cfg
    names = sorted(model.params)
    tensors = [model.params[n] for n in names]
    state = T.AdamState(t.shape for t in tensors)
    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(dataset))
    cursor = 0
    result = TrainResult()
    for step in range(cfg.steps):
        model.zero_grad()
        totals = np.zeros(3)
        for _ in range(cfg.batch_size):
            if cursor == len(order):
                order = rng.permutation(len(dataset))
                cursor = 0
            fm, labels = dataset[order[cursor]]
            cursor += 1
            out = model.forward_features(fm)
            loss, ce, aux, _ = total_loss(out, labels, cfg.aux_weight, mcfg.patch_size, mcfg.n_split_cs,
                                          cfg.class_weights, kind=cfg.match_cost)
            T.backward(T.mul(loss, 1.0 / cfg.batch_size))
            totals += (loss.item(), ce.item(), aux.item())
        totals /= cfg.batch_size
        result.trace.append((step, *map(float, totals)))
        grads = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
        T.adam_step([t.data for t in tensors], grads, state, cfg.lr)
        if progress is not None:
            progress(step, float(totals[0]))
        if checkpoint_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"step{step + 1:06d}.trin"
            checkpoint.save(path, model.state_dict())
            result.checkpoints.append(path)
    if not all(math.isfinite(v) for row in result.trace for v in row[1:]):
        log.warning("non-finite loss encountered during training")
    return result
