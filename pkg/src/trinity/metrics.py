"""Segmentation metrics for the two output families.

Class-specific channels are scored with the usual confusion-based IoU.
Class-agnostic predictions have no fixed identity, so each image's proposals
are first aligned to its ground-truth terrain regions by minimum-cost
assignment on ``1 - IoU``. Proposals left over after that alignment are
merged into a residual mask; its coverage of the image is the residual
recall, which is 0 for a method that predicts no surplus regions.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .assignment import Assignment, hungarian
from .dataset_io import VOID, LabelMap, Sample, Taxonomy, atomic_write_bytes, read_labels
from .errors import DimensionError, ParseError

MASK_MAGIC = b"TMSK"
MASK_VERSION = 1
UNNAMED_TERRAIN = "terrain"


@dataclass
class RegionProposalSet:
    masks: list[np.ndarray]
    provenance: str = "argmax-channels"

    def __len__(self):
        return len(self.masks)


@dataclass
class CAMatch:
    assignment: Assignment
    matched: list[tuple[int, int, float]]  # (proposal, region, IoU)
    unmatched: list[int]  # proposal indices
    unmet: list[int]  # region indices


# -- class-specific -------------------------------------------------------------------
@dataclass
class CSAccumulator:
    intersection: np.ndarray
    union: np.ndarray

    def __add__(self, other: "CSAccumulator") -> "CSAccumulator":
        return CSAccumulator(self.intersection + other.intersection, self.union + other.union)

    def iou(self) -> np.ndarray:
        out = np.full(self.union.shape, np.nan)
        ok = self.union > 0
        out[ok] = self.intersection[ok] / self.union[ok]
        return out


def cs_confusion(pred_codes: np.ndarray, gt_codes: np.ndarray, num_cs: int) -> CSAccumulator:
    """Per-class pixel intersection/union; ground-truth void pixels are ignored."""
    pred = np.asarray(pred_codes)
    gt = np.asarray(gt_codes)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    keep = gt != VOID
    p = pred[keep].astype(np.int64)
    g = gt[keep].astype(np.int64)
    p = np.where(p < num_cs, p, num_cs)  # CA / void predictions are "no CS class"
    g = np.where(g < num_cs, g, num_cs)
    conf = np.bincount(g * (num_cs + 1) + p, minlength=(num_cs + 1) ** 2).reshape(num_cs + 1, num_cs + 1)
    inter = np.diag(conf)[:num_cs].astype(np.int64)
    union = conf[:num_cs, :].sum(axis=1) + conf[:, :num_cs].sum(axis=0) - inter
    return CSAccumulator(inter, union.astype(np.int64))


# -- class-agnostic ---------------------------------------------------------------------
def extract_ca_proposals(logits: np.ndarray, num_cs: int) -> RegionProposalSet:
    """One winner mask per CA slot that wins at least one pixel under the channel argmax."""
    logits = np.asarray(logits.data if hasattr(logits, "data") else logits)
    win = np.argmax(logits, axis=0)
    masks = [win == c for c in range(num_cs, logits.shape[0]) if (win == c).any()]
    return RegionProposalSet(masks, "argmax-channels")


def proposals_from_labels(labels: LabelMap) -> RegionProposalSet:
    return RegionProposalSet([m for m in labels.region_masks() if m.any()], "argmax-channels")


def _flat(masks: Sequence[np.ndarray]) -> np.ndarray:
    if not masks:
        return np.zeros((0, 0))
    return np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in masks]).astype(np.float64)


def iou_matrix(proposals: Sequence[np.ndarray], regions: Sequence[np.ndarray]) -> np.ndarray:
    if not proposals or not regions:
        return np.zeros((len(proposals), len(regions)))
    p = _flat(proposals)
    g = _flat(regions)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def match_ca(proposals: RegionProposalSet | Sequence[np.ndarray], gt_regions: Sequence[np.ndarray],
             threshold: float = 0.0) -> CAMatch:
    """Align proposals to GT regions on ``1 - IoU``; pairs with IoU <= threshold count as unmatched."""
    masks = list(proposals.masks if isinstance(proposals, RegionProposalSet) else proposals)
    n_p, n_r = len(masks), len(gt_regions)
    iou = iou_matrix(masks, gt_regions)
    cost = np.ones((max(n_p, n_r), n_r))
    cost[:n_p] = 1.0 - iou
    assignment = hungarian(cost)
    matched = []
    for p, r in assignment.pairs:
        if p < n_p and iou[p, r] > threshold:
            matched.append((p, r, float(iou[p, r])))
    used = {p for p, _, _ in matched}
    hit = {r for _, r, _ in matched}
    return CAMatch(assignment, matched,
                   [p for p in range(n_p) if p not in used],
                   [r for r in range(n_r) if r not in hit])


def residual_recall(unmatched: Sequence[np.ndarray], height: int, width: int) -> float:
    """Fraction of the image covered by the union of unmatched proposals."""
    if height * width == 0:
        raise DimensionError("residual recall of an empty image")
    if not unmatched:
        return 0.0
    union = np.zeros((height, width), dtype=bool)
    for m in unmatched:
        union |= np.asarray(m, dtype=bool)
    return float(union.sum()) / float(height * width)


def pair_precision_recall(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    inter = float(np.logical_and(pred, gt).sum())
    p, g = float(pred.sum()), float(gt.sum())
    return (inter / p if p else 0.0), (inter / g if g else 0.0)


def ca_pre_rec(match: CAMatch, proposals: Sequence[np.ndarray], gt_regions: Sequence[np.ndarray]):
    """Per-region ``(region, precision or None, recall)``; unmet regions get recall 0 and no precision."""
    rows = []
    by_region = {r: p for p, r, _ in match.matched}
    for r, g in enumerate(gt_regions):
        if r in by_region:
            pre, rec = pair_precision_recall(proposals[by_region[r]], g)
            rows.append((r, pre, rec))
        else:
            rows.append((r, None, 0.0))
    return rows


# -- dataset level ----------------------------------------------------------------------
@dataclass
class MetricsReport:
    cs_iou: dict[str, float]
    cs_miou: float
    ca_iou: dict[str, float]
    ca_miou: float
    ca_mpre: float
    ca_mrec: float
    res_r: float
    per_image_res_r: dict[str, float] = field(default_factory=dict)
    n_images: int = 0

    def to_dict(self) -> dict:
        return {
            "cs_iou": self.cs_iou,
            "cs_miou": self.cs_miou,
            "ca_iou": self.ca_iou,
            "ca_miou": self.ca_miou,
            "ca_mpre": self.ca_mpre,
            "ca_mrec": self.ca_mrec,
            "res_r": self.res_r,
            "res_r_reduction": "mean over images",
            "per_image_res_r": self.per_image_res_r,
            "n_images": self.n_images,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_table(self) -> str:
        lines = ["class-specific", f"  {'class':<16}{'IoU':>8}"]
        lines += [f"  {k:<16}{100 * v:8.2f}" for k, v in self.cs_iou.items()]
        lines += [f"  {'mIoU':<16}{100 * self.cs_miou:8.2f}", "", "class-agnostic", f"  {'terrain':<16}{'IoU':>8}"]
        lines += [f"  {k:<16}{100 * v:8.2f}" for k, v in self.ca_iou.items()]
        lines += [
            f"  {'mIoU':<16}{100 * self.ca_miou:8.2f}",
            f"  {'mPre':<16}{100 * self.ca_mpre:8.2f}",
            f"  {'mRec':<16}{100 * self.ca_mrec:8.2f}",
            f"  {'resR':<16}{100 * self.res_r:8.2f}",
        ]
        return "\n".join(lines) + "\n"


def _mean(values) -> float:
    values = list(values)
    return float(sum(values) / len(values)) if values else 0.0


@dataclass
class Prediction:
    """What a method produced for one image: optional CS codes and its CA proposals."""

    cs_codes: np.ndarray | None
    proposals: RegionProposalSet


def prediction_from_labels(labels: LabelMap) -> Prediction:
    return Prediction(labels.codes, proposals_from_labels(labels))


class Evaluator:
    """Streaming accumulator; ``add`` one image at a time, then ``report``."""

    def __init__(self, taxonomy: Taxonomy, threshold: float = 0.0):
        self.taxonomy = taxonomy
        self.threshold = threshold
        k = taxonomy.num_cs
        self.cs = CSAccumulator(np.zeros(k, dtype=np.int64), np.zeros(k, dtype=np.int64))
        self.ca_inter: dict[str, int] = {}
        self.ca_union: dict[str, int] = {}
        self.precisions: list[float] = []
        self.recalls: list[float] = []
        self.res_r: dict[str, float] = {}

    def add(self, sample_id: str, pred: Prediction, gt: LabelMap, terrains: Sequence[str] = ()) -> None:
        h, w = gt.codes.shape
        valid = gt.codes != VOID
        if pred.cs_codes is not None:
            self.cs = self.cs + cs_confusion(pred.cs_codes, gt.codes, gt.num_cs)
        masks = []
        for m in pred.proposals.masks:
            if m.shape != (h, w):
                raise DimensionError(f"{sample_id}: proposal {m.shape} vs image {(h, w)}")
            masks.append(m & valid)
        regions = [r for r in gt.region_masks()]
        match = match_ca(masks, regions, self.threshold)
        by_region = {r: p for p, r, _ in match.matched}
        for r, g in enumerate(regions):
            if not g.any():
                continue
            name = terrains[r] if r < len(terrains) else UNNAMED_TERRAIN
            if r in by_region:
                pm = masks[by_region[r]]
                inter = int(np.logical_and(pm, g).sum())
                union = int(np.logical_or(pm, g).sum())
            else:
                inter, union = 0, int(g.sum())
            self.ca_inter[name] = self.ca_inter.get(name, 0) + inter
            self.ca_union[name] = self.ca_union.get(name, 0) + union
        for _, pre, rec in ca_pre_rec(match, masks, regions):
            if pre is not None:
                self.precisions.append(pre)
            self.recalls.append(rec)
        self.res_r[sample_id] = residual_recall([masks[p] for p in match.unmatched], h, w)

    def report(self) -> MetricsReport:
        tax = self.taxonomy
        iou = self.cs.iou()
        cs_iou = {tax.cs_classes[i]: float(iou[i]) for i in tax.scored_ids if not np.isnan(iou[i])}
        names = [n for n in tax.ca_terrain_names if n in self.ca_union]
        names += sorted(n for n in self.ca_union if n not in names)
        ca_iou = {n: self.ca_inter[n] / self.ca_union[n] for n in names if self.ca_union[n] > 0}
        return MetricsReport(
            cs_iou=cs_iou,
            cs_miou=_mean(cs_iou.values()),
            ca_iou=ca_iou,
            ca_miou=_mean(ca_iou.values()),
            ca_mpre=_mean(self.precisions),
            ca_mrec=_mean(self.recalls),
            res_r=_mean(self.res_r.values()),
            per_image_res_r=dict(self.res_r),
            n_images=len(self.res_r),
        )


def evaluate(predictions: Iterable[tuple[Sample, Prediction]], taxonomy: Taxonomy,
             threshold: float = 0.0) -> MetricsReport:
    """Score ``(sample, prediction)`` pairs against the samples' label files."""
    ev = Evaluator(taxonomy, threshold)
    for sample, pred in predictions:
        if not Path(sample.labels).exists():
            raise FileNotFoundError(f"missing label file: {sample.labels}")
        gt = read_labels(sample.labels, taxonomy.num_cs)
        ev.add(sample.id, pred, gt, sample.terrains)
    return ev.report()


# -- external proposal files ------------------------------------------------------------
def encode_masks(masks: Sequence[np.ndarray], height: int, width: int) -> bytes:
    head = MASK_MAGIC + struct.pack("<IIII", MASK_VERSION, width, height, len(masks))
    body = b"".join(np.asarray(m, dtype=np.uint8).reshape(height, width).tobytes() for m in masks)
    return head + body


def decode_masks(buf: bytes) -> list[np.ndarray]:
    if buf[:4] != MASK_MAGIC:
        raise ParseError(f"bad mask-set magic {buf[:4]!r}, expected {MASK_MAGIC!r}", offset=0)
    if len(buf) < 20:
        raise ParseError("mask-set header truncated", offset=len(buf))
    version, w, h, n = struct.unpack_from("<IIII", buf, 4)
    if version != MASK_VERSION:
        raise ParseError(f"unsupported mask-set version {version}", offset=4)
    if len(buf) != 20 + n * w * h:
        raise ParseError(f"mask-set payload is {len(buf) - 20} bytes, expected {n * w * h}", offset=20)
    data = np.frombuffer(buf, dtype=np.uint8, offset=20).reshape(n, h, w)
    return [m.astype(bool) for m in data]


def write_masks(path, masks: Sequence[np.ndarray], height: int, width: int) -> None:
    atomic_write_bytes(path, encode_masks(masks, height, width))


def read_masks(path) -> list[np.ndarray]:
    return decode_masks(Path(path).read_bytes())
