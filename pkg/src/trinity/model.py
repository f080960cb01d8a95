"""Joint class-specific / class-agnostic segmentation head.

Pipeline for one image::

    features -> split transformer (CS and CA split queries, cross-attention only)
             -> CS task transformer  (own CST queries + updated CA split queries as context)
             -> CA task transformer  (own CAT queries + updated CS split queries as context)
             -> average queries per output channel
             -> per-pixel dot-product decoding, bilinear upsampling
             -> concatenate [CS classes | CA slots]
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, FeatureMap, encode_image
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor

SPLIT_CS = "split_cs"
SPLIT_CA = "split_ca"
CST = "cst"
CAT = "cat"


@dataclass(frozen=True)
class ModelConfig:
    num_cs: int = 4
    num_slots: int = 8
    n_split_cs: int = 4
    n_split_ca: int = 4
    k_cs: int = 2
    k_ca: int = 2
    dim: int = 64
    ffn_dim: int = 128
    split_layers: int = 2
    task_layers: int = 2
    patch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name != "seed" and (not isinstance(v, int) or v < 1):
                raise ConfigError(f"model.{f.name} must be a positive integer, got {v!r}")

    @property
    def num_channels(self) -> int:
        return self.num_cs + self.num_slots

    @property
    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.patch_size, self.dim, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QuerySet:
    role: str
    embeddings: Tensor
    region_of: np.ndarray | None = None

    def __post_init__(self):
        if self.role in (CST, CAT):
            if self.region_of is None or len(self.region_of) != self.embeddings.shape[0]:
                raise ContractError(f"{self.role} queries need one region index per query")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]


@dataclass
class ModelOutput:
    logits: Tensor  # [K + M, H, W]
    aux_split_logits: Tensor  # [n_split_cs + n_split_ca, Hf, Wf]
    q_cs: Tensor
    q_ca: Tensor
    num_cs: int

    @property
    def cs_logits(self) -> np.ndarray:
        return self.logits.data[: self.num_cs]

    @property
    def ca_logits(self) -> np.ndarray:
        return self.logits.data[self.num_cs:]


def aggregate_queries(q_out: Tensor, region_of, n_channels: int | None = None) -> Tensor:
    """Average the queries that share an output channel; row ``c`` is channel ``c``."""
    region_of = np.asarray(region_of, dtype=np.int64)
    if region_of.shape[0] != q_out.shape[0]:
        raise DimensionError(f"{region_of.shape[0]} region indices for {q_out.shape[0]} queries")
    n_channels = int(region_of.max()) + 1 if n_channels is None else n_channels
    counts = np.bincount(region_of, minlength=n_channels)
    if (counts == 0).any():
        raise ContractError(f"channels {np.nonzero(counts == 0)[0].tolist()} own no query")
    avg = np.zeros((n_channels, region_of.shape[0]))
    avg[region_of, np.arange(region_of.shape[0])] = 1.0 / counts[region_of]
    return T.matmul(Tensor(avg), q_out)


class TrinityNet:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(cfg.seed + 1)
        d, f = cfg.dim, cfg.ffn_dim

        def p(name, arr):
            self.params[name] = Tensor(arr, requires_grad=True, name=name)

        def dense(name, fan_in, fan_out, bias=True):
            p(f"{name}.w", rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))
            if bias:
                p(f"{name}.b", np.zeros(fan_out))

        def attn(name):
            for k in ("q", "k", "v", "o"):
                dense(f"{name}.{k}", d, d, bias=False)

        def norm(name):
            p(f"{name}.g", np.ones(d))
            p(f"{name}.b", np.zeros(d))

        def ffn(name):
            dense(f"{name}.1", d, f)
            dense(f"{name}.2", f, d)

        p("query.split_cs", rng.normal(size=(cfg.n_split_cs, d)))
        p("query.split_ca", rng.normal(size=(cfg.n_split_ca, d)))
        p("query.cst", rng.normal(size=(cfg.num_cs * cfg.k_cs, d)))
        p("query.cat", rng.normal(size=(cfg.num_slots * cfg.k_ca, d)))
        for i in range(cfg.split_layers):
            attn(f"split.{i}.cross")
            norm(f"split.{i}.ln1")
            ffn(f"split.{i}.ffn")
            norm(f"split.{i}.ln2")
        for branch in ("cst", "cat"):
            for i in range(cfg.task_layers):
                pre = f"{branch}.{i}"
                attn(f"{pre}.self")
                norm(f"{pre}.ln1")
                attn(f"{pre}.cross")
                norm(f"{pre}.ln2")
                ffn(f"{pre}.ffn")
                norm(f"{pre}.ln3")
        for head in ("head_cs", "head_ca"):
            dense(f"{head}.1", d, d)
            dense(f"{head}.2", d, d)

        self.cst_region_of = np.repeat(np.arange(cfg.num_cs), cfg.k_cs)
        self.cat_region_of = np.repeat(np.arange(cfg.num_slots), cfg.k_ca)

    # -- parameters ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        if missing or extra:
            raise ContractError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise DimensionError(f"{k}: checkpoint shape {v.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def query_sets(self) -> tuple[QuerySet, QuerySet, QuerySet, QuerySet]:
        P = self.params
        return (
            QuerySet(SPLIT_CS, P["query.split_cs"]),
            QuerySet(SPLIT_CA, P["query.split_ca"]),
            QuerySet(CST, P["query.cst"], self.cst_region_of),
            QuerySet(CAT, P["query.cat"], self.cat_region_of),
        )

    # -- building blocks ------------------------------------------------------
    def _attend(self, name: str, x: Tensor, src: Tensor) -> Tensor:
        P = self.params
        q = T.matmul(x, P[f"{name}.q.w"])
        k = T.matmul(src, P[f"{name}.k.w"])
        v = T.matmul(src, P[f"{name}.v.w"])
        return T.matmul(T.scaled_dot_attention(q, k, v), P[f"{name}.o.w"])

    def _norm(self, name: str, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def _mlp(self, name: str, x: Tensor) -> Tensor:
        P = self.params
        h = T.gelu(T.linear(x, P[f"{name}.1.w"], P[f"{name}.1.b"]))
        return T.linear(h, P[f"{name}.2.w"], P[f"{name}.2.b"])

    def _features(self, fm: FeatureMap) -> Tensor:
        if fm.dim != self.cfg.dim:
            raise DimensionError(f"feature dim {fm.dim} does not match model dim {self.cfg.dim}")
        return Tensor(fm.flat())

    # -- stages --------------------------------------------------------------
    def split_forward(self, fm: FeatureMap, q_cs: QuerySet, q_ca: QuerySet):
        """Update both split query sets against the image; returns (q'_CS, q'_CA, aux logits)."""
        if q_cs.role != SPLIT_CS or q_ca.role != SPLIT_CA:
            raise ContractError(f"split_forward needs ({SPLIT_CS}, {SPLIT_CA}) queries, got ({q_cs.role}, {q_ca.role})")
        d = self.cfg.dim
        for qs in (q_cs, q_ca):
            if qs.embeddings.shape[1] != d:
                raise DimensionError(f"query dim {qs.embeddings.shape[1]} != model dim {d}")
        feats = self._features(fm)
        x = T.concat([q_cs.embeddings, q_ca.embeddings], axis=0)
        for i in range(self.cfg.split_layers):
            x = self._norm(f"split.{i}.ln1", x + self._attend(f"split.{i}.cross", x, feats))
            x = self._norm(f"split.{i}.ln2", x + self._mlp(f"split.{i}.ffn", x))
        n_cs = q_cs.n
        hf, wf = fm.grid
        aux = T.mul(T.matmul(x, T.transpose(feats)), 1.0 / math.sqrt(d))
        aux = T.reshape(aux, (x.shape[0], hf, wf))
        new_cs = QuerySet(SPLIT_CS, x[:n_cs])
        new_ca = QuerySet(SPLIT_CA, x[n_cs:])
        return new_cs, new_ca, aux

    def task_forward(self, fm: FeatureMap, own: QuerySet, context: QuerySet) -> Tensor:
        """Run one task transformer over ``context ∪ own``; only the own-query rows are returned."""
        expected = {CST: SPLIT_CA, CAT: SPLIT_CS}
        if own.role not in expected:
            raise ContractError(f"task_forward needs CST or CAT queries, got {own.role}")
        if context.role != expected[own.role]:
            raise ContractError(f"{own.role} takes {expected[own.role]} context, got {context.role}")
        feats = self._features(fm)
        n_ctx = context.n
        x = T.concat([context.embeddings, own.embeddings], axis=0)
        for i in range(self.cfg.task_layers):
            pre = f"{own.role}.{i}"
            x = self._norm(f"{pre}.ln1", x + self._attend(f"{pre}.self", x, x))
            x = self._norm(f"{pre}.ln2", x + self._attend(f"{pre}.cross", x, feats))
            x = self._norm(f"{pre}.ln3", x + self._mlp(f"{pre}.ffn", x))
        return x[n_ctx:]

    def mask_head(self, head: str, channel_emb: Tensor, fm: FeatureMap, out_h: int, out_w: int) -> Tensor:
        if channel_emb.shape[0] < 1:
            raise DimensionError("mask head needs at least one channel")
        feats = self._features(fm)
        emb = self._mlp(head, channel_emb)
        low = T.mul(T.matmul(emb, T.transpose(feats)), 1.0 / math.sqrt(self.cfg.dim))
        hf, wf = fm.grid
        low = T.reshape(low, (channel_emb.shape[0], hf, wf))
        return T.bilinear_upsample(low, out_h, out_w)

    def forward_features(self, fm: FeatureMap) -> ModelOutput:
        cfg = self.cfg
        q_cs, q_ca, q_cst, q_cat = self.query_sets()
        new_cs, new_ca, aux = self.split_forward(fm, q_cs, q_ca)
        cst_out = self.task_forward(fm, q_cst, new_ca)
        cat_out = self.task_forward(fm, q_cat, new_cs)
        cs_emb = aggregate_queries(cst_out, q_cst.region_of, cfg.num_cs)
        ca_emb = aggregate_queries(cat_out, q_cat.region_of, cfg.num_slots)
        cs_logits = self.mask_head("head_cs", cs_emb, fm, fm.height, fm.width)
        ca_logits = self.mask_head("head_ca", ca_emb, fm, fm.height, fm.width)
        logits = T.concat([cs_logits, ca_logits], axis=0)
        return ModelOutput(logits, aux, new_cs.embeddings, new_ca.embeddings, cfg.num_cs)

    def encode(self, image: np.ndarray) -> FeatureMap:
        return encode_image(image, self.cfg.backbone)

    def forward(self, image: np.ndarray) -> ModelOutput:
        return self.forward_features(self.encode(image))

    def permute_slots(self, perm) -> None:
        """Reorder the CA slot queries so that new slot ``s`` is old slot ``perm[s]``."""
        perm = np.asarray(perm)
        k = self.cfg.k_ca
        idx = (perm[:, None] * k + np.arange(k)[None, :]).reshape(-1)
        q = self.params["query.cat"]
        q.data = q.data[idx].copy()


def predict_labels(logits: np.ndarray, num_cs: int) -> np.ndarray:
    """Argmax decoding to label codes; winning CA slots are renumbered 0..R-1 in slot order."""
    win = np.argmax(logits, axis=0)
    codes = win.astype(np.uint16)
    ca = win >= num_cs
    slots = np.unique(win[ca])
    remap = np.zeros(logits.shape[0], dtype=np.int64)
    remap[slots] = np.arange(slots.size) + num_cs
    codes[ca] = remap[win[ca]].astype(np.uint16)
    return codes
