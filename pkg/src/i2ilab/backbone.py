"""Tiny frozen encoder-decoder transformer with adapter insertion points.

The encoder consumes a concatenation of projected scene-feature vectors (the
task head's output) and question token embeddings; the decoder generates the
answer autoregressively. Pre-layernorm residual blocks throughout; adapters
(or a fusion over several adapters) apply after each feed-forward residual,
one insertion point per encoder and decoder layer, so downstream consumers
(including decoder cross-attention) see adapter-transformed states.

The output projection is the transpose of the token embedding table (weight
tying). Once a backbone is frozen its buffers are read-only and no gradient
can be accumulated into them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .adapters import AdapterParams, FusionParams, adapter_forward, fusion_forward
from .rng import Rng
from .tensor import (
    Tensor,
    concat,
    embedding,
    ffn_relu,
    layernorm,
    linear,
    matmul,
    multihead_attention,
    reshape,
    transpose,
)
from .tasks import BOS, EOS, PAD, VOCAB, Dataset, Example

NEG_BIAS = -1e9
IGNORE_INDEX = -100
INIT_STD = 0.02


@dataclass(frozen=True)
class BackboneConfig:
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    vocab_size: int = 64
    max_src_len: int = 32
    max_tgt_len: int = 4
    feature_dim: int = 16
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers",
                     "d_ff", "vocab_size", "max_src_len", "max_tgt_len",
                     "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.vocab_size < len(VOCAB):
            raise ValueError(f"vocab_size must cover the {len(VOCAB)}-word vocabulary")

    @property
    def n_insertion_points(self) -> int:
        return self.n_enc_layers + self.n_dec_layers


@dataclass
class Attention:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor


@dataclass
class EncoderLayer:
    ln_attn_g: Tensor
    ln_attn_b: Tensor
    attn: Attention
    ln_ffn_g: Tensor
    ln_ffn_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class DecoderLayer:
    ln_self_g: Tensor
    ln_self_b: Tensor
    self_attn: Attention
    ln_cross_g: Tensor
    ln_cross_b: Tensor
    cross_attn: Attention
    ln_ffn_g: Tensor
    ln_ffn_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


class TaskHead:
    """Per-task projection from scene features into the embedding space."""

    def __init__(self, w: Tensor, b: Tensor):
        self.w = w   # (feature_dim, d_model)
        self.b = b   # (d_model,)

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        return [("w", self.w), ("b", self.b)]

    def tensors(self) -> list[Tensor]:
        return [self.w, self.b]

    def copy(self, requires_grad: bool = True) -> "TaskHead":
        return TaskHead(Tensor(self.w.data.copy(), requires_grad),
                        Tensor(self.b.data.copy(), requires_grad))


def init_head(config: BackboneConfig, rng: Rng) -> TaskHead:
    return TaskHead(
        Tensor(rng.split("w").normal((config.feature_dim, config.d_model), INIT_STD),
               requires_grad=True),
        Tensor(np.zeros(config.d_model), requires_grad=True))


class BackboneParams:
    """All weights of the shared transformer; freezable as a unit."""

    def __init__(self, config: BackboneConfig, tok_emb: Tensor,
                 enc_pos: Tensor, dec_pos: Tensor,
                 enc_layers: list[EncoderLayer], dec_layers: list[DecoderLayer],
                 enc_ln_g: Tensor, enc_ln_b: Tensor,
                 dec_ln_g: Tensor, dec_ln_b: Tensor):
        self.config = config
        self.tok_emb = tok_emb
        self.enc_pos = enc_pos
        self.dec_pos = dec_pos
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.enc_ln_g = enc_ln_g
        self.enc_ln_b = enc_ln_b
        self.dec_ln_g = dec_ln_g
        self.dec_ln_b = dec_ln_b
        self.frozen = False

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("tok_emb", self.tok_emb), ("enc_pos", self.enc_pos),
               ("dec_pos", self.dec_pos),
               ("enc_ln_g", self.enc_ln_g), ("enc_ln_b", self.enc_ln_b),
               ("dec_ln_g", self.dec_ln_g), ("dec_ln_b", self.dec_ln_b)]

        def attn_items(prefix: str, a: Attention):
            return [(f"{prefix}/{n}", getattr(a, n))
                    for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]

        for i, l in enumerate(self.enc_layers):
            p = f"enc{i}"
            out += [(f"{p}/ln_attn_g", l.ln_attn_g), (f"{p}/ln_attn_b", l.ln_attn_b)]
            out += attn_items(f"{p}/attn", l.attn)
            out += [(f"{p}/ln_ffn_g", l.ln_ffn_g), (f"{p}/ln_ffn_b", l.ln_ffn_b),
                    (f"{p}/w1", l.w1), (f"{p}/b1", l.b1),
                    (f"{p}/w2", l.w2), (f"{p}/b2", l.b2)]
        for i, l in enumerate(self.dec_layers):
            p = f"dec{i}"
            out += [(f"{p}/ln_self_g", l.ln_self_g), (f"{p}/ln_self_b", l.ln_self_b)]
            out += attn_items(f"{p}/self_attn", l.self_attn)
            out += [(f"{p}/ln_cross_g", l.ln_cross_g), (f"{p}/ln_cross_b", l.ln_cross_b)]
            out += attn_items(f"{p}/cross_attn", l.cross_attn)
            out += [(f"{p}/ln_ffn_g", l.ln_ffn_g), (f"{p}/ln_ffn_b", l.ln_ffn_b),
                    (f"{p}/w1", l.w1), (f"{p}/b1", l.b1),
                    (f"{p}/w2", l.w2), (f"{p}/b2", l.b2)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    def freeze(self) -> None:
        for t in self.tensors():
            t.requires_grad = False
            t.grad = None
            t.data.setflags(write=False)
        self.frozen = True

    def copy(self, requires_grad: bool = False) -> "BackboneParams":
        """Deep copy; pass requires_grad=True for a finetunable clone."""
        def c(t: Tensor) -> Tensor:
            return Tensor(t.data.copy(), requires_grad)

        def ca(a: Attention) -> Attention:
            return Attention(*(c(getattr(a, n)) for n in
                               ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")))

        enc = [EncoderLayer(c(l.ln_attn_g), c(l.ln_attn_b), ca(l.attn),
                            c(l.ln_ffn_g), c(l.ln_ffn_b),
                            c(l.w1), c(l.b1), c(l.w2), c(l.b2))
               for l in self.enc_layers]
        dec = [DecoderLayer(c(l.ln_self_g), c(l.ln_self_b), ca(l.self_attn),
                            c(l.ln_cross_g), c(l.ln_cross_b), ca(l.cross_attn),
                            c(l.ln_ffn_g), c(l.ln_ffn_b),
                            c(l.w1), c(l.b1), c(l.w2), c(l.b2))
               for l in self.dec_layers]
        return BackboneParams(self.config, c(self.tok_emb), c(self.enc_pos),
                              c(self.dec_pos), enc, dec,
                              c(self.enc_ln_g), c(self.enc_ln_b),
                              c(self.dec_ln_g), c(self.dec_ln_b))


def init_backbone(config: BackboneConfig, rng: Rng) -> BackboneParams:
    d, ff = config.d_model, config.d_ff

    def w(r: Rng, shape) -> Tensor:
        return Tensor(r.normal(shape, INIT_STD), requires_grad=True)

    def zeros(n) -> Tensor:
        return Tensor(np.zeros(n), requires_grad=True)

    def ones(n) -> Tensor:
        return Tensor(np.ones(n), requires_grad=True)

    def attn(r: Rng) -> Attention:
        return Attention(w(r.split("q"), (d, d)), zeros(d),
                         w(r.split("k"), (d, d)), zeros(d),
                         w(r.split("v"), (d, d)), zeros(d),
                         w(r.split("o"), (d, d)), zeros(d))

    enc = []
    for i in range(config.n_enc_layers):
        r = rng.split(f"enc{i}")
        enc.append(EncoderLayer(ones(d), zeros(d), attn(r.split("attn")),
                                ones(d), zeros(d),
                                w(r.split("w1"), (d, ff)), zeros(ff),
                                w(r.split("w2"), (ff, d)), zeros(d)))
    dec = []
    for i in range(config.n_dec_layers):
        r = rng.split(f"dec{i}")
        dec.append(DecoderLayer(ones(d), zeros(d), attn(r.split("self")),
                                ones(d), zeros(d), attn(r.split("cross")),
                                ones(d), zeros(d),
                                w(r.split("w1"), (d, ff)), zeros(ff),
                                w(r.split("w2"), (ff, d)), zeros(d)))
    return BackboneParams(
        config,
        tok_emb=w(rng.split("tok"), (config.vocab_size, d)),
        enc_pos=w(rng.split("enc-pos"), (config.max_src_len, d)),
        dec_pos=w(rng.split("dec-pos"), (config.max_tgt_len + 1, d)),
        enc_layers=enc, dec_layers=dec,
        enc_ln_g=ones(d), enc_ln_b=zeros(d),
        dec_ln_g=ones(d), dec_ln_b=zeros(d))


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    feats: np.ndarray       # (B, F, feature_dim), zero-padded
    n_feats: np.ndarray     # (B,)
    q_ids: np.ndarray       # (B, Q), PAD-padded
    src_pos: np.ndarray     # (B, F+Q) position ids within each example
    src_mask: np.ndarray    # (B, F+Q) 1.0 valid / 0.0 padding
    tgt_in: np.ndarray      # (B, T) BOS + answer, PAD-padded
    tgt_out: np.ndarray     # (B, T) answer + EOS, IGNORE_INDEX-padded
    tgt_mask: np.ndarray    # (B, T)
    references: list[tuple[int, ...]]

    @property
    def size(self) -> int:
        return self.feats.shape[0]


def pack_batch(examples: Sequence[Example], config: BackboneConfig) -> Batch:
    b = len(examples)
    f_max = max(ex.features.shape[0] for ex in examples)
    q_max = max(len(ex.question) for ex in examples)
    t_max = max(len(ex.answer) + 1 for ex in examples)
    if t_max > config.max_tgt_len:
        raise ValueError("answer exceeds max_tgt_len")
    feats = np.zeros((b, f_max, config.feature_dim))
    n_feats = np.zeros(b, dtype=np.int64)
    q_ids = np.full((b, q_max), PAD, dtype=np.int64)
    src_pos = np.zeros((b, f_max + q_max), dtype=np.int64)
    src_mask = np.zeros((b, f_max + q_max))
    tgt_in = np.full((b, t_max), PAD, dtype=np.int64)
    tgt_out = np.full((b, t_max), IGNORE_INDEX, dtype=np.int64)
    tgt_mask = np.zeros((b, t_max))
    refs = []
    for i, ex in enumerate(examples):
        m, q = ex.features.shape[0], len(ex.question)
        if m + q > config.max_src_len:
            raise ValueError("source sequence exceeds max_src_len")
        feats[i, :m] = ex.features
        n_feats[i] = m
        q_ids[i, :q] = ex.question
        src_pos[i, :m] = np.arange(m)
        src_pos[i, f_max:f_max + q] = np.arange(m, m + q)
        src_mask[i, :m] = 1.0
        src_mask[i, f_max:f_max + q] = 1.0
        t = len(ex.answer)
        tgt_in[i, 0] = BOS
        tgt_in[i, 1:1 + t] = ex.answer
        tgt_out[i, :t] = ex.answer
        tgt_out[i, t] = EOS
        tgt_mask[i, :t + 1] = 1.0
        refs.append(tuple(ex.answer))
    return Batch(feats, n_feats, q_ids, src_pos, src_mask,
                 tgt_in, tgt_out, tgt_mask, refs)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    logits: Tensor       # (B, T, vocab)
    h_enc: Tensor        # (B, S, d) final-layer encoder states
    h_dec: Tensor        # (B, T, d) final-layer decoder states
    pooled: Tensor       # (B, d) masked mean over source positions
    src_mask: np.ndarray
    tgt_mask: np.ndarray


def _mha(xq: Tensor, xkv: Tensor, a: Attention, n_heads: int,
         bias: Optional[np.ndarray]) -> Tensor:
    return multihead_attention(xq, xkv, a.wq, a.bq, a.wk, a.bk,
                               a.wv, a.bv, a.wo, a.bo, n_heads, bias)


def _insertion(x: Tensor, point: int, adapter: Optional[AdapterParams],
               fusion: Optional[FusionParams],
               fusion_adapters: Optional[Sequence[AdapterParams]]) -> Tensor:
    if fusion is not None:
        outs = [adapter_forward(a.points[point], x) for a in fusion_adapters]
        return fusion_forward(fusion.points[point], x, outs)
    if adapter is not None:
        return adapter_forward(adapter.points[point], x)
    return x


def _check_modules(config: BackboneConfig, adapter, fusion, fusion_adapters):
    if fusion is not None:
        if adapter is not None:
            raise ValueError("pass either a single adapter or a fusion, not both")
        if not fusion_adapters:
            raise ValueError("fusion requires at least one adapter")
        if len(fusion_adapters) != fusion.n_adapters:
            raise ValueError("fusion adapter list length mismatch")
        mods = list(fusion_adapters)
    elif fusion_adapters:
        raise ValueError("fusion_adapters given without fusion parameters")
    else:
        mods = [adapter] if adapter is not None else []
    for m in mods:
        if m.n_points != config.n_insertion_points:
            raise ValueError("adapter insertion points do not match the backbone")


def _encode(params: BackboneParams, head: TaskHead, batch: Batch,
            adapter, fusion, fusion_adapters) -> tuple[Tensor, Tensor]:
    cfg = params.config
    f_emb = linear(Tensor(batch.feats), head.w, head.b)
    q_emb = embedding(params.tok_emb, batch.q_ids)
    x = concat([f_emb, q_emb], axis=1)
    x = x + embedding(params.enc_pos, batch.src_pos)
    bias = ((1.0 - batch.src_mask) * NEG_BIAS)[:, None, None, :]
    for i, layer in enumerate(params.enc_layers):
        h = layernorm(x, layer.ln_attn_g, layer.ln_attn_b)
        x = x + _mha(h, h, layer.attn, cfg.n_heads, bias)
        h = layernorm(x, layer.ln_ffn_g, layer.ln_ffn_b)
        x = x + ffn_relu(h, layer.w1, layer.b1, layer.w2, layer.b2)
        x = _insertion(x, i, adapter, fusion, fusion_adapters)
    h_enc = layernorm(x, params.enc_ln_g, params.enc_ln_b)
    mask = Tensor(batch.src_mask[:, :, None])
    counts = batch.src_mask.sum(axis=1, keepdims=True)
    pooled = (h_enc * mask).sum(axis=1) * Tensor(1.0 / counts)
    return h_enc, pooled


def _decode(params: BackboneParams, h_enc: Tensor, src_mask: np.ndarray,
            tgt_in: np.ndarray, adapter, fusion, fusion_adapters) -> Tensor:
    cfg = params.config
    n_enc = cfg.n_enc_layers
    t = tgt_in.shape[1]
    y = embedding(params.tok_emb, tgt_in)
    y = y + embedding(params.dec_pos, np.tile(np.arange(t), (tgt_in.shape[0], 1)))
    causal = np.triu(np.full((t, t), NEG_BIAS), k=1)[None, None, :, :]
    cross_bias = ((1.0 - src_mask) * NEG_BIAS)[:, None, None, :]
    for i, layer in enumerate(params.dec_layers):
        h = layernorm(y, layer.ln_self_g, layer.ln_self_b)
        y = y + _mha(h, h, layer.self_attn, cfg.n_heads, causal)
        h = layernorm(y, layer.ln_cross_g, layer.ln_cross_b)
        y = y + _mha(h, h_enc, layer.cross_attn, cfg.n_heads, cross_bias)
        h = layernorm(y, layer.ln_ffn_g, layer.ln_ffn_b)
        y = y + ffn_relu(h, layer.w1, layer.b1, layer.w2, layer.b2)
        y = _insertion(y, n_enc + i, adapter, fusion, fusion_adapters)
    return layernorm(y, params.dec_ln_g, params.dec_ln_b)


def forward(params: BackboneParams, head: TaskHead, batch: Batch,
            adapter: Optional[AdapterParams] = None,
            fusion: Optional[FusionParams] = None,
            fusion_adapters: Optional[Sequence[AdapterParams]] = None) -> ForwardOutput:
    """Teacher-forced pass exposing logits, final hidden states, and the
    pooled encoder representation."""
    cfg = params.config
    _check_modules(cfg, adapter, fusion, fusion_adapters)
    h_enc, pooled = _encode(params, head, batch, adapter, fusion, fusion_adapters)
    h_dec = _decode(params, h_enc, batch.src_mask, batch.tgt_in,
                    adapter, fusion, fusion_adapters)
    b, t, d = h_dec.data.shape
    logits = reshape(matmul(reshape(h_dec, (b * t, d)), transpose(params.tok_emb)),
                     (b, t, cfg.vocab_size))
    return ForwardOutput(logits, h_enc, h_dec, pooled,
                         batch.src_mask, batch.tgt_mask)


def generate(params: BackboneParams, head: TaskHead, batch: Batch,
             adapter: Optional[AdapterParams] = None,
             fusion: Optional[FusionParams] = None,
             fusion_adapters: Optional[Sequence[AdapterParams]] = None
             ) -> list[tuple[int, ...]]:
    """Greedy decoding, up to max_tgt_len - 1 tokens or EOS."""
    cfg = params.config
    _check_modules(cfg, adapter, fusion, fusion_adapters)
    h_enc, _ = _encode(params, head, batch, adapter, fusion, fusion_adapters)
    b = batch.size
    seq = np.full((b, 1), BOS, dtype=np.int64)
    for _ in range(cfg.max_tgt_len - 1):
        h_dec = _decode(params, h_enc, batch.src_mask, seq,
                        adapter, fusion, fusion_adapters)
        last = h_dec.data[:, -1, :]
        logits = last @ params.tok_emb.data.T
        nxt = np.argmax(logits, axis=1)
        seq = np.concatenate([seq, nxt[:, None]], axis=1)
        if np.all(np.any(seq[:, 1:] == EOS, axis=1)):
            break
    out = []
    for row in seq[:, 1:]:
        toks = []
        for t in row:
            if t == EOS:
                break
            toks.append(int(t))
        out.append(tuple(toks))
    return out


def backbone_to_blocks(params: BackboneParams, head0: TaskHead) -> dict[str, np.ndarray]:
    blocks = {f"backbone/{n}": t.data for n, t in params.named_tensors()}
    blocks.update({f"head0/{n}": t.data for n, t in head0.named_tensors()})
    return blocks


def backbone_from_blocks(config: BackboneConfig, blocks: dict[str, np.ndarray]
                         ) -> tuple[BackboneParams, TaskHead]:
    """Rebuild a frozen backbone + shared head from checkpoint blocks."""
    from .rng import Rng
    params = init_backbone(config, Rng(0))
    head0 = init_head(config, Rng(0))
    for name, t in params.named_tensors():
        key = f"backbone/{name}"
        if key not in blocks:
            raise ValueError(f"checkpoint is missing block {key}")
        if blocks[key].shape != t.data.shape:
            raise ValueError(f"checkpoint block {key} has shape "
                             f"{blocks[key].shape}, expected {t.data.shape}")
        t.data[:] = blocks[key]
    for name, t in head0.named_tensors():
        t.data[:] = blocks[f"head0/{name}"]
    params.freeze()
    for t in head0.tensors():
        t.requires_grad = False
        t.data.setflags(write=False)
    return params, head0


def encode_pooled(params: BackboneParams, head: TaskHead, dataset: Dataset,
                  batch_size: int = 64) -> np.ndarray:
    """Dataset representation: mean over examples of the per-example pooled
    encoder state, computed with no adapters."""
    examples = dataset.examples if hasattr(dataset, "examples") else list(dataset)
    if not examples:
        raise ValueError("encode_pooled of an empty dataset")
    chunks = []
    for i in range(0, len(examples), batch_size):
        batch = pack_batch(examples[i:i + batch_size], params.config)
        _, pooled = _encode(params, head, batch, None, None, None)
        chunks.append(pooled.data)
    return np.concatenate(chunks, axis=0).mean(axis=0)
