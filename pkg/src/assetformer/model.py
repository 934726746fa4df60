"""Decoder-only transformer over asset tokens, conditioned on phrase bundles.

Llama-style blocks (pre-RMSNorm, rotary attention, SwiGLU MLP). The four
condition phrases are embedded, projected to the model width and placed in
front of the asset tokens at rotary positions 0..3.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .pcg import PHRASE_VOCAB
from .tokenizer import EOS_ID, VOCAB_SIZE

N_COND_SLOTS = 4


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 4
    model_dim: int = 128
    vocab_size: int = VOCAB_SIZE
    max_seq_len: int = 1024
    n_cond_slots: int = N_COND_SLOTS
    phrase_vocab_size: int = len(PHRASE_VOCAB)
    cond_embed_dim: int = 64
    cond_dropout: float = 0.1
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError("model_dim must be divisible by n_heads")
        if (self.model_dim // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary embeddings")
        if self.max_seq_len < self.n_cond_slots + 6:
            raise ValueError("max_seq_len must leave room for one primitive and EOS")
        if self.vocab_size != VOCAB_SIZE:
            raise ValueError(f"vocab_size must be {VOCAB_SIZE}")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ValueError("cond_dropout must be in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


NANO = ModelConfig(n_layers=2, n_heads=4, model_dim=128)
MINI = ModelConfig(n_layers=4, n_heads=8, model_dim=256)
NAMED_CONFIGS = {"nano": NANO, "mini": MINI}


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


def rope_tables(head_dim: int, max_len: int, base: float, dtype=torch.float32):
    inv = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim))
    ang = torch.outer(torch.arange(max_len, dtype=torch.float64), inv)
    ang = torch.cat([ang, ang], dim=-1)
    return ang.cos().to(dtype), ang.sin().to(dtype)


def apply_rope(x, cos, sin):
    # x: (B, H, T, hd); cos/sin: (T, hd)
    half = x.shape[-1] // 2
    rotated = torch.cat([-x[..., half:], x[..., :half]], dim=-1)
    return x * cos + rotated * sin


class KVCache:
    """Preallocated per-layer key/value buffers for one batch of sequences."""

    def __init__(self, n_layers: int, batch: int, n_heads: int, max_len: int, head_dim: int, dtype):
        shape = (batch, n_heads, max_len, head_dim)
        self.k = [torch.zeros(shape, dtype=dtype) for _ in range(n_layers)]
        self.v = [torch.zeros(shape, dtype=dtype) for _ in range(n_layers)]
        self.length = 0
        self.max_len = max_len

    def truncate(self, length: int) -> None:
        if not 0 <= length <= self.length:
            raise ValueError(f"cannot truncate cache of length {self.length} to {length}")
        self.length = length


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.qkv = nn.Linear(cfg.model_dim, 3 * cfg.model_dim, bias=False)
        self.out = nn.Linear(cfg.model_dim, cfg.model_dim, bias=False)

    def forward(self, x, cos, sin, cache: KVCache | None, layer: int, start: int):
        B, T, D = x.shape
        q, k, v = self.qkv(x).view(B, T, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q = apply_rope(q, cos, sin)
        k = apply_rope(k, cos, sin)
        if cache is not None:
            cache.k[layer][:, :, start:start + T] = k
            cache.v[layer][:, :, start:start + T] = v
            k = cache.k[layer][:, :, :start + T]
            v = cache.v[layer][:, :, :start + T]
        if start == 0:
            y = F.scaled_dot_product_attention(q, k, v, is_causal=T > 1)
        elif T == 1:
            y = F.scaled_dot_product_attention(q, k, v)
        else:
            qpos = torch.arange(start, start + T).unsqueeze(1)
            mask = torch.arange(start + T).unsqueeze(0) <= qpos
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(y.transpose(1, 2).reshape(B, T, D))


class MLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        hidden = 4 * ((8 * dim // 3 + 3) // 4)
        self.gate_up = nn.Linear(dim, 2 * hidden, bias=False)
        self.down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        gate, up = self.gate_up(x).chunk(2, dim=-1)
        return self.down(F.silu(gate) * up)


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.model_dim)
        self.attn = Attention(cfg)
        self.mlp_norm = RMSNorm(cfg.model_dim)
        self.mlp = MLP(cfg.model_dim)

    def forward(self, x, cos, sin, cache, layer, start):
        x = x + self.attn(self.attn_norm(x), cos, sin, cache, layer, start)
        return x + self.mlp(self.mlp_norm(x))


class ConditionEmbedding(nn.Module):
    """Phrase table plus a learned null row, projected by a two-layer MLP."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.null_id = cfg.phrase_vocab_size
        self.table = nn.Embedding(cfg.phrase_vocab_size + 1, cfg.cond_embed_dim)
        self.proj = nn.Sequential(
            nn.Linear(cfg.cond_embed_dim, cfg.model_dim),
            nn.GELU(approximate="tanh"),
            nn.Linear(cfg.model_dim, cfg.model_dim),
        )

    def forward(self, cond):
        return self.proj(self.table(cond))


class AssetFormer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.model_dim)
        self.cond = ConditionEmbedding(cfg)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.model_dim)
        self.head = nn.Linear(cfg.model_dim, cfg.vocab_size, bias=False)
        cos, sin = rope_tables(cfg.head_dim, cfg.max_seq_len, cfg.rope_base)
        self.register_buffer("rope_cos", cos, persistent=False)
        self.register_buffer("rope_sin", sin, persistent=False)
        self.apply(self._init)
        for name, p in self.named_parameters():
            if name.endswith("out.weight") or name.endswith("down.weight"):
                nn.init.normal_(p, std=0.02 / math.sqrt(2 * cfg.n_layers))

    @staticmethod
    def _init(m):
        if isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Embedding):
            nn.init.normal_(m.weight, std=0.02)

    @property
    def null_id(self) -> int:
        return self.cond.null_id

    def null_condition(self, batch: int) -> torch.Tensor:
        return torch.full((batch, self.cfg.n_cond_slots), self.null_id, dtype=torch.long)

    def new_cache(self, batch: int) -> KVCache:
        c = self.cfg
        dtype = self.tok_emb.weight.dtype
        return KVCache(c.n_layers, batch, c.n_heads, c.max_seq_len, c.head_dim, dtype)

    def forward(self, tokens, cond=None, cache: KVCache | None = None, return_prefix: bool = False):
        """Logits for each given token position (predicting the following token).

        Args:
            tokens: (B, T) asset token ids; T may be 0 when only prefilling.
            cond: (B, 4) phrase ids, ``null_id`` entries for the unconditional
                branch. ``None`` means fully unconditional. Ignored when
                ``cache`` already holds the condition slots.
            cache: incremental state; extended in place.
            return_prefix: when the condition slots are consumed by this call,
                also return the logits of the last condition slot, i.e. the
                distribution of the first asset token, as row 0.

        Returns:
            (B, T, V) logits, or (B, 1 + T, V) with ``return_prefix``.
        """
        B, T = tokens.shape
        start = cache.length if cache is not None else 0
        n_cond = self.cfg.n_cond_slots
        x = self.tok_emb(tokens)
        with_cond = start == 0
        if with_cond:
            if cond is None:
                cond = self.null_condition(B)
            if cond.shape != (B, n_cond):
                raise ValueError(f"condition must have shape {(B, n_cond)}, got {tuple(cond.shape)}")
            x = torch.cat([self.cond(cond), x], dim=1)
        elif return_prefix:
            raise ValueError("return_prefix requires the condition slots in this call")
        L = x.shape[1]
        if start + L > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {start + L} exceeds max_seq_len {self.cfg.max_seq_len}")
        if cache is not None and tuple(cache.k[0].shape[:2]) != (B, self.cfg.n_heads):
            raise ValueError("cache batch size does not match the input")
        cos = self.rope_cos[start:start + L]
        sin = self.rope_sin[start:start + L]
        for i, blk in enumerate(self.blocks):
            x = blk(x, cos, sin, cache, i, start)
        if cache is not None:
            cache.length = start + L
        if with_cond:
            x = x[:, n_cond - 1:] if return_prefix else x[:, n_cond:]
        return self.head(self.norm(x))

    def sequence_logits(self, tokens, cond):
        """Teacher-forced logits aligned with ``tokens``: row t predicts tokens[:, t]."""
        return self.forward(tokens[:, :-1], cond, return_prefix=True)


def loss_mask(targets: torch.Tensor) -> torch.Tensor:
    """True up to and including the first EOS of each row."""
    is_eos = (targets == EOS_ID).long()
    before = torch.cumsum(is_eos, dim=1) - is_eos
    return before == 0


def sequence_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over positions up to the first EOS."""
    if logits.shape[:2] != targets.shape or logits.shape[-1] != VOCAB_SIZE:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    mask = loss_mask(targets).reshape(-1).to(ce.dtype)
    return (ce * mask).sum() / mask.sum().clamp_min(1.0)
