"""A tiny multimodal causal LM with the same placeholder-token contract
as the production checkpoints.

Text tokens come from an embedding table; image positions are filled by
a small vision tower applied to per-image features.  Attention is
causal, and positions whose attention-mask entry is 0 (image tokens,
padding) are never attended to by any query.  Fully-masked softmax rows
are zeroed instead of propagating NaN.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import torch
from torch import nn

from .collate import IGNORE_LABEL, Batch


@dataclass
class StubVlmConfig:
    vocab_size: int = 512
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    max_len: int = 2048
    patch_dim: int = 16
    image_token_count: int = 8


class MaskedSelfAttention(nn.Module):
    """Causal multi-head attention that drops masked keys entirely."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        assert d_model % n_heads == 0
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, key_allowed: torch.Tensor) -> torch.Tensor:
        bsz, seq, d_model = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)

        def heads(t):
            return t.view(bsz, seq, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        causal = torch.tril(torch.ones(seq, seq, dtype=torch.bool, device=x.device))
        allowed = causal.unsqueeze(0) & key_allowed[:, None, :].bool()
        scores = scores.masked_fill(~allowed[:, None, :, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        # Queries with no visible key (image/pad positions) get zero output.
        attn = torch.nan_to_num(attn, nan=0.0)
        out = (attn @ v).transpose(1, 2).reshape(bsz, seq, d_model)
        return self.proj(out)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MaskedSelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )

    def forward(self, x, key_allowed):
        x = x + self.attn(self.norm1(x), key_allowed)
        return x + self.mlp(self.norm2(x))


class StubVlm(nn.Module):
    def __init__(self, config: StubVlmConfig):
        super().__init__()
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.position_embedding = nn.Embedding(config.max_len, config.d_model)
        self.vision_tower = nn.Sequential(
            nn.Linear(config.patch_dim, config.d_model),
            nn.Tanh(),
            nn.Linear(config.d_model, config.d_model),
        )
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads) for _ in range(config.n_layers)
        )
        self.norm = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size, bias=False)

    def vision_parameters(self):
        return self.vision_tower.parameters()

    def forward(self, batch: Batch) -> torch.Tensor:
        bsz, seq = batch.input_ids.shape
        positions = torch.arange(seq, device=batch.input_ids.device)
        x = self.token_embedding(batch.input_ids) + self.position_embedding(positions)

        # Image positions take their embedding from the vision tower.
        if batch.image_position_mask.any():
            vision_embeds = self.vision_tower(batch.image_features)  # (B, K, D)
            for i in range(bsz):
                positions_i = batch.image_position_mask[i].nonzero(as_tuple=True)[0]
                x[i, positions_i] = vision_embeds[i, : positions_i.numel()]

        key_allowed = batch.attention_mask
        for block in self.blocks:
            x = block(x, key_allowed)
        return self.lm_head(self.norm(x))

    def loss(self, batch: Batch) -> torch.Tensor:
        """Next-token cross entropy over supervised (target) positions only."""
        logits = self.forward(batch)
        shifted_logits = logits[:, :-1].reshape(-1, self.config.vocab_size)
        shifted_labels = batch.labels[:, 1:].reshape(-1)
        return nn.functional.cross_entropy(
            shifted_logits, shifted_labels, ignore_index=IGNORE_LABEL
        )


def parameter_checksum(parameters) -> str:
    """Stable digest of parameter bytes, for freeze verification."""
    digest = hashlib.sha256()
    for param in parameters:
        digest.update(param.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
