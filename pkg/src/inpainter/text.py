"""Closed-vocabulary prompt embedding.

A small learned token embedding plus a 2-layer self-attention encoder maps a
prompt to a fixed-length sequence of conditioning vectors. The empty prompt
returns a learned null sequence, which is what classifier-free guidance uses
as its unconditional input.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import VocabularyError
from .scenes import PALETTE, SHAPES

Tensor = torch.Tensor

# colors + shapes + articles/conjunctions + spatial terms: a closed set
VOCAB: tuple[str, ...] = tuple(
    list(PALETTE)
    + list(SHAPES)
    + ["a", "an", "and", "on", "the", "background"]
    + ["left", "right", "top", "bottom", "center", "small", "large", "beside", "above", "below"]
)

TEXT_LEN = 8
TEXT_DIM = 64
PAD_TOKEN = "<pad>"


def tokenize(prompt: str) -> list[str]:
    return prompt.lower().split()


class TextEncoder(nn.Module):
    """Learned embeddings -> 2 self-attention layers -> conditioning sequence."""

    def __init__(self, dim: int = TEXT_DIM, length: int = TEXT_LEN, heads: int = 4):
        super().__init__()
        self.dim = dim
        self.length = length
        self.vocab = {tok: i for i, tok in enumerate(VOCAB)}
        self.pad_id = len(VOCAB)
        self.tok_emb = nn.Embedding(len(VOCAB) + 1, dim)
        self.pos_emb = nn.Parameter(torch.zeros(length, dim))
        self.null_seq = nn.Parameter(torch.zeros(length, dim))
        self.layers = nn.ModuleList(
            [_SelfAttentionLayer(dim, heads) for _ in range(2)]
        )
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.pos_emb, std=0.02)
        nn.init.normal_(self.null_seq, std=0.02)

    def token_ids(self, prompt: str) -> list[int]:
        ids = []
        for tok in tokenize(prompt):
            if tok not in self.vocab:
                raise VocabularyError(f"token {tok!r} is not in the vocabulary")
            ids.append(self.vocab[tok])
        ids = ids[: self.length]
        ids += [self.pad_id] * (self.length - len(ids))
        return ids

    def forward_ids(self, ids: Tensor) -> Tensor:
        """Batched encoding: (B, length) token ids -> (B, length, dim)."""
        h = self.tok_emb(ids) + self.pos_emb
        for layer in self.layers:
            h = layer(h)
        return h

    def forward(self, prompt: str) -> Tensor:
        """(length, dim) conditioning sequence; '' returns the null sequence."""
        if not prompt.strip():
            return self.null_seq
        ids = torch.tensor(self.token_ids(prompt), dtype=torch.long)
        return self.forward_ids(ids[None])[0]


class _SelfAttentionLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(), nn.Linear(dim * 2, dim))

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        hd = d // self.heads
        h = self.norm1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(b, n, self.heads, hd).transpose(1, 2)
        k = k.view(b, n, self.heads, hd).transpose(1, 2)
        v = v.view(b, n, self.heads, hd).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(out)
        return x + self.mlp(self.norm2(x))


def embed_text(prompt: str, encoder: TextEncoder) -> Tensor:
    """Deterministic prompt embedding via the given encoder."""
    with torch.no_grad():
        return encoder(prompt).detach()
