"""Compact decoder-only language model with an extendable vocabulary.

The vocabulary starts as plain word tokens built from the content corpus and
is later extended, exactly once, with a contiguous trailing block of semantic
tokens (two towers x levels x codewords, plus collision-suffix tokens).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

PAD, UNK, BOS = "<pad>", "<unk>", "<bos>"
SPECIALS = (PAD, UNK, BOS)

TOWERS = ("item", "user")


class VocabError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase word tokenization: every non-alphanumeric byte is a boundary."""
    out = []
    word = []
    for ch in text.lower():
        if ch.isascii() and (("a" <= ch <= "z") or ("0" <= ch <= "9")):
            word.append(ch)
        elif word:
            out.append("".join(word))
            word = []
    if word:
        out.append("".join(word))
    return out


@dataclass
class SemanticBlock:
    offset: int
    levels: int            # M
    codebook_size: int     # N
    collision_budget: int  # P_max

    @property
    def count(self) -> int:
        return 2 * self.levels * self.codebook_size + self.collision_budget


class Vocabulary:
    """Dense id table: specials, then NL words, then one semantic block."""

    def __init__(self, tokens: list[str], semantic: SemanticBlock | None = None):
        self.tokens = list(tokens)
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self.ids) != len(self.tokens):
            raise VocabError("duplicate token names")
        self.semantic = semantic

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]

    @property
    def bos_id(self) -> int:
        return self.ids[BOS]

    @classmethod
    def build(cls, texts: list[str], min_freq: int = 1) -> "Vocabulary":
        """Word vocabulary ordered by (frequency desc, word asc) after specials."""
        counts: dict[str, int] = {}
        for text in texts:
            for w in tokenize(text):
                counts[w] = counts.get(w, 0) + 1
        kept = sorted(
            (w for w, c in counts.items() if c >= min_freq),
            key=lambda w: (-counts[w], w),
        )
        return cls(list(SPECIALS) + kept)

    def encode(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.ids.get(w, unk) for w in tokenize(text)]

    def decode(self, ids: list[int]) -> str:
        out = []
        for i in ids:
            if not 0 <= i < len(self.tokens):
                raise VocabError(f"token id out of range: {i}")
            out.append(self.tokens[i])
        return " ".join(out)

    # -- semantic block ------------------------------------------------------

    def extend_semantic(
        self, levels: int, codebook_size: int, collision_budget: int
    ) -> "Vocabulary":
        """Append the semantic token block; valid exactly once.

        Existing ids are untouched: the new tokens occupy one contiguous
        trailing block of 2*M*N level/tower-specific tokens plus P_max
        shared collision-suffix tokens.
        """
        if self.semantic is not None:
            raise VocabError("vocabulary already extended with semantic tokens")
        block = SemanticBlock(
            offset=len(self.tokens),
            levels=levels,
            codebook_size=codebook_size,
            collision_budget=collision_budget,
        )
        names = [
            f"<{tower}:{m}:{c}>"
            for tower in TOWERS
            for m in range(levels)
            for c in range(codebook_size)
        ]
        names += [f"<sfx:{p}>" for p in range(collision_budget)]
        return Vocabulary(self.tokens + names, semantic=block)

    def _require_block(self) -> SemanticBlock:
        if self.semantic is None:
            raise VocabError("vocabulary has no semantic block yet")
        return self.semantic

    def semantic_token_id(self, tower: str, level: int, code: int) -> int:
        blk = self._require_block()
        if tower not in TOWERS:
            raise VocabError(f"unknown tower: {tower}")
        if not (0 <= level < blk.levels and 0 <= code < blk.codebook_size):
            raise VocabError(f"semantic token out of range: {tower}:{level}:{code}")
        t = TOWERS.index(tower)
        return blk.offset + (t * blk.levels + level) * blk.codebook_size + code

    def suffix_token_id(self, p: int) -> int:
        blk = self._require_block()
        if not 0 <= p < blk.collision_budget:
            raise VocabError(f"collision suffix out of budget: {p}")
        return blk.offset + 2 * blk.levels * blk.codebook_size + p

    def is_semantic(self, token_id: int) -> bool:
        return self.semantic is not None and token_id >= self.semantic.offset

    def tower_of(self, token_id: int) -> str | None:
        """Tower of a level token; None for NL and suffix tokens."""
        if self.semantic is None or token_id < self.semantic.offset:
            return None
        rel = token_id - self.semantic.offset
        per_tower = self.semantic.levels * self.semantic.codebook_size
        if rel < per_tower:
            return "item"
        if rel < 2 * per_tower:
            return "user"
        return None

    def to_dict(self) -> dict:
        d = {"tokens": self.tokens}
        if self.semantic is not None:
            d["semantic"] = {
                "offset": self.semantic.offset,
                "levels": self.semantic.levels,
                "codebook_size": self.semantic.codebook_size,
                "collision_budget": self.semantic.collision_budget,
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        blk = None
        if "semantic" in d:
            blk = SemanticBlock(**d["semantic"])
        return cls(d["tokens"], semantic=blk)


# -- model ---------------------------------------------------------------------


class CausalSelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int, max_seq_len: int, dropout: float):
        super().__init__()
        assert dim % n_heads == 0
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)
        mask = torch.tril(torch.ones(max_seq_len, max_seq_len, dtype=torch.bool))
        self.register_buffer("causal_mask", mask, persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=2)
        q = q.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        k = k.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        v = v.view(B, T, self.n_heads, self.head_dim).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.masked_fill(~self.causal_mask[:T, :T], float("-inf"))
        att = F.softmax(att, dim=-1)
        att = self.dropout(att)
        y = att @ v
        y = y.transpose(1, 2).contiguous().view(B, T, C)
        return self.dropout(self.proj(y))


class Block(nn.Module):
    def __init__(self, dim: int, n_heads: int, max_seq_len: int, dropout: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CausalSelfAttention(dim, n_heads, max_seq_len, dropout)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Linear(4 * dim, dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.ln1(x))
        x = x + self.mlp(self.ln2(x))
        return x


class TransformerLM(nn.Module):
    """Pre-norm causal decoder with learned positions and a linear LM head."""

    def __init__(self, vocab_size: int, dim: int, n_layers: int, n_heads: int,
                 max_seq_len: int, dropout: float = 0.0):
        super().__init__()
        self.dim = dim
        self.max_seq_len = max_seq_len
        self.wte = nn.Embedding(vocab_size, dim)
        self.wpe = nn.Embedding(max_seq_len, dim)
        self.blocks = nn.ModuleList(
            Block(dim, n_heads, max_seq_len, dropout) for _ in range(n_layers)
        )
        self.ln_f = nn.LayerNorm(dim)
        self.lm_head = nn.Linear(dim, vocab_size, bias=False)
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    @property
    def vocab_size(self) -> int:
        return self.wte.num_embeddings

    def hidden_states(self, ids: torch.Tensor) -> torch.Tensor:
        """Final hidden states (post final norm), shape [B, T, dim]."""
        if ids.dim() == 1:
            ids = ids.unsqueeze(0)
        B, T = ids.shape
        if T > self.max_seq_len:
            raise ValueError(f"sequence length {T} exceeds max {self.max_seq_len}")
        pos = torch.arange(T, device=ids.device)
        x = self.wte(ids) + self.wpe(pos)[None, :, :]
        for block in self.blocks:
            x = block(x)
        return self.ln_f(x)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.hidden_states(ids))

    def resize_vocab(self, new_size: int, generator: torch.Generator | None = None) -> None:
        """Append embedding rows and head rows for newly added tokens."""
        old = self.vocab_size
        if new_size < old:
            raise ValueError("vocabulary can only grow")
        if new_size == old:
            return
        extra = new_size - old
        dtype = self.wte.weight.dtype

        def rows() -> torch.Tensor:
            return torch.normal(
                0.0, 0.02, size=(extra, self.dim), generator=generator
            ).to(dtype)

        wte = nn.Embedding(new_size, self.dim)
        wte.weight.data = torch.cat([self.wte.weight.data, rows()], dim=0)
        self.wte = wte
        head = nn.Linear(self.dim, new_size, bias=False)
        head.weight.data = torch.cat([self.lm_head.weight.data, rows()], dim=0)
        self.lm_head = head


def forward_logits(
    model: TransformerLM, ids: list[int] | torch.Tensor
) -> tuple[torch.Tensor, bool]:
    """Per-position logits for one sequence; overlong input is left-truncated
    (oldest tokens dropped) and flagged."""
    if not torch.is_tensor(ids):
        ids = torch.tensor(ids, dtype=torch.long)
    truncated = False
    if ids.shape[-1] > model.max_seq_len:
        ids = ids[..., -model.max_seq_len:]
        truncated = True
    logits = model(ids.view(1, -1))[0]
    return logits, truncated


def pad_batch(
    seqs: list[list[int]], pad_id: int, device=None
) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a rectangle; returns (ids [B,T], valid mask [B,T])."""
    if not seqs:
        raise ValueError("empty batch")
    width = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), width), pad_id, dtype=torch.long, device=device)
    mask = torch.zeros(len(seqs), width, dtype=torch.bool, device=device)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask


def embed_content(model: TransformerLM, ids: list[int] | torch.Tensor) -> torch.Tensor:
    """Content embedding: mean of final hidden states over the sequence."""
    if not torch.is_tensor(ids):
        ids = torch.tensor(ids, dtype=torch.long)
    if ids.numel() == 0:
        raise ValueError("cannot embed an empty token sequence")
    h = model.hidden_states(ids.view(1, -1))[0]
    return h.mean(dim=0)


def embed_content_batch(model: TransformerLM, seqs: list[list[int]],
                        pad_id: int) -> torch.Tensor:
    """Batched mean-pool over non-padding positions, shape [B, dim]."""
    if any(len(s) == 0 for s in seqs):
        raise ValueError("cannot embed an empty token sequence")
    ids, mask = pad_batch(seqs, pad_id)
    h = model.hidden_states(ids)
    m = mask.unsqueeze(-1).to(h.dtype)
    return (h * m).sum(dim=1) / m.sum(dim=1)


def nll_loss(
    logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """Summed negative log-likelihood over masked positions.

    Returns (loss sum, number of supervised positions). Raises if the mask
    selects nothing, since a silent zero would hide upstream bugs.
    """
    logits = logits.reshape(-1, logits.shape[-1])
    targets = targets.reshape(-1)
    mask = mask.reshape(-1)
    count = int(mask.sum().item())
    if count == 0:
        raise ValueError("loss mask selects zero positions")
    logp = F.log_softmax(logits[mask], dim=-1)
    picked = logp.gather(1, targets[mask].unsqueeze(1)).squeeze(1)
    return -picked.sum(), count


class GradientError(RuntimeError):
    pass


def make_optimizer(named_params, lr: float, weight_decay: float) -> torch.optim.AdamW:
    params = [p for _, p in named_params]
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def grad_step(
    optimizer: torch.optim.Optimizer,
    named_params: list[tuple[str, torch.nn.Parameter]],
    grad_clip: float = 0.0,
) -> None:
    """One optimizer step after validating every gradient is finite."""
    for name, p in named_params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise GradientError(f"non-finite gradient in parameter block: {name}")
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_([p for _, p in named_params], grad_clip)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
