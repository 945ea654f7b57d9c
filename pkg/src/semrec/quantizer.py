"""Twin-tower residual quantizer: semantic IDs from content embeddings.

Each tower projects backbone embeddings into code space and encodes them with
M per-level codebooks in a residual cascade: level m picks the codeword
nearest the residual left by levels 1..m-1 (squared Euclidean, ties to the
lowest index). Identical level tuples are disambiguated with ordinal suffix
tokens, so every full ID has fixed length M+1 and the entity->ID map is
injective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .backbone import TOWERS, TransformerLM, Vocabulary, embed_content_batch


class QuantizerError(ValueError):
    pass


class CollisionOverflowError(QuantizerError):
    pass


@dataclass
class TowerConfig:
    tower: str
    levels: int           # M
    codebook_size: int    # N
    code_dim: int
    proj_widths: tuple    # backbone dim -> ... -> code_dim

    def __post_init__(self):
        if self.tower not in TOWERS:
            raise QuantizerError(f"unknown tower: {self.tower}")
        if self.levels < 1 or self.codebook_size < 2:
            raise QuantizerError("need levels >= 1 and codebook_size >= 2")
        if self.proj_widths[-1] != self.code_dim:
            raise QuantizerError("projection must end at code_dim")


@dataclass(frozen=True)
class SemanticId:
    tower: str
    levels: tuple[int, ...]
    suffix: int

    def token_ids(self, vocab: Vocabulary) -> list[int]:
        ids = [
            vocab.semantic_token_id(self.tower, m, code)
            for m, code in enumerate(self.levels)
        ]
        ids.append(vocab.suffix_token_id(self.suffix))
        return ids

    def render(self) -> str:
        body = ",".join(str(c) for c in self.levels)
        return f"<{self.tower}:{body}|p{self.suffix}>"


# -- functional core -----------------------------------------------------------


def _nearest_block(residual: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    dists = ((residual.unsqueeze(-2) - codebook) ** 2).sum(dim=-1)  # [B, N]
    min_vals = dists.min(dim=-1, keepdim=True).values
    n = codebook.shape[0]
    arange = torch.arange(n, device=dists.device).expand_as(dists)
    return torch.where(dists == min_vals, arange, n).min(dim=-1).values


def _nearest(residual: torch.Tensor, codebook: torch.Tensor) -> torch.Tensor:
    """Index of the closest codeword per row; ties break to the lowest index.

    Distances use direct differences (not the expanded dot-product form) so
    results match a naive per-pair oracle bit for bit; rows are chunked to
    bound the [B, N, d] intermediate.
    """
    if residual.dim() == 1:
        return _nearest_block(residual.unsqueeze(0), codebook).squeeze(0)
    n, d = codebook.shape
    chunk = max(1, (1 << 22) // max(1, n * d))
    if residual.shape[0] <= chunk:
        return _nearest_block(residual, codebook)
    parts = [
        _nearest_block(residual[i : i + chunk], codebook)
        for i in range(0, residual.shape[0], chunk)
    ]
    return torch.cat(parts, dim=0)


def residual_encode(
    z: torch.Tensor, codebooks: Sequence[torch.Tensor]
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Residual cascade: returns (level indices [.., M], residual trail).

    trail[m] is the residual AFTER subtracting level m's codeword, so
    z = sum of chosen codewords + trail[-1] holds exactly and the trail
    carries gradients for the literal token-level loss.
    """
    if not torch.isfinite(z).all():
        raise QuantizerError("non-finite input to residual_encode")
    squeeze = z.dim() == 1
    r = z.unsqueeze(0) if squeeze else z
    indices = []
    trail = []
    for codebook in codebooks:
        if codebook.shape[-1] != r.shape[-1]:
            raise QuantizerError("codebook width does not match input")
        idx = _nearest(r.detach(), codebook.detach())
        r = r - codebook[idx]
        indices.append(idx)
        trail.append(r.squeeze(0) if squeeze else r)
    idx_out = torch.stack(indices, dim=-1)
    if squeeze:
        idx_out = idx_out.squeeze(0)
    return idx_out, trail


def reconstruct(levels: Sequence[int], codebooks: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of the addressed codewords (inverse of the residual cascade)."""
    if len(levels) != len(codebooks):
        raise QuantizerError("level count does not match codebook count")
    out = None
    for idx, codebook in zip(levels, codebooks):
        if not 0 <= int(idx) < codebook.shape[0]:
            raise QuantizerError(f"codeword index out of range: {int(idx)}")
        row = codebook[int(idx)]
        out = row.clone() if out is None else out + row
    return out


def split_quantization_loss(
    z: torch.Tensor, codebooks: Sequence[torch.Tensor], commitment_weight: float
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Trainable quantization loss plus the literal token-level values.

    Returns (training_loss_sum, literal_per_row, indices). The training loss
    splits each level into a codebook term (residual detached) and a
    commitment term (codewords detached), the usual way of routing gradients
    around the argmin; it is summed over rows and levels. literal_per_row is
    the plain sum of squared residual norms per row, the quantity reported
    as the token-level loss.
    """
    squeeze = z.dim() == 1
    zb = z.unsqueeze(0) if squeeze else z
    r_lit = zb             # full graph, for the reported value
    r_enc = zb             # codewords detached, for the commitment term
    train = zb.new_zeros(())
    literal = zb.new_zeros(zb.shape[0])
    indices = []
    for codebook in codebooks:
        idx = _nearest(r_lit.detach(), codebook.detach())
        indices.append(idx)
        c = codebook[idx]
        train = train + ((r_lit.detach() - c) ** 2).sum()
        train = train + commitment_weight * ((r_enc - c.detach()) ** 2).sum()
        r_lit = r_lit - c
        r_enc = r_enc - c.detach()
        literal = literal + (r_lit ** 2).sum(dim=-1)
    idx_out = torch.stack(indices, dim=-1)
    if squeeze:
        idx_out = idx_out.squeeze(0)
        literal = literal.squeeze(0)
    return train, literal, idx_out


# -- k-means initialization ------------------------------------------------------


def kmeans(
    vectors: torch.Tensor, k: int, iters: int = 25,
    init: torch.Tensor | None = None,
) -> torch.Tensor:
    """Deterministic Lloyd iterations with farthest-point seeding.

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid. The final step is always a centroid update, so the quantization
    error never exceeds the single-mean baseline. Passing init warm-starts
    the iterations from existing centroids instead of re-seeding.
    """
    n = vectors.shape[0]
    if n < k:
        raise QuantizerError(f"k-means needs at least {k} vectors, got {n}")
    x = vectors.detach()
    if init is not None:
        if init.shape != (k, x.shape[1]):
            raise QuantizerError("warm-start centroids have the wrong shape")
        centroids = init.detach().clone()
    else:
        # farthest-point seeding: start nearest the mean, then max-min distance
        mean = x.mean(dim=0, keepdim=True)
        first = int(((x - mean) ** 2).sum(dim=1).argmin().item())
        chosen = [first]
        dist = ((x - x[first]) ** 2).sum(dim=1)
        for _ in range(1, k):
            nxt = int(dist.argmax().item())
            chosen.append(nxt)
            dist = torch.minimum(dist, ((x - x[nxt]) ** 2).sum(dim=1))
        centroids = x[chosen].clone()

    prev = None
    for _ in range(max(1, iters)):
        assign = _nearest(x, centroids)
        for c in range(k):
            sel = assign == c
            if sel.any():
                centroids[c] = x[sel].mean(dim=0)
        for c in range(k):
            if not (assign == c).any():
                far = int(((x - centroids[assign]) ** 2).sum(dim=1).argmax().item())
                centroids[c] = x[far]
        if prev is not None and torch.equal(prev, assign):
            break
        prev = assign
    # close with exact means so the fit never loses to the zero baseline
    assign = _nearest(x, centroids)
    for c in range(k):
        sel = assign == c
        if sel.any():
            centroids[c] = x[sel].mean(dim=0)
    return centroids


def kmeans_init(
    zs: torch.Tensor, levels: int, codebook_size: int, iters: int = 25
) -> list[torch.Tensor]:
    """Level-wise warm start: fit level m's codebook to level m-1 residuals."""
    books: list[torch.Tensor] = []
    r = zs.detach()
    for _ in range(levels):
        centroids = kmeans(r, codebook_size, iters)
        books.append(centroids)
        idx = _nearest(r, centroids)
        r = r - centroids[idx]
    return books


def lloyd_refresh(
    zs: torch.Tensor, codebooks: Sequence[torch.Tensor], iters: int = 25
) -> list[torch.Tensor]:
    """Re-fit each level's codebook to the current code-space distribution,
    warm-started from the existing codewords so the index moves continuously
    as the embedding geometry drifts."""
    books: list[torch.Tensor] = []
    r = zs.detach()
    for book in codebooks:
        centroids = kmeans(r, book.shape[0], iters, init=book)
        books.append(centroids)
        idx = _nearest(r, centroids)
        r = r - centroids[idx]
    return books


# -- tower module ------------------------------------------------------------------


class TowerQuantizer(nn.Module):
    """Projection stack plus per-level codebooks for one tower."""

    def __init__(self, cfg: TowerConfig):
        super().__init__()
        self.cfg = cfg
        layers: list[nn.Module] = []
        widths = list(cfg.proj_widths)
        for i in range(len(widths) - 1):
            layers.append(nn.Linear(widths[i], widths[i + 1]))
            if i < len(widths) - 2:
                # GELU keeps a gradient everywhere; hard-zero activations let
                # the stack die when the embedding distribution drifts
                layers.append(nn.GELU())
        self.proj = nn.Sequential(*layers)
        self.codebooks = nn.ParameterList(
            nn.Parameter(torch.randn(cfg.codebook_size, cfg.code_dim) * 0.1)
            for _ in range(cfg.levels)
        )

    def codebook_tensors(self) -> list[torch.Tensor]:
        return [p for p in self.codebooks]

    def project(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.cfg.proj_widths[0]:
            raise QuantizerError(
                f"projection expects width {self.cfg.proj_widths[0]}, got {x.shape[-1]}"
            )
        return self.proj(x)

    def encode(self, z: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        return residual_encode(z, self.codebook_tensors())

    def load_codebooks(self, books: Sequence[torch.Tensor]) -> None:
        if len(books) != self.cfg.levels:
            raise QuantizerError("codebook count mismatch")
        with torch.no_grad():
            for param, book in zip(self.codebooks, books):
                param.copy_(book.to(param.dtype))


# -- ID assignment ---------------------------------------------------------------


class IndexAssignment:
    """Injective entity <-> SemanticId map for both towers, tagged by epoch."""

    def __init__(self, towers: dict[str, dict[str, SemanticId]], epoch: int = 0):
        self.towers = towers
        self.epoch = epoch
        self._reverse: dict[str, dict[SemanticId, str]] = {}
        for tower, mapping in towers.items():
            rev: dict[SemanticId, str] = {}
            for entity, sid in mapping.items():
                if sid in rev:
                    raise QuantizerError(
                        f"duplicate semantic ID {sid.render()} for "
                        f"{rev[sid]} and {entity}"
                    )
                rev[sid] = entity
            self._reverse[tower] = rev

    def id_of(self, tower: str, entity: str) -> SemanticId:
        return self.towers[tower][entity]

    def entity_of(self, sid: SemanticId) -> str | None:
        return self._reverse.get(sid.tower, {}).get(sid)

    def entities(self, tower: str) -> list[str]:
        return sorted(self.towers[tower])

    def export_jsonl(self) -> list[dict]:
        rows = []
        for tower in sorted(self.towers):
            for entity in sorted(self.towers[tower]):
                sid = self.towers[tower][entity]
                rows.append({
                    "entity_id": entity,
                    "tower": tower,
                    "levels": list(sid.levels),
                    "suffix": sid.suffix,
                    "epoch": self.epoch,
                })
        return rows


def resolve_collisions(
    tuples: dict[str, tuple[int, ...]], tower: str, collision_budget: int
) -> dict[str, SemanticId]:
    """Suffix entities sharing a level tuple in ascending entity-id order."""
    groups: dict[tuple[int, ...], list[str]] = {}
    for entity in sorted(tuples):
        groups.setdefault(tuples[entity], []).append(entity)
    out: dict[str, SemanticId] = {}
    for levels, members in groups.items():
        if len(members) > collision_budget:
            raise CollisionOverflowError(
                f"collision set {levels} has {len(members)} entities "
                f"(budget {collision_budget}): {members[:5]}..."
            )
        for p, entity in enumerate(members):
            out[entity] = SemanticId(tower=tower, levels=levels, suffix=p)
    return out


def assign_ids(
    entity_ids: Sequence[str],
    embeddings: torch.Tensor,
    quantizer: TowerQuantizer,
    collision_budget: int,
    epoch: int = 0,
) -> dict[str, SemanticId]:
    """Residual-encode every entity and resolve collisions by suffix order."""
    if len(entity_ids) != embeddings.shape[0]:
        raise QuantizerError("entity/embedding count mismatch")
    with torch.no_grad():
        z = quantizer.project(embeddings)
        indices, _ = quantizer.encode(z)
    tuples = {
        entity: tuple(int(v) for v in indices[i])
        for i, entity in enumerate(entity_ids)
    }
    return resolve_collisions(tuples, quantizer.cfg.tower, collision_budget)


def compute_embeddings(
    model: TransformerLM,
    vocab: Vocabulary,
    texts: dict[str, str],
    chunk: int = 64,
) -> tuple[list[str], torch.Tensor]:
    """Content embeddings for entities in sorted-id order, chunked batches."""
    order = sorted(texts)
    outs = []
    with torch.no_grad():
        for start in range(0, len(order), chunk):
            batch = order[start : start + chunk]
            seqs = [vocab.encode(texts[e]) for e in batch]
            outs.append(embed_content_batch(model, seqs, vocab.pad_id))
    return order, torch.cat(outs, dim=0) if outs else torch.zeros(0, model.dim)


def reindex(
    model: TransformerLM,
    vocab: Vocabulary,
    item_texts: dict[str, str],
    user_texts: dict[str, str],
    item_q: TowerQuantizer,
    user_q: TowerQuantizer,
    collision_budget: int,
    epoch: int,
) -> IndexAssignment:
    """Re-derive both towers' IDs from the current backbone state.

    The semantic token set is untouched; only the entity -> ID mapping moves.
    """
    towers: dict[str, dict[str, SemanticId]] = {}
    for q, texts in ((item_q, item_texts), (user_q, user_texts)):
        order, emb = compute_embeddings(model, vocab, texts)
        towers[q.cfg.tower] = assign_ids(order, emb, q, collision_budget, epoch)
    return IndexAssignment(towers, epoch=epoch)
