"""Trie-constrained decoding over item semantic IDs.

All item IDs have fixed length M+1 (levels plus collision suffix), so
decoding runs exactly M+1 steps with candidates restricted to the trie
frontier at every step. Every completed path is a catalog item by
construction; out-of-domain outputs cannot occur.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .backbone import TransformerLM, Vocabulary, pad_batch
from .quantizer import IndexAssignment


class InferenceError(ValueError):
    pass


class TrieNode:
    __slots__ = ("children", "item")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.item: str | None = None


class IndexTrie:
    """Prefix tree over item semantic-token ids; leaves name catalog items."""

    def __init__(self, depth: int):
        self.root = TrieNode()
        self.depth = depth
        self.leaf_count = 0

    def insert(self, token_ids: list[int], item: str) -> None:
        if len(token_ids) != self.depth:
            raise InferenceError(
                f"ID length {len(token_ids)} != trie depth {self.depth}"
            )
        node = self.root
        for tok in token_ids:
            node = node.children.setdefault(tok, TrieNode())
        if node.item is not None:
            raise InferenceError(
                f"duplicate semantic ID for items {node.item!r} and {item!r}"
            )
        node.item = item
        self.leaf_count += 1

    def contains(self, token_ids: list[int]) -> bool:
        node = self.root
        for tok in token_ids:
            nxt = node.children.get(tok)
            if nxt is None:
                return False
            node = nxt
        return node.item is not None

    def paths(self) -> list[tuple[list[int], str]]:
        out: list[tuple[list[int], str]] = []

        def walk(node: TrieNode, prefix: list[int]) -> None:
            if node.item is not None:
                out.append((list(prefix), node.item))
            for tok in sorted(node.children):
                prefix.append(tok)
                walk(node.children[tok], prefix)
                prefix.pop()

        walk(self.root, [])
        return out


def build_trie(assignment: IndexAssignment, vocab: Vocabulary) -> IndexTrie:
    item_map = assignment.towers["item"]
    if not item_map:
        raise InferenceError("empty item assignment")
    depth = len(next(iter(item_map.values())).levels) + 1
    trie = IndexTrie(depth)
    for item in sorted(item_map):
        trie.insert(item_map[item].token_ids(vocab), item)
    return trie


def _step_logprobs(model: TransformerLM, seqs: list[list[int]],
                   pad_id: int) -> torch.Tensor:
    """Next-token log-probabilities for each sequence (full-vocab softmax)."""
    ids, mask = pad_batch(seqs, pad_id)
    with torch.no_grad():
        logits = model(ids)
    last = mask.sum(dim=1) - 1
    rows = logits[torch.arange(len(seqs)), last]
    return F.log_softmax(rows, dim=-1)


def constrained_beam_search(
    model: TransformerLM,
    vocab: Vocabulary,
    prompt_ids: list[int],
    trie: IndexTrie,
    beam_width: int,
    top_k: int,
) -> list[tuple[str, float]]:
    """Fixed-length beam search over the trie.

    Scores are sums of full-vocabulary log-probabilities along the path;
    candidate tokens at each step are exactly the current node's children.
    Final ties break by item id ascending, beam-internal ties by token path.
    """
    if beam_width < top_k:
        raise InferenceError(f"beam width {beam_width} < top_k {top_k}")
    if trie.leaf_count == 0:
        raise InferenceError("empty trie")
    # (score, token path, node); hypotheses all share the prompt prefix
    beams: list[tuple[float, tuple[int, ...], TrieNode]] = [(0.0, (), trie.root)]
    for _ in range(trie.depth):
        seqs = [prompt_ids + list(path) for _, path, _ in beams]
        logprobs = _step_logprobs(model, seqs, vocab.pad_id)
        grown: list[tuple[float, tuple[int, ...], TrieNode]] = []
        for row, (score, path, node) in enumerate(beams):
            for tok in sorted(node.children):
                grown.append((
                    score + float(logprobs[row, tok]),
                    path + (tok,),
                    node.children[tok],
                ))
        grown.sort(key=lambda h: (-h[0], h[1]))
        beams = grown[:beam_width]
    finished = [(node.item, score) for score, _, node in beams if node.item]
    finished.sort(key=lambda x: (-x[1], x[0]))
    return finished[:top_k]


def exhaustive_rank(
    model: TransformerLM,
    vocab: Vocabulary,
    prompt_ids: list[int],
    trie: IndexTrie,
    chunk: int = 64,
) -> list[tuple[str, float]]:
    """Score every catalog item's full ID sequence; exact full ranking."""
    paths = trie.paths()
    scored: list[tuple[str, float]] = []
    plen = len(prompt_ids)
    for start in range(0, len(paths), chunk):
        batch = paths[start : start + chunk]
        seqs = [prompt_ids + toks for toks, _ in batch]
        ids, _ = pad_batch(seqs, vocab.pad_id)
        with torch.no_grad():
            logp = F.log_softmax(model(ids), dim=-1)
        for row, (toks, item) in enumerate(batch):
            s = 0.0
            for j, tok in enumerate(toks):
                s += float(logp[row, plen - 1 + j, tok])
            scored.append((item, s))
    scored.sort(key=lambda x: (-x[1], x[0]))
    return scored


def rank_items(
    model: TransformerLM,
    vocab: Vocabulary,
    prompt_ids: list[int],
    trie: IndexTrie,
    top_k: int,
    beam_width: int | None = None,
    mode: str = "beam",
) -> list[tuple[str, float]]:
    """Ranked (item, score) list via beam or exhaustive decoding."""
    if mode == "exhaustive":
        return exhaustive_rank(model, vocab, prompt_ids, trie)[:top_k]
    if mode != "beam":
        raise InferenceError(f"unknown decode mode: {mode}")
    width = beam_width if beam_width is not None else max(2 * top_k, 20)
    width = max(width, top_k)
    return constrained_beam_search(model, vocab, prompt_ids, trie, width, top_k)


def recommend_topk(
    model: TransformerLM,
    vocab: Vocabulary,
    assignment: IndexAssignment,
    trie: IndexTrie,
    user: str,
    history: list[str],
    template,
    top_k: int,
    history_cap: int,
    beam_width: int | None = None,
    mode: str = "beam",
    filter_history: bool = False,
) -> list[tuple[str, float]]:
    """Top-K recommendation from a user's interaction history."""
    from .tasks import render_seqrec_prompt  # local import avoids a cycle

    if user not in assignment.towers["user"]:
        raise InferenceError(f"unknown user: {user!r}")
    if not history:
        raise InferenceError(f"user {user!r} has no history")
    prompt = render_seqrec_prompt(user, history, assignment, vocab, template, history_cap)
    fetch = top_k + len(set(history)) if filter_history else top_k
    width = beam_width if beam_width is not None else max(2 * top_k, 20)
    width = max(width, fetch)
    ranked = rank_items(model, vocab, prompt, trie, fetch, width, mode)
    if filter_history:
        seen = set(history)
        ranked = [(i, s) for i, s in ranked if i not in seen]
    return ranked[:top_k]
