"""Synthetic planted-structure corpus for desk-scale training and tests.

Items fall into latent clusters with cluster-specific vocabulary; each user
prefers one or two clusters and samples most interactions from them. The
generator emits the same raw review/metadata JSON-lines the real ingest path
reads, plus a truth file with the planted labels.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .config import CorpusConfig, SynthConfig
from .corpus import Contents, Interaction, assemble_all_content


class SynthConfigError(ValueError):
    pass


@dataclass
class SynthTruth:
    item_clusters: dict[str, int]
    user_preferred: dict[str, list[int]]
    in_cluster_prob: float


@dataclass
class SynthResult:
    interactions: list[Interaction]
    metadata: dict[str, dict]      # raw per-item records, ingest format
    contents: Contents
    truth: SynthTruth


_CONSONANTS = list("bdfgklmnprstvz")
_VOWELS = list("aeiou")


def _word(rng: np.random.Generator, syllables: int = 3) -> str:
    return "".join(
        _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        for _ in range(syllables)
    )


def _word_pool(rng: np.random.Generator, count: int) -> list[str]:
    pool: list[str] = []
    seen: set[str] = set()
    while len(pool) < count:
        w = _word(rng)
        if w not in seen:
            seen.add(w)
            pool.append(w)
    return pool


def generate_synthetic(cfg: SynthConfig, seed: int) -> SynthResult:
    """Deterministic planted-cluster corpus."""
    if cfg.clusters < 2:
        raise SynthConfigError("need at least 2 clusters")
    if cfg.items < cfg.clusters:
        raise SynthConfigError(f"items ({cfg.items}) < clusters ({cfg.clusters})")
    if cfg.min_len < 1 or cfg.max_len < cfg.min_len:
        raise SynthConfigError("bad sequence length range")
    rng = np.random.default_rng(seed)
    G, K, J = cfg.clusters, cfg.items, cfg.users

    pool = _word_pool(rng, G * (cfg.words_per_cluster + 2) + 16)
    shared = pool[:16]
    per_cluster = cfg.words_per_cluster + 2
    cluster_vocab = [
        pool[16 + g * per_cluster : 16 + (g + 1) * per_cluster] for g in range(G)
    ]
    brands = [v[0] for v in cluster_vocab]
    categories = [v[1] for v in cluster_vocab]
    cluster_words = [v[2:] for v in cluster_vocab]

    # partition items round-robin: every cluster gets at least floor(K/G)
    item_ids = [f"I{i:04d}" for i in range(K)]
    item_cluster = {item_ids[i]: i % G for i in range(K)}
    by_cluster: dict[int, list[str]] = {g: [] for g in range(G)}
    for item, g in item_cluster.items():
        by_cluster[g].append(item)

    metadata: dict[str, dict] = {}
    for item in item_ids:
        g = item_cluster[item]
        words = cluster_words[g]
        title = " ".join(rng.choice(words, size=3, replace=False))
        desc_n = int(rng.integers(5, 9))
        desc = " ".join(rng.choice(words, size=desc_n, replace=True))
        desc += " " + " ".join(rng.choice(shared, size=2, replace=False))
        metadata[item] = {
            "asin": item,
            "title": title,
            "description": desc,
            "brand": brands[g],
            "categories": [[categories[g]]],
        }

    user_ids = [f"U{u:04d}" for u in range(J)]
    user_preferred: dict[str, list[int]] = {}
    interactions: list[Interaction] = []
    p = cfg.in_cluster_prob
    for ui, user in enumerate(user_ids):
        n_pref = 1 + int(rng.random() < 0.5)
        preferred = sorted(rng.choice(G, size=n_pref, replace=False).tolist())
        user_preferred[user] = preferred
        others = [g for g in range(G) if g not in preferred]
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        base_ts = 1_000_000_000 + ui * 100_000
        for step in range(length):
            if rng.random() < p or not others:
                g = preferred[int(rng.integers(len(preferred)))]
            else:
                g = others[int(rng.integers(len(others)))]
            choices = by_cluster[g]
            item = choices[int(rng.integers(len(choices)))]
            words = cluster_words[item_cluster[item]]
            summary = " ".join(rng.choice(words, size=3, replace=True))
            review = " ".join(rng.choice(words, size=int(rng.integers(5, 9)), replace=True))
            interactions.append(Interaction(
                user_id=user,
                item_id=item,
                timestamp=base_ts + step * 3600,
                review_text=review,
                summary=summary,
            ))

    contents = assemble_all_content(interactions, metadata, CorpusConfig())
    truth = SynthTruth(item_clusters=item_cluster, user_preferred=user_preferred,
                       in_cluster_prob=p)
    return SynthResult(interactions=interactions, metadata=metadata,
                       contents=contents, truth=truth)


def write_synth_dir(cfg: SynthConfig, seed: int, out_dir: str) -> tuple[str, str, str]:
    """Generate and persist raw files: reviews.jsonl, meta.jsonl, truth.json."""
    result = generate_synthetic(cfg, seed)
    os.makedirs(out_dir, exist_ok=True)
    reviews_path = os.path.join(out_dir, "reviews.jsonl")
    meta_path = os.path.join(out_dir, "meta.jsonl")
    truth_path = os.path.join(out_dir, "truth.json")
    with open(reviews_path, "w", encoding="utf-8") as fh:
        for x in result.interactions:
            fh.write(json.dumps({
                "reviewerID": x.user_id,
                "asin": x.item_id,
                "unixReviewTime": x.timestamp,
                "reviewText": x.review_text,
                "summary": x.summary,
            }, sort_keys=True) + "\n")
    with open(meta_path, "w", encoding="utf-8") as fh:
        for item in sorted(result.metadata):
            fh.write(json.dumps(result.metadata[item], sort_keys=True) + "\n")
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump({
            "item_clusters": result.truth.item_clusters,
            "user_preferred": result.truth.user_preferred,
            "in_cluster_prob": result.truth.in_cluster_prob,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return reviews_path, meta_path, truth_path
