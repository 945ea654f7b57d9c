"""Leave-one-out evaluation: HR@K and NDCG@K averaged over templates.

A miss (target absent from the returned ranking) counts as rank infinity,
contributing 0 to both metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

from .backbone import TransformerLM, Vocabulary
from .config import EvalConfig, TaskConfig
from .corpus import Dataset
from .inference import IndexTrie, rank_items
from .quantizer import IndexAssignment
from .tasks import PromptTemplate, render_seqrec_prompt


def hr_at_k(ranked: list[str], target: str, k: int) -> float:
    return 1.0 if target in ranked[:k] else 0.0


def ndcg_at_k(ranked: list[str], target: str, k: int) -> float:
    """Single relevant item, so the ideal DCG is 1 and NDCG = 1/log2(rank+1)."""
    for rank, item in enumerate(ranked[:k], start=1):
        if item == target:
            return 1.0 / math.log2(rank + 1)
    return 0.0


def collision_rate(level_tuples: dict[str, tuple]) -> float:
    """Fraction of entities whose level tuple is shared with at least one other."""
    if not level_tuples:
        return 0.0
    counts: dict[tuple, int] = {}
    for t in level_tuples.values():
        counts[t] = counts.get(t, 0) + 1
    shared = sum(1 for t in level_tuples.values() if counts[t] > 1)
    return shared / len(level_tuples)


def assignment_collision_rates(assignment: IndexAssignment) -> dict[str, float]:
    out = {}
    for tower, mapping in assignment.towers.items():
        out[tower] = collision_rate({e: sid.levels for e, sid in mapping.items()})
    return out


@dataclass
class MetricReport:
    per_template: dict[str, dict[str, float]]
    averaged: dict[str, float]
    user_count: int
    decode_mode: str
    collision_rates: dict[str, float]
    config_hash: str
    split: str = "test"
    in_domain_rate: float = 1.0
    extras: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "per_template": self.per_template,
            "averaged": self.averaged,
            "user_count": self.user_count,
            "decode_mode": self.decode_mode,
            "collision_rates": self.collision_rates,
            "config_hash": self.config_hash,
            "split": self.split,
            "in_domain_rate": self.in_domain_rate,
            "extras": self.extras,
        }, indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = [
            f"split={self.split} users={self.user_count} "
            f"decode={self.decode_mode} config={self.config_hash}",
            f"collision rates: "
            + " ".join(f"{t}={r:.4f}" for t, r in sorted(self.collision_rates.items())),
            f"in-domain outputs: {self.in_domain_rate:.4f}",
            "",
            f"{'metric':<10} " + " ".join(f"{tid:>12}" for tid in sorted(self.per_template))
            + f" {'averaged':>12}",
        ]
        for metric in sorted(self.averaged):
            row = f"{metric:<10} "
            row += " ".join(
                f"{self.per_template[tid][metric]:>12.4f}"
                for tid in sorted(self.per_template)
            )
            row += f" {self.averaged[metric]:>12.4f}"
            lines.append(row)
        return "\n".join(lines)


def evaluate(
    dataset: Dataset,
    model: TransformerLM,
    vocab: Vocabulary,
    assignment: IndexAssignment,
    trie: IndexTrie,
    templates: list[PromptTemplate],
    eval_cfg: EvalConfig,
    task_cfg: TaskConfig,
    config_hash: str = "",
    split: str = "test",
    users: list[str] | None = None,
) -> MetricReport:
    """Rank the held-out target for every user, per template, then average.

    split="test" ranks the most recent item given everything before it;
    split="valid" ranks the second most recent given the train portion.
    """
    if not templates:
        raise ValueError("need at least one template")
    roster = users if users is not None else dataset.split.user_ids
    if not roster:
        raise ValueError("empty evaluation split")
    k_max = max(max(eval_cfg.hr_k), max(eval_cfg.ndcg_k))
    catalog = set(dataset.split.item_ids)

    per_template: dict[str, dict[str, float]] = {}
    in_domain_ok = 0
    in_domain_total = 0
    for template in templates:
        sums = {f"HR@{k}": 0.0 for k in eval_cfg.hr_k}
        sums.update({f"NDCG@{k}": 0.0 for k in eval_cfg.ndcg_k})
        n = 0
        for user in roster:
            us = dataset.split.users[user]
            if split == "test":
                history, target = us.train + [us.valid], us.test
            elif split == "valid":
                history, target = list(us.train), us.valid
            else:
                raise ValueError(f"unknown split: {split}")
            prompt = render_seqrec_prompt(
                user, history, assignment, vocab, template, task_cfg.history_cap
            )
            width = max(2 * k_max, eval_cfg.beam_width)
            ranked_pairs = rank_items(
                model, vocab, prompt, trie, k_max, width, eval_cfg.decode_mode
            )
            ranked = [item for item, _ in ranked_pairs]
            if eval_cfg.filter_history:
                seen = set(history)
                ranked = [i for i in ranked if i not in seen]
            in_domain_total += len(ranked)
            in_domain_ok += sum(1 for i in ranked if i in catalog)
            for k in eval_cfg.hr_k:
                sums[f"HR@{k}"] += hr_at_k(ranked, target, k)
            for k in eval_cfg.ndcg_k:
                sums[f"NDCG@{k}"] += ndcg_at_k(ranked, target, k)
            n += 1
        per_template[template.id] = {m: v / n for m, v in sums.items()}

    metric_names = list(next(iter(per_template.values())))
    averaged = {
        m: sum(per_template[tid][m] for tid in per_template) / len(per_template)
        for m in metric_names
    }
    return MetricReport(
        per_template=per_template,
        averaged=averaged,
        user_count=len(roster),
        decode_mode=eval_cfg.decode_mode,
        collision_rates=assignment_collision_rates(assignment),
        config_hash=config_hash,
        split=split,
        in_domain_rate=(in_domain_ok / in_domain_total) if in_domain_total else 1.0,
    )
