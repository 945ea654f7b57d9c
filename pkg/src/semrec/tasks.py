"""Instruction-task synthesis: prompts with semantic-ID splices and loss masks.

Three task families drive fine-tuning: next-item prediction over a user's
history, next-user prediction for an item (co-purchase structure), and
review-summary prediction (preference structure). Rendering is pure; the
training stream shuffles a weighted mix of families each epoch.
"""

from __future__ import annotations

import importlib.resources
import json
import re
from dataclasses import dataclass, field

import numpy as np

from .backbone import Vocabulary
from .config import TaskConfig
from .corpus import Dataset
from .quantizer import IndexAssignment

FAMILIES = ("seqrec", "user_pred", "preference")

_PLACEHOLDERS = {
    "seqrec": {"user_id", "history"},
    "user_pred": {"item_id", "user_list"},
    "preference": {"user_id", "history"},
}

_SPLIT_RE = re.compile(r"(\{user_id\}|\{history\}|\{item_id\}|\{user_list\})")


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    family: str
    text: str

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise TaskError(f"unknown template family: {self.family}")
        used = {m[1:-1] for m in _SPLIT_RE.findall(self.text)}
        if not used <= _PLACEHOLDERS[self.family]:
            raise TaskError(
                f"template {self.id} uses placeholders {used} not allowed "
                f"for family {self.family}"
            )

    def segments(self) -> list[str]:
        """Alternating literal text and placeholder markers."""
        return [s for s in _SPLIT_RE.split(self.text) if s]


def load_templates(path: str | None = None) -> dict[str, list[PromptTemplate]]:
    """Template table by family; empty path loads the bundled set."""
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    else:
        raw = (
            importlib.resources.files("semrec.data")
            .joinpath("templates.json")
            .read_text(encoding="utf-8")
        )
    table: dict[str, list[PromptTemplate]] = {f: [] for f in FAMILIES}
    for line in raw.splitlines():
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        t = PromptTemplate(id=rec["id"], family=rec["family"], text=rec["text"])
        table[t.family].append(t)
    for family, items in table.items():
        if not items:
            raise TaskError(f"no templates for family {family}")
    return table


@dataclass
class PromptInstance:
    tokens: list[int]        # BOS + prompt + target
    loss_mask: list[bool]    # True exactly on target positions
    target_ids: list[int]
    family: str
    template_id: str
    prompt_len: int          # tokens[:prompt_len] is the generation context

    def __post_init__(self):
        if len(self.tokens) != len(self.loss_mask):
            raise TaskError("loss mask length mismatch")
        if self.tokens[self.prompt_len:] != self.target_ids:
            raise TaskError("target tokens must directly follow the prompt")
        expect = [False] * self.prompt_len + [True] * len(self.target_ids)
        if self.loss_mask != expect:
            raise TaskError("loss mask must cover exactly the target positions")


def _entity_tokens(
    assignment: IndexAssignment, tower: str, entity: str, vocab: Vocabulary
) -> list[int]:
    try:
        sid = assignment.id_of(tower, entity)
    except KeyError as exc:
        raise TaskError(f"no semantic ID assigned for {tower} {entity!r}") from exc
    return sid.token_ids(vocab)


def _render_prompt(
    template: PromptTemplate,
    vocab: Vocabulary,
    fills: dict[str, list[int]],
) -> list[int]:
    out = [vocab.bos_id]
    for seg in template.segments():
        marker = seg[1:-1] if seg.startswith("{") and seg.endswith("}") else None
        if marker is not None:
            out.extend(fills[marker])
        else:
            out.extend(vocab.encode(seg))
    return out


def _finish(
    prompt: list[int], target: list[int], family: str, template_id: str
) -> PromptInstance:
    return PromptInstance(
        tokens=prompt + target,
        loss_mask=[False] * len(prompt) + [True] * len(target),
        target_ids=target,
        family=family,
        template_id=template_id,
        prompt_len=len(prompt),
    )


def render_seqrec_prompt(
    user: str,
    history: list[str],
    assignment: IndexAssignment,
    vocab: Vocabulary,
    template: PromptTemplate,
    history_cap: int,
) -> list[int]:
    """Prompt-only rendering (used for both training and generation)."""
    if not history:
        raise TaskError("seqrec needs a non-empty history")
    recent = history[-history_cap:]
    hist_tokens: list[int] = []
    for item in recent:
        hist_tokens.extend(_entity_tokens(assignment, "item", item, vocab))
    fills = {
        "user_id": _entity_tokens(assignment, "user", user, vocab),
        "history": hist_tokens,
    }
    return _render_prompt(template, vocab, fills)


def render_seqrec(
    user: str,
    history: list[str],
    target_item: str,
    assignment: IndexAssignment,
    vocab: Vocabulary,
    template: PromptTemplate,
    history_cap: int = 20,
) -> PromptInstance:
    prompt = render_seqrec_prompt(user, history, assignment, vocab, template, history_cap)
    target = _entity_tokens(assignment, "item", target_item, vocab)
    return _finish(prompt, target, "seqrec", template.id)


def render_user_prediction(
    item: str,
    purchasers: list[str],
    assignment: IndexAssignment,
    vocab: Vocabulary,
    template: PromptTemplate,
    list_cap: int = 20,
) -> PromptInstance:
    """Purchasers are time-ordered; the last one is the prediction target."""
    if len(purchasers) < 2:
        raise TaskError("user prediction needs at least 2 purchasers")
    listed = purchasers[max(0, len(purchasers) - 1 - list_cap):-1]
    target_user = purchasers[-1]
    user_tokens: list[int] = []
    for u in listed:
        user_tokens.extend(_entity_tokens(assignment, "user", u, vocab))
    fills = {
        "item_id": _entity_tokens(assignment, "item", item, vocab),
        "user_list": user_tokens,
    }
    prompt = _render_prompt(template, vocab, fills)
    target = _entity_tokens(assignment, "user", target_user, vocab)
    return _finish(prompt, target, "user_pred", template.id)


def render_preference(
    user: str,
    history: list[str],
    summary: str,
    assignment: IndexAssignment,
    vocab: Vocabulary,
    template: PromptTemplate,
    history_cap: int = 20,
    summary_cap: int = 24,
) -> PromptInstance:
    if not summary.strip():
        raise TaskError("preference needs a non-empty summary")
    prompt = render_seqrec_prompt(user, history, assignment, vocab, template, history_cap)
    target = vocab.encode(summary)[:summary_cap]
    if not target:
        raise TaskError("summary produced no tokens")
    return _finish(prompt, target, "preference", template.id)


# -- training stream -----------------------------------------------------------


@dataclass(frozen=True)
class TaskSample:
    family: str
    user: str = ""
    item: str = ""
    history: tuple = ()
    purchasers: tuple = ()
    target_item: str = ""
    target_text: str = ""


@dataclass
class TaskPools:
    seqrec: list[TaskSample] = field(default_factory=list)
    user_pred: list[TaskSample] = field(default_factory=list)
    preference: list[TaskSample] = field(default_factory=list)
    skipped_user_pred: int = 0
    skipped_preference: int = 0

    def by_family(self, family: str) -> list[TaskSample]:
        return getattr(self, family)


def build_pools(dataset: Dataset) -> TaskPools:
    """Enumerate all training samples once; leaks nothing past the train cut.

    seqrec covers every next-item pair inside each user's train portion.
    user_pred orders purchasers of an item by first train-portion purchase.
    preference targets each user's most recent train-portion summary.
    """
    pools = TaskPools()
    split = dataset.split
    for user in split.user_ids:
        train = split.users[user].train
        for k in range(1, len(train)):
            pools.seqrec.append(TaskSample(
                family="seqrec", user=user,
                history=tuple(train[:k]), target_item=train[k],
            ))

    first_buy: dict[str, dict[str, int]] = {}
    for user in split.user_ids:
        seq = dataset.sequences[user]
        budget = len(split.users[user].train)
        for pos in range(budget):
            item = seq.items[pos]
            ts = seq.timestamps[pos]
            slot = first_buy.setdefault(item, {})
            if user not in slot:
                slot[user] = ts
    for item in sorted(first_buy):
        buyers = sorted(first_buy[item].items(), key=lambda kv: (kv[1], kv[0]))
        ordered = tuple(u for u, _ in buyers)
        if len(ordered) < 2:
            pools.skipped_user_pred += 1
            continue
        pools.user_pred.append(TaskSample(
            family="user_pred", item=item, purchasers=ordered,
        ))

    for user in split.user_ids:
        summaries = dataset.contents.user_summaries.get(user, [])
        summaries = [s for _, s in summaries if s.strip()]
        if not summaries:
            pools.skipped_preference += 1
            continue
        pools.preference.append(TaskSample(
            family="preference", user=user,
            history=tuple(split.users[user].train),
            target_text=summaries[-1],
        ))
    return pools


def stream_epoch(
    pools: TaskPools,
    cfg: TaskConfig,
    batch_size: int,
    seed: int,
    epoch: int,
    n_templates: dict[str, int],
) -> list[list[tuple[TaskSample, int]]]:
    """One epoch of shuffled batches: (sample, template index) pairs.

    Every seqrec pair appears exactly once; the other families are sampled
    with replacement so family counts track the mix weights. Deterministic
    in (seed, epoch).
    """
    weights = {
        "seqrec": cfg.mix_seqrec,
        "user_pred": cfg.mix_user_pred,
        "preference": cfg.mix_preference,
    }
    if any(w < 0 for w in weights.values()) or not any(weights.values()):
        raise TaskError("mix weights must be >= 0 and not all zero")
    if batch_size < 1:
        raise TaskError("batch_size must be >= 1")

    rng = np.random.default_rng([seed, epoch, 0xC0DE])
    chosen: list[TaskSample] = []
    # scale family counts off seqrec (covered exactly once per epoch), or off
    # the first active family when seqrec is weighted out
    base = None
    if weights["seqrec"] > 0 and pools.seqrec:
        base = len(pools.seqrec) / weights["seqrec"]
    else:
        for family in FAMILIES:
            pool = pools.by_family(family)
            if weights[family] > 0 and pool:
                base = len(pool) / weights[family]
                break
    if base is None:
        raise TaskError("no training samples available for the requested mix")

    for family in FAMILIES:
        pool = pools.by_family(family)
        w = weights[family]
        if w <= 0 or not pool:
            continue
        if family == "seqrec":
            chosen.extend(pool)
        else:
            count = int(round(base * w))
            idx = rng.integers(0, len(pool), size=count)
            chosen.extend(pool[i] for i in idx)

    if not chosen:
        raise TaskError("no training samples available for the requested mix")
    order = rng.permutation(len(chosen))
    t_idx = {f: rng.integers(0, max(1, n_templates.get(f, 1)), size=len(chosen))
             for f in FAMILIES}
    shuffled = [
        (chosen[i], int(t_idx[chosen[i].family][pos]))
        for pos, i in enumerate(order)
    ]
    return [
        shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)
    ]


def render_sample(
    sample: TaskSample,
    template: PromptTemplate,
    assignment: IndexAssignment,
    vocab: Vocabulary,
    cfg: TaskConfig,
) -> PromptInstance:
    if sample.family == "seqrec":
        return render_seqrec(
            sample.user, list(sample.history), sample.target_item,
            assignment, vocab, template, cfg.history_cap,
        )
    if sample.family == "user_pred":
        return render_user_prediction(
            sample.item, list(sample.purchasers),
            assignment, vocab, template, cfg.history_cap,
        )
    if sample.family == "preference":
        return render_preference(
            sample.user, list(sample.history), sample.target_text,
            assignment, vocab, template, cfg.history_cap, cfg.summary_cap,
        )
    raise TaskError(f"unknown family: {sample.family}")
