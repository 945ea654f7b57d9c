"""Corpus ingestion: review/metadata streams -> filtered sequences and splits.

Input format mirrors the Amazon review dumps: a reviews JSON-lines file with
keys {reviewerID, asin, unixReviewTime, reviewText, summary} and a metadata
JSON-lines file with keys {asin, title, description, brand, categories}.
"""

from __future__ import annotations

import json
import math
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator

from .config import CorpusConfig


class CorpusError(ValueError):
    pass


class MalformedLineError(CorpusError):
    def __init__(self, path: str, lineno: int, reason: str):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno


class EmptyCorpusError(CorpusError):
    """Non-empty input filtered down to nothing."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    review_text: str = ""
    summary: str = ""

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise CorpusError("user_id and item_id must be non-empty")
        if not math.isfinite(self.timestamp):
            raise CorpusError("timestamp must be finite")


@dataclass
class InteractionSequence:
    user_id: str
    items: list[str]
    timestamps: list[int]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class ContentRecord:
    entity_kind: str  # "item" | "user"
    entity_id: str
    text: str
    source_fields: dict[str, str] = field(default_factory=dict)


@dataclass
class Contents:
    """Content records plus the per-user summary timeline the tasks need."""
    items: dict[str, ContentRecord]
    users: dict[str, ContentRecord]
    user_summaries: dict[str, list[tuple[int, str]]]  # chronological (ts, summary)


@dataclass
class UserSplit:
    train: list[str]  # items 1..n-2, chronological
    valid: str        # item n-1
    test: str         # item n


@dataclass
class DatasetSplit:
    users: dict[str, UserSplit]
    item_ids: list[str]  # catalog, sorted
    user_ids: list[str]
    skipped_short: int = 0


@dataclass
class Dataset:
    """Everything downstream stages need, bundled for one run directory."""
    sequences: dict[str, InteractionSequence]
    split: DatasetSplit
    contents: Contents
    stats: dict


# -- ingestion ---------------------------------------------------------------


def _iter_json_lines(path: str, on_bad_line: str, stats: dict) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not a JSON object")
            except ValueError as exc:
                stats["malformed_lines"] += 1
                if on_bad_line == "abort":
                    raise MalformedLineError(path, lineno, str(exc)) from exc
                continue
            yield rec


def _parse_review(rec: dict) -> Interaction | None:
    user = str(rec.get("reviewerID", "") or "")
    item = str(rec.get("asin", "") or "")
    ts = rec.get("unixReviewTime")
    if not user or not item or ts is None:
        return None
    return Interaction(
        user_id=user,
        item_id=item,
        timestamp=int(ts),
        review_text=str(rec.get("reviewText", "") or ""),
        summary=str(rec.get("summary", "") or ""),
    )


def k_core_filter(
    interactions: list[Interaction], min_core: int, iterative: bool = True
) -> tuple[list[Interaction], int]:
    """Drop users/items with fewer than min_core interactions.

    Iterative mode repeats the deletion until a fixpoint: removing one
    under-threshold user can push an item below threshold and vice versa,
    so a single pass is not enough.
    """
    kept = interactions
    rounds = 0
    while True:
        rounds += 1
        user_count = Counter(x.user_id for x in kept)
        item_count = Counter(x.item_id for x in kept)
        bad_users = {u for u, c in user_count.items() if c < min_core}
        bad_items = {i for i, c in item_count.items() if c < min_core}
        if not bad_users and not bad_items:
            break
        kept = [
            x for x in kept
            if x.user_id not in bad_users and x.item_id not in bad_items
        ]
        if not iterative:
            break
    return kept, rounds


def ingest_reviews(
    reviews_path: str,
    metadata_path: str,
    cfg: CorpusConfig | None = None,
) -> tuple[list[Interaction], Contents, dict]:
    """Parse both streams, dedupe, k-core filter, and assemble content.

    Empty input streams yield an empty corpus with zero stats; a non-empty
    input that filters down to nothing raises EmptyCorpusError.
    """
    cfg = cfg or CorpusConfig()
    if cfg.min_core < 1:
        raise CorpusError("min_core must be >= 1")
    stats = {
        "review_lines": 0,
        "metadata_lines": 0,
        "malformed_lines": 0,
        "duplicates_removed": 0,
        "interactions_raw": 0,
        "interactions_kept": 0,
        "users_raw": 0,
        "items_raw": 0,
        "users_kept": 0,
        "items_kept": 0,
        "kcore_rounds": 0,
    }

    seen: set[tuple[str, str, int]] = set()
    interactions: list[Interaction] = []
    for rec in _iter_json_lines(reviews_path, cfg.on_bad_line, stats):
        stats["review_lines"] += 1
        inter = _parse_review(rec)
        if inter is None:
            stats["malformed_lines"] += 1
            if cfg.on_bad_line == "abort":
                raise MalformedLineError(
                    reviews_path, stats["review_lines"],
                    "missing reviewerID/asin/unixReviewTime",
                )
            continue
        key = (inter.user_id, inter.item_id, inter.timestamp)
        if key in seen:
            # exact duplicates removed; repeat purchases at new timestamps kept
            stats["duplicates_removed"] += 1
            continue
        seen.add(key)
        interactions.append(inter)

    metadata: dict[str, dict] = {}
    for rec in _iter_json_lines(metadata_path, cfg.on_bad_line, stats):
        stats["metadata_lines"] += 1
        asin = str(rec.get("asin", "") or "")
        if asin:
            metadata[asin] = rec

    stats["interactions_raw"] = len(interactions)
    stats["users_raw"] = len({x.user_id for x in interactions})
    stats["items_raw"] = len({x.item_id for x in interactions})

    if not interactions:
        # empty input is an identity case, not an error
        return [], Contents({}, {}, {}), stats

    kept, rounds = k_core_filter(interactions, cfg.min_core, cfg.iterative_core)
    stats["kcore_rounds"] = rounds
    stats["interactions_kept"] = len(kept)
    stats["users_kept"] = len({x.user_id for x in kept})
    stats["items_kept"] = len({x.item_id for x in kept})
    if not kept:
        raise EmptyCorpusError(
            f"all {len(interactions)} interactions removed by {cfg.min_core}-core filtering"
        )
    contents = assemble_all_content(kept, metadata, cfg)
    return kept, contents, stats


def build_sequences(interactions: Iterable[Interaction]) -> dict[str, InteractionSequence]:
    """Group by user in chronological order (stable for equal timestamps)."""
    per_user: dict[str, list[Interaction]] = defaultdict(list)
    for inter in interactions:
        per_user[inter.user_id].append(inter)
    out: dict[str, InteractionSequence] = {}
    for user in sorted(per_user):
        rows = sorted(per_user[user], key=lambda x: x.timestamp)
        out[user] = InteractionSequence(
            user_id=user,
            items=[r.item_id for r in rows],
            timestamps=[r.timestamp for r in rows],
        )
    return out


def build_splits(sequences: dict[str, InteractionSequence]) -> DatasetSplit:
    """Leave-one-out: last item is the test target, second-to-last validation."""
    users: dict[str, UserSplit] = {}
    skipped = 0
    items: set[str] = set()
    for user in sorted(sequences):
        seq = sequences[user]
        if len(seq) < 3:
            skipped += 1
            continue
        users[user] = UserSplit(
            train=list(seq.items[:-2]), valid=seq.items[-2], test=seq.items[-1]
        )
        items.update(seq.items)
    return DatasetSplit(
        users=users,
        item_ids=sorted(items),
        user_ids=sorted(users),
        skipped_short=skipped,
    )


# -- content records ---------------------------------------------------------


def _flatten_categories(raw) -> list[str]:
    """Amazon metadata nests categories as list-of-lists; keep unique order."""
    out: list[str] = []
    seen = set()
    stack = [raw]
    while stack:
        node = stack.pop(0)
        if isinstance(node, list):
            stack = list(node) + stack
        elif node:
            s = str(node).strip()
            if s and s not in seen:
                seen.add(s)
                out.append(s)
    return out


def assemble_content(
    entity_id: str,
    kind: str,
    raw_fields: dict,
    cfg: CorpusConfig | None = None,
) -> ContentRecord:
    """Render one entity's natural-language content string.

    Item text joins title, description, brand, and categories in that fixed
    order. User text joins the R most recent review summaries (chronological
    order) and the user's most frequent purchased categories. Entities with
    no usable fields fall back to "item <id>" / "user <id>" so the record is
    never empty.
    """
    cfg = cfg or CorpusConfig()
    if kind == "item":
        title = str(raw_fields.get("title", "") or "").strip()
        desc = raw_fields.get("description", "") or ""
        if isinstance(desc, list):
            desc = " ".join(str(x) for x in desc)
        desc = str(desc).strip()
        brand = str(raw_fields.get("brand", "") or "").strip()
        cats = _flatten_categories(raw_fields.get("categories", []))
        parts = [p for p in (title, desc, brand, " ".join(cats)) if p]
        source = {"title": title, "description": desc, "brand": brand,
                  "categories": " ".join(cats)}
    elif kind == "user":
        summaries: list[tuple[int, str]] = [
            (int(ts), str(s)) for ts, s in raw_fields.get("summaries", [])
            if str(s).strip()
        ]
        summaries.sort(key=lambda x: x[0])
        recent = summaries[-cfg.recent_summaries:]  # most recent R, oldest first
        cat_counts = Counter(raw_fields.get("purchased_categories", []))
        top = [c for c, _ in sorted(cat_counts.items(), key=lambda kv: (-kv[1], kv[0]))]
        top = top[: cfg.top_categories]
        parts = [s for _, s in recent] + ([" ".join(top)] if top else [])
        source = {"summaries": " | ".join(s for _, s in recent),
                  "categories": " ".join(top)}
    else:
        raise CorpusError(f"unknown entity kind: {kind}")

    text = " ".join(" ".join(parts).split())
    if not text:
        text = f"{kind} {entity_id}"
    return ContentRecord(entity_kind=kind, entity_id=entity_id, text=text,
                         source_fields=source)


def assemble_all_content(
    interactions: list[Interaction],
    metadata: dict[str, dict],
    cfg: CorpusConfig | None = None,
) -> Contents:
    """Content records for every retained entity.

    User-side fields come from the training portion only (everything except
    each user's last two interactions), so held-out targets never leak into
    user text or preference targets.
    """
    cfg = cfg or CorpusConfig()
    sequences = build_sequences(interactions)
    item_ids = sorted({x.item_id for x in interactions})
    item_content = {
        item: assemble_content(item, "item", metadata.get(item, {}), cfg)
        for item in item_ids
    }

    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for inter in interactions:
        by_user[inter.user_id].append(inter)

    user_content: dict[str, ContentRecord] = {}
    user_summaries: dict[str, list[tuple[int, str]]] = {}
    for user in sorted(sequences):
        rows = sorted(by_user[user], key=lambda x: x.timestamp)
        train_rows = rows[:-2] if len(rows) >= 3 else rows
        summaries = [(r.timestamp, r.summary) for r in train_rows if r.summary.strip()]
        user_summaries[user] = summaries
        cats: list[str] = []
        for r in train_rows:
            meta = metadata.get(r.item_id, {})
            cats.extend(_flatten_categories(meta.get("categories", [])))
        user_content[user] = assemble_content(
            user, "user",
            {"summaries": summaries, "purchased_categories": cats}, cfg,
        )
    return Contents(items=item_content, users=user_content,
                    user_summaries=user_summaries)


def build_dataset(
    interactions: list[Interaction],
    contents: Contents,
    stats: dict,
) -> Dataset:
    sequences = build_sequences(interactions)
    split = build_splits(sequences)
    stats = dict(stats)
    stats["sequences"] = len(sequences)
    stats["split_users"] = len(split.users)
    stats["split_skipped_short"] = split.skipped_short
    return Dataset(sequences=sequences, split=split, contents=contents, stats=stats)


# -- dataset directory I/O -----------------------------------------------------


def save_dataset(ds: Dataset, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)

    def dump(name: str, rows: Iterable[dict]) -> None:
        with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    dump("sequences.jsonl", (
        {"user_id": s.user_id, "items": s.items, "timestamps": s.timestamps}
        for s in (ds.sequences[u] for u in sorted(ds.sequences))
    ))
    dump("splits.jsonl", (
        {"user_id": u, "train": ds.split.users[u].train,
         "valid": ds.split.users[u].valid, "test": ds.split.users[u].test}
        for u in ds.split.user_ids
    ))
    dump("items.jsonl", (
        {"item_id": i, "text": ds.contents.items[i].text,
         "source_fields": ds.contents.items[i].source_fields}
        for i in ds.split.item_ids
    ))
    dump("users.jsonl", (
        {"user_id": u, "text": ds.contents.users[u].text,
         "source_fields": ds.contents.users[u].source_fields,
         "summaries": ds.contents.user_summaries.get(u, [])}
        for u in ds.split.user_ids
    ))
    with open(os.path.join(out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(ds.stats, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(dir_path: str) -> Dataset:
    def rows(name: str) -> Iterator[dict]:
        with open(os.path.join(dir_path, name), "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    yield json.loads(line)

    sequences = {
        r["user_id"]: InteractionSequence(r["user_id"], r["items"], r["timestamps"])
        for r in rows("sequences.jsonl")
    }
    users = {}
    for r in rows("splits.jsonl"):
        users[r["user_id"]] = UserSplit(train=r["train"], valid=r["valid"], test=r["test"])
    item_content = {}
    for r in rows("items.jsonl"):
        item_content[r["item_id"]] = ContentRecord(
            "item", r["item_id"], r["text"], r.get("source_fields", {}))
    user_content = {}
    user_summaries = {}
    for r in rows("users.jsonl"):
        user_content[r["user_id"]] = ContentRecord(
            "user", r["user_id"], r["text"], r.get("source_fields", {}))
        user_summaries[r["user_id"]] = [(int(t), s) for t, s in r.get("summaries", [])]
    with open(os.path.join(dir_path, "stats.json"), "r", encoding="utf-8") as fh:
        stats = json.load(fh)
    split = DatasetSplit(
        users=users,
        item_ids=sorted(item_content),
        user_ids=sorted(users),
        skipped_short=stats.get("split_skipped_short", 0),
    )
    contents = Contents(items=item_content, users=user_content,
                        user_summaries=user_summaries)
    return Dataset(sequences, split, contents, stats)
