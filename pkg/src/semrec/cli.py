"""Command-line pipeline driver.

Every subcommand operates inside one run directory: datasets, checkpoints,
logs, and reports all land under --out, a manifest records their checksums,
and the fully resolved config is echoed beside the outputs. Exit codes:
0 ok, 2 usage/config error, 3 missing stage dependency, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import torch

from .config import ConfigError, RunConfig, apply_kv, load_config
from .corpus import build_dataset, ingest_reviews, load_dataset, save_dataset
from .evaluation import evaluate
from .inference import build_trie, recommend_topk
from .synth import write_synth_dir
from .tasks import load_templates
from .trainer import (
    Bundle,
    MetricsLog,
    load_bundle,
    pretrain_backbone,
    save_bundle,
    train_joint,
    warmup_quantizer,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_RUNTIME = 4


class MissingArtifactError(RuntimeError):
    def __init__(self, relpath: str, hint: str):
        super().__init__(f"missing artifact: {relpath} ({hint})")


def _require(run_dir: str, relpath: str, hint: str) -> str:
    path = os.path.join(run_dir, relpath)
    if not os.path.exists(path):
        raise MissingArtifactError(relpath, hint)
    return path


def _echo_config(cfg: RunConfig, run_dir: str) -> None:
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, "config_resolved.ini"), "w",
              encoding="utf-8") as fh:
        fh.write(cfg.to_ini())


def _update_manifest(run_dir: str) -> None:
    entries = {}
    for root, _, files in os.walk(run_dir):
        for name in sorted(files):
            path = os.path.join(root, name)
            rel = os.path.relpath(path, run_dir)
            if rel == "manifest.json":
                continue
            h = hashlib.sha256()
            with open(path, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
            entries[rel] = h.hexdigest()
    with open(os.path.join(run_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump({"artifacts": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_stage_bundle(run_dir: str, name: str, hint: str,
                       overrides: list[str]) -> Bundle:
    """Load a stage checkpoint; its embedded config (plus any command-line
    overrides) governs the stage, and is echoed beside the outputs."""
    path = _require(run_dir, os.path.join("checkpoints", name), hint)
    bundle = load_bundle(path)
    for item in overrides:
        dotted, raw = item.split("=", 1)
        apply_kv(bundle.cfg, dotted.strip(), raw)
    bundle.cfg.validate()
    _echo_config(bundle.cfg, run_dir)
    _setup(bundle.cfg)
    return bundle


def _setup(cfg: RunConfig) -> None:
    if cfg.deterministic:
        torch.set_num_threads(1)


# -- subcommands -----------------------------------------------------------------


def cmd_ingest(args, cfg: RunConfig) -> int:
    interactions, contents, stats = ingest_reviews(args.reviews, args.meta, cfg.corpus)
    ds = build_dataset(interactions, contents, stats)
    save_dataset(ds, os.path.join(args.out, "dataset"))
    print(f"ingested {stats['interactions_kept']} interactions, "
          f"{stats['users_kept']} users, {stats['items_kept']} items")
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    raw_dir = os.path.join(args.out, "raw")
    reviews, meta, truth = write_synth_dir(cfg.synth, cfg.seed, raw_dir)
    interactions, contents, stats = ingest_reviews(reviews, meta, cfg.corpus)
    ds = build_dataset(interactions, contents, stats)
    save_dataset(ds, os.path.join(args.out, "dataset"))
    print(f"synthesized {stats['interactions_kept']} interactions over "
          f"{stats['items_kept']} items for {stats['users_kept']} users "
          f"(truth: {os.path.relpath(truth, args.out)})")
    return EXIT_OK


def cmd_pretrain(args, cfg: RunConfig) -> int:
    ds_dir = _require(args.out, "dataset", "run 'ingest' or 'synth' first")
    dataset = load_dataset(ds_dir)
    log = MetricsLog(os.path.join(args.out, "logs", "metrics.jsonl"))
    bundle = pretrain_backbone(dataset, cfg, log)
    save_bundle(bundle, os.path.join(args.out, "checkpoints", "pretrain.ckpt"))
    last = [l for l in log.lines if l["stage"] == "pretrain"]
    if last:
        print(f"pretrained {bundle.epochs_done['pretrain']} epochs, "
              f"final LM loss {last[-1]['L_LLM']:.4f}")
    else:
        print("pretrain ran 0 epochs (identity)")
    return EXIT_OK


def cmd_warmup(args, cfg_unused) -> int:
    bundle = _load_stage_bundle(args.out, "pretrain.ckpt",
                                "run 'pretrain' first", args.all_overrides)
    dataset = load_dataset(_require(args.out, "dataset", "run 'synth' first"))
    log = MetricsLog(os.path.join(args.out, "logs", "metrics.jsonl"))
    bundle = warmup_quantizer(bundle, dataset, log)
    save_bundle(bundle, os.path.join(args.out, "checkpoints", "warmup.ckpt"))
    diag = bundle.warmup_diag
    print("warm-up residuals (item):",
          " ".join(f"{v:.4f}" for v in diag.get("item_final_residual_sq", [])))
    return EXIT_OK


def cmd_train(args, cfg_unused) -> int:
    name = "joint.ckpt" if args.resume else "warmup.ckpt"
    hint = "run 'train' first" if args.resume else "run 'warmup' first"
    bundle = _load_stage_bundle(args.out, name, hint, args.all_overrides)
    dataset = load_dataset(_require(args.out, "dataset", "run 'synth' first"))
    log = MetricsLog(os.path.join(args.out, "logs", "metrics.jsonl"))
    bundle = train_joint(bundle, dataset, log, run_dir=args.out)
    done = bundle.epochs_done.get("joint", 0)
    print(f"joint training complete: {done} epochs, "
          f"{bundle.reindex_count} re-index passes")
    return EXIT_OK


def cmd_evaluate(args, cfg_unused) -> int:
    bundle = _load_stage_bundle(args.out, "joint.ckpt",
                                "run 'train' first", args.all_overrides)
    dataset = load_dataset(_require(args.out, "dataset", "run 'synth' first"))
    if bundle.assignment is None:
        raise MissingArtifactError("checkpoints/joint.ckpt",
                                   "checkpoint has no ID assignment")
    templates = load_templates(bundle.cfg.tasks.template_file or None)["seqrec"]
    trie = build_trie(bundle.assignment, bundle.vocab)
    report = evaluate(
        dataset, bundle.model, bundle.vocab, bundle.assignment, trie,
        templates, bundle.cfg.eval, bundle.cfg.tasks,
        config_hash=bundle.cfg.config_hash(), split=args.split,
    )
    out_dir = os.path.join(args.out, "eval")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"report_{args.split}.json"), "w",
              encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    text = report.to_text()
    with open(os.path.join(out_dir, f"report_{args.split}.txt"), "w",
              encoding="utf-8") as fh:
        fh.write(text + "\n")
    print(text)
    return EXIT_OK


def cmd_recommend(args, cfg_unused) -> int:
    bundle = _load_stage_bundle(args.out, "joint.ckpt",
                                "run 'train' first", args.all_overrides)
    dataset = load_dataset(_require(args.out, "dataset", "run 'synth' first"))
    if args.user not in dataset.split.users:
        raise ValueError(f"unknown user: {args.user!r}")
    if bundle.assignment is None:
        raise MissingArtifactError("checkpoints/joint.ckpt",
                                   "checkpoint has no ID assignment")
    template = load_templates(bundle.cfg.tasks.template_file or None)["seqrec"][0]
    trie = build_trie(bundle.assignment, bundle.vocab)
    us = dataset.split.users[args.user]
    history = us.train + [us.valid, us.test]
    ranked = recommend_topk(
        bundle.model, bundle.vocab, bundle.assignment, trie,
        args.user, history, template, args.k, bundle.cfg.tasks.history_cap,
        mode=bundle.cfg.eval.decode_mode,
        filter_history=bundle.cfg.eval.filter_history,
    )
    path = os.path.join(args.out, "recommendations.jsonl")
    with open(path, "a", encoding="utf-8") as fh:
        for rank, (item, score) in enumerate(ranked, start=1):
            row = {"user_id": args.user, "rank": rank, "item_id": item,
                   "score": score}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
            print(f"{rank:>3}  {item}  {score:.4f}")
    return EXIT_OK


def cmd_inspect_id(args, cfg_unused) -> int:
    bundle = _load_stage_bundle(args.out, "joint.ckpt",
                                "run 'train' first", args.all_overrides)
    dataset = load_dataset(_require(args.out, "dataset", "run 'synth' first"))
    if bundle.assignment is None:
        raise MissingArtifactError("checkpoints/joint.ckpt",
                                   "checkpoint has no ID assignment")
    tower = args.tower
    mapping = bundle.assignment.towers[tower]
    if args.entity not in mapping:
        raise ValueError(f"no {tower} entity {args.entity!r} in the assignment")
    sid = mapping[args.entity]
    print(f"{tower} {args.entity}: {sid.render()}")

    contents = dataset.contents.items if tower == "item" else dataset.contents.users
    q = bundle.item_q if tower == "item" else bundle.user_q
    from .backbone import embed_content
    with torch.no_grad():
        emb = embed_content(bundle.model,
                            bundle.vocab.encode(contents[args.entity].text))
        z = q.project(emb)
        books = [b.detach() for b in q.codebook_tensors()]
        r = z
        for m, book in enumerate(books):
            dists = ((r.unsqueeze(0) - book) ** 2).sum(dim=-1)
            order = torch.argsort(dists)
            chosen = int(order[0])
            runner = int(order[1]) if book.shape[0] > 1 else chosen
            print(f"  level {m}: code {chosen} dist2 {float(dists[chosen]):.6f} "
                  f"(runner-up {runner} at {float(dists[runner]):.6f})")
            r = r - book[chosen]
    collisions = [e for e, s in mapping.items()
                  if s.levels == sid.levels and e != args.entity]
    if collisions:
        print(f"  collision set ({len(collisions)} others): "
              + ", ".join(sorted(collisions)[:10]))
    else:
        print("  collision set: none (unique level tuple)")
    return EXIT_OK


def cmd_report(args, cfg_unused) -> int:
    log_path = _require(args.out, os.path.join("logs", "metrics.jsonl"),
                        "run a training stage first")
    with open(log_path, "r", encoding="utf-8") as fh:
        lines = [json.loads(l) for l in fh if l.strip()]
    by_stage: dict[str, list[dict]] = {}
    for line in lines:
        by_stage.setdefault(line["stage"], []).append(line)
    for stage in ("pretrain", "warmup", "joint"):
        rows = by_stage.get(stage, [])
        if not rows:
            continue
        last = rows[-1]
        print(f"{stage}: {len(rows)} epochs", end="")
        for key in ("L_LLM", "L_Token", "L_total", "HR@10_valid"):
            if last.get(key) is not None:
                print(f"  {key}={last[key]:.4f}", end="")
        print()
    for split in ("valid", "test"):
        path = os.path.join(args.out, "eval", f"report_{split}.json")
        if os.path.exists(path):
            with open(path, "r", encoding="utf-8") as fh:
                rep = json.load(fh)
            avg = " ".join(f"{k}={v:.4f}" for k, v in sorted(rep["averaged"].items()))
            print(f"eval[{split}] over {rep['user_count']} users: {avg}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semrec",
        description="Generative recommender with twin-tower semantic IDs",
    )
    parser.add_argument("--config", help="INI config file")
    parser.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    parser.add_argument("--preset", default="desk", choices=("desk", "toy"),
                        help="base config preset")
    parser.add_argument("--seed", type=int, help="override run seed")
    parser.add_argument("--out", default="run", help="run directory")
    parser.add_argument("--deterministic", action="store_true",
                        help="single-threaded reproducible mode")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="build a dataset from review/metadata dumps")
    p.add_argument("--reviews", required=True)
    p.add_argument("--meta", required=True)
    p.set_defaults(func=cmd_ingest, needs_cfg=True)

    p = sub.add_parser("synth", help="generate the planted-cluster dataset")
    p.set_defaults(func=cmd_synth, needs_cfg=True)

    p = sub.add_parser("pretrain", help="stage 0: backbone pretraining")
    p.set_defaults(func=cmd_pretrain, needs_cfg=True)

    p = sub.add_parser("warmup", help="stage 1: quantizer warm-up")
    p.set_defaults(func=cmd_warmup, needs_cfg=False)

    p = sub.add_parser("train", help="stage 2: joint fine-tuning")
    p.add_argument("--resume", action="store_true",
                   help="continue from the latest joint checkpoint")
    p.set_defaults(func=cmd_train, needs_cfg=False)

    p = sub.add_parser("evaluate", help="leave-one-out metrics")
    p.add_argument("--split", default="test", choices=("test", "valid"))
    p.set_defaults(func=cmd_evaluate, needs_cfg=False)

    p = sub.add_parser("recommend", help="top-K items for one user")
    p.add_argument("--user", required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_recommend, needs_cfg=False)

    p = sub.add_parser("inspect-id", help="show an entity's semantic ID")
    p.add_argument("--entity", required=True)
    p.add_argument("--tower", default="item", choices=("item", "user"))
    p.set_defaults(func=cmd_inspect_id, needs_cfg=False)

    p = sub.add_parser("report", help="summarize logs and eval reports")
    p.set_defaults(func=cmd_report, needs_cfg=False)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = list(args.set or [])
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.deterministic:
            overrides.append("deterministic=true")
        cfg = load_config(args.config, overrides, preset=args.preset)
        args.all_overrides = overrides
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _setup(cfg)
    try:
        if args.needs_cfg:
            _echo_config(cfg, args.out)
        else:
            os.makedirs(args.out, exist_ok=True)
        code = args.func(args, cfg)
        _update_manifest(args.out)
        return code
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
