"""Staged optimization: backbone pretraining, quantizer warm-up, joint tuning.

Stage 0 bootstraps the language backbone on entity content text (a randomly
initialized model would hand the quantizer meaningless embeddings). Stage 1
warm-starts both towers with level-wise k-means and refines them against the
frozen backbone. Stage 2 runs the instruction mix under the combined loss,
re-deriving semantic IDs from the evolving backbone every few epochs.

Determinism contract: with a fixed seed and single-threaded mode, every
stage's metric log (minus wall_time) is identical across runs, and resuming
from a checkpoint reproduces the uninterrupted run exactly. All shuffling is
re-derived from (seed, stage, epoch), never from ambient RNG state.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import alignment
from .backbone import (
    GradientError,
    TransformerLM,
    Vocabulary,
    embed_content_batch,
    grad_step,
    nll_loss,
    pad_batch,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .corpus import Dataset
from .evaluation import assignment_collision_rates, evaluate
from .inference import build_trie
from .quantizer import (
    IndexAssignment,
    SemanticId,
    TowerConfig,
    TowerQuantizer,
    compute_embeddings,
    kmeans_init,
    lloyd_refresh,
    reindex,
    split_quantization_loss,
)
from .tasks import PromptInstance, build_pools, load_templates, render_sample, stream_epoch


class TrainerError(RuntimeError):
    pass


class DivergenceError(TrainerError):
    pass


def total_loss(l_llm, l_dmvae, alpha: float):
    """Combined objective: language-model loss plus weighted alignment loss."""
    return l_llm + alpha * l_dmvae


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class MetricsLog:
    """JSON-lines metric stream, kept in memory and optionally on disk."""

    def __init__(self, path: str | None = None):
        self.path = path
        self.lines: list[dict] = []
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)

    def log(self, record: dict) -> None:
        self.lines.append(record)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass
class Bundle:
    """Mutable training state shared across stages."""
    cfg: RunConfig
    vocab: Vocabulary
    model: TransformerLM
    item_q: TowerQuantizer | None = None
    user_q: TowerQuantizer | None = None
    assignment: IndexAssignment | None = None
    stage: str = "pretrain"
    epochs_done: dict = field(default_factory=dict)
    reindex_count: int = 0
    opt_state: dict | None = None  # pending optimizer state from a checkpoint
    warmup_diag: dict = field(default_factory=dict)

    def named_trainables(self) -> list[tuple[str, torch.nn.Parameter]]:
        named = [(f"model.{n}", p) for n, p in self.model.named_parameters()]
        if self.item_q is not None:
            named += [(f"item_q.{n}", p) for n, p in self.item_q.named_parameters()]
        if self.user_q is not None:
            named += [(f"user_q.{n}", p) for n, p in self.user_q.named_parameters()]
        return named


def _epoch_rng(seed: int, stage: str, epoch: int) -> np.random.Generator:
    tag = int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "big")
    return np.random.default_rng([seed, tag, epoch])


# -- stage 0: backbone pretraining ----------------------------------------------


def content_texts(dataset: Dataset) -> list[str]:
    items = [dataset.contents.items[i].text for i in dataset.split.item_ids]
    users = [dataset.contents.users[u].text for u in dataset.split.user_ids]
    return items + users


def pretrain_backbone(
    dataset: Dataset, cfg: RunConfig, log: MetricsLog | None = None,
    epochs: int | None = None,
) -> Bundle:
    """Next-token pretraining over the content corpus; every tenth record is
    held out to track generalization."""
    log = log or MetricsLog()
    bc = cfg.backbone
    texts = content_texts(dataset)
    if not texts:
        raise TrainerError("no content texts to pretrain on")
    vocab = Vocabulary.build(texts, min_freq=bc.min_freq)
    torch.manual_seed(cfg.seed)
    model = TransformerLM(
        len(vocab), bc.dim, bc.n_layers, bc.n_heads, bc.max_seq_len, bc.dropout
    )
    bundle = Bundle(cfg=cfg, vocab=vocab, model=model)

    seqs = [
        [vocab.bos_id] + vocab.encode(t)[: bc.max_seq_len - 1] for t in texts
    ]
    train_seqs = [s for i, s in enumerate(seqs) if i % 10 != 9]
    val_seqs = [s for i, s in enumerate(seqs) if i % 10 == 9] or train_seqs[:1]

    n_epochs = cfg.training.pretrain_epochs if epochs is None else epochs
    if n_epochs == 0:
        bundle.epochs_done["pretrain"] = 0
        return bundle
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=cfg.training.pretrain_lr,
        weight_decay=cfg.training.weight_decay,
    )
    named = bundle.named_trainables()
    B = cfg.training.batch_size
    for epoch in range(n_epochs):
        rng = _epoch_rng(cfg.seed, "pretrain", epoch)
        order = rng.permutation(len(train_seqs))
        total, count = 0.0, 0
        for start in range(0, len(order), B):
            batch = [train_seqs[i] for i in order[start : start + B]]
            loss_sum, n_tok = _lm_loss(model, batch, vocab.pad_id)
            loss = loss_sum / n_tok
            if not torch.isfinite(loss):
                raise DivergenceError(f"pretrain loss diverged at epoch {epoch}")
            loss.backward()
            grad_step(optimizer, named, cfg.training.grad_clip)
            total += float(loss_sum.detach())
            count += n_tok
        with torch.no_grad():
            val_sum, val_tok = _lm_loss(model, val_seqs, vocab.pad_id)
        log.log(_line({
            "stage": "pretrain", "epoch": epoch,
            "L_LLM": total / count, "val_loss": float(val_sum) / val_tok,
        }))
    bundle.epochs_done["pretrain"] = n_epochs
    return bundle


def _lm_loss(model: TransformerLM, seqs: list[list[int]], pad_id: int):
    ids, mask = pad_batch(seqs, pad_id)
    logits = model(ids[:, :-1])
    targets = ids[:, 1:]
    return nll_loss(logits, targets, mask[:, 1:])


# -- stage 1: quantizer warm-up ---------------------------------------------------


def warmup_quantizer(
    bundle: Bundle, dataset: Dataset, log: MetricsLog | None = None,
    epochs: int | None = None,
) -> Bundle:
    """k-means warm start plus gradient refinement against frozen embeddings.

    The backbone is read-only here: embeddings are computed once and the
    optimizer only sees projection and codebook parameters.
    """
    log = log or MetricsLog()
    cfg = bundle.cfg
    qc = cfg.quantizer
    torch.manual_seed(cfg.seed + 1)
    bundle.item_q = TowerQuantizer(TowerConfig(
        "item", qc.levels, qc.codebook_size, qc.code_dim, tuple(qc.proj_widths)))
    bundle.user_q = TowerQuantizer(TowerConfig(
        "user", qc.levels, qc.codebook_size, qc.code_dim, tuple(qc.proj_widths)))

    item_texts = {i: dataset.contents.items[i].text for i in dataset.split.item_ids}
    user_texts = {u: dataset.contents.users[u].text for u in dataset.split.user_ids}
    embeddings: dict[str, torch.Tensor] = {}
    for tower, texts in (("item", item_texts), ("user", user_texts)):
        _, emb = compute_embeddings(bundle.model, bundle.vocab, texts)
        if emb.shape[0] < qc.codebook_size:
            raise TrainerError(
                f"{tower} tower has {emb.shape[0]} entities, fewer than "
                f"codebook_size {qc.codebook_size}"
            )
        embeddings[tower] = emb

    def residual_profile(q: TowerQuantizer, emb: torch.Tensor) -> list[float]:
        with torch.no_grad():
            _, trail = q.encode(q.project(emb))
        return [float((r ** 2).sum(dim=-1).mean()) for r in trail]

    diag: dict[str, list[float]] = {}
    baseline: dict[str, list[float]] = {}
    for tower, q in (("item", bundle.item_q), ("user", bundle.user_q)):
        with torch.no_grad():
            z = q.project(embeddings[tower])
        books = kmeans_init(z, qc.levels, qc.codebook_size, qc.kmeans_iters)
        q.load_codebooks(books)
        baseline[tower] = residual_profile(q, embeddings[tower])
        diag[f"{tower}_kmeans_residual_sq"] = baseline[tower]

    snapshots = {
        "item": {k: v.clone() for k, v in bundle.item_q.state_dict().items()},
        "user": {k: v.clone() for k, v in bundle.user_q.state_dict().items()},
    }

    n_epochs = cfg.training.warmup_epochs if epochs is None else epochs
    if n_epochs > 0:
        params = [(f"item_q.{n}", p) for n, p in bundle.item_q.named_parameters()]
        params += [(f"user_q.{n}", p) for n, p in bundle.user_q.named_parameters()]
        # no weight decay in warm-up: shrinking codebooks would fight the
        # k-means objective the refinement is supposed to improve
        optimizer = torch.optim.AdamW(
            [p for _, p in params], lr=cfg.training.warmup_lr, weight_decay=0.0
        )
        counts = {t: embeddings[t].shape[0] for t in embeddings}
        B = cfg.training.batch_size
        for epoch in range(n_epochs):
            rng = _epoch_rng(cfg.seed, "warmup", epoch)
            token_sum, token_n = 0.0, 0
            orders = {t: rng.permutation(counts[t]) for t in ("item", "user")}
            for start in range(0, max(counts.values()), B):
                loss = None
                for tower, q in (("item", bundle.item_q), ("user", bundle.user_q)):
                    idx = orders[tower][start : start + B]
                    if len(idx) == 0:
                        continue
                    z = q.project(embeddings[tower][idx])
                    train, literal, _ = split_quantization_loss(
                        z, q.codebook_tensors(), qc.commitment_weight)
                    part = train / len(idx)
                    loss = part if loss is None else loss + part
                    token_sum += float(literal.detach().sum())
                    token_n += len(idx)
                if loss is None:
                    continue
                if not torch.isfinite(loss):
                    raise DivergenceError(f"warm-up loss diverged at epoch {epoch}")
                loss.backward()
                grad_step(optimizer, params, cfg.training.grad_clip)
            log.log(_line({
                "stage": "warmup", "epoch": epoch, "L_Token": token_sum / token_n,
            }))

        # the projection moved under the refinement, so close with a fresh
        # Lloyd fit on the final code space and keep whichever state (k-means
        # snapshot vs refined) quantizes the warm-up set better; refinement
        # must never hand joint training a worse quantizer than its own init
        for tower, q in (("item", bundle.item_q), ("user", bundle.user_q)):
            with torch.no_grad():
                z = q.project(embeddings[tower])
            q.load_codebooks(kmeans_init(z, qc.levels, qc.codebook_size,
                                         qc.kmeans_iters))
            refined = residual_profile(q, embeddings[tower])
            if sum(refined) > sum(baseline[tower]):
                q.load_state_dict(snapshots[tower])

    for tower, q in (("item", bundle.item_q), ("user", bundle.user_q)):
        diag[f"{tower}_final_residual_sq"] = residual_profile(q, embeddings[tower])
    bundle.warmup_diag = diag
    bundle.stage = "warmup"
    bundle.epochs_done["warmup"] = n_epochs
    return bundle


# -- stage 2: joint fine-tuning ----------------------------------------------------


def prepare_joint(bundle: Bundle, dataset: Dataset) -> None:
    """Extend the vocabulary with semantic tokens and assign initial IDs."""
    if bundle.item_q is None or bundle.user_q is None:
        raise TrainerError("warm-up must run before joint training")
    if bundle.vocab.semantic is None:
        qc = bundle.cfg.quantizer
        bundle.vocab = bundle.vocab.extend_semantic(
            qc.levels, qc.codebook_size, qc.collision_budget)
        gen = torch.Generator().manual_seed(bundle.cfg.seed + 2)
        bundle.model.resize_vocab(len(bundle.vocab), gen)
    if bundle.assignment is None:
        bundle.assignment = _reindex(bundle, dataset, epoch=0)


def _reindex(bundle: Bundle, dataset: Dataset, epoch: int,
             refit: bool = False) -> IndexAssignment:
    """Re-derive IDs from the current backbone; optionally Lloyd-refresh the
    codebooks first so the index tracks trunk drift between epochs."""
    item_texts = {i: dataset.contents.items[i].text for i in dataset.split.item_ids}
    user_texts = {u: dataset.contents.users[u].text for u in dataset.split.user_ids}
    if refit:
        for q, texts in ((bundle.item_q, item_texts), (bundle.user_q, user_texts)):
            _, emb = compute_embeddings(bundle.model, bundle.vocab, texts)
            with torch.no_grad():
                z = q.project(emb)
            q.load_codebooks(lloyd_refresh(
                z, q.codebook_tensors(), bundle.cfg.quantizer.refresh_iters))
    return reindex(
        bundle.model, bundle.vocab, item_texts, user_texts,
        bundle.item_q, bundle.user_q,
        bundle.cfg.quantizer.collision_budget,
        epoch,
    )


def _batch_entities(samples) -> dict[str, list[str]]:
    """Entities whose alignment terms join this batch: the prompt owner and
    the prediction target of every instance, deduplicated per tower."""
    items: set[str] = set()
    users: set[str] = set()
    for sample, _ in samples:
        if sample.family == "seqrec":
            users.add(sample.user)
            items.add(sample.target_item)
        elif sample.family == "user_pred":
            items.add(sample.item)
            users.add(sample.purchasers[-1])
        else:
            users.add(sample.user)
    return {"item": sorted(items), "user": sorted(users)}


def _apply_trunk_policy(bundle: Bundle, mode: str):
    """Joint-stage parameter policy; returns (trainable params, grad hooks).

    "full" fine-tunes everything. "protect-nl" pins the natural-language
    token embedding rows (gradient-masked) so content text keeps reading the
    same after epochs of semantic-token prompts. "adapter" additionally
    freezes every block but the top one plus the positional table, the
    desk-scale analogue of tuning a small adapter on a frozen trunk.
    """
    model = bundle.model
    hooks = []
    for p in model.parameters():
        p.requires_grad_(True)
    if mode in ("protect-nl", "adapter"):
        nl_count = (bundle.vocab.semantic.offset
                    if bundle.vocab.semantic else len(bundle.vocab))

        def mask_nl(grad, n=nl_count):
            grad = grad.clone()
            grad[:n] = 0
            return grad

        hooks.append(model.wte.weight.register_hook(mask_nl))
    if mode == "adapter":
        for block in model.blocks[:-1]:
            for p in block.parameters():
                p.requires_grad_(False)
        model.wpe.weight.requires_grad_(False)
    named = [(n, p) for n, p in bundle.named_trainables() if p.requires_grad]
    return named, hooks


def _instance_loss(
    model: TransformerLM, instances: list[PromptInstance], pad_id: int
):
    seqs = [inst.tokens for inst in instances]
    ids, _ = pad_batch(seqs, pad_id)
    logits = model(ids[:, :-1])
    targets = ids[:, 1:]
    mask = torch.zeros_like(targets, dtype=torch.bool)
    for i, inst in enumerate(instances):
        mask[i, inst.prompt_len - 1 : len(inst.tokens) - 1] = torch.tensor(
            inst.loss_mask[inst.prompt_len :], dtype=torch.bool)
    return nll_loss(logits, targets, mask)


def train_joint(
    bundle: Bundle,
    dataset: Dataset,
    log: MetricsLog | None = None,
    run_dir: str | None = None,
    target_epochs: int | None = None,
) -> Bundle:
    """Joint fine-tuning under the combined loss with periodic re-indexing.

    Per batch: render instances against the current ID assignment, take the
    instruction NLL, add the alignment losses over the batch's entities, and
    step every parameter group. IDs are re-derived every reindex_interval
    epochs, which invalidates and rebuilds the prompt splices automatically
    (rendering always reads the live assignment).
    """
    log = log or MetricsLog()
    cfg = bundle.cfg
    tc = cfg.training
    prepare_joint(bundle, dataset)
    assert bundle.assignment is not None

    pools = build_pools(dataset)
    templates = load_templates(cfg.tasks.template_file or None)
    n_templates = {f: len(ts) for f, ts in templates.items()}
    item_texts = {i: dataset.contents.items[i].text for i in dataset.split.item_ids}
    user_texts = {u: dataset.contents.users[u].text for u in dataset.split.user_ids}

    named, hooks = _apply_trunk_policy(bundle, tc.trunk_mode)
    # token embeddings carry the NL-row gradient mask, so they get their own
    # undecayed group (decay would silently melt the protected rows)
    emb_params = {id(bundle.model.wte.weight), id(bundle.model.wpe.weight)}
    decayed = [p for _, p in named if id(p) not in emb_params]
    undecayed = [p for _, p in named if id(p) in emb_params]
    optimizer = torch.optim.AdamW(
        [{"params": decayed, "weight_decay": tc.weight_decay},
         {"params": undecayed, "weight_decay": 0.0}],
        lr=tc.joint_lr)
    if bundle.opt_state is not None:
        optimizer.load_state_dict(bundle.opt_state)
        bundle.opt_state = None

    val_rng = _epoch_rng(cfg.seed, "joint-val", 0)
    roster = dataset.split.user_ids
    n_val = min(tc.valid_users, len(roster))
    val_users = sorted(
        roster[i] for i in val_rng.choice(len(roster), size=n_val, replace=False)
    ) if n_val > 0 else []

    done = bundle.epochs_done.get("joint", 0)
    target = tc.joint_epochs if target_epochs is None else target_epochs
    try:
        _run_joint_epochs(bundle, dataset, log, run_dir, done, target, pools,
                          templates, n_templates, item_texts, user_texts,
                          named, optimizer, val_users)
    finally:
        for h in hooks:
            h.remove()
    bundle.stage = "joint"
    bundle.epochs_done.setdefault("joint", 0)
    return bundle


def _run_joint_epochs(bundle, dataset, log, run_dir, done, target, pools,
                      templates, n_templates, item_texts, user_texts,
                      named, optimizer, val_users):
    cfg = bundle.cfg
    tc = cfg.training
    for epoch in range(done, target):
        t0 = time.monotonic()
        batches = stream_epoch(pools, cfg.tasks, tc.batch_size, cfg.seed, epoch,
                               n_templates)
        sums = {"L_LLM": 0.0, "L_ID": 0.0, "L_Token": 0.0, "L_total": 0.0}
        n_batches = 0
        for batch in batches:
            instances = [
                render_sample(sample, templates[sample.family][t_idx],
                              bundle.assignment, bundle.vocab, cfg.tasks)
                for sample, t_idx in batch
            ]
            llm_sum, _ = _instance_loss(bundle.model, instances, bundle.vocab.pad_id)
            l_llm = llm_sum / len(instances)

            entities = _batch_entities(batch)
            id_sum = l_llm.new_zeros(())
            lit_sum = l_llm.new_zeros(())
            train_sum = l_llm.new_zeros(())
            n_ent = 0
            for tower, q, texts in (
                ("item", bundle.item_q, item_texts),
                ("user", bundle.user_q, user_texts),
            ):
                ids_t = entities[tower]
                if not ids_t:
                    continue
                x_i = embed_content_batch(
                    bundle.model,
                    [bundle.vocab.encode(texts[e]) for e in ids_t],
                    bundle.vocab.pad_id,
                )
                x_s = embed_content_batch(
                    bundle.model,
                    [bundle.assignment.id_of(tower, e).token_ids(bundle.vocab)
                     for e in ids_t],
                    bundle.vocab.pad_id,
                )
                # anchored mode treats the content view as data: the trunk has
                # no gradient path through X_I, which otherwise learns to
                # collapse all content onto one point to please these losses
                if cfg.alignment.anchor_content:
                    x_i = x_i.detach()
                id_sum = id_sum + alignment.id_level_loss(x_s, x_i).sum()
                z = q.project(x_i)
                train, literal, _ = split_quantization_loss(
                    z, q.codebook_tensors(), cfg.quantizer.commitment_weight)
                train_sum = train_sum + train
                lit_sum = lit_sum + literal.sum()
                n_ent += len(ids_t)

            n_ent = max(n_ent, 1)
            l_id = id_sum / n_ent
            l_token_lit = lit_sum / n_ent
            l_dmvae_report = alignment.dmvae_loss(
                float(l_id.detach()), float(l_token_lit.detach()), cfg.alignment.beta)
            l_dmvae_train = alignment.dmvae_loss(
                l_id, train_sum / n_ent, cfg.alignment.beta)
            loss = total_loss(l_llm, l_dmvae_train, tc.alpha)
            if not torch.isfinite(loss):
                raise DivergenceError(
                    f"joint loss diverged at epoch {epoch} "
                    f"(last good checkpoint retained)")
            loss.backward()
            grad_step(optimizer, named, tc.grad_clip)

            sums["L_LLM"] += float(l_llm.detach())
            sums["L_ID"] += float(l_id.detach())
            sums["L_Token"] += float(l_token_lit.detach())
            sums["L_total"] += total_loss(float(l_llm.detach()), l_dmvae_report,
                                          tc.alpha)
            n_batches += 1

        hr10 = None
        if val_users:
            trie = build_trie(bundle.assignment, bundle.vocab)
            report = evaluate(
                dataset, bundle.model, bundle.vocab, bundle.assignment, trie,
                [templates["seqrec"][0]], cfg.eval, cfg.tasks,
                config_hash=cfg.config_hash(), split="valid", users=val_users,
            )
            hr10 = report.averaged.get("HR@10")

        if (epoch + 1) % tc.reindex_interval == 0:
            bundle.assignment = _reindex(bundle, dataset,
                                         bundle.assignment.epoch + 1,
                                         refit=tc.reindex_refit)
            bundle.reindex_count += 1

        rates = assignment_collision_rates(bundle.assignment)
        log.log(_line({
            "stage": "joint", "epoch": epoch,
            "L_LLM": sums["L_LLM"] / n_batches,
            "L_ID": sums["L_ID"] / n_batches,
            "L_Token": sums["L_Token"] / n_batches,
            "L_total": sums["L_total"] / n_batches,
            "collision_rate": rates,
            "HR@10_valid": hr10,
            "wall_time": round(time.monotonic() - t0, 3),
        }))
        bundle.stage = "joint"
        bundle.epochs_done["joint"] = epoch + 1
        if run_dir:
            save_bundle(bundle, os.path.join(run_dir, "checkpoints", "joint.ckpt"),
                        optimizer)


def _line(values: dict) -> dict:
    base = {
        "stage": None, "epoch": None, "L_LLM": None, "L_ID": None,
        "L_Token": None, "L_total": None, "collision_rate": None,
        "HR@10_valid": None, "wall_time": 0.0,
    }
    base.update(values)
    return base


# -- checkpointing -------------------------------------------------------------------


def save_bundle(bundle: Bundle, path: str,
                optimizer: torch.optim.Optimizer | None = None) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tensors: dict[str, torch.Tensor] = {}
    for name, t in bundle.model.state_dict().items():
        tensors[f"model.{name}"] = t
    for prefix, module in (("item_q", bundle.item_q), ("user_q", bundle.user_q)):
        if module is not None:
            for name, t in module.state_dict().items():
                tensors[f"{prefix}.{name}"] = t
    opt_groups = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        opt_groups = sd["param_groups"]
        for pid, st in sd["state"].items():
            for key, val in st.items():
                tensors[f"opt.{pid}.{key}"] = (
                    val if torch.is_tensor(val)
                    else torch.tensor(float(val), dtype=torch.float64)
                )
    tensors["rng.torch"] = torch.get_rng_state()

    assignment_rows = None
    if bundle.assignment is not None:
        assignment_rows = bundle.assignment.export_jsonl()
    meta = {
        "stage": bundle.stage,
        "epochs_done": bundle.epochs_done,
        "reindex_count": bundle.reindex_count,
        "config": bundle.cfg.to_dict(),
        "vocab": bundle.vocab.to_dict(),
        "assignment": assignment_rows,
        "assignment_epoch": bundle.assignment.epoch if bundle.assignment else None,
        "opt_param_groups": opt_groups,
        "warmup_diag": bundle.warmup_diag,
        "has_quantizers": bundle.item_q is not None,
    }
    save_checkpoint(meta, tensors, path)


def load_bundle(path: str) -> Bundle:
    meta, tensors = load_checkpoint(path)
    cfg = RunConfig()
    _apply_config_dict(cfg, meta["config"])
    cfg.validate()
    vocab = Vocabulary.from_dict(meta["vocab"])
    bc = cfg.backbone
    model = TransformerLM(len(vocab), bc.dim, bc.n_layers, bc.n_heads,
                          bc.max_seq_len, bc.dropout)
    model.load_state_dict(_sub(tensors, "model."))
    bundle = Bundle(cfg=cfg, vocab=vocab, model=model)
    if meta.get("has_quantizers"):
        qc = cfg.quantizer
        bundle.item_q = TowerQuantizer(TowerConfig(
            "item", qc.levels, qc.codebook_size, qc.code_dim, tuple(qc.proj_widths)))
        bundle.user_q = TowerQuantizer(TowerConfig(
            "user", qc.levels, qc.codebook_size, qc.code_dim, tuple(qc.proj_widths)))
        bundle.item_q.load_state_dict(_sub(tensors, "item_q."))
        bundle.user_q.load_state_dict(_sub(tensors, "user_q."))
    if meta.get("assignment") is not None:
        towers: dict[str, dict[str, SemanticId]] = {"item": {}, "user": {}}
        for row in meta["assignment"]:
            towers[row["tower"]][row["entity_id"]] = SemanticId(
                tower=row["tower"], levels=tuple(row["levels"]), suffix=row["suffix"])
        bundle.assignment = IndexAssignment(towers, epoch=meta["assignment_epoch"])
    if meta.get("opt_param_groups") is not None:
        state: dict[int, dict] = {}
        for name, t in tensors.items():
            if not name.startswith("opt."):
                continue
            _, pid, key = name.split(".", 2)
            state.setdefault(int(pid), {})[key] = t
        bundle.opt_state = {"state": state, "param_groups": meta["opt_param_groups"]}
    bundle.stage = meta["stage"]
    bundle.epochs_done = dict(meta["epochs_done"])
    bundle.reindex_count = meta.get("reindex_count", 0)
    bundle.warmup_diag = meta.get("warmup_diag", {})
    torch.set_rng_state(tensors["rng.torch"].to(torch.uint8))
    return bundle


def _sub(tensors: dict[str, torch.Tensor], prefix: str) -> dict[str, torch.Tensor]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


def _apply_config_dict(cfg: RunConfig, d: dict) -> None:
    for section, values in d.items():
        if isinstance(values, dict):
            sub = getattr(cfg, section)
            for k, v in values.items():
                if isinstance(v, list):
                    v = tuple(v)
                setattr(sub, k, v)
        else:
            setattr(cfg, section, values)
