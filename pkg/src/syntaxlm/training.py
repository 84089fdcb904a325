"""Training loop, validation and finite-difference gradient checking."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .model import (Encoded, LanguageModel, ModelConfig, NumericalError, Prepared, TreeLike, batches_by_length,
                    collate, sequence_loss, stream_size)
from .treebank import Vocabulary

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    warmup_steps: int = 100
    epochs: int = 10
    max_steps: int | None = None
    batch_tokens: int = 256
    clip_norm: float = 1.0
    eval_every: int = 200
    betas: tuple[float, float] = (0.9, 0.98)
    weight_decay: float = 0.0
    seed: int = 0


def lr_at(step: int, total: int, hp: TrainConfig) -> float:
    """Linear warmup, then cosine decay to zero."""
    if step < hp.warmup_steps:
        return hp.lr * (step + 1) / hp.warmup_steps
    progress = (step - hp.warmup_steps) / max(1, total - hp.warmup_steps)
    return hp.lr * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def evaluate(lm: LanguageModel, batches: Sequence[tuple], n_words: int) -> dict:
    """Gold-tree NLL: per event and as word-level perplexity."""
    total, events = 0.0, 0
    lm.net.eval()
    with torch.no_grad():
        for ids, masks, rel, gather, targets in batches:
            total += float(sequence_loss(lm.net, ids, masks, rel, gather, targets, reduction="sum"))
            events += int((targets >= 0).sum())
    lm.net.train()
    return {"nll": total / events, "ppl": math.exp(total / max(1, n_words)), "events": events,
            "total_nll": total}


def _prepare_all(lm: LanguageModel, items: Sequence[TreeLike | Encoded]) -> list[Prepared]:
    return [lm.prepare(it if isinstance(it, Encoded) else lm.encode(it)) for it in items]


def train(cfg: ModelConfig, vocab: Vocabulary, train_items: Sequence[TreeLike], valid_items: Sequence[TreeLike],
          hp: TrainConfig | None = None, dtype=torch.float32, log_path: str | Path | None = None,
          on_eval: Callable[[dict], None] | None = None) -> tuple[LanguageModel, list[dict]]:
    """Train from scratch; returns the best-validation model and the metrics log."""
    hp = hp or TrainConfig()
    if not train_items:
        raise ValueError("empty training corpus")
    torch.manual_seed(hp.seed)
    lm = LanguageModel.create(cfg, vocab)
    lm.net.to(dtype)
    lm.net.train()

    train_prep = _prepare_all(lm, train_items)
    valid_prep = _prepare_all(lm, valid_items) if valid_items else []
    train_groups = batches_by_length(train_prep, stream_size, hp.batch_tokens)
    train_batches = [collate([train_prep[i] for i in g], vocab.pad_id) for g in train_groups]
    valid_batches = [collate([valid_prep[i] for i in g], vocab.pad_id)
                     for g in batches_by_length(valid_prep, stream_size, hp.batch_tokens * 4)]
    valid_words = sum(p.enc.n_words for p in valid_prep)

    opt = torch.optim.Adam(lm.net.parameters(), lr=hp.lr, betas=hp.betas, weight_decay=hp.weight_decay)
    total_steps = hp.epochs * len(train_batches)
    if hp.max_steps is not None:
        total_steps = min(total_steps, hp.max_steps)
    rng = np.random.default_rng(hp.seed)
    metrics: list[dict] = []
    best = (math.inf, copy.deepcopy(lm.net.state_dict()), 0)
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None

    def record(entry: dict) -> None:
        metrics.append(entry)
        if log_file:
            log_file.write(json.dumps(entry, sort_keys=True) + "\n")
            log_file.flush()

    def run_eval(step: int) -> None:
        nonlocal best
        if not valid_batches:
            return
        res = evaluate(lm, valid_batches, valid_words)
        entry = {"step": step, "split": "valid", "nll": res["nll"], "ppl": res["ppl"]}
        record(entry)
        if on_eval:
            on_eval(entry)
        if res["nll"] < best[0]:
            best = (res["nll"], copy.deepcopy(lm.net.state_dict()), step)

    step = 0
    running, running_n = 0.0, 0
    try:
        while step < total_steps:
            for b in rng.permutation(len(train_batches)):
                if step >= total_steps:
                    break
                for group in opt.param_groups:
                    group["lr"] = lr_at(step, total_steps, hp)
                ids, masks, rel, gather, targets = train_batches[b]
                loss = sequence_loss(lm.net, ids, masks, rel, gather, targets)
                if not torch.isfinite(loss):
                    raise NumericalError(f"loss diverged at step {step} (loss={float(loss)}, "
                                         f"lr={opt.param_groups[0]['lr']:.3g})")
                opt.zero_grad()
                loss.backward()
                if hp.clip_norm:
                    torch.nn.utils.clip_grad_norm_(lm.net.parameters(), hp.clip_norm)
                opt.step()
                step += 1
                running += float(loss.detach())
                running_n += 1
                if step % hp.eval_every == 0 or step == total_steps:
                    nll = running / running_n
                    record({"step": step, "split": "train", "nll": nll, "ppl": math.exp(nll)})
                    running, running_n = 0.0, 0
                    run_eval(step)
    finally:
        if log_file:
            log_file.close()
    if valid_batches and best[0] < math.inf:
        lm.net.load_state_dict(best[1])
        log.info("restored best checkpoint from step %d (valid nll %.4f)", best[2], best[0])
    lm.net.eval()
    return lm, metrics


# ---------------------------------------------------------------------------
# Gradient check


def grad_check(lm: LanguageModel, items: Sequence[TreeLike], eps: float = 1e-5, atol: float = 1e-6,
               params: Sequence[str] | None = None) -> float:
    """Max relative error between autograd and central-difference gradients.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, atol)``.
    Runs in float64 on a copy of the network.
    """
    net = copy.deepcopy(lm.net).to(torch.float64)
    batch = collate([lm.prepare(lm.encode(it)) for it in items], lm.vocab.pad_id)
    named = [(n, p) for n, p in net.named_parameters() if params is None or n in params]
    if sum(p.numel() for _, p in named) > 20_000:
        raise ValueError("gradient check is meant for tiny models")

    net.zero_grad()
    sequence_loss(net, *batch).backward()
    worst = 0.0
    with torch.no_grad():
        for _, p in named:
            analytic = p.grad.detach().clone().reshape(-1)
            flat = p.data.reshape(-1)
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + eps
                up = float(sequence_loss(net, *batch))
                flat[idx] = orig - eps
                down = float(sequence_loss(net, *batch))
                flat[idx] = orig
                numeric = (up - down) / (2 * eps)
                a = float(analytic[idx])
                err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
                worst = max(worst, err)
    return worst
