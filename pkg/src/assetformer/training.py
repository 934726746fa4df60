"""Next-token training with condition dropout."""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .checkpoint import Checkpoint
from .model import AssetFormer, ModelConfig, loss_mask, sequence_loss
from .pcg import PHRASE_VOCAB
from .tokenizer import EOS_ID, VOCAB_HASH, TokenizedDataset, TokenizedRecord, phrase_vocab_hash

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 32
    total_steps: int = 1000
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("learning_rate, batch_size and total_steps must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)


def lr_at(step: int, cfg: TrainConfig) -> float:
    if cfg.warmup_steps and step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    return cfg.learning_rate


def collate(records: Sequence[TokenizedRecord]) -> tuple[torch.Tensor, torch.Tensor]:
    """Pad token rows with EOS to a common length; returns (tokens, cond)."""
    width = max(len(r.tokens) for r in records)
    tokens = torch.full((len(records), width), EOS_ID, dtype=torch.long)
    for i, r in enumerate(records):
        tokens[i, :len(r.tokens)] = torch.tensor(r.tokens, dtype=torch.long)
    cond = torch.tensor([r.condition for r in records], dtype=torch.long)
    return tokens, cond


def check_compatible(ds: TokenizedDataset, cfg: ModelConfig) -> None:
    if ds.vocab_hash != VOCAB_HASH:
        raise TrainingError(f"dataset vocab hash {ds.vocab_hash} != {VOCAB_HASH}")
    if ds.phrase_hash and ds.phrase_hash != phrase_vocab_hash(PHRASE_VOCAB):
        raise TrainingError("dataset caption vocabulary does not match this build")
    if not ds.records:
        raise TrainingError("dataset is empty")
    longest = max(len(r.tokens) for r in ds.records)
    # the final EOS is predicted, never fed
    if longest - 1 + cfg.n_cond_slots > cfg.max_seq_len:
        raise TrainingError(f"record of {longest} tokens does not fit max_seq_len {cfg.max_seq_len}")
    for r in ds.records:
        if any(not 0 <= c < cfg.phrase_vocab_size for c in r.condition):
            raise TrainingError(f"condition ids {r.condition} outside phrase vocabulary")


def train(
    ds: TokenizedDataset,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    metrics_path: str | os.PathLike | None = None,
    model: AssetFormer | None = None,
) -> TrainResult:
    """Optimise next-token cross-entropy; deterministic given ``train_cfg.seed``."""
    check_compatible(ds, model_cfg)
    torch.manual_seed(train_cfg.seed)
    if model is None:
        model = AssetFormer(model_cfg)
    model.train()
    gen = torch.Generator().manual_seed(train_cfg.seed)
    opt = torch.optim.AdamW(
        model.parameters(),
        lr=train_cfg.learning_rate,
        betas=(train_cfg.beta1, train_cfg.beta2),
        weight_decay=train_cfg.weight_decay,
    )
    n = len(ds.records)
    bs = min(train_cfg.batch_size, n)
    perm = torch.randperm(n, generator=gen).tolist()
    cursor = 0
    losses: list[float] = []
    metrics = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for step in range(train_cfg.total_steps):
            if cursor + bs > n:
                perm = torch.randperm(n, generator=gen).tolist()
                cursor = 0
            batch = [ds.records[i] for i in perm[cursor:cursor + bs]]
            cursor += bs
            tokens, cond = collate(batch)
            drop = torch.rand(bs, generator=gen) < model_cfg.cond_dropout
            cond[drop] = model.null_id

            lr = lr_at(step, train_cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            loss = sequence_loss(model.sequence_logits(tokens, cond), tokens)
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite loss {loss.item()} at step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if train_cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
            opt.step()
            losses.append(loss.item())
            if metrics is not None:
                metrics.write(json.dumps({"step": step, "loss": losses[-1], "lr": lr}) + "\n")
            if step % 50 == 0:
                log.debug("step %d loss %.4f", step, losses[-1])
    finally:
        if metrics is not None:
            metrics.close()
    model.eval()
    rng_state = gen.get_state().numpy().tobytes()
    return TrainResult(Checkpoint(model, train_cfg.total_steps, rng_state), losses)


@torch.no_grad()
def evaluate_loss(model: AssetFormer, records: Sequence[TokenizedRecord], batch_size: int = 16) -> dict:
    """Teacher-forced loss and next-token accuracy over unmasked positions."""
    model.eval()
    total = correct = 0
    loss_sum = 0.0
    for i in range(0, len(records), batch_size):
        tokens, cond = collate(records[i:i + batch_size])
        logits = model.sequence_logits(tokens, cond)
        mask = loss_mask(tokens)
        ce = torch.nn.functional.cross_entropy(
            logits.reshape(-1, logits.shape[-1]), tokens.reshape(-1), reduction="none"
        ).reshape(tokens.shape)
        loss_sum += (ce * mask).sum().item()
        correct += ((logits.argmax(-1) == tokens) & mask).sum().item()
        total += mask.sum().item()
    return {"loss": loss_sum / total, "accuracy": correct / total, "tokens": total}
