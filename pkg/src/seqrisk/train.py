"""Masked-encounter pretraining and incident-outcome fine-tuning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import (MIN_AGE_MONTHS, MIN_YEAR, MASK, N_SPECIAL, PAD, UNK,
                   PatientRecord, TokenizedSequence, Vocabulary, tokenize)
from .metrics import auprc, auroc
from .model import RiskModel
from .optim import Adam
from .rng import Rng


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-3
    mask_rate: float = 0.15
    mask_splits: tuple[float, float, float] = (0.8, 0.1, 0.1)  # MASK / random / keep
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_rate <= 1.0:
            raise ValueError("mask_rate must be in (0, 1]")
        if abs(sum(self.mask_splits) - 1.0) > 1e-9:
            raise ValueError("mask splits must sum to 1")


def tokenize_records(records: list[PatientRecord], vocab: Vocabulary,
                     max_len: int, modalities: str = "DM") -> list[TokenizedSequence]:
    return [tokenize(r, vocab, max_len, modalities) for r in records]


def pad_batch(seqs: list[TokenizedSequence]):
    """Pad to the longest sequence in the batch; PAD positions are unmasked
    out of attention and carry in-range placeholder age/year."""
    n = len(seqs)
    length = max(len(s) for s in seqs)
    tokens = np.full((n, length), PAD, dtype=np.int64)
    ages = np.full((n, length), MIN_AGE_MONTHS, dtype=np.int64)
    years = np.full((n, length), MIN_YEAR, dtype=np.int64)
    mask = np.zeros((n, length), dtype=bool)
    labels = np.empty(n, dtype=np.float64)
    for i, s in enumerate(seqs):
        m = len(s)
        tokens[i, :m] = s.tokens
        ages[i, :m] = s.ages
        years[i, :m] = s.years
        mask[i, :m] = True
        labels[i] = s.label
    return tokens, ages, years, mask, labels


def batch_indices(seqs, batch_size: int, rng: Rng) -> list[list[int]]:
    """Length-bucketed batches in shuffled order: neighbors by length share
    a batch (small padding), batch order reshuffles every epoch."""
    by_len = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
    batches = [by_len[s:s + batch_size] for s in range(0, len(by_len), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def mask_batch(tokens: np.ndarray, vocab: Vocabulary, config: TrainConfig, rng: Rng):
    """Apply the masking policy to a padded token matrix.

    Only encounter tokens (UNK included, never CLS/SEP/PAD) are eligible.
    Selected positions become MASK / a random encounter token / stay, per
    config.mask_splits; returns (masked tokens, targets) with -100 at
    unselected positions.
    """
    maskable = (tokens == UNK) | (tokens >= N_SPECIAL)
    selected = maskable & (rng.random(tokens.shape) < config.mask_rate)
    targets = np.where(selected, tokens, -100)
    masked = tokens.copy()
    action = rng.random(tokens.shape)
    s_mask, s_random, _ = config.mask_splits
    randoms = rng.integers(N_SPECIAL, vocab.size, size=tokens.shape)
    masked[selected & (action < s_mask)] = MASK
    swap = selected & (action >= s_mask) & (action < s_mask + s_random)
    masked[swap] = randoms[swap]
    return masked, targets


def _mlm_loss(model: RiskModel, seqs, vocab, config, rng, train: bool):
    tokens, ages, years, mask, _ = pad_batch(seqs)
    masked, targets = mask_batch(tokens, vocab, config, rng)
    logits = model.mlm_logits(masked, ages, years, mask, train=train,
                              rng=rng if train else None)
    flat = T.reshape(logits, (-1, vocab.size))
    return T.cross_entropy_logits(flat, targets.reshape(-1))


def heldout_mlm_loss(model, seqs, vocab, config, seed: int, batch_size: int = 128) -> float:
    """MLM loss on a held-out slice with a fixed mask pattern per seed."""
    total, count = 0.0, 0
    rng = Rng(seed)
    order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
    for start in range(0, len(order), batch_size):
        chunk = [seqs[i] for i in order[start:start + batch_size]]
        loss = _mlm_loss(model, chunk, vocab, config, rng, train=False)
        total += float(loss.data) * len(chunk)
        count += len(chunk)
    return total / count


def pretrain(records_a: list[PatientRecord], model: RiskModel, config: TrainConfig,
             vocab: Vocabulary, holdout_frac: float = 0.1):
    """Masked-encounter pretraining; returns (model, loss curve rows)."""
    seqs = tokenize_records(records_a, vocab, model.config.max_len,
                            model.config.modalities)
    rng = Rng(config.seed)
    order = rng.permutation(len(seqs))
    n_hold = max(1, int(len(seqs) * holdout_frac))
    holdout = [seqs[i] for i in order[:n_hold]]
    train_seqs = [seqs[i] for i in order[n_hold:]]
    if not train_seqs:
        raise ValueError("no training sequences after holdout split")

    opt = Adam(model.parameters(), lr=config.lr)
    curve = []
    hold_seed = Rng(config.seed).split("holdout").seed
    curve.append({"epoch": 0, "split": "heldout",
                  "loss": heldout_mlm_loss(model, holdout, vocab, config, hold_seed)})
    for epoch in range(1, config.epochs + 1):
        epoch_loss, seen = 0.0, 0
        for bi, batch in enumerate(batch_indices(train_seqs, config.batch_size, rng)):
            chunk = [train_seqs[i] for i in batch]
            try:
                with T.Tape() as tape:
                    loss = _mlm_loss(model, chunk, vocab, config, rng, train=True)
                    tape.backward(loss)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"pretraining diverged at epoch {epoch}, batch {bi}: {exc}") from exc
            opt.step()
            opt.zero_grad()
            epoch_loss += float(loss.data) * len(chunk)
            seen += len(chunk)
        curve.append({"epoch": epoch, "split": "train", "loss": epoch_loss / seen})
        curve.append({"epoch": epoch, "split": "heldout",
                      "loss": heldout_mlm_loss(model, holdout, vocab, config, hold_seed)})
    return model, curve


def _snapshot(model: RiskModel) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def _restore(model: RiskModel, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.data = snap[name].copy()


def finetune(records_train: list[PatientRecord], model: RiskModel, config: TrainConfig,
             vocab: Vocabulary, eval_records: list[PatientRecord] | None = None):
    """Binary fine-tuning on the CLS head with early stopping on held-out AUROC.

    With eval_records=None a tenth of the training set is carved off as
    the monitor; returns (model at its best epoch, metric curve rows).
    """
    labels = {r.label for r in records_train}
    if labels != {0, 1}:
        raise ValueError("fine-tuning needs both case and control patients")
    rng = Rng(config.seed)
    if eval_records is None:
        order = rng.permutation(len(records_train))
        n_eval = max(2, int(0.1 * len(records_train)))
        eval_records = [records_train[i] for i in order[:n_eval]]
        records_train = [records_train[i] for i in order[n_eval:]]
        if {r.label for r in eval_records} != {0, 1}:
            raise ValueError("monitor slice lacks a class; pass eval_records explicitly")

    seqs = tokenize_records(records_train, vocab, model.config.max_len,
                            model.config.modalities)
    eval_seqs = tokenize_records(eval_records, vocab, model.config.max_len,
                                 model.config.modalities)
    eval_labels = np.array([s.label for s in eval_seqs], dtype=float)

    opt = Adam(model.parameters(), lr=config.lr)
    curve = []
    best_auroc, best_snap, since_best = -np.inf, None, 0
    for epoch in range(1, config.epochs + 1):
        epoch_loss, seen = 0.0, 0
        for bi, batch in enumerate(batch_indices(seqs, config.batch_size, rng)):
            chunk = [seqs[i] for i in batch]
            tokens, ages, years, mask, y = pad_batch(chunk)
            try:
                with T.Tape() as tape:
                    logits = model.class_logits(tokens, ages, years, mask,
                                                train=True, rng=rng)
                    loss = T.bce_with_logits(logits, y)
                    tape.backward(loss)
            except FloatingPointError as exc:
                raise TrainingDiverged(
                    f"fine-tuning diverged at epoch {epoch}, batch {bi}: {exc}") from exc
            opt.step()
            opt.zero_grad()
            epoch_loss += float(loss.data) * len(chunk)
            seen += len(chunk)
        scores = model.predict_proba(eval_seqs)
        ep_auroc = auroc(scores, eval_labels)
        ep_auprc = auprc(scores, eval_labels)
        curve.append({"epoch": epoch, "split": "train", "loss": epoch_loss / seen,
                      "auroc": "", "auprc": ""})
        curve.append({"epoch": epoch, "split": "heldout", "loss": "",
                      "auroc": ep_auroc, "auprc": ep_auprc})
        if ep_auroc > best_auroc:
            best_auroc, best_snap, since_best = ep_auroc, _snapshot(model), 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    if best_snap is not None:
        _restore(model, best_snap)
    return model, curve


def write_curve_csv(path, rows: list[dict], config_hash: str = "") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        fh.write("epoch,split,loss,auroc,auprc\n")
        for r in rows:
            loss = r.get("loss", "")
            fh.write(f"{r['epoch']},{r['split']},{_fmt(loss)},"
                     f"{_fmt(r.get('auroc', ''))},{_fmt(r.get('auprc', ''))}\n")


def _fmt(x) -> str:
    if x == "" or x is None:
        return ""
    return format(float(x), ".10g")
