"""Ranking metrics, k-fold evaluation, and probability-bin AUROC."""

from __future__ import annotations

import numpy as np
from scipy import stats

from .rng import Rng

PROBABILITY_BIN_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged."""
    n = len(x)
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    new_group = np.r_[True, sx[1:] != sx[:-1]]
    first = np.flatnonzero(new_group)
    counts = np.diff(np.r_[first, n])
    group_rank = first + (counts + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = group_rank[np.cumsum(new_group) - 1]
    return ranks


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count half."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auroc needs both classes present")
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision: sum of precision-at-rank over positives.

    Descending score order with ties broken by input position, so results
    are deterministic for a given input ordering.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise ValueError("auprc needs at least one positive")
    order = np.lexsort((np.arange(len(scores)), -scores))
    y = (labels[order] == 1).astype(float)
    precision_at_k = np.cumsum(y) / np.arange(1, len(y) + 1)
    return float((precision_at_k * y).sum() / n_pos)


def probability_bin_auroc(scores, labels) -> list[dict]:
    """AUROC within fixed-width probability bins; single-class bins report None."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    out = []
    edges = PROBABILITY_BIN_EDGES
    for i in range(len(edges) - 1):
        lo, hi = edges[i], edges[i + 1]
        last = i == len(edges) - 2
        sel = (scores >= lo) & ((scores <= hi) if last else (scores < hi))
        entry = {"bin": f"[{lo:.1f},{hi:.1f}{']' if last else ')'}",
                 "n": int(sel.sum()), "auroc": None}
        sub_labels = labels[sel]
        if sel.any() and 0 < (sub_labels == 1).sum() < len(sub_labels):
            entry["auroc"] = auroc(scores[sel], sub_labels)
        out.append(entry)
    return out


def t_confidence_interval(values, level: float = 0.95) -> tuple[float, float, float]:
    """(mean, lo, hi) using the t distribution over the given samples."""
    values = np.asarray(values, dtype=float)
    k = len(values)
    m = float(values.mean())
    if k < 2:
        return m, m, m
    sd = float(values.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2.0, k - 1)) * sd / np.sqrt(k)
    return m, m - half, m + half


def stratified_folds(records, k: int, seed: int) -> list[list]:
    """Deal shuffled cases and controls round-robin into k folds."""
    rng = Rng(seed)
    order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    folds: list[list] = [[] for _ in range(k)]
    for label in (1, 0):
        members = [r for r in shuffled if r.label == label]
        for i, r in enumerate(members):
            folds[i % k].append(r)
    return folds


def kfold_evaluate(records, k: int, train_fn, seed: int = 0) -> dict:
    """Stratified k-fold CV. train_fn(train_records, eval_records) must
    return scores aligned with eval_records; a fold without positives is
    an error (raised by auroc)."""
    if k < 2:
        raise ValueError("k must be at least 2")
    folds = stratified_folds(records, k, seed)
    per_fold = []
    for i in range(k):
        eval_records = folds[i]
        train_records = [r for j in range(k) if j != i for r in folds[j]]
        scores = np.asarray(train_fn(train_records, eval_records), dtype=float)
        labels = np.array([r.label for r in eval_records])
        per_fold.append({"fold": i, "auroc": auroc(scores, labels),
                         "auprc": auprc(scores, labels)})
    roc_mean, roc_lo, roc_hi = t_confidence_interval([f["auroc"] for f in per_fold])
    prc_mean, prc_lo, prc_hi = t_confidence_interval([f["auprc"] for f in per_fold])
    return {
        "auroc": roc_mean, "auroc_ci": [roc_lo, roc_hi],
        "auprc": prc_mean, "auprc_ci": [prc_lo, prc_hi],
        "per_fold": per_fold,
    }
