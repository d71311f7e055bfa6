"""Cosine-similarity analysis of summed embeddings along the age or year axis."""

from __future__ import annotations

import csv

import numpy as np

from .data import MIN_AGE_MONTHS, MIN_YEAR, UNK, Vocabulary
from .model import RiskModel


def summed_embedding_grid(model: RiskModel, vocab: Vocabulary, code: str,
                          modality: str, axis: str, values) -> np.ndarray:
    """Rows of tokenEmb[code] + ageEmb/yearEmb[value], other layers held out.

    values are raw months (axis="age") or calendar years (axis="year").
    """
    tok = vocab.encode(code, modality)
    if tok == UNK:
        raise ValueError(f"code {code!r} ({modality}) not in vocabulary")
    token_row = model.tok_emb.data[tok]
    values = list(values)
    if not values:
        raise ValueError("empty value range")
    if axis == "age":
        table, offset = model.age_emb.data, MIN_AGE_MONTHS
    elif axis == "year":
        table, offset = model.year_emb.data, MIN_YEAR
    else:
        raise ValueError(f"axis must be 'age' or 'year', got {axis!r}")
    idx = np.asarray(values) - offset
    if idx.min() < 0 or idx.max() >= table.shape[0]:
        raise ValueError(f"{axis} value outside embedding range")
    return token_row[None, :] + table[idx]


def cosine_dissimilarity_matrix(grid: np.ndarray) -> np.ndarray:
    """D[i, j] = 1 - cos(row_i, row_j); symmetric with zero diagonal."""
    norms = np.linalg.norm(grid, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm row in embedding grid")
    unit = grid / norms[:, None]
    d = 1.0 - unit @ unit.T
    np.fill_diagonal(d, 0.0)
    return d


def write_similarity_csv(path, entries, config_hash: str = "") -> None:
    """entries: iterable of (code, axis, values, dissimilarity matrix)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if config_hash:
            fh.write(f"# config_hash: {config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["code", "axis", "value_i", "value_j", "cosine", "dissimilarity"])
        for code, axis, values, d in entries:
            for i, vi in enumerate(values):
                for j, vj in enumerate(values):
                    w.writerow([code, axis, vi, vj,
                                format(1.0 - d[i, j], ".10g"), format(d[i, j], ".10g")])
