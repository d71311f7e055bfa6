"""Transformer risk model over summed token/age/year/position embeddings."""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .data import MIN_AGE_MONTHS, MIN_YEAR, TokenizedSequence
from .rng import Rng
from .tensor import Tensor

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_WEIGHTS = "weights.bin"


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    token_vocab: int
    n_layers: int = 4
    hidden: int = 120
    n_heads: int = 6
    intermediate: int = 108
    max_len: int = 256
    age_vocab: int = 1009   # months 192..1200
    year_vocab: int = 31    # years 1985..2015
    modalities: str = "DMAY"
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.n_heads}")
        if not self.modalities or not set(self.modalities) <= set("DMAY"):
            raise ValueError(f"bad modalities {self.modalities!r}")
        if "D" not in self.modalities and "M" not in self.modalities:
            raise ValueError("modalities must include D or M")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class RiskModel:
    """Encoder stack with a CLS risk head and an untied masked-token head.

    Post-norm blocks. With rng=None, parameters initialize to zeros
    (placeholder for checkpoint loading); otherwise weights draw from
    normal(0, 0.02), biases zero, layer-norm gains one.
    """

    def __init__(self, config: ModelConfig, rng: Rng | None = None):
        self.config = config
        c = config
        self._params: dict[str, Tensor] = {}

        def param(name, shape, kind="weight"):
            if rng is None or kind == "zeros":
                data = np.zeros(shape)
            elif kind == "ones":
                data = np.ones(shape)
            else:
                data = rng.normal(0.0, 0.02, size=shape)
            t = Tensor(data, requires_grad=True)
            self._params[name] = t
            return t

        self.tok_emb = param("emb.token", (c.token_vocab, c.hidden))
        self.age_emb = param("emb.age", (c.age_vocab, c.hidden))
        self.year_emb = param("emb.year", (c.year_vocab, c.hidden))
        self.pos_emb = param("emb.position", (c.max_len, c.hidden))
        self.layers = []
        for i in range(c.n_layers):
            p = f"layer{i}"
            self.layers.append({
                "wq": param(f"{p}.attn.wq", (c.hidden, c.hidden)),
                "bq": param(f"{p}.attn.bq", (c.hidden,), "zeros"),
                "wk": param(f"{p}.attn.wk", (c.hidden, c.hidden)),
                "bk": param(f"{p}.attn.bk", (c.hidden,), "zeros"),
                "wv": param(f"{p}.attn.wv", (c.hidden, c.hidden)),
                "bv": param(f"{p}.attn.bv", (c.hidden,), "zeros"),
                "wo": param(f"{p}.attn.wo", (c.hidden, c.hidden)),
                "bo": param(f"{p}.attn.bo", (c.hidden,), "zeros"),
                "ln1_g": param(f"{p}.ln1.gain", (c.hidden,), "ones"),
                "ln1_b": param(f"{p}.ln1.bias", (c.hidden,), "zeros"),
                "w1": param(f"{p}.ffn.w1", (c.hidden, c.intermediate)),
                "b1": param(f"{p}.ffn.b1", (c.intermediate,), "zeros"),
                "w2": param(f"{p}.ffn.w2", (c.intermediate, c.hidden)),
                "b2": param(f"{p}.ffn.b2", (c.hidden,), "zeros"),
                "ln2_g": param(f"{p}.ln2.gain", (c.hidden,), "ones"),
                "ln2_b": param(f"{p}.ln2.bias", (c.hidden,), "zeros"),
            })
        self.cls_w = param("cls.w", (c.hidden, 1))
        self.cls_b = param("cls.b", (1,), "zeros")
        self.mlm_w = param("mlm.w", (c.hidden, c.token_vocab))
        self.mlm_b = param("mlm.b", (c.token_vocab,), "zeros")

    def named_parameters(self):
        return self._params.items()

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def _age_index(self, ages: np.ndarray) -> np.ndarray:
        idx = np.asarray(ages) - MIN_AGE_MONTHS
        top = self.config.age_vocab - 1
        if idx.size and (idx.min() < 0 or idx.max() > top):
            warnings.warn("age outside embedding range, clamping to boundary")
            idx = np.clip(idx, 0, top)
        return idx

    def _year_index(self, years: np.ndarray) -> np.ndarray:
        idx = np.asarray(years) - MIN_YEAR
        top = self.config.year_vocab - 1
        if idx.size and (idx.min() < 0 or idx.max() > top):
            warnings.warn("year outside embedding range, clamping to boundary")
            idx = np.clip(idx, 0, top)
        return idx

    def embed(self, tokens: np.ndarray, ages: np.ndarray, years: np.ndarray) -> Tensor:
        """Summed predictor embeddings, [batch, len, hidden].

        Token and position layers always contribute; age and year only
        when their modality letter is configured.
        """
        tokens = np.asarray(tokens)
        length = tokens.shape[-1]
        if length > self.config.max_len:
            raise ValueError(f"sequence length {length} exceeds max_len {self.config.max_len}")
        x = T.embedding(self.tok_emb, tokens)
        x = T.add(x, T.embedding(self.pos_emb, np.arange(length)))
        if "A" in self.config.modalities:
            x = T.add(x, T.embedding(self.age_emb, self._age_index(ages)))
        if "Y" in self.config.modalities:
            x = T.add(x, T.embedding(self.year_emb, self._year_index(years)))
        return x

    def encode(self, x: Tensor, attention_mask: np.ndarray,
               train: bool = False, rng: Rng | None = None) -> Tensor:
        """Run the post-norm encoder stack; PAD keys get -1e9 before softmax."""
        b, length, h = x.data.shape
        c = self.config
        hd = h // c.n_heads
        if attention_mask.shape != (b, length):
            raise ValueError("attention mask shape mismatch")
        bias = np.where(attention_mask, 0.0, -1e9).reshape(b, 1, 1, length)
        inv_sqrt = 1.0 / math.sqrt(hd)

        def heads(t):
            return T.transpose(T.reshape(t, (b, length, c.n_heads, hd)), (0, 2, 1, 3))

        for lp in self.layers:
            q = heads(T.add(T.matmul(x, lp["wq"]), lp["bq"]))
            k = heads(T.add(T.matmul(x, lp["wk"]), lp["bk"]))
            v = heads(T.add(T.matmul(x, lp["wv"]), lp["bv"]))
            attn = T.masked_softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), bias, inv_sqrt)
            ctx = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (b, length, h))
            out = T.add(T.matmul(ctx, lp["wo"]), lp["bo"])
            if train and c.dropout > 0:
                out = T.dropout(out, c.dropout, rng)
            x = T.layer_norm(T.add(x, out), lp["ln1_g"], lp["ln1_b"])
            ff = T.add(T.matmul(T.gelu(T.add(T.matmul(x, lp["w1"]), lp["b1"])), lp["w2"]), lp["b2"])
            if train and c.dropout > 0:
                ff = T.dropout(ff, c.dropout, rng)
            x = T.layer_norm(T.add(x, ff), lp["ln2_g"], lp["ln2_b"])
        return x

    def _forward(self, tokens, ages, years, attention_mask, train, rng):
        x = self.embed(tokens, ages, years)
        if train and self.config.dropout > 0:
            x = T.dropout(x, self.config.dropout, rng)
        return self.encode(x, attention_mask, train, rng)

    def class_logits_from(self, encoded: Tensor) -> Tensor:
        """CLS-position affine head; returns [batch] logits."""
        cls = T.getitem(encoded, (slice(None), 0, slice(None)))
        return T.reshape(T.add(T.matmul(cls, self.cls_w), self.cls_b), (-1,))

    def class_logits(self, tokens, ages, years, attention_mask,
                     train: bool = False, rng: Rng | None = None) -> Tensor:
        return self.class_logits_from(self._forward(tokens, ages, years,
                                                    attention_mask, train, rng))

    def mlm_logits(self, tokens, ages, years, attention_mask,
                   train: bool = False, rng: Rng | None = None) -> Tensor:
        """Per-position vocabulary logits, [batch, len, token_vocab]."""
        enc = self._forward(tokens, ages, years, attention_mask, train, rng)
        return T.add(T.matmul(enc, self.mlm_w), self.mlm_b)

    def predict_proba(self, seqs: list[TokenizedSequence], batch_size: int = 128) -> np.ndarray:
        """Risk probability per sequence; inference only, no tape.

        Internally batches length-sorted sequences and restores input order.
        """
        from .train import pad_batch  # batching lives with the training loop

        order = sorted(range(len(seqs)), key=lambda i: (len(seqs[i]), i))
        out = np.empty(len(seqs))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            tokens, ages, years, mask, _ = pad_batch([seqs[i] for i in idx])
            logits = self.class_logits(tokens, ages, years, mask, train=False)
            out[idx] = T.sigmoid(logits).data
        return out

    def predict_risk(self, seq: TokenizedSequence) -> float:
        return float(self.predict_proba([seq])[0])


def save_checkpoint(model: RiskModel, path: str) -> None:
    """Write manifest.json plus a little-endian f32 blob under path/."""
    os.makedirs(path, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        raw = p.data.astype("<f4").tobytes()
        entries.append({"name": name, "shape": list(p.data.shape), "dtype": "<f4",
                        "byte_offset": offset, "byte_length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "tensors": entries,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(os.path.join(path, CHECKPOINT_WEIGHTS), "wb") as fh:
        fh.write(blob)
    with open(os.path.join(path, CHECKPOINT_MANIFEST), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)


def load_checkpoint(path: str, expected_config: ModelConfig | None = None) -> RiskModel:
    """Rebuild a model from a checkpoint directory; verifies hash and shapes."""
    try:
        with open(os.path.join(path, CHECKPOINT_MANIFEST), encoding="utf-8") as fh:
            manifest = json.load(fh)
        with open(os.path.join(path, CHECKPOINT_WEIGHTS), "rb") as fh:
            blob = fh.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint at {path}: {exc}") from exc
    if hashlib.sha256(blob).hexdigest() != manifest.get("blob_sha256"):
        raise CheckpointError("checkpoint blob hash mismatch (truncated or corrupt)")
    config = ModelConfig.from_dict(manifest["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"checkpoint config {config} does not match requested {expected_config}")
    model = RiskModel(config, rng=None)
    params = dict(model.named_parameters())
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in params or name in seen:
            raise CheckpointError(f"unexpected or duplicate tensor {name!r}")
        seen.add(name)
        p = params[name]
        if list(p.data.shape) != entry["shape"]:
            raise CheckpointError(
                f"tensor {name!r} shape {entry['shape']} != expected {list(p.data.shape)}")
        start, length = entry["byte_offset"], entry["byte_length"]
        if start + length > len(blob):
            raise CheckpointError(f"tensor {name!r} extends past blob end")
        values = np.frombuffer(blob[start:start + length], dtype="<f4")
        p.data = values.astype(np.float64).reshape(p.data.shape)
    if seen != set(params):
        raise CheckpointError(f"checkpoint missing tensors: {sorted(set(params) - seen)}")
    return model
