"""Sentence encoder: tokens -> word embeddings -> single-layer LSTM -> linear map.

The LSTM runs from a zero state and stops at each query's true length, so
padding never leaks into the sentence embedding.
"""

from __future__ import annotations

import re
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, EmptyQueryError, FormatError
from .grad import ops
from .grad.params import glorot
from .grad.tensor import Parameter, Tensor

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: PAD_ID, UNK: UNK_ID}
        for tok in tokens:
            self.add(tok)

    @classmethod
    def build(cls, queries: Iterable[Iterable[str]]) -> "Vocabulary":
        """Vocabulary over every token seen, in sorted order for reproducibility."""
        seen = set()
        for q in queries:
            seen.update(q)
        seen.discard(PAD)
        seen.discard(UNK)
        return cls(sorted(seen))

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, tok: str) -> bool:
        return tok in self.stoi

    def id(self, tok: str) -> int:
        return self.stoi.get(tok, UNK_ID)

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: list[str]) -> "Vocabulary":
        if itos[:2] != [PAD, UNK]:
            raise FormatError("vocabulary must start with the pad and unknown tokens")
        return cls(itos[2:])


def encode_tokens(tokens: list[str], vocab: Vocabulary, max_len: int) -> list[int]:
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if not tokens:
        raise EmptyQueryError("query has no tokens")
    return [vocab.id(t) for t in tokens[:max_len]]


def pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences with the pad id; returns (ids [B, L], lengths [B])."""
    if any(len(s) == 0 for s in seqs):
        raise EmptyQueryError("query has no tokens")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.full((len(seqs), int(lengths.max())), PAD_ID, dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
    return ids, lengths


# ---------------------------------------------------------------- parameters


def init_embeddings(vocab_size: int, d_w: int, rng: np.random.Generator, name: str = "text.embedding") -> Parameter:
    table = rng.normal(0.0, 1.0 / np.sqrt(d_w), size=(vocab_size, d_w))
    table[PAD_ID] = 0.0
    return Parameter(name, table)


def load_embeddings(
    path: str | Path,
    vocab: Vocabulary,
    d_w: int,
    rng: np.random.Generator,
    trainable: bool = False,
    name: str = "text.embedding",
) -> Parameter:
    """Embedding table from a text file of ``token v1 ... v_dw`` lines.

    Vocabulary tokens missing from the file keep a random row.
    """
    table = init_embeddings(len(vocab), d_w, rng, name).data
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != d_w + 1:
                raise FormatError(f"{path}:{lineno}: expected token and {d_w} values, got {len(parts) - 1}")
            tok = parts[0]
            if tok in vocab and vocab.id(tok) != PAD_ID:
                try:
                    table[vocab.id(tok)] = [float(v) for v in parts[1:]]
                except ValueError:
                    raise FormatError(f"{path}:{lineno}: non-numeric embedding value") from None
    return Parameter(name, table, requires_grad=trainable)


@dataclass
class LstmParams:
    W_i: Parameter
    W_f: Parameter
    W_o: Parameter
    W_g: Parameter
    b_i: Parameter
    b_f: Parameter
    b_o: Parameter
    b_g: Parameter

    @property
    def hidden(self) -> int:
        return self.W_i.shape[0]

    @property
    def input_width(self) -> int:
        return self.W_i.shape[1] - self.W_i.shape[0]

    def all(self) -> list[Parameter]:
        return [self.W_i, self.W_f, self.W_o, self.W_g, self.b_i, self.b_f, self.b_o, self.b_g]

    @classmethod
    def init(cls, d_w: int, d_h: int, rng: np.random.Generator, prefix: str = "text.lstm") -> "LstmParams":
        ws = {}
        for gate in "ifog":
            ws[f"W_{gate}"] = Parameter(f"{prefix}.W_{gate}", glorot(rng, (d_h, d_w + d_h), d_w + d_h, d_h))
        bs = {f"b_{g}": Parameter(f"{prefix}.b_{g}", np.zeros(d_h)) for g in "iog"}
        # forget gate starts open
        bs["b_f"] = Parameter(f"{prefix}.b_f", np.ones(d_h))
        return cls(**ws, **bs)


# ---------------------------------------------------------------- forward


def lstm_forward_batch(ids: np.ndarray, lengths: np.ndarray, table: Tensor, params: LstmParams) -> Tensor:
    """Final hidden states [B, d_h] for padded ids [B, L] with true ``lengths``."""
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if ids.ndim != 2 or ids.shape[1] == 0 or np.any(lengths < 1):
        raise EmptyQueryError("every query needs at least one token")
    if table.shape[1] != params.input_width:
        raise DimensionError(f"embedding width {table.shape[1]} does not match LSTM input {params.input_width}")
    batch, d_h = ids.shape[0], params.hidden
    h = Tensor(np.zeros((batch, d_h)))
    c = Tensor(np.zeros((batch, d_h)))
    for t in range(int(lengths.max())):
        x = ops.embedding(ids[:, t], table, pad_id=PAD_ID)
        z = ops.concat([x, h], axis=1)
        i = ops.sigmoid(ops.linear(z, params.W_i, params.b_i))
        f = ops.sigmoid(ops.linear(z, params.W_f, params.b_f))
        o = ops.sigmoid(ops.linear(z, params.W_o, params.b_o))
        g = ops.tanh(ops.linear(z, params.W_g, params.b_g))
        c_new = ops.add(ops.hadamard(f, c), ops.hadamard(i, g))
        h_new = ops.hadamard(o, ops.tanh(c_new))
        if t == 0 or np.all(lengths > t):
            c, h = c_new, h_new
        else:
            active = (lengths > t)[:, None]
            c = ops.where(active, c_new, c)
            h = ops.where(active, h_new, h)
    return h


def lstm_forward(ids: list[int], table: Tensor, params: LstmParams) -> Tensor:
    """Final hidden state [d_h] for one id sequence; trailing pad ids are ignored."""
    ids = list(ids)
    while ids and ids[-1] == PAD_ID:
        ids.pop()
    if not ids:
        raise EmptyQueryError("query has no tokens")
    h = lstm_forward_batch(np.asarray([ids]), np.array([len(ids)]), table, params)
    return ops.reshape(h, (params.hidden,))


def sentence_embed(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``f_s = W h + b`` for ``h`` [d_h] or a batch [B, d_h]."""
    if h.shape[-1] != weight.shape[1]:
        raise DimensionError(f"hidden width {h.shape[-1]} does not match projection {weight.shape}")
    if h.ndim == 1:
        out = ops.linear(ops.reshape(h, (1, h.shape[0])), weight, bias)
        return ops.reshape(out, (weight.shape[0],))
    return ops.linear(h, weight, bias)
