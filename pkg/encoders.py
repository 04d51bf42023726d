# -*- coding: utf-8 -*-
"""
Encoders Module
Vocabularies and the three encoder stacks: the natural-language input encoder,
the sketch encoder, and the table-aware question encoder with column encodings.
"""

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from meaning_repr import TableSchema
from nn_core import ParamSet, Tape, Tensor, add_lstm, bilstm_encode
from utils import EmptyInput, EmptySchema, ValidationError

logger = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
BOS = "<s>"
EOS = "</s>"
COLUMN_SEP = "‖"
SPECIALS: Tuple[str, ...] = (PAD, UNK, BOS, EOS)


class Vocab:
    """Token <-> row index mapping; unknown tokens map to the single UNK row."""

    def __init__(self, tokens: Iterable[str] = (), specials: Sequence[str] = SPECIALS):
        self.itos: List[str] = []
        self.stoi: Dict[str, int] = {}
        for tok in list(specials) + list(tokens):
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    @classmethod
    def build(cls, sequences: Iterable[Sequence[str]], min_freq: int = 1,
              specials: Sequence[str] = SPECIALS) -> "Vocab":
        """
        Build a vocabulary from token sequences.

        Args:
            sequences: Token sequences to count
            min_freq: Tokens seen fewer times map to UNK
            specials: Reserved tokens placed first

        Returns:
            Vocab ordered by descending frequency, ties broken alphabetically
        """
        counts = Counter(tok for seq in sequences for tok in seq)
        kept = sorted((tok for tok, n in counts.items() if n >= min_freq), key=lambda tok: (-counts[tok], tok))
        return cls(kept, specials)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def index(self, token: str) -> int:
        return self.stoi.get(token, self.stoi[UNK])

    def token(self, index: int) -> str:
        return self.itos[index]

    def encode(self, tokens: Sequence[str]) -> List[int]:
        return [self.index(tok) for tok in tokens]

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.itos[i] for i in ids]

    def to_list(self) -> List[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocab":
        return cls(itos, specials=())


def pad_batch(sequences: Sequence[Sequence[int]], pad: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad id sequences into (ids, mask) arrays of shape (B, T)."""
    if not sequences or any(len(seq) == 0 for seq in sequences):
        raise EmptyInput("cannot batch an empty sequence")
    width = max(len(seq) for seq in sequences)
    ids = np.full((len(sequences), width), pad, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=bool)
    for b, seq in enumerate(sequences):
        ids[b, :len(seq)] = seq
        mask[b, :len(seq)] = True
    return ids, mask


@dataclass
class EncodedInput:
    """
    Encoder output for a batch.

    vectors has shape (B, T, n) and summary (B, n); the column fields are set
    for table questions only.
    """

    vectors: Tensor
    summary: Tensor
    mask: np.ndarray
    columns: Optional[Tensor] = None
    column_mask: Optional[np.ndarray] = None
    column_attention: Optional[Tensor] = None

    @property
    def lengths(self) -> np.ndarray:
        return self.mask.sum(axis=1)


@dataclass
class ColumnBatch:
    """Delimited header words of each table and the word positions bounding every column."""

    ids: np.ndarray
    mask: np.ndarray
    first: np.ndarray
    last: np.ndarray
    column_mask: np.ndarray


def column_batch(schemas: Sequence[TableSchema], vocab: Vocab) -> ColumnBatch:
    """Lay out "w w ‖ w ‖ ..." header sequences for a batch of schemas."""
    if not schemas:
        raise EmptySchema("no schemas to encode")
    sequences, firsts, lasts = [], [], []
    for schema in schemas:
        if schema.M < 1:
            raise EmptySchema("table schema has no columns")
        words: List[str] = []
        first, last = [], []
        for k, column in enumerate(schema.columns):
            if k:
                words.append(COLUMN_SEP)
            first.append(len(words))
            words.extend(column)
            last.append(len(words) - 1)
        sequences.append(vocab.encode(words))
        firsts.append(first)
        lasts.append(last)

    ids, mask = pad_batch(sequences)
    width = max(len(f) for f in firsts)
    first = np.zeros((len(schemas), width), dtype=np.int64)
    last = np.zeros((len(schemas), width), dtype=np.int64)
    column_mask = np.zeros((len(schemas), width), dtype=bool)
    for b, (f, l) in enumerate(zip(firsts, lasts)):
        first[b, :len(f)] = f
        last[b, :len(l)] = l
        column_mask[b, :len(f)] = True
    return ColumnBatch(ids, mask, first, last, column_mask)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def add_input_encoder(params: ParamSet, vocab_size: int, embedding_size: int, hidden: int,
                      pos_vocab_size: int = 0, pos_size: int = 10) -> None:
    params.add("src.emb", (vocab_size, embedding_size))
    input_size = embedding_size
    if pos_vocab_size:
        params.add("src.pos", (pos_vocab_size, pos_size))
        input_size += pos_size
    add_lstm(params, "enc.fwd", input_size, hidden // 2)
    add_lstm(params, "enc.bwd", input_size, hidden // 2)


def add_sketch_encoder(params: ParamSet, vocab_size: int, embedding_size: int, hidden: int,
                       enabled: bool = True) -> None:
    """With the encoder disabled, sketch tokens are embedded straight at the hidden size."""
    if enabled:
        params.add("sk.emb", (vocab_size, embedding_size))
        add_lstm(params, "sk.fwd", embedding_size, hidden // 2)
        add_lstm(params, "sk.bwd", embedding_size, hidden // 2)
    else:
        params.add("sk.direct", (vocab_size, hidden))


def add_table_encoder(params: ParamSet, embedding_size: int, hidden: int, attention_size: int = 64,
                      table_aware: bool = True) -> None:
    add_lstm(params, "col.fwd", embedding_size, hidden // 2)
    add_lstm(params, "col.bwd", embedding_size, hidden // 2)
    if table_aware:
        params.add("alpha.W", (hidden, attention_size))
        params.add("alpha.b", (attention_size,), init="zeros")
        add_lstm(params, "enc2.fwd", 2 * hidden, hidden // 2)
        add_lstm(params, "enc2.bwd", 2 * hidden, hidden // 2)


def load_embedding_file(path: str, vocab: Vocab, params: ParamSet, name: str = "src.emb") -> int:
    """
    Seed embedding rows from a text file of "token v1 v2 ..." lines.

    Returns:
        Number of vocabulary rows that were overwritten
    """
    table = params[name]
    dim = table.shape[1]
    seeded = 0
    with open(path, encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2 or parts[0] not in vocab:
                continue
            if len(parts) - 1 != dim:
                raise ValidationError(f"{path} line {line_number}: expected {dim} components, got {len(parts) - 1}")
            table.data[vocab.index(parts[0])] = np.asarray(parts[1:], dtype=table.data.dtype)
            seeded += 1
    logger.info(f"Seeded {seeded}/{len(vocab)} embedding rows of '{name}' from {path}")
    return seeded


# ---------------------------------------------------------------------------
# Encoders
# ---------------------------------------------------------------------------

def _embedded_steps(tape: Tape, params: ParamSet, ids: np.ndarray, table: str, dropout: float,
                    pos_ids: Optional[np.ndarray] = None) -> List[Tensor]:
    emb = tape.embed(params[table], ids)
    if pos_ids is not None and "src.pos" in params:
        emb = tape.concat([emb, tape.embed(params["src.pos"], pos_ids)])
    emb = tape.dropout(emb, dropout)
    return [tape.step(emb, t) for t in range(ids.shape[1])]


def _check_nonempty(ids: np.ndarray, mask: np.ndarray, what: str) -> None:
    if ids.ndim != 2 or ids.shape[1] == 0 or not np.all(np.asarray(mask).any(axis=1)):
        raise EmptyInput(f"{what} cannot be empty")


def encode_input(tape: Tape, ids: np.ndarray, mask: np.ndarray, params: ParamSet, dropout: float = 0.0,
                 pos_ids: Optional[np.ndarray] = None) -> EncodedInput:
    """
    Bi-directional encoding of a batch of questions.

    Args:
        tape: Active tape
        ids: (B, T) token ids, UNK for unknown words
        mask: (B, T) real-token mask
        params: Parameters with the "src" embeddings and the "enc" LSTMs
        dropout: Rate applied to the word embeddings
        pos_ids: Optional (B, T) part-of-speech ids

    Returns:
        EncodedInput with per-token vectors and summary [forward at the last word, backward at the first]
    """
    _check_nonempty(ids, mask, "input")
    steps = _embedded_steps(tape, params, ids, "src.emb", dropout, pos_ids)
    vectors, summary = bilstm_encode(tape, steps, mask, params, "enc")
    return EncodedInput(vectors, summary, np.asarray(mask, dtype=bool))


def encode_sketch(tape: Tape, ids: np.ndarray, mask: np.ndarray, params: ParamSet,
                  dropout: float = 0.0) -> Tensor:
    """Sketch vectors of shape (B, K, n), one per sketch token."""
    _check_nonempty(ids, mask, "sketch")
    if "sk.direct" in params:
        return tape.embed(params["sk.direct"], ids)
    steps = _embedded_steps(tape, params, ids, "sk.emb", dropout)
    vectors, _ = bilstm_encode(tape, steps, mask, params, "sk")
    return vectors


def encode_columns(tape: Tape, columns: ColumnBatch, params: ParamSet, dropout: float = 0.0) -> Tensor:
    """
    One vector per column: the forward state at its last word joined with the backward state at its first.

    One bi-LSTM pass runs over the delimited header words; rows of tables with
    fewer columns are padding (see columns.column_mask).
    """
    if columns.first.shape[1] == 0:
        raise EmptySchema("table schema has no columns")
    steps = _embedded_steps(tape, params, columns.ids, "src.emb", dropout)
    states, _ = bilstm_encode(tape, steps, columns.mask, params, "col")
    half = states.shape[-1] // 2
    forward = tape.narrow(states, 0, half)
    backward = tape.narrow(states, half, 2 * half)
    vectors = [
        tape.concat([tape.take(forward, columns.last[:, k]), tape.take(backward, columns.first[:, k])])
        for k in range(columns.first.shape[1])
    ]
    return tape.stack(vectors, axis=1)


def encode_table_question(tape: Tape, ids: np.ndarray, mask: np.ndarray, columns: ColumnBatch,
                          params: ParamSet, dropout: float = 0.0, pos_ids: Optional[np.ndarray] = None,
                          table_aware: bool = True) -> EncodedInput:
    """
    Question encoding that attends over the table's column vectors.

    Question and column vectors are projected through a shared tanh layer and scored by
    dot product; a second bi-LSTM runs over each word joined with its attended column mix. Without table awareness the first-pass encoding is returned
    together with the column vectors.
    """
    column_vectors = encode_columns(tape, columns, params, dropout)
    first = encode_input(tape, ids, mask, params, dropout, pos_ids)
    if not table_aware:
        first.columns = column_vectors
        first.column_mask = columns.column_mask
        return first

    w, b = params["alpha.W"], params["alpha.b"]
    q = tape.tanh(tape.add(tape.matmul(first.vectors, w), b))
    k = tape.tanh(tape.add(tape.matmul(column_vectors, w), b))
    scores = tape.bmm(q, k, transpose_b=True)
    attention = tape.softmax(scores, columns.column_mask[:, None, :])
    context = tape.bmm(attention, column_vectors)

    joined = tape.dropout(tape.concat([first.vectors, context]), dropout)
    steps = [tape.step(joined, t) for t in range(ids.shape[1])]
    vectors, summary = bilstm_encode(tape, steps, mask, params, "enc2")
    return EncodedInput(vectors, summary, first.mask, column_vectors, columns.column_mask, attention)


if __name__ == "__main__":
    vocab = Vocab.build([["how", "many", "presidents"]])
    params = ParamSet(seed=0)
    add_input_encoder(params, len(vocab), 8, 6)
    ids, mask = pad_batch([vocab.encode(["how", "many", "presidents"])])
    enc = encode_input(Tape(record=False), ids, mask, params)
    print(enc.vectors.shape, enc.summary.shape)
