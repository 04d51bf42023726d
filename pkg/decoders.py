# -*- coding: utf-8 -*-
"""
Decoders Module
Generation heads: the coarse sketch decoder, the sketch-constrained fine decoder,
the one-stage baseline decoder, and the WikiSQL sketch classifier, SELECT
classifiers and WHERE decoder.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from encoders import BOS, EOS, PAD, SPECIALS, UNK, EncodedInput, Vocab
from meaning_repr import AGG_OPS, CLOSE, DEFAULT_BINDERS, classify_code_token, is_head, is_terminal
from nn_core import (
    ParamSet,
    Tape,
    Tensor,
    add_lstm,
    add_scoring_network,
    attended_output,
    attention,
    lstm_step,
    scoring_network,
)
from sketch_extract import (
    AND,
    NO_WHERE,
    QMARK,
    WHERE,
    LambdaSketchGrammar,
    PlanStep,
    Sketch,
    SketchTokenClass,
    SlotType,
    expand_sketch,
    lambda_token_class,
    parent_positions,
    sketch_operators,
)
from utils import EmptyCatalog, MaxLengthExceeded, UnclassifiableToken

logger = logging.getLogger(__name__)

SQL_SKETCH_TOKENS: Tuple[str, ...] = (WHERE, AND, ">", "<", "=", NO_WHERE)
SQL_TOKEN_IDS: Dict[str, int] = {tok: i for i, tok in enumerate(SQL_SKETCH_TOKENS)}

# emitted when a slot has no admissible candidate
DEFAULT_FILL: Dict[SlotType, str] = {
    SlotType.TERM: "_",
    SlotType.NAME: "_",
    SlotType.NUMBER: "0",
    SlotType.STRING: "''",
}


@dataclass(frozen=True)
class DecoderHead:
    """Settings of one attention decoder over a target vocabulary."""

    prefix: str
    vocab: Vocab
    parent_feeding: bool = False
    copy: bool = False
    dropout: float = 0.0
    label_smoothing: float = 0.0
    max_len: int = 100


@dataclass
class StepBatch:
    """
    Teacher-forcing arrays for a batch of target sequences, all (B, L).

    prev_links holds the sketch position the previous output token is aligned
    with, or -1; loss_mask marks the steps that contribute to the loss.
    """

    prev_ids: np.ndarray
    targets: np.ndarray
    step_mask: np.ndarray
    loss_mask: np.ndarray
    prev_links: Optional[np.ndarray] = None
    parents: Optional[np.ndarray] = None
    allowed: Optional[np.ndarray] = None
    copy_rows: Optional[np.ndarray] = None
    copy_match: Optional[np.ndarray] = None


@dataclass
class DecodeResult:
    tokens: Optional[List[str]] = None
    step_log_probs: List[float] = field(default_factory=list)
    log_probs: Optional[np.ndarray] = None
    loss: Optional[Tensor] = None

    @property
    def log_prob(self) -> float:
        if self.log_probs is not None:
            return float(self.log_probs.sum())
        return float(sum(self.step_log_probs))


@dataclass
class CopyMixture:
    """Gate-weighted vocabulary distribution and gate-weighted input-position distribution."""

    gate: Tensor
    vocab: Tensor
    copy: Tensor


@dataclass(frozen=True)
class WhereStep:
    col: int
    op: str
    left: int
    right: int


@dataclass
class WhereBatch:
    """Gold WHERE conditions in canonical order, all (B, J)."""

    cols: np.ndarray
    ops: np.ndarray
    left: np.ndarray
    right: np.ndarray
    mask: np.ndarray


@dataclass
class SelectOutput:
    agg_logits: Tensor
    col_logits: Tensor
    col_mask: np.ndarray

    def agg_probs(self) -> np.ndarray:
        return _softmax(self.agg_logits.data, np.ones(self.agg_logits.shape, dtype=bool))

    def col_probs(self) -> np.ndarray:
        return _softmax(self.col_logits.data, self.col_mask)


def _softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, scores, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _target_log_prob(logits: np.ndarray, targets: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    z = np.where(allowed, logits.astype(np.float64), -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return logp[np.arange(len(targets)), targets]


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def add_sequence_decoder(params: ParamSet, prefix: str, vocab_size: int, hidden: int,
                         parent_feeding: bool = False, copy: bool = False) -> None:
    """Token embeddings at the hidden size, one LSTM, attention output layer, optional copy gate."""
    params.add(f"{prefix}.emb", (vocab_size, hidden))
    add_lstm(params, f"{prefix}.lstm", hidden, hidden)
    params.add(f"{prefix}.W1", (hidden, hidden))
    params.add(f"{prefix}.W2", (hidden, hidden))
    params.add(f"{prefix}.Wo", (2 * hidden if parent_feeding else hidden, vocab_size))
    params.add(f"{prefix}.bo", (vocab_size,), init="zeros")
    if copy:
        params.add(f"{prefix}.wg", (hidden, 1))
        params.add(f"{prefix}.bg", (1,), init="zeros")


def add_sql_heads(params: ParamSet, hidden: int, catalog_size: int, scoring_hidden: int = 64) -> None:
    """Sketch classifier, SELECT classifiers and the WHERE decoder."""
    if catalog_size < 1:
        raise EmptyCatalog("no training sketches to classify over")
    params.add("cls.W", (hidden, catalog_size))
    params.add("cls.b", (catalog_size,), init="zeros")
    params.add("agg.W", (hidden, len(AGG_OPS)))
    params.add("agg.b", (len(AGG_OPS),), init="zeros")
    add_scoring_network(params, "sel", (hidden, hidden), scoring_hidden)

    params.add("where.emb", (len(SQL_SKETCH_TOKENS), hidden))
    add_lstm(params, "where.lstm", hidden, hidden)
    params.add("where.W1", (hidden, hidden))
    params.add("where.W2", (hidden, hidden))
    add_scoring_network(params, "where.col", (hidden, hidden), scoring_hidden)
    add_scoring_network(params, "where.left", (hidden, hidden), scoring_hidden)
    add_scoring_network(params, "where.right", (hidden, hidden, hidden), scoring_hidden)
    params.add("where.span.W", (2 * hidden, hidden))
    params.add("where.span.b", (hidden,), init="zeros")


# ---------------------------------------------------------------------------
# Output constraints
# ---------------------------------------------------------------------------

@lru_cache(maxsize=None)
def output_mask(vocab: Vocab, with_unk: bool = False) -> np.ndarray:
    """Tokens a decoder may emit: everything but padding and begin-of-sequence."""
    mask = np.ones(len(vocab), dtype=bool)
    mask[vocab.index(PAD)] = False
    mask[vocab.index(BOS)] = False
    mask[vocab.index(UNK)] = with_unk
    return mask


def token_fits_slot(token: str, slot: SlotType) -> bool:
    if token in SPECIALS or token == QMARK:
        return False
    if slot is SlotType.TERM:
        return is_terminal(token)
    try:
        return classify_code_token(token).kind.value == slot.value
    except UnclassifiableToken:
        return False


@lru_cache(maxsize=None)
def slot_mask(vocab: Vocab, slot: SlotType, with_unk: bool = False) -> np.ndarray:
    """Vocabulary entries that can fill a slot; UNK is a training target only."""
    mask = np.array([token_fits_slot(tok, slot) for tok in vocab.itos], dtype=bool)
    mask[vocab.index(UNK)] = with_unk
    return mask


class FreeConstraint:
    """Any non-special token, end-of-sequence only after min_len tokens."""

    def __init__(self, vocab: Vocab, min_len: int = 1):
        self.base = output_mask(vocab)
        self.eos = vocab.index(EOS)
        self.min_len = min_len
        self.steps = 0

    def allowed(self) -> np.ndarray:
        mask = self.base.copy()
        if self.steps < self.min_len:
            mask[self.eos] = False
        return mask

    def advance(self, token: str) -> None:
        self.steps += 1


class LambdaGrammarConstraint:
    """Masks the coarse λ decoder so that every emitted sketch is canonical."""

    def __init__(self, vocab: Vocab, max_len: int, binders: FrozenSet[str] = DEFAULT_BINDERS):
        self.grammar = LambdaSketchGrammar(max_len, binders)
        self.binders = binders
        self.classes = [lambda_token_class(tok, binders) for tok in vocab.itos]
        self.classes[vocab.index(EOS)] = SketchTokenClass.END

    def allowed(self) -> np.ndarray:
        ok = self.grammar.allowed()
        return np.array([cls in ok for cls in self.classes], dtype=bool)

    def advance(self, token: str) -> None:
        if token != EOS:
            self.grammar.advance(token, lambda_token_class(token, self.binders))


def constraint_masks(constraint, tokens: Sequence[str], vocab: Vocab) -> np.ndarray:
    """
    Masks a constraint produces along a gold sequence (tokens then end-of-sequence).

    The gold token and UNK are always admitted, so teacher forcing stays defined.
    """
    rows = []
    for tok in list(tokens) + [EOS]:
        mask = constraint.allowed()
        mask[vocab.index(tok)] = True
        mask[vocab.index(UNK)] = True
        rows.append(mask)
        constraint.advance(tok)
    return np.stack(rows)


# ---------------------------------------------------------------------------
# Shared decoder machinery
# ---------------------------------------------------------------------------

def decoder_step(tape: Tape, params: ParamSet, prefix: str, state: Tuple[Tensor, Tensor], x: Tensor,
                 enc: EncodedInput, dropout: float = 0.0,
                 row_mask: Optional[np.ndarray] = None) -> Tuple[Tuple[Tensor, Tensor], Tensor, Tensor, Tensor]:
    """
    One LSTM step, attention over the input, attended output.

    Returns:
        (state, attended output, attention scores, attention weights)
    """
    state = lstm_step(tape, state, x, params, f"{prefix}.lstm", row_mask)
    h = state[0]
    scores = tape.bdot(enc.vectors, h)
    weights = tape.softmax(scores, enc.mask)
    context = tape.weighted_sum(weights, enc.vectors)
    att = attended_output(tape, h, context, params[f"{prefix}.W1"], params[f"{prefix}.W2"])
    return state, tape.dropout(att, dropout), scores, weights


def output_logits(tape: Tape, params: ParamSet, prefix: str, att: Tensor, parent: Optional[Tensor] = None) -> Tensor:
    feature = att if parent is None else tape.concat([att, parent])
    return tape.add(tape.matmul(feature, params[f"{prefix}.Wo"]), params[f"{prefix}.bo"])


def parent_feed_output(tape: Tape, att: Tensor, parent: Tensor, wo: Tensor, bo: Tensor,
                       mask: Optional[np.ndarray] = None) -> Tensor:
    """Output distribution over the attended state joined with the parent step's state."""
    logits = tape.add(tape.matmul(tape.concat([att, parent]), wo), bo)
    return tape.softmax(logits, mask)


def copy_distribution(tape: Tape, h: Tensor, weights: Tensor, p_vocab: Tensor, params: ParamSet,
                      prefix: str) -> CopyMixture:
    """Sigmoid copy gate on the decoder hidden state; it splits mass between generating and copying."""
    gate = tape.sigmoid(tape.add(tape.matmul(h, params[f"{prefix}.wg"]), params[f"{prefix}.bg"]))
    one = tape.const(np.ones(gate.shape))
    return CopyMixture(gate, tape.mul(tape.sub(one, gate), p_vocab), tape.mul(gate, weights))


def _copy_log_prob(tape: Tape, params: ParamSet, prefix: str, h: Tensor, scores: Tensor,
                   src_mask: np.ndarray, logits: Tensor, allowed: np.ndarray, targets: np.ndarray,
                   copy_rows: np.ndarray, match: Optional[np.ndarray]) -> Tensor:
    """Mixture log-probability of each target: generated from the vocabulary, or copied from any matching input."""
    z = tape.add(tape.matmul(h, params[f"{prefix}.wg"]), params[f"{prefix}.bg"])
    z = tape.reshape(z, (z.shape[0],))
    log_generate = tape.add(tape.pick(tape.log_softmax(logits, allowed), targets),
                            tape.log_sigmoid(tape.scale(z, -1.0)))
    if not copy_rows.any():
        return log_generate
    selected = np.where(copy_rows[:, None], match, src_mask)
    log_mass = tape.sub(tape.logsumexp(scores, selected), tape.logsumexp(scores, src_mask))
    log_copy = tape.add(log_mass, tape.log_sigmoid(z))
    return tape.where(copy_rows, log_copy, log_generate)


def _teacher_forced(tape: Tape, enc: EncodedInput, params: ParamSet, head: DecoderHead, gold: StepBatch,
                    sketch_vectors: Optional[Tensor] = None) -> DecodeResult:
    B, L = gold.targets.shape
    vocab = head.vocab
    unk = vocab.index(UNK)
    default_allowed = np.broadcast_to(output_mask(vocab, with_unk=True), (B, len(vocab)))
    state = (enc.summary, tape.zeros(enc.summary.shape))
    states = [enc.summary]
    table = params[f"{head.prefix}.emb"]
    loss: Optional[Tensor] = None
    log_probs = np.zeros(B)

    for t in range(L):
        x = tape.embed(table, gold.prev_ids[:, t])
        if sketch_vectors is not None and gold.prev_links is not None:
            links = gold.prev_links[:, t]
            if np.any(links >= 0):
                x = tape.where(links >= 0, tape.take(sketch_vectors, np.maximum(links, 0)), x)
        x = tape.dropout(x, head.dropout)
        state, att, scores, _ = decoder_step(tape, params, head.prefix, state, x, enc, head.dropout,
                                             gold.step_mask[:, t])
        states.append(state[0])

        weight = gold.loss_mask[:, t]
        if not weight.any():
            continue
        parent = tape.gather_steps(states, gold.parents[:, t]) if head.parent_feeding else None
        logits = output_logits(tape, params, head.prefix, att, parent)
        allowed = gold.allowed[:, t] if gold.allowed is not None else default_allowed
        allowed = allowed | ~weight[:, None]
        targets = np.where(weight, gold.targets[:, t], unk)

        if head.copy:
            term = _copy_log_prob(tape, params, head.prefix, state[0], scores, enc.mask, logits, allowed, targets,
                                  gold.copy_rows[:, t] & weight, gold.copy_match[:, t])
            step_loss = tape.scale(tape.weighted_total(term, weight), -1.0)
            step_lp = term.data
        else:
            nll = tape.softmax_nll(logits, targets, head.label_smoothing, allowed)
            step_loss = tape.weighted_total(nll, weight)
            step_lp = _target_log_prob(logits.data, targets, allowed)
        log_probs += np.where(weight, step_lp, 0.0)
        loss = step_loss if loss is None else tape.add(loss, step_loss)

    if loss is None:
        loss = tape.const(np.asarray(0.0))
    return DecodeResult(log_probs=log_probs, loss=loss)


def _choose(tape: Tape, params: ParamSet, head: DecoderHead, state: Tuple[Tensor, Tensor],
            att: Tensor, weights: Tensor, logits_or_parent: Tuple[Tensor, Optional[Tensor]], allowed: np.ndarray,
            src_tokens: Optional[Sequence[str]],
            copy_filter: Optional[Callable[[str], bool]] = None) -> Tuple[Optional[str], float]:
    """Greedy pick among admissible vocabulary tokens and, with copying, OOV input tokens."""
    vocab = head.vocab
    logits, parent = logits_or_parent
    p_vocab = None
    if allowed.any():
        if parent is not None:
            p_vocab = parent_feed_output(tape, att, parent, params[f"{head.prefix}.Wo"],
                                         params[f"{head.prefix}.bo"], allowed[None, :])
        else:
            p_vocab = tape.softmax(logits, allowed[None, :])

    vocab_scores = np.zeros(len(vocab)) if p_vocab is None else p_vocab.data[0].astype(np.float64)
    copy_scores: Dict[str, float] = {}
    if head.copy and src_tokens:
        uniform = tape.const(np.full((1, len(vocab)), 1.0 / len(vocab)))
        mixture = copy_distribution(tape, state[0], weights, p_vocab if p_vocab is not None else uniform,
                                    params, head.prefix)
        if p_vocab is not None:
            vocab_scores = mixture.vocab.data[0].astype(np.float64)
        mass = mixture.copy.data[0]
        for k, tok in enumerate(src_tokens):
            if tok not in vocab and (copy_filter is None or copy_filter(tok)):
                copy_scores[tok] = copy_scores.get(tok, 0.0) + float(mass[k])

    best_token, best_score = None, 0.0
    if p_vocab is not None:
        index = int(np.argmax(np.where(allowed, vocab_scores, -1.0)))
        best_token, best_score = vocab.token(index), float(vocab_scores[index])
    for tok, score in copy_scores.items():
        if best_token is None or score > best_score:
            best_token, best_score = tok, score
    if best_token is None:
        return None, 0.0
    return best_token, float(np.log(max(best_score, 1e-45)))


def _greedy_sequence(tape: Tape, enc: EncodedInput, params: ParamSet, head: DecoderHead, constraint,
                     src_tokens: Optional[Sequence[str]] = None) -> DecodeResult:
    vocab = head.vocab
    table = params[f"{head.prefix}.emb"]
    state = (enc.summary, tape.zeros(enc.summary.shape))
    states = [enc.summary]
    prev = vocab.index(BOS)
    tokens: List[str] = []
    step_log_probs: List[float] = []
    stack: List[int] = []

    for t in range(head.max_len):
        x = tape.embed(table, np.array([prev]))
        state, att, _, weights = decoder_step(tape, params, head.prefix, state, x, enc)
        states.append(state[0])
        parent = (states[stack[-1]] if stack else states[0]) if head.parent_feeding else None
        logits = output_logits(tape, params, head.prefix, att, parent)
        token, log_prob = _choose(tape, params, head, state, att, weights, (logits, parent), constraint.allowed(),
                                  src_tokens)
        if token is None:
            raise MaxLengthExceeded("no admissible token left")
        step_log_probs.append(log_prob)
        if token == EOS:
            return DecodeResult(tokens=tokens, step_log_probs=step_log_probs)
        constraint.advance(token)
        tokens.append(token)
        prev = vocab.index(token)
        if is_head(token):
            stack.append(t + 1)
        elif token == CLOSE and stack:
            stack.pop()
    raise MaxLengthExceeded(f"no end-of-sequence within {head.max_len} steps")


# ---------------------------------------------------------------------------
# Coarse, fine and one-stage decoders
# ---------------------------------------------------------------------------

def coarse_decode(tape: Tape, enc: EncodedInput, params: ParamSet, head: DecoderHead, grammar: bool,
                  mode: str = "greedy", gold: Optional[StepBatch] = None) -> DecodeResult:
    """
    Sketch decoder: one sketch token per step, conditioned on the input.

    Args:
        tape: Active tape
        enc: Encoded input batch (a single example in greedy mode)
        params: Parameters holding the "<prefix>" decoder
        head: Decoder settings; prefix is normally "coarse"
        grammar: Constrain output to canonical λ sketches
        mode: "train" (teacher forcing on gold) or "greedy"
        gold: Teacher-forcing arrays in train mode

    Returns:
        DecodeResult with the loss and per-example log-probabilities (train) or the tokens (greedy)
    """
    if mode == "train":
        return _teacher_forced(tape, enc, params, head, gold)
    constraint = LambdaGrammarConstraint(head.vocab, head.max_len) if grammar else FreeConstraint(head.vocab)
    return _greedy_sequence(tape, enc, params, head, constraint)


def onestage_decode(tape: Tape, enc: EncodedInput, params: ParamSet, head: DecoderHead, mode: str = "greedy",
                    gold: Optional[StepBatch] = None, src_tokens: Optional[Sequence[str]] = None) -> DecodeResult:
    """The same decoder targeting the full meaning representation directly."""
    if mode == "train":
        return _teacher_forced(tape, enc, params, head, gold)
    return _greedy_sequence(tape, enc, params, head, FreeConstraint(head.vocab), src_tokens)


def plan_parents(plan: Sequence[PlanStep]) -> List[int]:
    """Parent steps of a fixed-length plan (fill steps are terminals)."""
    return parent_positions([QMARK if step.is_fill else step.token for step in plan])


def fine_decode(tape: Tape, enc: EncodedInput, sketch: Optional[Sketch], sketch_vectors: Tensor, params: ParamSet,
                head: DecoderHead, mode: str = "greedy", gold: Optional[StepBatch] = None,
                src_tokens: Optional[Sequence[str]] = None) -> DecodeResult:
    """
    Fill in a sketch's details.

    Pinned plan steps emit the sketch token and add no loss; the next input after a
    token aligned with sketch position k is that position's sketch vector. Fill steps choose among slot-compatible
    vocabulary tokens and, with copying, type-compatible OOV input tokens.
    """
    if mode == "train":
        return _teacher_forced(tape, enc, params, head, gold, sketch_vectors)

    plan = expand_sketch(sketch)
    if len(plan) > head.max_len:
        raise MaxLengthExceeded(f"sketch expands to {len(plan)} steps")
    parents = plan_parents(plan)
    vocab = head.vocab
    table = params[f"{head.prefix}.emb"]
    state = (enc.summary, tape.zeros(enc.summary.shape))
    states = [enc.summary]
    prev, prev_link = vocab.index(BOS), None
    tokens: List[str] = []
    step_log_probs: List[float] = []

    for t, step in enumerate(plan):
        if prev_link is not None:
            x = tape.take(sketch_vectors, np.array([prev_link]))
        else:
            x = tape.embed(table, np.array([prev]))
        state, att, _, weights = decoder_step(tape, params, head.prefix, state, x, enc)
        states.append(state[0])

        if not step.is_fill:
            token = step.token
        else:
            parent = states[parents[t]] if head.parent_feeding else None
            logits = output_logits(tape, params, head.prefix, att, parent)
            token, log_prob = _choose(tape, params, head, state, att, weights, (logits, parent),
                                      slot_mask(vocab, step.slot), src_tokens,
                                      copy_filter=lambda tok, slot=step.slot: token_fits_slot(tok, slot))
            if token is None:
                token, log_prob = DEFAULT_FILL[step.slot], 0.0
            step_log_probs.append(log_prob)
        tokens.append(token)
        prev, prev_link = vocab.index(token), step.link

    return DecodeResult(tokens=tokens, step_log_probs=step_log_probs)


# ---------------------------------------------------------------------------
# WikiSQL heads
# ---------------------------------------------------------------------------

def sketch_logits(tape: Tape, enc: EncodedInput, params: ParamSet) -> Tensor:
    if params["cls.W"].shape[1] == 0:
        raise EmptyCatalog("sketch catalog is empty")
    return tape.add(tape.matmul(enc.summary, params["cls.W"]), params["cls.b"])


def classify_sketch(tape: Tape, enc: EncodedInput, params: ParamSet) -> Tensor:
    """Distribution over the sketch catalog from the question summary."""
    return tape.softmax(sketch_logits(tape, enc, params))


def predict_select(tape: Tape, enc: EncodedInput, params: ParamSet) -> SelectOutput:
    """Aggregation operator logits and a score for every column against the question summary."""
    B, n = enc.summary.shape
    agg = tape.add(tape.matmul(enc.summary, params["agg.W"]), params["agg.b"])
    cols = scoring_network(tape, [tape.reshape(enc.summary, (B, 1, n)), enc.columns], params, "sel")
    return SelectOutput(agg, cols, enc.column_mask)


def _where_attended(tape: Tape, params: ParamSet, state: Tuple[Tensor, Tensor], enc: EncodedInput,
                    dropout: float) -> Tensor:
    _, context = attention(tape, state[0], enc.vectors, enc.mask)
    att = attended_output(tape, state[0], context, params["where.W1"], params["where.W2"])
    B, n = att.shape
    return tape.reshape(tape.dropout(att, dropout), (B, 1, n))


def _span_vector(tape: Tape, params: ParamSet, enc: EncodedInput, left: np.ndarray, right: np.ndarray) -> Tensor:
    pair = tape.concat([tape.take(enc.vectors, left), tape.take(enc.vectors, right)])
    return tape.tanh(tape.add(tape.matmul(pair, params["where.span.W"]), params["where.span.b"]))


def _right_scores(tape: Tape, params: ParamSet, att: Tensor, enc: EncodedInput, left: np.ndarray) -> Tensor:
    B, _, n = att.shape
    e_left = tape.reshape(tape.take(enc.vectors, left), (B, 1, n))
    return scoring_network(tape, [att, e_left, enc.vectors], params, "where.right")


def decode_where(tape: Tape, enc: EncodedInput, sketch: Optional[Sketch], params: ParamSet, dropout: float = 0.0,
                 mode: str = "greedy", gold: Optional[WhereBatch] = None):
    """
    WHERE conditions: three decoder steps per condition.

    The column step scores every column against the attended state; the operator step
    is pinned by the sketch and reads the chosen column; the span step reads the
    operator's sketch vector and picks a left end, then a right end at or after it. The
    next condition starts from a tanh projection of the span's end vectors.

    Returns:
        Train mode: DecodeResult with the loss and per-example log-probabilities.
        Greedy mode: (list of WhereStep, log-probability).
    """
    B, n = enc.summary.shape
    table = params["where.emb"]
    state = (enc.summary, tape.zeros((B, n)))
    positions = np.arange(enc.mask.shape[1])

    if mode == "train":
        loss: Optional[Tensor] = None
        log_probs = np.zeros(B)
        x = tape.embed(table, np.full(B, SQL_TOKEN_IDS[WHERE]))
        for j in range(gold.mask.shape[1]):
            active = gold.mask[:, j]
            state = lstm_step(tape, state, x, params, "where.lstm", active)
            att = _where_attended(tape, params, state, enc, dropout)
            col_logits = scoring_network(tape, [att, enc.columns], params, "where.col")
            left_gold, right_gold = gold.left[:, j], gold.right[:, j]

            state = lstm_step(tape, state, tape.take(enc.columns, gold.cols[:, j]), params, "where.lstm", active)
            state = lstm_step(tape, state, tape.embed(table, gold.ops[:, j]), params, "where.lstm", active)
            att = _where_attended(tape, params, state, enc, dropout)
            left_logits = scoring_network(tape, [att, enc.vectors], params, "where.left")
            right_mask = enc.mask & (positions[None, :] >= left_gold[:, None])
            right_logits = _right_scores(tape, params, att, enc, left_gold)

            for logits, target, mask in ((col_logits, gold.cols[:, j], enc.column_mask),
                                         (left_logits, left_gold, enc.mask),
                                         (right_logits, right_gold, right_mask)):
                term = tape.weighted_total(tape.softmax_nll(logits, target, 0.0, mask), active)
                loss = term if loss is None else tape.add(loss, term)
                log_probs += np.where(active, _target_log_prob(logits.data, target, mask), 0.0)
            x = _span_vector(tape, params, enc, left_gold, right_gold)

        if loss is None:
            loss = tape.const(np.asarray(0.0))
        return DecodeResult(log_probs=log_probs, loss=loss)

    steps: List[WhereStep] = []
    log_prob = 0.0
    x = tape.embed(table, np.array([SQL_TOKEN_IDS[WHERE]]))
    for op in sketch_operators(sketch):
        state = lstm_step(tape, state, x, params, "where.lstm")
        att = _where_attended(tape, params, state, enc, 0.0)
        col_probs = _softmax(scoring_network(tape, [att, enc.columns], params, "where.col").data, enc.column_mask)[0]
        col = int(np.argmax(col_probs))

        state = lstm_step(tape, state, tape.take(enc.columns, np.array([col])), params, "where.lstm")
        state = lstm_step(tape, state, tape.embed(table, np.array([SQL_TOKEN_IDS[op]])), params, "where.lstm")
        att = _where_attended(tape, params, state, enc, 0.0)
        left_probs = _softmax(scoring_network(tape, [att, enc.vectors], params, "where.left").data, enc.mask)[0]
        left = int(np.argmax(left_probs))
        right_mask = enc.mask & (positions[None, :] >= left)
        right_probs = _softmax(_right_scores(tape, params, att, enc, np.array([left])).data, right_mask)[0]
        right = int(np.argmax(right_probs))

        log_prob += float(np.log(col_probs[col]) + np.log(left_probs[left]) + np.log(right_probs[right]))
        steps.append(WhereStep(col, op, left, right))
        x = _span_vector(tape, params, enc, np.array([left]), np.array([right]))
    return steps, log_prob
