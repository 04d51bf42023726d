# -*- coding: utf-8 -*-
"""
Training and Inference Module
Examples and vocabularies, batching, the coarse-to-fine model, the joint training
objective, the training loop with early stopping, and greedy two-stage inference.
"""

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import TrainConfig, preset
from decoders import (
    SQL_TOKEN_IDS,
    DecoderHead,
    FreeConstraint,
    LambdaGrammarConstraint,
    StepBatch,
    WhereBatch,
    add_sequence_decoder,
    add_sql_heads,
    classify_sketch,
    coarse_decode,
    constraint_masks,
    decode_where,
    fine_decode,
    onestage_decode,
    output_mask,
    plan_parents,
    predict_select,
    sketch_logits,
    slot_mask,
)
from encoders import (
    BOS,
    COLUMN_SEP,
    EOS,
    PAD,
    UNK,
    EncodedInput,
    Vocab,
    add_input_encoder,
    add_sketch_encoder,
    add_table_encoder,
    column_batch,
    encode_input,
    encode_sketch,
    encode_table_question,
    load_embedding_file,
    pad_batch,
)
from meaning_repr import (
    AGG_OPS,
    Condition,
    SqlQuery,
    TableSchema,
    classify_code_line,
    compact_predicates,
    linearize_lambda,
    parse_lambda,
    validate_query,
)
from nn_core import ParamSet, RMSProp, Tape, Tensor, load_checkpoint, save_checkpoint
from sketch_extract import (
    Sketch,
    SketchAlignment,
    SketchKind,
    align_sketch,
    expand_sketch,
    extract_from_prediction,
    invalid_sketch,
    parent_positions,
    sketch_code,
    sketch_lambda,
    sketch_operators,
    sketch_sql,
)
from utils import (
    EmptyDataset,
    LengthMismatch,
    MaxLengthExceeded,
    NonConforming,
    NonConformingGold,
    SketchMismatch,
    SpanNotFound,
    ToolkitError,
    ValidationError,
    format_error_message,
    truncate_text,
)

logger = logging.getLogger(__name__)

Output = Union[Tuple[str, ...], SqlQuery]


# ---------------------------------------------------------------------------
# Examples
# ---------------------------------------------------------------------------

@dataclass
class Example:
    """One (input, sketch, meaning representation) instance; λ outputs are compacted tokens."""

    src: Tuple[str, ...]
    y: Output
    sketch: Sketch
    alignment: SketchAlignment
    kind: SketchKind
    pos: Optional[Tuple[str, ...]] = None
    schema: Optional[TableSchema] = None
    table_id: Optional[str] = None
    spans: Tuple[Tuple[int, int], ...] = ()
    line_number: Optional[int] = None


def find_span(src: Sequence[str], value: Sequence[str]) -> Optional[Tuple[int, int]]:
    """First occurrence of value in src (exact, then casefolded), as inclusive (l, r)."""
    width = len(value)
    for transform in (lambda s: s, str.casefold):
        target = [transform(tok) for tok in value]
        words = [transform(tok) for tok in src]
        for left in range(len(words) - width + 1):
            if words[left:left + width] == target:
                return left, left + width - 1
    return None


def make_example(src: Sequence[str], mr: Union[Sequence[str], SqlQuery], kind: SketchKind,
                 pos: Optional[Sequence[str]] = None, schema: Optional[TableSchema] = None,
                 table_id: Optional[str] = None, sketch_tokens: Optional[Sequence[str]] = None,
                 line_number: Optional[int] = None) -> Example:
    """
    Build a validated example: compute its sketch and alignment.

    Args:
        src: Question tokens
        mr: Meaning-representation tokens, or a SqlQuery
        kind: Formalism
        pos: Optional part-of-speech tags, one per question token
        schema: Table schema (SQL only)
        table_id: Table identifier (SQL only)
        sketch_tokens: Sketch provided by the data file, checked against the extractor
        line_number: Source line for diagnostics

    Returns:
        Example
    """
    src = tuple(src)
    if not src:
        raise ValidationError("question cannot be empty")
    if pos is not None and len(pos) != len(src):
        raise LengthMismatch(f"{len(pos)} POS tags for {len(src)} question tokens")

    spans: Tuple[Tuple[int, int], ...] = ()
    if kind is SketchKind.LAMBDA:
        expr = parse_lambda(list(mr))
        y: Output = tuple(compact_predicates(linearize_lambda(expr)))
        sketch = sketch_lambda(expr)
    elif kind is SketchKind.CODE:
        y = tuple(mr)
        sketch = sketch_code(classify_code_line(y))
    else:
        if schema is None or not isinstance(mr, SqlQuery):
            raise ValidationError("SQL examples need a query and a table schema")
        validate_query(mr, schema)
        y = mr.canonical()
        sketch = sketch_sql(y)
        found = []
        for cond in y.conds:
            span = find_span(src, cond.value)
            if span is None:
                raise SpanNotFound(f"condition value '{' '.join(cond.value)}' does not occur in the question")
            found.append(span)
        spans = tuple(found)

    if sketch_tokens is not None and tuple(sketch_tokens) != sketch.tokens:
        raise SketchMismatch(f"given sketch '{' '.join(sketch_tokens)}' but extracted '{sketch}'")

    try:
        alignment = align_sketch(sketch, y)
    except NonConforming as e:
        raise NonConformingGold(str(e)) from e

    return Example(src, y, sketch, alignment, kind, tuple(pos) if pos is not None else None,
                   schema, table_id, spans, line_number)


def outputs_equal(pred: Optional[Output], gold: Output) -> bool:
    """Exact match: token equality, or canonical record equality for SQL."""
    if pred is None:
        return False
    if isinstance(gold, SqlQuery):
        return isinstance(pred, SqlQuery) and pred.canonical() == gold.canonical()
    return tuple(pred) == tuple(gold)


# ---------------------------------------------------------------------------
# Vocabularies
# ---------------------------------------------------------------------------

@dataclass
class Vocabularies:
    src: Vocab
    sketch: Vocab
    tgt: Vocab
    pos: Optional[Vocab] = None
    catalog: List[str] = field(default_factory=list)
    value_forms: Dict[str, List[str]] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "src": self.src.to_list(),
            "sketch": self.sketch.to_list(),
            "tgt": self.tgt.to_list(),
            "pos": self.pos.to_list() if self.pos is not None else None,
            "catalog": list(self.catalog),
            "value_forms": dict(self.value_forms),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "Vocabularies":
        return cls(
            Vocab.from_list(data["src"]),
            Vocab.from_list(data["sketch"]),
            Vocab.from_list(data["tgt"]),
            Vocab.from_list(data["pos"]) if data.get("pos") is not None else None,
            list(data.get("catalog", [])),
            {key: list(words) for key, words in data.get("value_forms", {}).items()},
        )

    def value_form(self, span: Sequence[str]) -> Tuple[str, ...]:
        """Condition value for a question span, in the casing training values used for it."""
        return tuple(self.value_forms.get(" ".join(span).casefold(), span))


def build_vocabularies(examples: Sequence[Example], min_freq: int = 1) -> Vocabularies:
    """
    Vocabularies of a training set.

    Question words below min_freq and target tokens below min_freq map to UNK;
    sketch tokens are always kept. SQL header words share the question vocabulary.
    """
    if not examples:
        raise EmptyDataset("cannot build vocabularies from an empty dataset")
    kind = examples[0].kind
    src_sequences = [ex.src for ex in examples]
    if kind is SketchKind.SQL:
        src_sequences += [[COLUMN_SEP]]
        src_sequences += [[w for col in ex.schema.columns for w in col] for ex in examples]
        src = Vocab.build(src_sequences, min_freq)
        catalog = sorted({str(ex.sketch) for ex in examples})
        return Vocabularies(src, Vocab(), Vocab(), _pos_vocab(examples), catalog, _value_forms(examples))

    return Vocabularies(
        src=Vocab.build(src_sequences, min_freq),
        sketch=Vocab.build([ex.sketch.tokens for ex in examples]),
        tgt=Vocab.build([ex.y for ex in examples], min_freq),
        pos=_pos_vocab(examples),
    )


def _value_forms(examples: Sequence[Example]) -> Dict[str, List[str]]:
    """Gold condition values whose question span matched only after casefolding, keyed by the span."""
    seen: Dict[str, Counter] = {}
    for ex in examples:
        for cond, (left, right) in zip(ex.y.conds, ex.spans):
            span = ex.src[left:right + 1]
            if tuple(span) != tuple(cond.value):
                seen.setdefault(" ".join(span).casefold(), Counter())[cond.value] += 1
    return {key: list(counts.most_common(1)[0][0]) for key, counts in sorted(seen.items())}


def _pos_vocab(examples: Sequence[Example]) -> Optional[Vocab]:
    tagged = [ex.pos for ex in examples if ex.pos is not None]
    if not tagged:
        return None
    return Vocab.build(tagged, specials=(PAD, UNK))


# ---------------------------------------------------------------------------
# Predictions
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    """Greedy output: None stands for the INVALID prediction."""

    y: Optional[Output]
    sketch: Sketch
    sketch_log_prob: float = 0.0
    detail_log_prob: float = 0.0
    error: Optional[str] = None

    @property
    def log_prob(self) -> float:
        return self.sketch_log_prob + self.detail_log_prob

    @property
    def is_invalid(self) -> bool:
        return self.y is None


@dataclass
class LossParts:
    coarse: Tensor
    fine: Tensor
    total: Tensor


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class Coarse2Fine:
    """
    Encoders and decoders of one task, with their parameters.

    Decoder heads look parameters up by name, so swapping the ParamSet (for a
    float64 gradient check or a loaded checkpoint) swaps the whole model.
    """

    def __init__(self, config: TrainConfig, vocabs: Vocabularies, params: Optional[ParamSet] = None):
        self.config = config
        self.vocabs = vocabs
        self.kind = config.kind
        n = config.hidden_size
        lam = self.kind is SketchKind.LAMBDA
        self.parent_feeding = config.parent_feeding and lam
        self.copy = config.copy_gate and self.kind is SketchKind.CODE

        def head(prefix: str, vocab: Vocab, copy: bool) -> DecoderHead:
            return DecoderHead(prefix, vocab, self.parent_feeding, copy, config.dropout,
                               config.label_smoothing, config.max_decode_len)

        self.coarse_head = head("coarse", vocabs.sketch, False)
        self.fine_head = head("fine", vocabs.tgt, self.copy)
        self.one_head = head("one", vocabs.tgt, self.copy)

        if params is not None:
            self.params = params
            return

        self.params = ParamSet(seed=config.seed, init_range=config.init_range)
        pos_size = len(vocabs.pos) if vocabs.pos is not None else 0
        add_input_encoder(self.params, len(vocabs.src), config.embedding_size, n, pos_size, config.pos_size)
        if self.kind is SketchKind.SQL:
            add_table_encoder(self.params, config.embedding_size, n, config.scoring_hidden, config.table_aware)
            add_sql_heads(self.params, n, len(vocabs.catalog), config.scoring_hidden)
        elif config.onestage:
            add_sequence_decoder(self.params, "one", len(vocabs.tgt), n, self.parent_feeding, self.copy)
        else:
            add_sketch_encoder(self.params, len(vocabs.sketch), config.embedding_size, n, config.sketch_encoder)
            add_sequence_decoder(self.params, "coarse", len(vocabs.sketch), n, self.parent_feeding, False)
            add_sequence_decoder(self.params, "fine", len(vocabs.tgt), n, self.parent_feeding, self.copy)

        if config.embedding_file:
            load_embedding_file(config.embedding_file, vocabs.src, self.params)
        logger.info(f"Built {config.task} model: {len(self.params)} tensors, {self.params.num_values()} values")

    def with_params(self, params: ParamSet) -> "Coarse2Fine":
        return Coarse2Fine(self.config, self.vocabs, params)

    # -- encoding -------------------------------------------------------------

    def encode(self, tape: Tape, srcs: Sequence[Sequence[str]], schemas: Sequence[Optional[TableSchema]] = (),
               pos: Sequence[Optional[Sequence[str]]] = ()) -> EncodedInput:
        ids, mask = pad_batch([self.vocabs.src.encode(src) for src in srcs])
        pos_ids = None
        if self.vocabs.pos is not None:
            tags = [p if p is not None else [UNK] * len(s) for p, s in zip(list(pos) or [None] * len(srcs), srcs)]
            pos_ids = np.zeros_like(ids)
            for b, seq in enumerate(tags):
                pos_ids[b, :len(seq)] = self.vocabs.pos.encode(seq)
        dropout = self.config.dropout
        if self.kind is SketchKind.SQL:
            columns = column_batch(list(schemas), self.vocabs.src)
            return encode_table_question(tape, ids, mask, columns, self.params, dropout, pos_ids,
                                         self.config.table_aware)
        return encode_input(tape, ids, mask, self.params, dropout, pos_ids)

    def encode_examples(self, tape: Tape, examples: Sequence[Example]) -> EncodedInput:
        return self.encode(tape, [ex.src for ex in examples], [ex.schema for ex in examples],
                           [ex.pos for ex in examples])

    def sketch_vectors(self, tape: Tape, sketches: Sequence[Sequence[str]]) -> Tensor:
        ids, mask = pad_batch([self.vocabs.sketch.encode(tokens) for tokens in sketches])
        return encode_sketch(tape, ids, mask, self.params, self.config.dropout)

    # -- teacher forcing arrays ----------------------------------------------

    def coarse_steps(self, examples: Sequence[Example]) -> StepBatch:
        vocab = self.vocabs.sketch
        rows = []
        for ex in examples:
            tokens = list(ex.sketch.tokens)
            if self.kind is SketchKind.LAMBDA:
                constraint = LambdaGrammarConstraint(vocab, self.config.max_decode_len)
            else:
                constraint = FreeConstraint(vocab)
            rows.append({
                "prev": [vocab.index(BOS)] + vocab.encode(tokens),
                "targets": vocab.encode(tokens) + [vocab.index(EOS)],
                "loss": [True] * (len(tokens) + 1),
                "parents": parent_positions(tokens) + [0],
                "allowed": constraint_masks(constraint, tokens, vocab),
            })
        return _pad_steps(rows, len(vocab))

    def fine_steps(self, examples: Sequence[Example]) -> StepBatch:
        vocab = self.vocabs.tgt
        base = output_mask(vocab, with_unk=True)
        width = max(len(ex.src) for ex in examples)
        rows = []
        for ex in examples:
            plan = expand_sketch(ex.sketch)
            y = list(ex.y)
            if len(plan) != len(y) or any(not s.is_fill and s.token != tok for s, tok in zip(plan, y)):
                raise NonConformingGold(f"gold output does not follow the plan of sketch '{ex.sketch}'")
            targets = vocab.encode(y)
            allowed = []
            for step, target in zip(plan, targets):
                mask = (slot_mask(vocab, step.slot, with_unk=True) if step.is_fill else base).copy()
                mask[target] = True
                allowed.append(mask)
            row = {
                "prev": [vocab.index(BOS)] + targets[:-1],
                "targets": targets,
                "loss": [step.is_fill for step in plan],
                "links": [-1] + [(-1 if s.link is None else s.link) for s in plan[:-1]],
                "parents": plan_parents(plan),
                "allowed": np.stack(allowed),
            }
            if self.copy:
                row.update(_copy_rows(y, ex.src, vocab, width, [s.is_fill for s in plan]))
            rows.append(row)
        return _pad_steps(rows, len(vocab), width if self.copy else None)

    def onestage_steps(self, examples: Sequence[Example]) -> StepBatch:
        vocab = self.vocabs.tgt
        width = max(len(ex.src) for ex in examples)
        rows = []
        for ex in examples:
            y = list(ex.y)
            row = {
                "prev": [vocab.index(BOS)] + vocab.encode(y),
                "targets": vocab.encode(y) + [vocab.index(EOS)],
                "loss": [True] * (len(y) + 1),
                "parents": parent_positions(y) + [0],
                "allowed": constraint_masks(FreeConstraint(vocab), y, vocab),
            }
            if self.copy:
                row.update(_copy_rows(y + [EOS], ex.src, vocab, width, [True] * (len(y) + 1)))
            rows.append(row)
        return _pad_steps(rows, len(vocab), width if self.copy else None)

    def where_batch(self, examples: Sequence[Example]) -> WhereBatch:
        J = max(1, max(len(ex.y.conds) for ex in examples))
        B = len(examples)
        arrays = {name: np.zeros((B, J), dtype=np.int64) for name in ("cols", "ops", "left", "right")}
        mask = np.zeros((B, J), dtype=bool)
        for b, ex in enumerate(examples):
            for j, (cond, (left, right)) in enumerate(zip(ex.y.conds, ex.spans)):
                arrays["cols"][b, j] = cond.col
                arrays["ops"][b, j] = SQL_TOKEN_IDS[cond.op]
                arrays["left"][b, j] = left
                arrays["right"][b, j] = right
                mask[b, j] = True
        return WhereBatch(mask=mask, **arrays)

    # -- inference ------------------------------------------------------------

    def predict(self, src: Sequence[str], schema: Optional[TableSchema] = None, pos: Optional[Sequence[str]] = None,
                sketch: Optional[Sketch] = None) -> Prediction:
        """
        Greedy two-stage inference for one input.

        Args:
            src: Question tokens
            schema: Table schema (SQL only)
            pos: Optional part-of-speech tags
            sketch: Oracle sketch; skips the coarse stage when given

        Returns:
            Prediction; decode errors give the INVALID prediction
        """
        tape = Tape(train=False, record=False, dtype=self.params.dtype)
        try:
            enc = self.encode(tape, [src], [schema], [pos])
            if self.kind is SketchKind.SQL:
                return self._predict_sql(tape, enc, src, sketch)
            if self.config.onestage:
                result = onestage_decode(tape, enc, self.params, self.one_head, src_tokens=src)
                y = tuple(result.tokens)
                return Prediction(y, extract_from_prediction(y, self.kind), 0.0, result.log_prob)

            sketch_log_prob = 0.0
            if sketch is None:
                coarse = coarse_decode(tape, enc, self.params, self.coarse_head,
                                       grammar=self.kind is SketchKind.LAMBDA)
                sketch = Sketch(tuple(coarse.tokens), self.kind)
                sketch_log_prob = coarse.log_prob
            vectors = self.sketch_vectors(tape, [sketch.tokens])
            fine = fine_decode(tape, enc, sketch, vectors, self.params, self.fine_head, src_tokens=src)
            return Prediction(tuple(fine.tokens), sketch, sketch_log_prob, fine.log_prob)
        except ToolkitError as e:
            logger.debug(f"Decoding failed for {truncate_text(' '.join(src))!r}: {format_error_message(e)}")
            return Prediction(None, invalid_sketch(self.kind), error=format_error_message(e))

    def _predict_sql(self, tape: Tape, enc: EncodedInput, src: Sequence[str],
                     sketch: Optional[Sketch]) -> Prediction:
        sketch_log_prob = 0.0
        if sketch is None:
            probs = classify_sketch(tape, enc, self.params).data[0]
            index = int(np.argmax(probs))
            sketch = Sketch(tuple(self.vocabs.catalog[index].split()), SketchKind.SQL)
            sketch_log_prob = float(np.log(probs[index]))
        if len(sketch_operators(sketch)) > self.config.max_conditions:
            raise MaxLengthExceeded(f"sketch '{sketch}' has more than {self.config.max_conditions} conditions")
        select = predict_select(tape, enc, self.params)
        agg_probs, col_probs = select.agg_probs()[0], select.col_probs()[0]
        agg, col = int(np.argmax(agg_probs)), int(np.argmax(col_probs))
        steps, where_log_prob = decode_where(tape, enc, sketch, self.params)
        conds = tuple(Condition(s.col, s.op, self.vocabs.value_form(src[s.left:s.right + 1])) for s in steps)
        query = SqlQuery(AGG_OPS[agg], col, conds)
        detail = float(np.log(agg_probs[agg]) + np.log(col_probs[col])) + where_log_prob
        return Prediction(query, sketch, sketch_log_prob, detail)

    def predict_all(self, examples: Sequence[Example], oracle: bool = False) -> List[Prediction]:
        return [infer(self, ex, oracle) for ex in examples]

    # -- checkpoints ------------------------------------------------------------

    def save(self, path: str, optimizer: Optional[RMSProp] = None, extra: Optional[Dict] = None) -> None:
        tensors = dict(self.params.state())
        if optimizer is not None:
            tensors.update(optimizer.state())
        header = {"config": self.config.to_dict(), "vocabularies": self.vocabs.to_dict()}
        header.update(extra or {})
        save_checkpoint(path, tensors, header)

    @classmethod
    def load(cls, path: str, config: Optional[TrainConfig] = None) -> Tuple["Coarse2Fine", Dict, Dict[str, np.ndarray]]:
        """
        Rebuild a model from a checkpoint.

        Args:
            path: Checkpoint path
            config: Configuration to build with; defaults to the one echoed in the header

        Returns:
            (model, header, optimizer tensors)
        """
        tensors, header = load_checkpoint(path)
        config = config or TrainConfig(**header["config"])
        model = cls(config, Vocabularies.from_dict(header["vocabularies"]))
        params = {k: v for k, v in tensors.items() if not k.startswith("rmsprop/")}
        model.params.load_state(params)
        optimizer = {k: v for k, v in tensors.items() if k.startswith("rmsprop/")}
        logger.info(f"Loaded checkpoint {path}")
        return model, header, optimizer


def _copy_rows(y: Sequence[str], src: Sequence[str], vocab: Vocab, width: int,
               eligible: Sequence[bool]) -> Dict[str, np.ndarray]:
    """Copy targets: out-of-vocabulary tokens that occur in the input."""
    copy_rows = np.zeros(len(y), dtype=bool)
    match = np.zeros((len(y), width), dtype=bool)
    for t, tok in enumerate(y):
        if eligible[t] and tok not in vocab and tok in src:
            copy_rows[t] = True
            match[t, :len(src)] = [s == tok for s in src]
    return {"copy_rows": copy_rows, "copy_match": match}


def _pad_steps(rows: List[Dict], vocab_size: int, src_width: Optional[int] = None) -> StepBatch:
    B = len(rows)
    L = max(len(row["targets"]) for row in rows)
    prev = np.zeros((B, L), dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    step_mask = np.zeros((B, L), dtype=bool)
    loss_mask = np.zeros((B, L), dtype=bool)
    parents = np.zeros((B, L), dtype=np.int64)
    allowed = np.ones((B, L, vocab_size), dtype=bool)
    links = np.full((B, L), -1, dtype=np.int64) if "links" in rows[0] else None
    copy_rows = np.zeros((B, L), dtype=bool) if src_width is not None else None
    copy_match = np.zeros((B, L, src_width), dtype=bool) if src_width is not None else None

    for b, row in enumerate(rows):
        n = len(row["targets"])
        prev[b, :n] = row["prev"][:n]
        targets[b, :n] = row["targets"]
        step_mask[b, :n] = True
        loss_mask[b, :n] = row["loss"]
        parents[b, :n] = row["parents"]
        allowed[b, :n] = row["allowed"]
        if links is not None:
            links[b, :n] = row["links"]
        if copy_rows is not None:
            copy_rows[b, :n] = row["copy_rows"]
            copy_match[b, :n] = row["copy_match"]
    return StepBatch(prev, targets, step_mask, loss_mask, links, parents, allowed, copy_rows, copy_match)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _total_nll(tape: Tape, logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None) -> Tensor:
    return tape.sum(tape.softmax_nll(logits, targets, 0.0, mask))


def compute_loss(model: Coarse2Fine, examples: Sequence[Example], tape: Optional[Tape] = None) -> LossParts:
    """
    Joint negative log-likelihood of the sketch and of the output given the gold sketch,
    averaged over a batch, both terms teacher-forced.

    For SQL the coarse term is the sketch-classification loss and the fine term sums the
    aggregation, SELECT column, WHERE column and span losses. The one-stage model puts
    its whole loss in the fine term.
    """
    if not examples:
        raise EmptyDataset("empty batch")
    tape = tape or Tape(train=False, dtype=model.params.dtype)
    scale = 1.0 / len(examples)
    enc = model.encode_examples(tape, examples)

    if model.kind is SketchKind.SQL:
        catalog = {s: i for i, s in enumerate(model.vocabs.catalog)}
        classes = np.array([catalog[str(ex.sketch)] for ex in examples])
        coarse = _total_nll(tape, sketch_logits(tape, enc, model.params), classes)
        select = predict_select(tape, enc, model.params)
        agg = np.array([AGG_OPS.index(ex.y.agg_op) for ex in examples])
        sel = np.array([ex.y.agg_col for ex in examples])
        fine = tape.add(_total_nll(tape, select.agg_logits, agg), _total_nll(tape, select.col_logits, sel, select.col_mask))
        where = decode_where(tape, enc, None, model.params, model.config.dropout, mode="train",
                             gold=model.where_batch(examples))
        fine = tape.add(fine, where.loss)
    elif model.config.onestage:
        coarse = tape.const(np.asarray(0.0))
        fine = onestage_decode(tape, enc, model.params, model.one_head, mode="train",
                               gold=model.onestage_steps(examples)).loss
    else:
        coarse = coarse_decode(tape, enc, model.params, model.coarse_head, grammar=model.kind is SketchKind.LAMBDA,
                               mode="train", gold=model.coarse_steps(examples)).loss
        vectors = model.sketch_vectors(tape, [ex.sketch.tokens for ex in examples])
        fine = fine_decode(tape, enc, None, vectors, model.params, model.fine_head, mode="train",
                           gold=model.fine_steps(examples)).loss

    coarse = tape.scale(coarse, scale)
    fine = tape.scale(fine, scale)
    return LossParts(coarse, fine, tape.add(coarse, fine))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    history: List[Dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_exact: float = 0.0
    dev_predictions: List[Prediction] = field(default_factory=list)
    dev_examples: List[Example] = field(default_factory=list)
    optimizer: Optional[RMSProp] = None


def split_dev(examples: Sequence[Example], fraction: float, seed: int) -> Tuple[List[Example], List[Example]]:
    """Seeded held-out split; tiny datasets validate on themselves."""
    examples = list(examples)
    n_dev = int(round(fraction * len(examples)))
    if n_dev < 1 or n_dev >= len(examples):
        return examples, examples
    order = np.random.default_rng(seed).permutation(len(examples))
    dev = {int(i) for i in order[:n_dev]}
    return ([ex for i, ex in enumerate(examples) if i not in dev],
            [ex for i, ex in enumerate(examples) if i in dev])


def make_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator) -> List[List[Example]]:
    """Group examples of similar input length, then shuffle the batch order."""
    keys = rng.random(len(examples))
    order = sorted(range(len(examples)), key=lambda i: (len(examples[i].src), keys[i]))
    batches = [[examples[i] for i in order[start:start + batch_size]] for start in range(0, len(order), batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def exact_fraction(predictions: Sequence[Prediction], examples: Sequence[Example]) -> float:
    if not examples:
        return 0.0
    return sum(outputs_equal(p.y, ex.y) for p, ex in zip(predictions, examples)) / len(examples)


def train(model: Coarse2Fine, train_examples: Sequence[Example], dev_examples: Optional[Sequence[Example]] = None,
          on_epoch: Optional[Callable[[Dict], None]] = None) -> TrainResult:
    """
    Mini-batch RMSProp with early stopping on dev exact match.

    Args:
        model: Model to train in place; ends holding its best-epoch parameters
        train_examples: Training set
        dev_examples: Model-selection set; a seeded split of the training set when None
        on_epoch: Callback receiving each epoch's history record

    Returns:
        TrainResult with the history and the best epoch's dev predictions
    """
    config = model.config
    if not train_examples:
        raise EmptyDataset("training set is empty")
    if dev_examples is None:
        train_examples, dev_examples = split_dev(train_examples, config.dev_fraction, config.seed)
    train_examples, dev_examples = list(train_examples), list(dev_examples)

    optimizer = RMSProp(model.params, config.learning_rate, config.rmsprop_rho, config.rmsprop_eps, config.clip_norm)
    rng = np.random.default_rng(config.seed)
    result = TrainResult(dev_examples=dev_examples, optimizer=optimizer)
    best_state: Optional[Dict[str, np.ndarray]] = None
    best_acc: Optional[Dict[str, np.ndarray]] = None
    stale = 0

    logger.info(f"Training on {len(train_examples)} examples, selecting on {len(dev_examples)}")
    for epoch in range(1, config.max_epochs + 1):
        total, norm = 0.0, 0.0
        for batch in make_batches(train_examples, config.batch_size, rng):
            tape = Tape(train=True, seed=int(rng.integers(2 ** 31)), dtype=model.params.dtype)
            try:
                parts = compute_loss(model, batch, tape)
                tape.backward(parts.total)
            except ToolkitError as e:
                logger.error(f"Epoch {epoch}: {format_error_message(e)}")
                raise
            norm = optimizer.step()
            total += float(parts.total.data) * len(batch)

        predictions = model.predict_all(dev_examples)
        dev_exact = exact_fraction(predictions, dev_examples)
        record = {"epoch": epoch, "train_loss": total / len(train_examples), "dev_exact": dev_exact,
                  "grad_norm": norm}
        result.history.append(record)
        logger.info(f"Epoch {epoch}: loss {record['train_loss']:.4f}, dev exact {dev_exact:.3f}")
        if on_epoch is not None:
            on_epoch(record)

        if best_state is None or dev_exact > result.best_dev_exact:
            result.best_epoch, result.best_dev_exact = epoch, dev_exact
            result.dev_predictions = predictions
            best_state = {k: v.copy() for k, v in model.params.state().items()}
            best_acc = {k: v.copy() for k, v in optimizer.state().items()}
            stale = 0
            if dev_exact >= 1.0:
                logger.info(f"Dev set solved at epoch {epoch}, stopping")
                break
        else:
            stale += 1
            if stale >= config.patience:
                logger.info(f"No dev improvement for {stale} epochs, stopping after epoch {epoch}")
                break

    model.params.load_state(best_state)
    optimizer.load_state(best_acc)
    logger.info(f"Best epoch {result.best_epoch}: dev exact {result.best_dev_exact:.3f}")
    return result


def infer(model: Coarse2Fine, example: Example, oracle: bool = False) -> Prediction:
    """Greedy prediction for an example; oracle mode feeds the gold sketch to the fine stage."""
    return model.predict(example.src, example.schema, example.pos, example.sketch if oracle else None)


if __name__ == "__main__":
    from toy_corpus import lambda_examples

    logging.basicConfig(level=logging.INFO)
    data = lambda_examples(count=20, seed=0)
    cfg = preset("geo", hidden_size=32, embedding_size=16, max_epochs=3, batch_size=10)
    model = Coarse2Fine(cfg, build_vocabularies(data))
    train(model, data, data)
    print(infer(model, data[0]))
