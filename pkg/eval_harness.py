# -*- coding: utf-8 -*-
"""
Evaluation Harness Module
Dataset and table ingestion, the in-memory SQL executor, exact-match, execution and
sketch accuracy, prediction files, and evaluation reports.
"""

import json
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd

from config import TASK_KINDS
from meaning_repr import (
    Condition,
    SqlQuery,
    TableSchema,
    classify_code_line,
    compact_predicates,
    expand_predicates,
    linearize_lambda,
    parse_lambda,
    tokenize_lambda,
    validate_query,
)
from sketch_extract import Sketch, SketchKind, extract_from_prediction
from train_infer import (
    Example,
    Output,
    Prediction,
    Vocabularies,
    build_vocabularies,
    make_example,
    outputs_equal,
)
from utils import (
    ColumnOutOfRange,
    EmptyDataset,
    LengthMismatch,
    ParseError,
    SketchMismatch,
    SpanNotFound,
    ToolkitError,
    ValidationError,
    canonical_value,
    coerce_number,
    sanitize_text,
    validate_tokens,
)

logger = logging.getLogger(__name__)


def as_kind(kind: Union[str, SketchKind]) -> SketchKind:
    """Accept a task name (geo, atis, django, wikisql) or a formalism."""
    if isinstance(kind, SketchKind):
        return kind
    if kind in TASK_KINDS:
        return TASK_KINDS[kind]
    try:
        return SketchKind(kind)
    except ValueError as e:
        raise ValidationError(f"Unknown kind '{kind}'") from e


# ---------------------------------------------------------------------------
# Tables and the executor
# ---------------------------------------------------------------------------

@dataclass
class TableInstance:
    """A schema plus its rows; frame columns are the column positions 0..M-1."""

    schema: TableSchema
    frame: pd.DataFrame
    table_id: str = ""

    @classmethod
    def from_rows(cls, schema: TableSchema, rows: Sequence[Sequence], table_id: str = "") -> "TableInstance":
        for index, row in enumerate(rows):
            if len(row) != schema.M:
                raise ValidationError(f"table {table_id!r} row {index} has {len(row)} cells, expected {schema.M}")
        frame = pd.DataFrame([list(row) for row in rows], columns=range(schema.M), dtype=object)
        return cls(schema, frame, table_id)

    @property
    def rows(self) -> List[List]:
        return self.frame.values.tolist()


def condition_holds(cell, op: str, value: str) -> bool:
    """
    = is string equality on the cell's whitespace-tokenized form; < and > compare
    numbers and fail on non-numeric operands.
    """
    if op == "=":
        return " ".join(str(cell).split()) == " ".join(str(value).split())
    left, right = coerce_number(cell), coerce_number(value)
    if left is None or right is None:
        return False
    return left > right if op == ">" else left < right


def aggregate(agg_op: str, values: List) -> List:
    if agg_op == "":
        return values
    if agg_op == "COUNT":
        return [len(values)]
    numbers = [coerce_number(v) for v in values]
    if not numbers or any(n is None for n in numbers):
        return []
    if agg_op == "MAX":
        return [max(numbers)]
    if agg_op == "MIN":
        return [min(numbers)]
    total = sum(numbers, Decimal(0))
    return [total] if agg_op == "SUM" else [total / len(numbers)]


def execute_sql(q: SqlQuery, table: TableInstance) -> List:
    """
    Run a query against a table.

    Args:
        q: Query, valid against the table's schema
        table: Table instance

    Returns:
        Selected cells for a plain SELECT, otherwise a single aggregate (or nothing
        when MIN/MAX/SUM/AVG meet an empty or non-numeric column)
    """
    validate_query(q, table.schema)
    frame = table.frame
    keep = pd.Series(True, index=frame.index)
    for cond in q.conds:
        value = " ".join(cond.value)
        keep &= frame[cond.col].map(lambda cell, op=cond.op, v=value: condition_holds(cell, op, v)).astype(bool)
    return aggregate(q.agg_op, frame.loc[keep, q.agg_col].tolist())


def result_multiset(values: Sequence) -> Counter:
    return Counter(canonical_value(v) for v in values)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _check_lengths(a: Sequence, b: Sequence, what: str) -> None:
    if len(a) != len(b):
        raise LengthMismatch(f"{len(a)} predictions for {len(b)} {what}")


def exact_match(predictions: Sequence[Optional[Output]], golds: Sequence[Output]) -> float:
    """Fraction of predictions equal to their gold output; None (INVALID) is wrong."""
    _check_lengths(predictions, golds, "gold outputs")
    if not golds:
        return 0.0
    return sum(outputs_equal(p, g) for p, g in zip(predictions, golds)) / len(golds)


def execution_match(pred: Optional[SqlQuery], gold: SqlQuery, table: TableInstance) -> bool:
    if pred is None:
        return False
    try:
        predicted = execute_sql(pred, table)
    except ColumnOutOfRange:
        return False
    return result_multiset(predicted) == result_multiset(execute_sql(gold, table))


def execution_accuracy(predictions: Sequence[Optional[SqlQuery]], golds: Sequence[SqlQuery],
                       tables: Sequence[TableInstance]) -> float:
    """Fraction of predictions whose results equal the gold results as multisets."""
    _check_lengths(predictions, golds, "gold queries")
    _check_lengths(predictions, tables, "tables")
    if not golds:
        return 0.0
    return sum(execution_match(p, g, t) for p, g, t in zip(predictions, golds, tables)) / len(golds)


def sketch_accuracy(predictions: Sequence[Optional[Output]], gold_sketches: Sequence[Sketch],
                    kind: Union[str, SketchKind]) -> float:
    """Fraction of predictions whose extracted sketch equals the gold sketch."""
    _check_lengths(predictions, gold_sketches, "gold sketches")
    if not gold_sketches:
        return 0.0
    kind = as_kind(kind)
    hits = 0
    for pred, gold in zip(predictions, gold_sketches):
        extracted = extract_from_prediction(pred, kind)
        hits += (not extracted.is_invalid) and extracted.tokens == gold.tokens
    return hits / len(gold_sketches)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    kind: SketchKind
    examples: List[Example]
    vocabularies: Vocabularies
    path: str = ""
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)


def _read_records(path: str) -> Iterator[tuple]:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"not a JSON record: {e.msg}", line_number) from e
            if not isinstance(record, dict):
                raise ParseError("record must be a JSON object", line_number)
            yield line_number, record


def as_tokens(value) -> List[str]:
    """Whitespace-split a text field (control characters removed); lists pass through."""
    return sanitize_text(value).split() if isinstance(value, str) else [str(tok) for tok in value]


def load_tables(path: str) -> Dict[str, TableInstance]:
    """Read a table file: one {id, header, rows} record per line."""
    tables: Dict[str, TableInstance] = {}
    for line_number, record in _read_records(path):
        try:
            schema = TableSchema.from_headers(record["header"])
            table_id = str(record["id"])
            tables[table_id] = TableInstance.from_rows(schema, record.get("rows", []), table_id)
        except KeyError as e:
            raise ParseError(f"table record is missing {e}", line_number) from e
        except ToolkitError as e:
            raise ParseError(str(e), line_number) from e
    logger.info(f"Loaded {len(tables)} tables from {path}")
    return tables


def schema_of(record: Dict, tables: Optional[Dict[str, TableInstance]]) -> TableSchema:
    """Column list of an SQL record: its own cols (header strings or word lists), else its table's schema."""
    if "cols" in record:
        cols = record["cols"]
        if cols and not isinstance(cols[0], str):
            return TableSchema(tuple(tuple(words) for words in cols))
        return TableSchema.from_headers(cols)
    table_id = record.get("table_id")
    if tables is None or table_id not in tables:
        raise ValidationError(f"no column list and no table {table_id!r} for this SQL example")
    return tables[table_id].schema


def read_question(record: Dict, kind: SketchKind, tables: Optional[Dict[str, TableInstance]] = None
                  ) -> Tuple[List[str], Optional[List[str]], Optional[TableSchema]]:
    """
    Read the input side of a record: question tokens, POS tags and, for SQL, the column list.

    Raises:
        ValidationError: Empty question or no column list for an SQL record
        LengthMismatch: POS tags and question tokens differ in number
    """
    src = as_tokens(record["src"])
    is_valid, error = validate_tokens(src, "question")
    if not is_valid:
        raise ValidationError(error)
    pos = as_tokens(record["pos"]) if record.get("pos") is not None else None
    if pos is not None and len(pos) != len(src):
        raise LengthMismatch(f"{len(pos)} POS tags for {len(src)} question tokens")
    schema = schema_of(record, tables) if kind is SketchKind.SQL else None
    return src, pos, schema


def example_from_record(record: Dict, kind: SketchKind, tables: Optional[Dict[str, TableInstance]] = None,
                        line_number: Optional[int] = None) -> Example:
    """Build one example from a dataset record."""
    src, pos, schema = read_question(record, kind, tables)
    sketch = as_tokens(record["sketch"]) if record.get("sketch") is not None else None

    if kind is SketchKind.SQL:
        query = SqlQuery.from_record(record["sql"])
        return make_example(src, query, kind, pos, schema, record.get("table_id"), sketch, line_number)

    mr = record["mr"]
    if kind is SketchKind.LAMBDA:
        mr = tokenize_lambda(mr) if isinstance(mr, str) else as_tokens(mr)
    else:
        mr = as_tokens(mr)
        if record.get("types") is not None:
            kinds = [tok.kind.value for tok in classify_code_line(mr)]
            if kinds != list(record["types"]):
                raise ValidationError("token kinds disagree with the lexical classification")
    return make_example(src, mr, kind, pos, sketch_tokens=sketch, line_number=line_number)


def load_dataset(path: str, kind: Union[str, SketchKind], tables: Optional[Dict[str, TableInstance]] = None,
                 min_freq: int = 1) -> Dataset:
    """
    Read a dataset file, one JSON record per line.

    Records carry src plus mr (λ and code) or sql (WikiSQL-style), and optionally
    cols, table_id, pos, types and sketch. SQL examples whose condition values do
    not occur in the question are dropped with a warning.

    Args:
        path: Dataset path
        kind: Task name or formalism
        tables: Tables by id, for SQL records without a column list
        min_freq: Vocabulary frequency threshold

    Returns:
        Dataset with examples and vocabularies
    """
    kind = as_kind(kind)
    examples: List[Example] = []
    dropped = 0
    for line_number, record in _read_records(path):
        try:
            examples.append(example_from_record(record, kind, tables, line_number))
        except SpanNotFound as e:
            dropped += 1
            logger.warning(f"{path} line {line_number}: dropped ({e})")
        except SketchMismatch as e:
            raise SketchMismatch(f"line {line_number}: {e}") from e
        except KeyError as e:
            raise ParseError(f"record is missing {e}", line_number) from e
        except ToolkitError as e:
            raise ParseError(str(e), line_number) from e

    if not examples:
        raise EmptyDataset(f"no examples in {path}")
    logger.info(f"Loaded {len(examples)} {kind.value} examples from {path} ({dropped} dropped)")
    return Dataset(kind, examples, build_vocabularies(examples, min_freq), path, dropped)


# ---------------------------------------------------------------------------
# Prediction files
# ---------------------------------------------------------------------------

def normalize_output(y, kind: SketchKind) -> Optional[Output]:
    """Bring a prediction read from a file to the form examples store."""
    if y is None:
        return None
    if kind is SketchKind.SQL:
        return y if isinstance(y, SqlQuery) else SqlQuery.from_record(y)
    tokens = as_tokens(y)
    if kind is SketchKind.LAMBDA:
        try:
            return tuple(compact_predicates(linearize_lambda(parse_lambda(tokens))))
        except ToolkitError:
            return tuple(tokens)
    return tuple(tokens)


def prediction_record(prediction: Prediction, kind: SketchKind) -> Dict:
    """One output line: λ tokens with predicates split from their brackets."""
    if prediction.y is None:
        pred = None
    elif kind is SketchKind.SQL:
        pred = prediction.y.to_record()
    elif kind is SketchKind.LAMBDA:
        pred = expand_predicates(prediction.y)
    else:
        pred = list(prediction.y)
    return {
        "pred": pred,
        "sketch": list(prediction.sketch.tokens),
        "log_prob": round(prediction.log_prob, 6),
    }


def read_predictions(path: str, kind: Union[str, SketchKind]) -> List[Optional[Output]]:
    kind = as_kind(kind)
    predictions = []
    for line_number, record in _read_records(path):
        try:
            predictions.append(normalize_output(record.get("pred"), kind))
        except ToolkitError as e:
            logger.warning(f"{path} line {line_number}: unreadable prediction counted wrong ({e})")
            predictions.append(None)
    return predictions


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    kind: SketchKind
    exact: float
    sketch: float
    execution: Optional[float] = None
    label: str = ""
    verdicts: List[Dict] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.verdicts)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.verdicts)

    def to_dict(self) -> Dict:
        record = {"label": self.label, "kind": self.kind.value, "count": self.count,
                  "exact": round(self.exact, 6), "sketch": round(self.sketch, 6)}
        if self.execution is not None:
            record["execution"] = round(self.execution, 6)
        return record

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def render(self) -> str:
        summary = pd.DataFrame(
            [(name, value) for name, value in (("exact match", self.exact), ("execution", self.execution),
                                              ("sketch", self.sketch)) if value is not None],
            columns=["metric", "accuracy"],
        )
        title = f"{self.label or self.kind.value}: {self.count} examples"
        return f"{title}\n{summary.to_string(index=False, float_format=lambda v: f'{v:.4f}')}"

    def to_excel(self, path: str) -> None:
        with pd.ExcelWriter(path, engine="openpyxl") as writer:
            pd.DataFrame([self.to_dict()]).to_excel(writer, index=False, sheet_name="Summary")
            self.to_frame().to_excel(writer, index=False, sheet_name="Verdicts")
        logger.info(f"Wrote per-example verdicts to {path}")


def evaluate(predictions: Sequence[Optional[Output]], examples: Sequence[Example],
             tables: Optional[Dict[str, TableInstance]] = None, label: str = "") -> EvalReport:
    """
    Score predictions against gold examples.

    Execution accuracy is reported for SQL when every example's table is available.
    """
    _check_lengths(predictions, examples, "gold examples")
    if not examples:
        raise EmptyDataset("nothing to evaluate")
    kind = examples[0].kind
    golds = [ex.y for ex in examples]
    gold_sketches = [ex.sketch for ex in examples]

    table_list = None
    if kind is SketchKind.SQL:
        if tables is not None and all(ex.table_id in tables for ex in examples):
            table_list = [tables[ex.table_id] for ex in examples]
        else:
            logger.warning("Tables missing for some examples; execution accuracy not reported")

    verdicts = []
    for i, (pred, ex) in enumerate(zip(predictions, examples)):
        extracted = extract_from_prediction(pred, kind)
        row = {
            "index": i,
            "exact": outputs_equal(pred, ex.y),
            "sketch": (not extracted.is_invalid) and extracted.tokens == ex.sketch.tokens,
            "predicted_sketch": str(extracted),
            "gold_sketch": str(ex.sketch),
        }
        if table_list is not None:
            row["execution"] = execution_match(pred, ex.y, table_list[i])
        verdicts.append(row)

    return EvalReport(
        kind=kind,
        exact=exact_match(predictions, golds),
        sketch=sketch_accuracy(predictions, gold_sketches, kind),
        execution=execution_accuracy(predictions, golds, table_list) if table_list is not None else None,
        label=label,
        verdicts=verdicts,
    )


if __name__ == "__main__":
    table = TableInstance.from_rows(
        TableSchema.from_headers(["Player", "No.", "Position"]),
        [["Mikhail Snitko", "2", "Forward"], ["Brent Lee", "5", "Guard"]],
    )
    q = SqlQuery("COUNT", 0, (Condition(2, "=", ("guard",)),))
    print(execute_sql(q, table))
