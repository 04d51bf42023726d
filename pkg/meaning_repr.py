# -*- coding: utf-8 -*-
"""
Meaning Representation Module
Parses, validates and linearizes the three meaning-representation formalisms
(λ-calculus logical forms, code token lines, and the WikiSQL query subset).
"""

import builtins
import keyword
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple, Union

from utils import (
    ColumnOutOfRange,
    EmptyExpression,
    EmptySchema,
    SqlParseError,
    UnbalancedBrackets,
    UnclassifiableToken,
    ValidationError,
    validate_column_names,
)

logger = logging.getLogger(__name__)

OPEN = "("
CLOSE = ")"

DEFAULT_BINDERS: FrozenSet[str] = frozenset(
    {"lambda", "exists", "count", "argmax", "argmin", "sum", "the", "min", "max"}
)


# ---------------------------------------------------------------------------
# λ-calculus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LambdaExpr:
    """A bracketed λ-calculus node: predicate name followed by its arguments."""

    pred: str
    args: Tuple[Union["LambdaExpr", str], ...] = ()
    is_binder: bool = False
    bound_vars: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.bound_vars and not self.is_binder:
            raise ValidationError(f"'{self.pred}' binds {self.bound_vars} but is not a binder")

    @property
    def is_leaf(self) -> bool:
        """No nonterminal among the arguments."""
        return not any(isinstance(arg, LambdaExpr) for arg in self.args)

    def __str__(self) -> str:
        return " ".join(compact_predicates(linearize_lambda(self)))


def _bound_variables(pred: str, args: Sequence[Union[LambdaExpr, str]],
                     binders: FrozenSet[str]) -> Tuple[bool, Tuple[str, ...]]:
    """A binder's variables are the terminal arguments before its first nonterminal."""
    if pred not in binders:
        return False, ()
    if not any(isinstance(arg, LambdaExpr) for arg in args):
        return True, ()
    leading = []
    for arg in args:
        if isinstance(arg, LambdaExpr):
            break
        leading.append(arg)
    return True, tuple(leading)


def make_lambda(pred: str, args: Sequence[Union[LambdaExpr, str]],
                binders: FrozenSet[str] = DEFAULT_BINDERS) -> LambdaExpr:
    """Build a node, deriving binder information from the binder set."""
    is_binder, bound = _bound_variables(pred, args, binders)
    return LambdaExpr(pred=pred, args=tuple(args), is_binder=is_binder, bound_vars=bound)


def tokenize_lambda(text: str) -> List[str]:
    """Split bracketed text into tokens: "(city:t $0)" -> ["(", "city:t", "$0", ")"]."""
    return re.findall(r"\(|\)|[^\s()]+", text)


def parse_lambda(tokens: Sequence[str], binders: FrozenSet[str] = DEFAULT_BINDERS) -> LambdaExpr:
    """
    Parse a bracketed token sequence into a λ-calculus tree.

    Compacted heads such as "(count" are accepted and expanded first.

    Args:
        tokens: Balanced bracketed token sequence
        binders: Predicate names that introduce variables

    Returns:
        The unique tree whose linearization equals the input
    """
    tokens = list(tokens)
    if any(tok.startswith(OPEN) and tok != OPEN for tok in tokens):
        tokens = expand_predicates(tokens)
    if not tokens:
        raise EmptyExpression("no tokens to parse")

    stack: List[list] = []
    root: Optional[LambdaExpr] = None
    for position, tok in enumerate(tokens):
        if tok == OPEN:
            if root is not None:
                raise UnbalancedBrackets(f"token {position}: expression continues after the root closed")
            stack.append([None, []])
        elif tok == CLOSE:
            if not stack:
                raise UnbalancedBrackets(f"token {position}: ')' closes nothing")
            pred, args = stack.pop()
            if pred is None:
                raise EmptyExpression(f"token {position}: empty bracket pair")
            node = make_lambda(pred, args, binders)
            if stack:
                if stack[-1][0] is None:
                    raise EmptyExpression(f"token {position}: bracket must open with a predicate name")
                stack[-1][1].append(node)
            else:
                root = node
        else:
            if not stack:
                raise UnbalancedBrackets(f"token {position}: '{tok}' outside any bracket pair")
            frame = stack[-1]
            if frame[0] is None:
                frame[0] = tok
            else:
                frame[1].append(tok)

    if stack:
        raise UnbalancedBrackets(f"{len(stack)} bracket(s) left open")
    if root is None:
        raise EmptyExpression("no expression found")
    return root


def linearize_lambda(expr: LambdaExpr) -> List[str]:
    """Depth-first bracketed tokens; inverse of parse_lambda."""
    out = [OPEN, expr.pred]
    for arg in expr.args:
        if isinstance(arg, LambdaExpr):
            out.extend(linearize_lambda(arg))
        else:
            out.append(arg)
    out.append(CLOSE)
    return out


def check_brackets(tokens: Sequence[str]) -> None:
    """Raise UnbalancedBrackets on a premature close or an unclosed bracket."""
    depth = 0
    for position, tok in enumerate(tokens):
        if tok == OPEN or (tok.startswith(OPEN) and len(tok) > 1):
            depth += 1
        elif tok == CLOSE:
            depth -= 1
            if depth < 0:
                raise UnbalancedBrackets(f"token {position}: ')' closes nothing")
    if depth != 0:
        raise UnbalancedBrackets(f"{depth} bracket(s) left open")


def compact_predicates(tokens: Sequence[str]) -> List[str]:
    """Merge every "(" that is followed by a predicate into one "(pred" token."""
    check_brackets(tokens)
    out: List[str] = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if tok == OPEN and i + 1 < len(tokens) and tokens[i + 1] not in (OPEN, CLOSE):
            out.append(OPEN + tokens[i + 1])
            i += 2
        else:
            out.append(tok)
            i += 1
    return out


def expand_predicates(tokens: Sequence[str]) -> List[str]:
    """Inverse of compact_predicates."""
    out: List[str] = []
    for tok in tokens:
        if tok.startswith(OPEN) and len(tok) > 1:
            out.extend([OPEN, tok[1:]])
        else:
            out.append(tok)
    return out


def is_head(token: str) -> bool:
    """A compacted "(pred" token."""
    return token.startswith(OPEN) and len(token) > 1


def is_terminal(token: str) -> bool:
    return not token.startswith(OPEN) and token != CLOSE


# ---------------------------------------------------------------------------
# Code tokens
# ---------------------------------------------------------------------------

class TokenKind(str, Enum):
    NAME = "NAME"
    NUMBER = "NUMBER"
    STRING = "STRING"
    KEYWORD = "KEYWORD"
    OPERATOR = "OPERATOR"
    DELIMITER = "DELIMITER"


ABSTRACT_KINDS: FrozenSet[TokenKind] = frozenset({TokenKind.NAME, TokenKind.NUMBER, TokenKind.STRING})

KEYWORDS: FrozenSet[str] = frozenset(keyword.kwlist)

# builtin functions and types stay in code sketches ("len", "str", "ValueError")
BUILTIN_NAMES: FrozenSet[str] = frozenset(name for name in dir(builtins) if not name.startswith("_"))

OPERATORS: FrozenSet[str] = frozenset({
    "+", "-", "*", "**", "/", "//", "%", "@", "<<", ">>", "&", "|", "^", "~",
    ":=", "<", ">", "<=", ">=", "==", "!=",
})

DELIMITERS: FrozenSet[str] = frozenset({
    "(", ")", "[", "]", "{", "}", ",", ":", ".", ";", "=", "->", "...",
    "+=", "-=", "*=", "/=", "//=", "%=", "@=", "&=", "|=", "^=", ">>=", "<<=", "**=",
})

_STRING_RE = re.compile(r"^(?:[rRbBuUfF]{0,2})(['\"])")
_NUMBER_RE = re.compile(
    r"""^(?:
        0[xX](?:_?[0-9a-fA-F])+
      | 0[oO](?:_?[0-7])+
      | 0[bB](?:_?[01])+
      | (?:
            (?:[0-9](?:_?[0-9])*)?\.[0-9](?:_?[0-9])*(?:[eE][+-]?[0-9](?:_?[0-9])*)?
          | [0-9](?:_?[0-9])*\.?(?:[eE][+-]?[0-9](?:_?[0-9])*)?
        )[jJ]?
    )$""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class CodeToken:
    text: str
    kind: TokenKind


def classify_code_token(text: str) -> CodeToken:
    """
    Assign exactly one lexical kind to a pre-tokenized code token.

    Args:
        text: A single code token

    Returns:
        CodeToken with its kind
    """
    if text in KEYWORDS or text in BUILTIN_NAMES:
        kind = TokenKind.KEYWORD
    elif _STRING_RE.match(text):
        kind = TokenKind.STRING
    elif _NUMBER_RE.match(text):
        kind = TokenKind.NUMBER
    elif text in OPERATORS:
        kind = TokenKind.OPERATOR
    elif text in DELIMITERS:
        kind = TokenKind.DELIMITER
    elif text.isidentifier():
        kind = TokenKind.NAME
    else:
        raise UnclassifiableToken(f"no lexical rule matches {text!r}")
    return CodeToken(text=text, kind=kind)


def classify_code_line(tokens: Iterable[str]) -> List[CodeToken]:
    return [classify_code_token(tok) for tok in tokens]


# ---------------------------------------------------------------------------
# SQL subset
# ---------------------------------------------------------------------------

# index order mirrors the public WikiSQL records
AGG_OPS: Tuple[str, ...] = ("", "MAX", "MIN", "COUNT", "SUM", "AVG")
COND_OPS: Tuple[str, ...] = ("=", ">", "<")

# canonical operator order used for sketches and condition sorting
CANONICAL_OP_ORDER: Tuple[str, ...] = (">", "<", "=")
OP_RANK: Dict[str, int] = {op: rank for rank, op in enumerate(CANONICAL_OP_ORDER)}


@dataclass(frozen=True)
class TableSchema:
    """Named-column table header; each column name is a sequence of words."""

    columns: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        columns = tuple(tuple(words) for words in self.columns)
        object.__setattr__(self, "columns", columns)
        is_valid, error = validate_column_names(columns)
        if not is_valid:
            raise EmptySchema(error)

    @classmethod
    def from_headers(cls, headers: Sequence[str]) -> "TableSchema":
        return cls(columns=tuple(tuple(str(h).split()) for h in headers))

    @property
    def M(self) -> int:
        return len(self.columns)

    def header(self, index: int) -> str:
        if not 0 <= index < self.M:
            raise ColumnOutOfRange(f"column {index} not in [0, {self.M})")
        return " ".join(self.columns[index])

    def headers(self) -> List[str]:
        return [" ".join(words) for words in self.columns]


@dataclass(frozen=True)
class Condition:
    col: int
    op: str
    value: Tuple[str, ...]


@dataclass(frozen=True)
class SqlQuery:
    """SELECT agg_op agg_col WHERE (cond_col cond_op cond_value) AND ..."""

    agg_op: str
    agg_col: int
    conds: Tuple[Condition, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "conds", tuple(
            c if isinstance(c, Condition) else Condition(int(c[0]), c[1], tuple(c[2]))
            for c in self.conds
        ))
        if self.agg_op not in AGG_OPS:
            raise ValidationError(f"unknown aggregation operator {self.agg_op!r}")
        if self.agg_col < 0:
            raise ColumnOutOfRange(f"aggregation column {self.agg_col} is negative")
        for cond in self.conds:
            if cond.op not in COND_OPS:
                raise ValidationError(f"unknown condition operator {cond.op!r}")
            if cond.col < 0:
                raise ColumnOutOfRange(f"condition column {cond.col} is negative")
            if not cond.value:
                raise ValidationError("condition value cannot be empty")

    def canonical(self) -> "SqlQuery":
        """Conditions sorted by operator rank, then column, then value."""
        conds = sorted(self.conds, key=lambda c: (OP_RANK[c.op], c.col, c.value))
        return SqlQuery(self.agg_op, self.agg_col, tuple(conds))

    def to_record(self) -> Dict:
        return {
            "sel": self.agg_col,
            "agg": AGG_OPS.index(self.agg_op),
            "conds": [[c.col, COND_OPS.index(c.op), " ".join(c.value)] for c in self.conds],
        }

    @classmethod
    def from_record(cls, record: Dict) -> "SqlQuery":
        """Build from a WikiSQL-style record {sel, agg, conds: [[col, op_index, value]]}."""
        try:
            conds = []
            for col, op_index, value in record.get("conds", []):
                if not 0 <= int(op_index) < len(COND_OPS):
                    raise SqlParseError(f"condition operator index {op_index} out of range")
                conds.append(Condition(int(col), COND_OPS[int(op_index)], tuple(str(value).split())))
            agg_index = int(record.get("agg", 0))
            if not 0 <= agg_index < len(AGG_OPS):
                raise SqlParseError(f"aggregation index {agg_index} out of range")
            return cls(AGG_OPS[agg_index], int(record["sel"]), tuple(conds))
        except (KeyError, TypeError, ValueError) as e:
            raise SqlParseError(f"malformed SQL record {record!r}: {e}") from e


def validate_query(q: SqlQuery, schema: TableSchema) -> None:
    """Raise ColumnOutOfRange if the query refers to a column the schema lacks."""
    if q.agg_col >= schema.M:
        raise ColumnOutOfRange(f"aggregation column {q.agg_col} not in [0, {schema.M})")
    for cond in q.conds:
        if cond.col >= schema.M:
            raise ColumnOutOfRange(f"condition column {cond.col} not in [0, {schema.M})")


def format_sql(q: SqlQuery, schema: TableSchema) -> str:
    """
    Render the canonical text form of a query.

    Args:
        q: Query valid against the schema
        schema: Table schema supplying column names

    Returns:
        "SELECT [agg] col [WHERE (col op value) AND ...]"
    """
    validate_query(q, schema)
    parts = ["SELECT"]
    if q.agg_op:
        parts.append(q.agg_op)
    parts.append(schema.header(q.agg_col))
    if q.conds:
        rendered = [f"({schema.header(c.col)} {c.op} {' '.join(c.value)})" for c in q.conds]
        parts.append("WHERE")
        parts.append(" AND ".join(rendered))
    return " ".join(parts)


def _column_lookup(schema: TableSchema) -> Dict[Tuple[str, ...], int]:
    lookup: Dict[Tuple[str, ...], int] = {}
    for index, words in enumerate(schema.columns):
        if words in lookup:
            raise SqlParseError(f"duplicate column {' '.join(words)!r}; SQL text cannot name it")
        lookup[words] = index
    return lookup


def _select_target(words: Tuple[str, ...], lookup: Dict[Tuple[str, ...], int]) -> Tuple[str, int]:
    plain = words in lookup
    aggregated = len(words) > 1 and words[0] in AGG_OPS and words[1:] in lookup
    if plain and aggregated:
        raise SqlParseError(f"SELECT {' '.join(words)!r} names a column and {words[0]} of another")
    if plain:
        return "", lookup[words]
    if aggregated:
        return words[0], lookup[words[1:]]
    raise SqlParseError(f"unknown SELECT column {' '.join(words)!r}")


def parse_sql(text: str, schema: TableSchema) -> SqlQuery:
    """
    Inverse of format_sql.

    Raises:
        SqlParseError: Malformed text, an unknown column, duplicate column names, or a
            column or condition that reads two ways
    """
    lookup = _column_lookup(schema)
    text = " ".join(text.split())
    if not text.startswith("SELECT "):
        raise SqlParseError(f"query must start with SELECT: {text!r}")

    body = text[len("SELECT "):]
    select_part, _, where_part = body.partition(" WHERE (")
    agg_op, agg_col = _select_target(tuple(select_part.split()), lookup)

    conds: List[Condition] = []
    if where_part:
        if not where_part.endswith(")"):
            raise SqlParseError("WHERE clause must end with ')'")
        for chunk in where_part[:-1].split(") AND ("):
            tokens = chunk.split()
            splits = [i for i in range(1, len(tokens)) if tokens[i] in COND_OPS and tuple(tokens[:i]) in lookup]
            if not splits:
                raise SqlParseError(f"cannot parse condition {chunk!r}")
            if len(splits) > 1:
                raise SqlParseError(f"condition {chunk!r} splits into column and value more than one way")
            i = splits[0]
            conds.append(Condition(lookup[tuple(tokens[:i])], tokens[i], tuple(tokens[i + 1:])))
    return SqlQuery(agg_op, agg_col, tuple(conds))


if __name__ == "__main__":
    tree = parse_lambda(tokenize_lambda("(count $0 (< (fare $0) 50:do))"))
    print(tree)
    print([classify_code_token(t).kind.value for t in ["bits", "3", "'as'", "while", "[", "=="]])
    schema = TableSchema.from_headers(["Pianist", "Conductor", "Record Company", "Year of Recording", "Format"])
    query = SqlQuery("", 2, (Condition(3, ">", ("1996",)), Condition(1, "=", ("Mikhail", "Snitko"))))
    print(format_sql(query, schema))
