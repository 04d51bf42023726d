# -*- coding: utf-8 -*-
"""
Sketch Extraction Module
Derives meaning sketches from full meaning representations (λ-calculus, code, SQL),
aligns sketches with the representations that realize them, and expands sketches
into the pinned/fill plans the fine decoder walks.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

from meaning_repr import (
    ABSTRACT_KINDS,
    CLOSE,
    DEFAULT_BINDERS,
    OPEN,
    OP_RANK,
    CodeToken,
    LambdaExpr,
    SqlQuery,
    classify_code_token,
    compact_predicates,
    is_head,
    linearize_lambda,
    parse_lambda,
    tokenize_lambda,
)
from utils import NonConforming, ToolkitError, ValidationError

logger = logging.getLogger(__name__)

QMARK = "?"
NO_WHERE = "<no-where>"
INVALID = "<invalid>"
WHERE = "WHERE"
AND = "AND"


class SketchKind(str, Enum):
    LAMBDA = "lambda"
    CODE = "code"
    SQL = "sql"


@dataclass(frozen=True)
class Sketch:
    tokens: Tuple[str, ...]
    kind: SketchKind

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))

    @property
    def is_invalid(self) -> bool:
        return self.tokens == (INVALID,)

    def __len__(self) -> int:
        return len(self.tokens)

    def __str__(self) -> str:
        return " ".join(self.tokens)


def invalid_sketch(kind: SketchKind) -> Sketch:
    return Sketch((INVALID,), kind)


@dataclass(frozen=True)
class SketchAlignment:
    """
    Links between sketch positions and output positions.

    pairs holds one-to-one (sketch position, output position) links; slot_spans
    maps a sketch position to the output positions that realize its omitted detail.
    """

    pairs: Tuple[Tuple[int, int], ...]
    slot_spans: Tuple[Tuple[int, Tuple[int, ...]], ...]

    def linked_sketch_position(self) -> Dict[int, int]:
        """Output position -> sketch position for every linked output token."""
        return {t: k for k, t in self.pairs}

    def span_of(self, k: int) -> Tuple[int, ...]:
        for owner, positions in self.slot_spans:
            if owner == k:
                return positions
        return ()


# ---------------------------------------------------------------------------
# λ-calculus
# ---------------------------------------------------------------------------

def _arity_token(pred: str, n: int) -> str:
    return f"{pred}@{n}"


def _binder_head(pred: str, n: int) -> str:
    return f"{OPEN}{pred}#{n}"


def sketch_lambda(expr: LambdaExpr) -> Sketch:
    """
    Extract the sketch of a λ-calculus tree.

    Leaves become "pred@arity", binders drop their variables and become "(pred#count",
    terminal arguments of mixed nodes become "?".
    """
    out: List[str] = []

    def visit(node: LambdaExpr) -> None:
        if node.is_leaf:
            out.append(_arity_token(node.pred, len(node.args)))
            return
        args = node.args
        if node.is_binder and node.bound_vars:
            out.append(_binder_head(node.pred, len(node.bound_vars)))
            args = args[len(node.bound_vars):]
        else:
            out.append(OPEN + node.pred)
        for arg in args:
            if isinstance(arg, LambdaExpr):
                visit(arg)
            else:
                out.append(QMARK)
        out.append(CLOSE)

    visit(expr)
    return Sketch(tuple(out), SketchKind.LAMBDA)


@dataclass
class _PosNode:
    pred: str
    head_pos: int
    close_pos: int
    args: list


def _positional_tree(tokens: Sequence[str]) -> _PosNode:
    """Parse compacted tokens keeping the output position of every head, close and terminal."""
    stack: List[_PosNode] = []
    root: Optional[_PosNode] = None
    for position, tok in enumerate(tokens):
        if root is not None:
            raise NonConforming(f"token {position}: output continues after the root closed")
        if is_head(tok):
            node = _PosNode(tok[1:], position, -1, [])
            if stack:
                stack[-1].args.append(node)
            stack.append(node)
        elif tok == CLOSE:
            if not stack:
                raise NonConforming(f"token {position}: ')' closes nothing")
            node = stack.pop()
            node.close_pos = position
            if not stack:
                root = node
        elif tok == OPEN:
            raise NonConforming(f"token {position}: expected compacted '(pred' heads")
        else:
            if not stack:
                raise NonConforming(f"token {position}: terminal outside any bracket")
            stack[-1].args.append((position, tok))
    if root is None:
        raise NonConforming("output is not a closed bracketed expression")
    return root


def _align_lambda(y: Sequence[str], binders: FrozenSet[str]) -> Tuple[List[str], SketchAlignment]:
    root = _positional_tree(y)
    sketch: List[str] = []
    pairs: List[Tuple[int, int]] = []
    spans: List[Tuple[int, Tuple[int, ...]]] = []

    def visit(node: _PosNode) -> None:
        k = len(sketch)
        nonterminal = any(isinstance(a, _PosNode) for a in node.args)
        if not nonterminal:
            sketch.append(_arity_token(node.pred, len(node.args)))
            pairs.append((k, node.head_pos))
            spans.append((k, tuple(p for p, _ in node.args) + (node.close_pos,)))
            return
        args = node.args
        if node.pred in binders and not isinstance(args[0], _PosNode):
            bound = []
            for a in args:
                if isinstance(a, _PosNode):
                    break
                bound.append(a[0])
            sketch.append(_binder_head(node.pred, len(bound)))
            pairs.append((k, node.head_pos))
            spans.append((k, tuple(bound)))
            args = args[len(bound):]
        else:
            sketch.append(OPEN + node.pred)
            pairs.append((k, node.head_pos))
        for a in args:
            if isinstance(a, _PosNode):
                visit(a)
            else:
                spans.append((len(sketch), (a[0],)))
                sketch.append(QMARK)
        pairs.append((len(sketch), node.close_pos))
        sketch.append(CLOSE)

    visit(root)
    return sketch, SketchAlignment(tuple(pairs), tuple(spans))


# ---------------------------------------------------------------------------
# Code
# ---------------------------------------------------------------------------

def sketch_code(tokens: Sequence[CodeToken]) -> Sketch:
    """Replace NAME/NUMBER/STRING tokens by their kind; keywords, operators and delimiters stay."""
    return Sketch(
        tuple(tok.kind.value if tok.kind in ABSTRACT_KINDS else tok.text for tok in tokens),
        SketchKind.CODE,
    )


def _align_code(y: Sequence[str]) -> Tuple[List[str], SketchAlignment]:
    try:
        classified = [classify_code_token(tok) for tok in y]
    except ValidationError as e:
        raise NonConforming(str(e)) from e
    sketch = list(sketch_code(classified).tokens)
    pairs = []
    spans = []
    for t, tok in enumerate(classified):
        if tok.kind in ABSTRACT_KINDS:
            spans.append((t, (t,)))
        else:
            pairs.append((t, t))
    return sketch, SketchAlignment(tuple(pairs), tuple(spans))


# ---------------------------------------------------------------------------
# SQL
# ---------------------------------------------------------------------------

def sketch_sql(q: SqlQuery) -> Sketch:
    """Condition operators in canonical order: "WHERE > AND =", or "<no-where>"."""
    if not q.conds:
        return Sketch((NO_WHERE,), SketchKind.SQL)
    ops = sorted((c.op for c in q.conds), key=OP_RANK.__getitem__)
    tokens: List[str] = [WHERE]
    for i, op in enumerate(ops):
        if i:
            tokens.append(AND)
        tokens.append(op)
    return Sketch(tuple(tokens), SketchKind.SQL)


def sketch_operators(sketch: Sketch) -> List[str]:
    """Condition operators a SQL sketch fixes, in order."""
    if sketch.tokens == (NO_WHERE,):
        return []
    return [tok for tok in sketch.tokens if tok not in (WHERE, AND)]


def operator_positions(sketch: Sketch) -> List[int]:
    """Sketch positions of the condition operators."""
    return [k for k, tok in enumerate(sketch.tokens) if tok not in (WHERE, AND, NO_WHERE)]


def _align_sql(q: SqlQuery) -> Tuple[List[str], SketchAlignment]:
    canonical = q.canonical()
    sketch = list(sketch_sql(canonical).tokens)
    pairs = []
    spans = []
    for j, k in enumerate(operator_positions(Sketch(tuple(sketch), SketchKind.SQL))):
        # output positions per condition: column, operator, value
        pairs.append((k, 3 * j + 1))
        spans.append((k, (3 * j, 3 * j + 2)))
    return sketch, SketchAlignment(tuple(pairs), tuple(spans))


# ---------------------------------------------------------------------------
# Alignment and evaluation-time extraction
# ---------------------------------------------------------------------------

def align_sketch(sketch: Sketch, y: Union[Sequence[str], SqlQuery],
                 binders: FrozenSet[str] = DEFAULT_BINDERS) -> SketchAlignment:
    """
    Align a sketch with an output that realizes it.

    Re-runs extraction on y while recording source positions.

    Args:
        sketch: The sketch y is expected to conform to
        y: Compacted λ tokens, code tokens, or a SqlQuery
        binders: Binder names for λ outputs

    Returns:
        SketchAlignment linking sketch positions to output positions
    """
    if sketch.kind is SketchKind.LAMBDA:
        extracted, alignment = _align_lambda(list(y), binders)
    elif sketch.kind is SketchKind.CODE:
        extracted, alignment = _align_code(list(y))
    else:
        if not isinstance(y, SqlQuery):
            raise NonConforming("SQL alignment needs a SqlQuery")
        extracted, alignment = _align_sql(y)

    if tuple(extracted) != sketch.tokens:
        raise NonConforming(
            f"output realizes sketch '{' '.join(extracted)}', not '{' '.join(sketch.tokens)}'"
        )
    return alignment


def extract_sketch(y: Union[Sequence[str], SqlQuery, LambdaExpr], kind: SketchKind,
                   binders: FrozenSet[str] = DEFAULT_BINDERS) -> Sketch:
    """Sketch of a gold meaning representation; raises on malformed input."""
    if kind is SketchKind.LAMBDA:
        expr = y if isinstance(y, LambdaExpr) else parse_lambda(list(y), binders)
        return sketch_lambda(expr)
    if kind is SketchKind.CODE:
        if not y:
            raise ValidationError("empty code line")
        return sketch_code([classify_code_token(tok) for tok in y])
    if not isinstance(y, SqlQuery):
        raise ValidationError("SQL sketches need a SqlQuery")
    return sketch_sql(y)


def extract_from_prediction(y: Union[Sequence[str], SqlQuery, None], kind: SketchKind,
                            binders: FrozenSet[str] = DEFAULT_BINDERS) -> Sketch:
    """Sketch of a model output; anything that does not parse maps to the INVALID sketch."""
    if y is None:
        return invalid_sketch(kind)
    if not isinstance(y, SqlQuery) and (len(y) == 0 or INVALID in y):
        return invalid_sketch(kind)
    try:
        return extract_sketch(y, kind, binders)
    except ToolkitError as e:
        logger.debug(f"Prediction has no sketch: {e}")
        return invalid_sketch(kind)


# ---------------------------------------------------------------------------
# Decode plans
# ---------------------------------------------------------------------------

class SlotType(str, Enum):
    TERM = "TERM"
    NAME = "NAME"
    NUMBER = "NUMBER"
    STRING = "STRING"


CODE_SLOTS = frozenset({SlotType.NAME.value, SlotType.NUMBER.value, SlotType.STRING.value})


@dataclass(frozen=True)
class PlanStep:
    """
    One output position of a sketch-constrained decode.

    A pinned step emits `token`; a fill step predicts a token of `slot` type.
    `link` is the sketch position the emitted token is one-to-one aligned with.
    """

    token: Optional[str]
    slot: Optional[SlotType]
    link: Optional[int]
    owner: int

    @property
    def is_fill(self) -> bool:
        return self.slot is not None


def split_arity(token: str) -> Optional[Tuple[str, int]]:
    """"from@2" -> ("from", 2); None when the token has no arity suffix."""
    pred, sep, count = token.rpartition("@")
    if not sep or not pred or not count.isdigit():
        return None
    return pred, int(count)


def split_binder(token: str) -> Optional[Tuple[str, int]]:
    """"(lambda#2" -> ("lambda", 2); None for other tokens."""
    if not is_head(token):
        return None
    pred, sep, count = token[1:].rpartition("#")
    if not sep or not pred or not count.isdigit() or int(count) < 1:
        return None
    return pred, int(count)


def expand_sketch(sketch: Sketch) -> List[PlanStep]:
    """
    Expand a λ or code sketch into the fine decoder's step plan.

    Args:
        sketch: A LAMBDA or CODE sketch

    Returns:
        One PlanStep per output position
    """
    plan: List[PlanStep] = []
    if sketch.kind is SketchKind.CODE:
        for k, tok in enumerate(sketch.tokens):
            if tok in CODE_SLOTS:
                plan.append(PlanStep(None, SlotType(tok), None, k))
            else:
                plan.append(PlanStep(tok, None, k, k))
        return plan

    if sketch.kind is not SketchKind.LAMBDA:
        raise ValidationError(f"{sketch.kind.value} sketches have no token plan")

    for k, tok in enumerate(sketch.tokens):
        binder = split_binder(tok)
        arity = split_arity(tok)
        if binder is not None:
            pred, count = binder
            plan.append(PlanStep(OPEN + pred, None, k, k))
            plan.extend(PlanStep(None, SlotType.TERM, None, k) for _ in range(count))
        elif is_head(tok):
            plan.append(PlanStep(tok, None, k, k))
        elif tok == CLOSE:
            plan.append(PlanStep(CLOSE, None, k, k))
        elif tok == QMARK:
            plan.append(PlanStep(None, SlotType.TERM, None, k))
        elif arity is not None:
            pred, count = arity
            plan.append(PlanStep(OPEN + pred, None, k, k))
            plan.extend(PlanStep(None, SlotType.TERM, None, k) for _ in range(count))
            plan.append(PlanStep(CLOSE, None, None, k))
        else:
            raise ValidationError(f"'{tok}' is not a λ sketch token")
    return plan


# ---------------------------------------------------------------------------
# λ sketch grammar
# ---------------------------------------------------------------------------

class SketchTokenClass(str, Enum):
    HEAD = "HEAD"
    LEAF = "LEAF"
    QMARK = "QMARK"
    CLOSE = "CLOSE"
    END = "END"
    BANNED = "BANNED"


def lambda_token_class(token: str, binders: FrozenSet[str] = DEFAULT_BINDERS) -> SketchTokenClass:
    """Grammar class of a λ sketch vocabulary entry; END is assigned by the caller."""
    if token == QMARK:
        return SketchTokenClass.QMARK
    if token == CLOSE:
        return SketchTokenClass.CLOSE
    if is_head(token):
        binder = split_binder(token)
        if binder is not None:
            return SketchTokenClass.HEAD if binder[0] in binders else SketchTokenClass.BANNED
        return SketchTokenClass.HEAD
    if split_arity(token) is not None:
        return SketchTokenClass.LEAF
    return SketchTokenClass.BANNED


class LambdaSketchGrammar:
    """
    Tracks a partial λ sketch and the token classes that keep it canonical.

    A canonical sketch is one that extraction reproduces after any fill:
    non-leaf scopes contain a nonterminal, and scopes headed by a binder name
    never take "?" before their first nonterminal.
    """

    def __init__(self, max_len: int, binders: FrozenSet[str] = DEFAULT_BINDERS):
        self.max_len = max_len
        self.binders = binders
        self.frames: List[List[bool]] = []  # [binder scope, has nonterminal]
        self.done = False
        self.steps = 0

    def allowed(self) -> FrozenSet[SketchTokenClass]:
        C = SketchTokenClass
        if self.done:
            return frozenset({C.END})

        depth = len(self.frames)
        # steps left after this one, one of which must be the end token
        budget = self.max_len - self.steps - 2
        if not self.frames:
            candidates = {C.HEAD: 2, C.LEAF: 0}
        else:
            binder_scope, has_nonterminal = self.frames[-1]
            candidates = {C.HEAD: depth + 2, C.LEAF: depth}
            if not (binder_scope and not has_nonterminal):
                candidates[C.QMARK] = depth + (0 if has_nonterminal else 1)
            if has_nonterminal:
                candidates[C.CLOSE] = depth - 1
        return frozenset(cls for cls, need in candidates.items() if need <= budget)

    def advance(self, token: str, token_class: SketchTokenClass) -> None:
        self.steps += 1
        C = SketchTokenClass
        if token_class is C.HEAD:
            if self.frames:
                self.frames[-1][1] = True
            binder = split_binder(token)
            pred = binder[0] if binder is not None else token[1:]
            self.frames.append([pred in self.binders, False])
        elif token_class is C.LEAF:
            if self.frames:
                self.frames[-1][1] = True
            else:
                self.done = True
        elif token_class is C.CLOSE:
            self.frames.pop()
            if not self.frames:
                self.done = True


def parent_positions(tokens: Sequence[str]) -> List[int]:
    """
    Parent step of every output step for parent feeding.

    Step t's parent is the step that emitted the head opening its enclosing scope
    (1-based over decoder states); 0 stands for the initial state.
    """
    parents: List[int] = []
    stack: List[int] = []
    for t, tok in enumerate(tokens, start=1):
        parents.append(stack[-1] if stack else 0)
        if is_head(tok):
            stack.append(t)
        elif tok == CLOSE and stack:
            stack.pop()
    return parents


if __name__ == "__main__":
    expr = parse_lambda(tokenize_lambda("(lambda $0 e (and (flight $0) (from $0 dallas:ci) (< (departure_time $0) 1000:ti)))"))
    sketch = sketch_lambda(expr)
    print(sketch)
    y = compact_predicates(linearize_lambda(expr))
    print(align_sketch(sketch, y))
