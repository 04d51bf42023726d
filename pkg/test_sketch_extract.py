"""
Test script for sketch extraction, sketch alignment, decode plans and the λ sketch grammar
"""

import numpy as np

from meaning_repr import (
    Condition,
    SqlQuery,
    classify_code_line,
    compact_predicates,
    linearize_lambda,
    parse_lambda,
    tokenize_lambda,
)
from sketch_extract import (
    INVALID,
    NO_WHERE,
    LambdaSketchGrammar,
    Sketch,
    SketchKind,
    SketchTokenClass,
    SlotType,
    align_sketch,
    expand_sketch,
    extract_from_prediction,
    extract_sketch,
    lambda_token_class,
    parent_positions,
    sketch_code,
    sketch_lambda,
    sketch_sql,
    split_arity,
    split_binder,
)
from test_meaning_repr import ATIS, RECORDING_QUERY, random_tree
from utils import NonConforming, ValidationError

FARE = "(count $0 (< (fare $0) 50:do))"
DJANGO = "if len ( bits ) < 3 or bits [ 1 ] != 'as' :".split()
HTTP = "if s [ : 4 ] . lower ( ) == 'http' :".split()


def compacted(text):
    return compact_predicates(tokenize_lambda(text))


def check_alignment(alignment, n_outputs):
    sketch_side = [k for k, _ in alignment.pairs]
    output_side = [t for _, t in alignment.pairs]
    assert len(set(sketch_side)) == len(sketch_side)
    assert len(set(output_side)) == len(output_side)
    covered = list(output_side)
    for _, positions in alignment.slot_spans:
        covered.extend(positions)
    assert sorted(covered) == list(range(n_outputs))


def test_sketch_lambda_examples():
    assert str(sketch_lambda(parse_lambda(tokenize_lambda(FARE)))) == "(count#1 (< fare@1 ? ) )"
    assert str(sketch_lambda(parse_lambda(tokenize_lambda(ATIS)))) == \
        "(lambda#2 (and flight@1 from@2 (< departure_time@1 ? ) ) )"
    assert str(sketch_lambda(parse_lambda(tokenize_lambda("(city:t $0)")))) == "city:t@1"


def test_sketch_lambda_counts_all_arguments():
    sketch = sketch_lambda(parse_lambda(tokenize_lambda("(exists $1 (and (river:t $1) (loc:t $1 $0)))")))
    assert "loc:t@2" in sketch.tokens
    assert sketch.tokens[0] == "(exists#1"


def test_sketch_code_examples():
    assert str(sketch_code(classify_code_line(DJANGO))) == "if len ( NAME ) < NUMBER or NAME [ NUMBER ] != STRING :"
    assert str(sketch_code(classify_code_line(HTTP))) == "if NAME [ : NUMBER ] . NAME ( ) == STRING :"
    assert sketch_code(classify_code_line(["while", "True", ":"])).tokens == ("while", "True", ":")
    assert len(sketch_code(classify_code_line(DJANGO))) == len(DJANGO)


def test_sketch_sql():
    assert str(sketch_sql(RECORDING_QUERY)) == "WHERE > AND ="
    assert sketch_sql(SqlQuery("", 0)).tokens == (NO_WHERE,)
    swapped = SqlQuery("", 2, tuple(reversed(RECORDING_QUERY.conds)))
    assert sketch_sql(swapped) == sketch_sql(RECORDING_QUERY)
    three = SqlQuery("", 0, (Condition(1, "=", ("a",)), Condition(2, "<", ("3",)), Condition(3, ">", ("4",))))
    assert str(sketch_sql(three)) == "WHERE > AND < AND ="


def test_align_lambda():
    y = compacted(FARE)
    sketch = sketch_lambda(parse_lambda(y))
    alignment = align_sketch(sketch, y)
    assert set(alignment.pairs) == {(0, 0), (1, 2), (2, 3), (4, 7), (5, 8)}
    assert alignment.span_of(0) == (1,)
    assert alignment.span_of(2) == (4, 5)
    assert alignment.span_of(3) == (6,)
    check_alignment(alignment, len(y))


def test_align_code():
    sketch = sketch_code(classify_code_line(DJANGO))
    alignment = align_sketch(sketch, DJANGO)
    assert (0, 0) in alignment.pairs and (2, 2) in alignment.pairs and (14, 14) in alignment.pairs
    assert alignment.span_of(3) == (3,)
    check_alignment(alignment, len(DJANGO))

    plain = ["while", "True", ":"]
    alignment = align_sketch(sketch_code(classify_code_line(plain)), plain)
    assert alignment.pairs == ((0, 0), (1, 1), (2, 2))
    assert alignment.slot_spans == ()


def test_align_sql():
    alignment = align_sketch(sketch_sql(RECORDING_QUERY), RECORDING_QUERY)
    assert alignment.pairs == ((1, 1), (3, 4))
    assert alignment.span_of(1) == (0, 2)
    assert alignment.span_of(3) == (3, 5)


def test_align_non_conforming():
    sketch = sketch_lambda(parse_lambda(tokenize_lambda(FARE)))
    cases = [
        (sketch, compacted("(count $0 (> (fare $0) 50:do))")),
        (Sketch(("if", "NAME", ":"), SketchKind.CODE), ["while", "x", ":"]),
        (Sketch(("WHERE", "="), SketchKind.SQL), SqlQuery("", 0)),
    ]
    for s, y in cases:
        try:
            align_sketch(s, y)
        except NonConforming:
            continue
        raise AssertionError(f"{y} aligned with {s}")


def test_align_random_trees():
    rng = np.random.default_rng(5)
    for _ in range(1000):
        tree = random_tree(rng)
        y = compact_predicates(linearize_lambda(tree))
        sketch = sketch_lambda(tree)
        assert len(sketch) <= len(y)
        check_alignment(align_sketch(sketch, y), len(y))


def test_extract_from_prediction():
    assert extract_from_prediction(compacted(FARE), SketchKind.LAMBDA) == extract_sketch(compacted(FARE), SketchKind.LAMBDA)
    assert extract_from_prediction(["(count", "$0"], SketchKind.LAMBDA).is_invalid
    assert extract_from_prediction(None, SketchKind.CODE).is_invalid
    assert extract_from_prediction([], SketchKind.CODE).tokens == (INVALID,)
    assert extract_from_prediction(["x", "$"], SketchKind.CODE).is_invalid
    assert str(extract_from_prediction(RECORDING_QUERY, SketchKind.SQL)) == "WHERE > AND ="


def test_extract_sketch_rejects_empty_code():
    try:
        extract_sketch([], SketchKind.CODE)
    except ValidationError:
        return
    raise AssertionError("empty code line produced a sketch")


def test_expand_sketch_lambda():
    y = compacted(FARE)
    plan = expand_sketch(sketch_lambda(parse_lambda(y)))
    assert len(plan) == len(y)
    assert [step.token for step in plan] == ["(count", None, "(<", "(fare", None, ")", None, ")", ")"]
    assert [step.link for step in plan] == [0, None, 1, 2, None, None, None, 4, 5]
    assert all(step.slot is SlotType.TERM for step in plan if step.is_fill)


def test_expand_sketch_matches_random_outputs():
    rng = np.random.default_rng(9)
    for _ in range(300):
        tree = random_tree(rng)
        y = compact_predicates(linearize_lambda(tree))
        plan = expand_sketch(sketch_lambda(tree))
        assert len(plan) == len(y)
        for step, tok in zip(plan, y):
            if not step.is_fill:
                assert step.token == tok


def test_expand_sketch_code():
    plan = expand_sketch(sketch_code(classify_code_line(["x", "=", "'a'"])))
    assert plan[0].slot is SlotType.NAME and plan[0].link is None
    assert plan[1].token == "=" and plan[1].link == 1
    assert plan[2].slot is SlotType.STRING


def test_expand_sketch_rejects_sql():
    try:
        expand_sketch(sketch_sql(RECORDING_QUERY))
    except ValidationError:
        return
    raise AssertionError("SQL sketch expanded into a token plan")


def test_split_helpers():
    assert split_arity("from@2") == ("from", 2)
    assert split_arity("texas:s") is None
    assert split_binder("(lambda#2") == ("lambda", 2)
    assert split_binder("(lambda#0") is None
    assert split_binder("lambda#2") is None


def test_parent_positions():
    assert parent_positions(compacted(FARE)) == [0, 1, 1, 3, 4, 4, 3, 3, 1]


def test_lambda_token_classes():
    C = SketchTokenClass
    assert lambda_token_class("(lambda#2") is C.HEAD
    assert lambda_token_class("(and") is C.HEAD
    assert lambda_token_class("(city:t#2") is C.BANNED
    assert lambda_token_class("city:t@1") is C.LEAF
    assert lambda_token_class("?") is C.QMARK
    assert lambda_token_class(")") is C.CLOSE
    assert lambda_token_class("$0") is C.BANNED


def test_sketch_grammar_walk():
    C = SketchTokenClass
    grammar = LambdaSketchGrammar(max_len=100)
    walk = [("(count#1", C.HEAD), ("(<", C.HEAD), ("fare@1", C.LEAF), ("?", C.QMARK), (")", C.CLOSE), (")", C.CLOSE)]
    for i, (token, cls) in enumerate(walk):
        allowed = grammar.allowed()
        assert cls in allowed, f"step {i}: {cls} not in {allowed}"
        assert C.END not in allowed
        if i == 1:
            assert C.QMARK not in allowed and C.CLOSE not in allowed
        grammar.advance(token, cls)
    assert grammar.allowed() == frozenset({C.END})


def test_sketch_grammar_respects_length():
    grammar = LambdaSketchGrammar(max_len=2)
    assert grammar.allowed() == frozenset({SketchTokenClass.LEAF})


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING: sketch extraction")
    print("=" * 60)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✅ {name}")
