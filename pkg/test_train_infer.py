"""
Test script for examples, vocabularies, batching, the joint objective, the
training loop, greedy inference and model checkpoints
"""

import os
import tempfile

import numpy as np

from config import preset
from meaning_repr import Condition, SqlQuery, tokenize_lambda
from nn_core import RMSProp, Tape
from sketch_extract import Sketch, SketchKind
from test_meaning_repr import RECORDING_QUERY, RECORDING_SCHEMA
from toy_corpus import lambda_examples, wikisql_examples
from train_infer import (
    Coarse2Fine,
    Vocabularies,
    build_vocabularies,
    compute_loss,
    exact_fraction,
    find_span,
    infer,
    make_batches,
    make_example,
    outputs_equal,
    split_dev,
    train,
)
from utils import EmptyDataset, LengthMismatch, SketchMismatch, SpanNotFound, ValidationError

F64 = np.float64
RECORDING_QUESTION = "what record company recorded after 1996 with conductor mikhail snitko".split()
FARE_SRC = "how many flights cost less than 50".split()
FARE = "(count $0 (< (fare $0) 50:do))"


def small_model(task="geo", examples=None, f64=True, **overrides):
    settings = dict(hidden_size=6, embedding_size=4, scoring_hidden=3, dropout=0.0)
    settings.update(overrides)
    config = preset(task, **settings)
    model = Coarse2Fine(config, build_vocabularies(examples, config.min_freq))
    return model.with_params(model.params.astype(F64)) if f64 else model


def expect(error, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except error:
        return
    raise AssertionError(f"{fn.__name__} did not raise {error.__name__}")


def test_find_span():
    src = ["Year", "of", "Mikhail", "Snitko", "Mikhail"]
    assert find_span(src, ["Mikhail", "Snitko"]) == (2, 3)
    assert find_span(src, ["Mikhail"]) == (2, 2)
    assert find_span(src, ["mikhail", "snitko"]) == (2, 3)
    assert find_span(src, ["Snitko", "Year"]) is None


def test_make_lambda_example():
    ex = make_example(FARE_SRC, tokenize_lambda(FARE), SketchKind.LAMBDA, line_number=4)
    assert ex.y[0] == "(count" and "(" not in ex.y
    assert str(ex.sketch) == "(count#1 (< fare@1 ? ) )"
    assert ex.line_number == 4
    expect(SketchMismatch, make_example, FARE_SRC, tokenize_lambda(FARE), SketchKind.LAMBDA,
           sketch_tokens=["fare@1"])
    expect(LengthMismatch, make_example, FARE_SRC, tokenize_lambda(FARE), SketchKind.LAMBDA, pos=["NN"])
    expect(ValidationError, make_example, [], tokenize_lambda(FARE), SketchKind.LAMBDA)


def test_make_sql_example():
    ex = make_example(RECORDING_QUESTION, RECORDING_QUERY, SketchKind.SQL, schema=RECORDING_SCHEMA, table_id="t1")
    assert ex.spans == ((5, 5), (8, 9))
    assert str(ex.sketch) == "WHERE > AND ="
    missing = SqlQuery("", 0, (Condition(4, "=", ("vinyl",)),))
    expect(SpanNotFound, make_example, RECORDING_QUESTION, missing, SketchKind.SQL, schema=RECORDING_SCHEMA)
    expect(ValidationError, make_example, RECORDING_QUESTION, RECORDING_QUERY, SketchKind.SQL)


def test_outputs_equal():
    swapped = SqlQuery("", 2, tuple(reversed(RECORDING_QUERY.conds)))
    assert outputs_equal(swapped, RECORDING_QUERY)
    assert not outputs_equal(None, RECORDING_QUERY)
    assert not outputs_equal(("a",), RECORDING_QUERY)
    assert outputs_equal(["x", "=", "1"], ("x", "=", "1"))


def test_build_vocabularies():
    expect(EmptyDataset, build_vocabularies, [])
    examples = lambda_examples(count=10, seed=0)
    vocabs = build_vocabularies(examples)
    for ex in examples:
        assert all(tok in vocabs.sketch for tok in ex.sketch.tokens)
        assert all(tok in vocabs.tgt for tok in ex.y)
    restored = Vocabularies.from_dict(vocabs.to_dict())
    assert restored.tgt.itos == vocabs.tgt.itos
    assert restored.sketch.itos == vocabs.sketch.itos


def test_sql_vocabularies():
    examples, _ = wikisql_examples(n_tables=3, per_table=4, seed=1)
    vocabs = build_vocabularies(examples)
    assert vocabs.catalog == sorted({str(ex.sketch) for ex in examples})
    for ex in examples:
        for column in ex.schema.columns:
            assert all(word in vocabs.src for word in column)


def test_value_forms_restore_gold_casing():
    ex = make_example(RECORDING_QUESTION, RECORDING_QUERY, SketchKind.SQL, schema=RECORDING_SCHEMA)
    vocabs = build_vocabularies([ex])
    assert vocabs.value_forms == {"mikhail snitko": ["Mikhail", "Snitko"]}
    assert vocabs.value_form(("mikhail", "snitko")) == ("Mikhail", "Snitko")
    assert vocabs.value_form(("1996",)) == ("1996",)
    assert Vocabularies.from_dict(vocabs.to_dict()).value_forms == vocabs.value_forms

    from_spans = SqlQuery(ex.y.agg_op, ex.y.agg_col, tuple(
        Condition(cond.col, cond.op, vocabs.value_form(ex.src[left:right + 1]))
        for cond, (left, right) in zip(ex.y.conds, ex.spans)
    ))
    assert outputs_equal(from_spans, RECORDING_QUERY)
    raw = SqlQuery(ex.y.agg_op, ex.y.agg_col, tuple(
        Condition(cond.col, cond.op, ex.src[left:right + 1]) for cond, (left, right) in zip(ex.y.conds, ex.spans)
    ))
    assert not outputs_equal(raw, RECORDING_QUERY)


def test_split_dev():
    examples = lambda_examples(count=20, seed=0)
    train_part, dev = split_dev(examples, 0.1, seed=3)
    assert len(dev) == 2 and len(train_part) == 18
    assert not {id(ex) for ex in dev} & {id(ex) for ex in train_part}
    again, _ = split_dev(examples, 0.1, seed=3)
    assert [id(ex) for ex in again] == [id(ex) for ex in train_part]
    tiny = examples[:3]
    assert split_dev(tiny, 0.1, seed=3) == (tiny, tiny)


def test_make_batches():
    examples = lambda_examples(count=7, seed=0)
    batches = make_batches(examples, 3, np.random.default_rng(0))
    assert sorted(len(b) for b in batches) == [1, 3, 3]
    assert sorted(id(ex) for b in batches for ex in b) == sorted(id(ex) for ex in examples)


def test_loss_is_padding_invariant():
    examples = lambda_examples(count=6, seed=2)
    a, b = sorted(examples, key=lambda ex: (len(ex.src), len(ex.y)))[::5][:2]
    for overrides in ({}, {"onestage": True}):
        model = small_model("geo", examples, **overrides)
        both = float(compute_loss(model, [a, b]).total.data)
        single = float(compute_loss(model, [a]).total.data) + float(compute_loss(model, [b]).total.data)
        assert abs(2 * both - single) < 1e-7 * max(1.0, abs(single))


def test_sql_loss_is_padding_invariant():
    examples, _ = wikisql_examples(n_tables=2, per_table=4, seed=0)
    model = small_model("wikisql", examples)
    a = min(examples, key=lambda ex: len(ex.y.conds))
    b = max(examples, key=lambda ex: len(ex.src))
    both = float(compute_loss(model, [a, b]).total.data)
    single = float(compute_loss(model, [a]).total.data) + float(compute_loss(model, [b]).total.data)
    assert abs(2 * both - single) < 1e-7 * max(1.0, abs(single))


def test_loss_parts():
    examples = lambda_examples(count=4, seed=0)
    parts = compute_loss(small_model("geo", examples), examples)
    assert float(parts.coarse.data) > 0 and float(parts.fine.data) > 0
    assert abs(float(parts.total.data) - float(parts.coarse.data) - float(parts.fine.data)) < 1e-12
    onestage = compute_loss(small_model("geo", examples, onestage=True), examples)
    assert float(onestage.coarse.data) == 0.0
    expect(EmptyDataset, compute_loss, small_model("geo", examples), [])


def test_train_keeps_best_epoch():
    examples = lambda_examples(count=6, seed=0)
    model = small_model("geo", examples, f64=False, max_epochs=2, batch_size=2)
    seen = []
    result = train(model, examples[:4], examples[4:], on_epoch=seen.append)
    assert len(result.history) in (1, 2) and seen == result.history
    assert set(result.history[0]) == {"epoch", "train_loss", "dev_exact", "grad_norm"}
    assert result.best_epoch in (1, 2)
    assert exact_fraction(model.predict_all(examples[4:]), examples[4:]) == result.best_dev_exact
    expect(EmptyDataset, train, model, [])


def test_train_is_deterministic_for_a_seed():
    examples = lambda_examples(count=8, seed=0)
    runs = []
    for _ in range(2):
        model = small_model("geo", examples, f64=False, max_epochs=2, batch_size=3, dropout=0.3, seed=5)
        result = train(model, examples[:6], examples[6:])
        runs.append((result, model.params.state()))
    (first, first_params), (second, second_params) = runs
    assert [r["train_loss"] for r in first.history] == [r["train_loss"] for r in second.history]
    assert first.best_epoch == second.best_epoch
    for name, value in first_params.items():
        assert np.array_equal(second_params[name], value)


def test_single_example_loss_drops():
    ex = lambda_examples(count=1, seed=3)[0]
    model = small_model("geo", [ex], f64=False)
    config = model.config
    optimizer = RMSProp(model.params, config.learning_rate, config.rmsprop_rho, config.rmsprop_eps, config.clip_norm)
    initial = float(compute_loss(model, [ex]).total.data)
    losses = []
    for step in range(50):
        tape = Tape(train=True, seed=step, dtype=model.params.dtype)
        parts = compute_loss(model, [ex], tape)
        tape.backward(parts.total)
        optimizer.step()
        losses.append(float(parts.total.data))
    assert min(losses[1:]) < initial
    assert float(compute_loss(model, [ex]).total.data) < initial


def test_predict_returns_invalid_on_decode_failure():
    examples = lambda_examples(count=4, seed=0)
    model = small_model("geo", examples, max_decode_len=2)
    long_one = max(examples, key=lambda ex: len(ex.y))
    prediction = infer(model, long_one, oracle=True)
    assert prediction.is_invalid
    assert prediction.sketch.is_invalid
    assert prediction.error.startswith("MaxLengthExceeded")


def test_predict_two_stage():
    examples = lambda_examples(count=4, seed=0)
    model = small_model("geo", examples)
    prediction = infer(model, examples[0])
    assert prediction.is_invalid or prediction.log_prob <= 0.0
    oracle = infer(model, examples[0], oracle=True)
    assert oracle.sketch == examples[0].sketch and oracle.sketch_log_prob == 0.0


def test_predict_sql():
    examples, _ = wikisql_examples(n_tables=2, per_table=4, seed=0)
    model = small_model("wikisql", examples)
    ex = max(examples, key=lambda e: len(e.y.conds))
    prediction = infer(model, ex)
    assert isinstance(prediction.y, SqlQuery)
    assert str(prediction.sketch) in model.vocabs.catalog
    oracle = infer(model, ex, oracle=True)
    assert oracle.sketch_log_prob == 0.0
    assert len(oracle.y.conds) == len(ex.y.conds)
    for cond in oracle.y.conds:
        assert cond.value and " ".join(cond.value) in " ".join(ex.src)


def test_predict_sql_max_conditions():
    examples, _ = wikisql_examples(n_tables=2, per_table=4, seed=0)
    model = small_model("wikisql", examples, max_conditions=1)
    sketch = Sketch(("WHERE", ">", "AND", "="), SketchKind.SQL)
    prediction = model.predict(examples[0].src, examples[0].schema, sketch=sketch)
    assert prediction.is_invalid


def test_checkpoint_round_trip():
    examples = lambda_examples(count=4, seed=0)
    model = small_model("geo", examples, f64=False, max_epochs=1, batch_size=2)
    result = train(model, examples, examples)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path, result.optimizer, extra={"best_epoch": result.best_epoch})
        loaded, header, optimizer = Coarse2Fine.load(path)
    assert header["best_epoch"] == result.best_epoch
    assert loaded.config == model.config
    for name, value in model.params.state().items():
        assert np.array_equal(loaded.params.state()[name], value)
    for name, value in result.optimizer.state().items():
        assert np.array_equal(optimizer[name], value)
    for ex in examples:
        assert infer(loaded, ex).y == infer(model, ex).y


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING: training and inference")
    print("=" * 60)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✅ {name}")
