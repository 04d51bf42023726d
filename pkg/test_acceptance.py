"""
Test script for end-to-end behaviour: overfitting the toy corpora, sketch conformance,
the copy gate, the SQL pipeline, numerics and the ablation command lines.

These runs train full-size models and take several minutes.
"""

import io
import json
import os
import tempfile
from contextlib import redirect_stderr, redirect_stdout

import numpy as np

from cli import GRADCHECK_TOLERANCE, gradient_checks, run
from config import preset
from eval_harness import evaluate
from meaning_repr import TokenKind, classify_code_line
from nn_core import Tape, attention, softmax_nll_smoothed
from sketch_extract import extract_from_prediction
from toy_corpus import code_examples, lambda_examples, wikisql_examples, write_corpora
from train_infer import Coarse2Fine, build_vocabularies, exact_fraction, train


def fit(task, examples, **overrides):
    config = preset(task, **overrides)
    model = Coarse2Fine(config, build_vocabularies(examples, config.min_freq))
    train(model, examples, examples)
    return model, model.predict_all(examples)


def assert_conforms(predictions, kind):
    for p in predictions:
        extracted = extract_from_prediction(p.y, kind)
        assert extracted.tokens == p.sketch.tokens, f"{p.y} does not realize {p.sketch}"


def test_gradient_checks_three_seeds():
    for name, error in gradient_checks(seeds=(0, 1, 2)).items():
        assert error < GRADCHECK_TOLERANCE, f"{name}: {error}"


def test_overfit_lambda():
    examples = lambda_examples(count=60, seed=0)
    for onestage in (False, True):
        model, predictions = fit("geo", examples, onestage=onestage, batch_size=10, max_epochs=300, patience=30)
        assert len(model.vocabs.src) <= 60 and len(model.vocabs.tgt) <= 60
        assert exact_fraction(predictions, examples) >= 0.95, f"onestage={onestage}"
        assert_conforms(predictions, model.kind)


def test_sql_pipeline():
    examples, tables = wikisql_examples(n_tables=40, per_table=5, seed=0)
    assert len(examples) >= 200
    model, predictions = fit("wikisql", examples, batch_size=20, max_epochs=300, patience=20)
    report = evaluate([p.y for p in predictions], examples, tables)
    assert report.exact >= 0.9
    assert report.execution >= report.exact
    assert_conforms(predictions, model.kind)


def test_copy_gate():
    examples = code_examples(count=60, seed=0)
    vocabs = build_vocabularies(examples, min_freq=2)
    names = [tok.text for ex in examples for tok in classify_code_line(ex.y) if tok.kind is TokenKind.NAME]
    assert sum(name not in vocabs.tgt for name in names) >= 0.3 * len(names)

    scores = {}
    for copy_gate in (False, True):
        model, predictions = fit("django", examples, copy_gate=copy_gate, min_freq=2, batch_size=10,
                                 max_epochs=100, patience=20, seed=3)
        scores[copy_gate] = exact_fraction(predictions, examples)
        assert_conforms(predictions, model.kind)
        for p, ex in zip(predictions, examples):
            for tok in p.y or ():
                if tok not in model.vocabs.tgt:
                    assert tok in ex.src, f"{tok} is neither in the vocabulary nor in {ex.src}"
    assert scores[True] > scores[False]


def test_numerics():
    rng = np.random.default_rng(0)
    tape = Tape(record=False, dtype=np.float64)
    for _ in range(10000):
        T, n = int(rng.integers(1, 8)), int(rng.integers(1, 6))
        keys = tape.const(rng.normal(size=(2, T, n)) * 3)
        mask = rng.random((2, T)) < 0.7
        mask[:, 0] = True
        weights, _ = attention(tape, tape.const(rng.normal(size=(2, n)) * 3), keys, mask)
        assert np.all(np.abs(weights.data.sum(axis=1) - 1.0) < 1e-6)

    logits = tape.const(rng.normal(size=(5, 7)))
    target = rng.integers(7, size=5)
    smoothed = softmax_nll_smoothed(tape, logits, target, 0.0).data
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    nll = np.log(np.exp(z).sum(axis=1)) - z[np.arange(5), target]
    assert np.all(np.abs(smoothed - nll) < 1e-9)


def run_quiet(argv):
    out = io.StringIO()
    with redirect_stdout(out), redirect_stderr(io.StringIO()):
        code = run(["--log-level", "WARNING"] + argv)
    assert code == 0, argv
    return out.getvalue()


def test_ablation_command_lines():
    with tempfile.TemporaryDirectory() as tmp:
        paths = write_corpora(os.path.join(tmp, "data"), seed=0)
        size = ["--epochs", "30", "--hidden-size", "64", "--embedding-size", "32", "--batch-size", "10"]
        reports = {}
        for label, flags in (("coarse2fine", []), ("no-sketch-encoder", ["--no-sketch-encoder"]),
                             ("onestage", ["--onestage"])):
            checkpoint = os.path.join(tmp, f"{label}.ckpt")
            run_quiet(["train", "--kind", "geo", "--train", paths["geo"], "--dev", paths["geo"],
                       "--checkpoint", checkpoint] + size + flags)
            modes = (("", []), ("+oracle", ["--oracle-sketch"])) if label == "coarse2fine" else (("", []),)
            for suffix, extra in modes:
                pred = os.path.join(tmp, f"{label}{suffix}.jsonl")
                run_quiet(["predict", "--checkpoint", checkpoint, "--input", paths["geo"], "--output", pred] + extra)
                out = run_quiet(["eval", "--kind", "geo", "--pred", pred, "--gold", paths["geo"],
                                 "--label", label + suffix])
                reports[label + suffix] = json.loads(out.strip().splitlines()[-1])

    assert len({r["label"] for r in reports.values()}) == 4
    assert reports["coarse2fine+oracle"]["exact"] >= reports["coarse2fine"]["exact"]


if __name__ == "__main__":
    print("=" * 60)
    print("TESTING: acceptance")
    print("=" * 60)
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"✅ {name}")
