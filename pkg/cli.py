# -*- coding: utf-8 -*-
"""
Command Line Module
Single entry point: python cli.py {sketch,train,predict,eval,exec-sql,gradcheck} ...
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import APP_TITLE, DEFAULT_LOG_LEVEL, TASK_KINDS, TrainConfig, load_config, preset, with_overrides
from eval_harness import (
    as_kind,
    evaluate,
    example_from_record,
    execute_sql,
    load_dataset,
    load_tables,
    prediction_record,
    read_predictions,
    read_question,
)
from meaning_repr import SqlQuery, TableSchema, parse_sql, tokenize_lambda
from nn_core import (
    ParamSet,
    RMSProp,
    Tape,
    Tensor,
    add_lstm,
    add_scoring_network,
    attended_output,
    attention,
    bilstm_encode,
    grad_check,
    lstm_step,
    scoring_network,
    softmax_nll_smoothed,
)
from sketch_extract import SketchKind, extract_sketch
from toy_corpus import code_examples, lambda_examples, wikisql_examples
from train_infer import Coarse2Fine, build_vocabularies, compute_loss, infer, train
from utils import ToolkitError, UsageError, canonical_decimal, format_error_message

logger = logging.getLogger(__name__)

GRADCHECK_TOLERANCE = 1e-4


# ---------------------------------------------------------------------------
# Checkpoints and run manifests
# ---------------------------------------------------------------------------

def checkpoint_io(mode: str, path: str, model: Optional[Coarse2Fine] = None, optimizer: Optional[RMSProp] = None,
                  config: Optional[TrainConfig] = None):
    """
    Save or load a model checkpoint (parameters, optimizer state, config echo, vocabularies).

    Args:
        mode: "save" or "load"
        path: Checkpoint path
        model: Model to save
        optimizer: Optimizer whose state is saved alongside
        config: Configuration to load into; defaults to the checkpoint's own

    Returns:
        Nothing on save; (model, header, optimizer tensors) on load
    """
    if mode == "save":
        if model is None:
            raise UsageError("nothing to save")
        model.save(path, optimizer)
        return None
    if mode == "load":
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        return Coarse2Fine.load(path, config)
    raise UsageError(f"checkpoint mode must be 'save' or 'load', got {mode!r}")


@dataclass
class RunManifest:
    config: Dict
    seed: int
    datasets: Dict[str, Optional[str]]
    checkpoint: str
    history: List[Dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_exact: float = 0.0
    dev_predictions: List[Dict] = field(default_factory=list)

    def write(self, path: str) -> None:
        tmp_path = f"{path}.tmp"
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True)
        os.replace(tmp_path, path)
        logger.info(f"Wrote run manifest {path}")

    @classmethod
    def read(cls, path: str) -> "RunManifest":
        with open(path, encoding="utf-8") as f:
            return cls(**json.load(f))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _read_inputs(args: argparse.Namespace) -> List[str]:
    if args.mr is not None:
        return [args.mr]
    return [line.strip() for line in sys.stdin if line.strip()]


def cmd_sketch(args: argparse.Namespace) -> int:
    kind = as_kind(args.kind)
    for text in _read_inputs(args):
        if kind is SketchKind.LAMBDA:
            sketch = extract_sketch(tokenize_lambda(text), kind)
        elif kind is SketchKind.CODE:
            sketch = extract_sketch(text.split(), kind)
        else:
            if text.startswith("{"):
                query = SqlQuery.from_record(json.loads(text))
            else:
                if not args.cols:
                    raise UsageError("SQL text needs --cols 'header|header|...'")
                query = parse_sql(text, TableSchema.from_headers(args.cols.split("|")))
            sketch = extract_sketch(query, kind)
        print(sketch)
    return 0


def build_config(args: argparse.Namespace) -> TrainConfig:
    """Preset, then config file, then flags."""
    task = args.kind if args.kind in TASK_KINDS else None
    if task is None:
        raise UsageError(f"train needs --kind one of {', '.join(TASK_KINDS)}")
    config = preset(task)
    if args.config:
        config = load_config(args.config, config)
    return with_overrides(
        config,
        seed=args.seed,
        max_epochs=args.epochs,
        hidden_size=args.hidden_size,
        embedding_size=args.embedding_size,
        learning_rate=args.learning_rate,
        batch_size=args.batch_size,
        patience=args.patience,
        min_freq=args.min_freq,
        sketch_encoder=False if args.no_sketch_encoder else None,
        table_aware=False if args.no_table_aware else None,
        onestage=True if args.onestage else None,
    )


def cmd_train(args: argparse.Namespace) -> int:
    config = build_config(args)
    tables = load_tables(args.tables) if args.tables else None
    train_set = load_dataset(args.train, config.kind, tables, config.min_freq)
    dev_examples = load_dataset(args.dev, config.kind, tables).examples if args.dev else None

    model = Coarse2Fine(config, train_set.vocabularies)
    result = train(model, train_set.examples, dev_examples)
    checkpoint_io("save", args.checkpoint, model, result.optimizer)

    dev_records = []
    for ex, prediction in zip(result.dev_examples, result.dev_predictions):
        dev_records.append({"src": list(ex.src), **prediction_record(prediction, config.kind)})
    manifest = RunManifest(
        config=config.to_dict(),
        seed=config.seed,
        datasets={"train": args.train, "dev": args.dev, "tables": args.tables},
        checkpoint=args.checkpoint,
        history=result.history,
        best_epoch=result.best_epoch,
        best_dev_exact=result.best_dev_exact,
        dev_predictions=dev_records,
    )
    manifest.write(args.manifest or f"{args.checkpoint}.manifest.json")
    print(json.dumps({"best_epoch": result.best_epoch, "best_dev_exact": round(result.best_dev_exact, 6),
                      "checkpoint": args.checkpoint}))
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    model, _, _ = checkpoint_io("load", args.checkpoint)
    kind = model.kind
    tables = load_tables(args.tables) if args.tables else None
    out = open(args.output, "w", encoding="utf-8") if args.output else sys.stdout
    count = 0
    try:
        with open(args.input, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                record = json.loads(line)
                if args.oracle_sketch:
                    if "mr" not in record and "sql" not in record:
                        raise UsageError("--oracle-sketch needs gold outputs in the input records")
                    example = example_from_record(record, kind, tables)
                    src, prediction = list(example.src), infer(model, example, oracle=True)
                else:
                    src, pos, schema = read_question(record, kind, tables)
                    prediction = model.predict(src, schema, pos)
                out.write(json.dumps({"src": src, **prediction_record(prediction, kind)}) + "\n")
                count += 1
    finally:
        if out is not sys.stdout:
            out.close()
    logger.info(f"Predicted {count} inputs")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    kind = as_kind(args.kind)
    tables = load_tables(args.tables) if args.tables else None
    gold = load_dataset(args.gold, kind, tables)
    predictions = read_predictions(args.pred, kind)
    report = evaluate(predictions, gold.examples, tables, label=args.label or "")
    print(report.render())
    print(report.to_json_line())
    if args.xlsx:
        report.to_excel(args.xlsx)
    return 0


def _display(value):
    return canonical_decimal(value) if isinstance(value, Decimal) else value


def cmd_exec_sql(args: argparse.Namespace) -> int:
    tables = load_tables(args.tables)
    if args.table_id not in tables:
        raise UsageError(f"no table {args.table_id!r} in {args.tables}")
    table = tables[args.table_id]
    if args.record:
        query = SqlQuery.from_record(json.loads(args.record))
    elif args.sql:
        query = parse_sql(args.sql, table.schema)
    else:
        raise UsageError("exec-sql needs --sql or --record")
    print(json.dumps([_display(v) for v in execute_sql(query, table)]))
    return 0


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

def _elementwise(params: ParamSet, rng: np.random.Generator) -> Callable[[Tape], Tensor]:
    params.add("a", (2, 3))
    params.add("b", (2, 3))
    params.add("bias", (3,))

    def f(tape: Tape) -> Tensor:
        a, b = params["a"], params["b"]
        x = tape.mul(tape.tanh(a), tape.sigmoid(b))
        y = tape.sub(tape.scale(x, 1.5), tape.log(tape.sigmoid(a)))
        z = tape.where(np.array([True, False]), y, tape.add(b, params["bias"]))
        return tape.sum(tape.mul(z, tape.log_sigmoid(z)))
    return f


def _shapes(params: ParamSet, rng: np.random.Generator) -> Callable[[Tape], Tensor]:
    params.add("emb", (5, 3))
    params.add("w", (3, 4))
    params.add("k", (2, 4, 3))

    def f(tape: Tape) -> Tensor:
        x = tape.embed(params["emb"], np.array([1, 3]))
        h = tape.matmul(x, params["w"])
        c = tape.concat([h, tape.narrow(h, 1, 3)])
        s = tape.stack([x, tape.tanh(x)], axis=1)
        m = tape.reshape(tape.bmm(s, params["k"], transpose_b=True), (2, 8))
        picked = tape.take(params["k"], np.array([0, 3]))
        stepped = tape.step(s, 1)
        gathered = tape.gather_steps([x, picked, stepped], np.array([2, 1]))
        total = tape.add(tape.sum(tape.mul(c, c)), tape.sum(tape.mul(m, m)))
        total = tape.add(total, tape.weighted_total(gathered, np.array([[1.0, 2.0, 3.0], [0.5, 0.0, 1.0]])))
        return tape.add(total, tape.sum(tape.pick(h, np.array([0, 2]))))
    return f


def _lstm(params: ParamSet, rng: np.random.Generator) -> Callable[[Tape], Tensor]:
    add_lstm(params, "cell", 3, 4)
    xs = [rng.normal(size=(2, 3)) for _ in range(3)]
    mask = np.array([[1, 1, 1], [1, 0, 0]], dtype=bool)

    def f(tape: Tape) -> Tensor:
        state = (tape.zeros((2, 4)), tape.zeros((2, 4)))
        for t, x in enumerate(xs):
            state = lstm_step(tape, state, tape.const(x), params, "cell", mask[:, t])
        return tape.sum(tape.mul(state[0], state[1]))
    return f


def _bilstm(params: ParamSet, rng: np.random.Generator) -> Callable[[Tape], Tensor]:
    add_lstm(params, "enc.fwd", 3, 2)
    add_lstm(params, "enc.bwd", 3, 2)
    xs = [rng.normal(size=(2, 3)) for _ in range(4)]
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=bool)

    def f(tape: Tape) -> Tensor:
        vectors, summary = bilstm_encode(tape, [tape.const(x) for x in xs], mask, params, "enc")
        return tape.add(tape.sum(tape.mul(vectors, vectors)), tape.sum(summary))
    return f


def _attention(params: ParamSet, rng: np.random.Generator) -> Callable[[Tape], Tensor]:
    params.add("q", (2, 4))
    params.add("keys", (2, 5, 4))
    params.add("w1", (4, 4))
    params.add("w2", (4, 4))
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0]], dtype=bool)
    select = np.array([[1, 0, 1, 0, 0], [0, 1, 0, 0, 0]], dtype=bool)

    def f(tape: Tape) -> Tensor:
        weights, context = attention(tape, params["q"], params["keys"], mask)
        att = attended_output(tape, params["q"], context, params["w1"], params["w2"])
        scores = tape.bdot(params["keys"], att)
        mass = tape.sub(tape.logsumexp(scores, select), tape.logsumexp(scores, mask))
        log_p = tape.log_softmax(scores, mask)
        total = tape.add(tape.sum(mass), tape.weighted_total(log_p, mask * 0.3))
        return tape.add(total, tape.sum(tape.mul(weights, weights)))
    return f


def _smoothed_loss(params: ParamSet, rng: np.random.Generator) -> Callable[[Tape], Tensor]:
    params.add("logits", (3, 6))
    mask = np.ones((3, 6), dtype=bool)
    mask[1, 4:] = False

    def f(tape: Tape) -> Tensor:
        nll = softmax_nll_smoothed(tape, params["logits"], np.array([2, 0, 5]), 0.1, mask)
        return tape.sum(nll)
    return f


def _scoring(params: ParamSet, rng: np.random.Generator) -> Callable[[Tape], Tensor]:
    add_scoring_network(params, "score", (4, 4), 3)
    params.add("query", (2, 1, 4))
    params.add("items", (2, 5, 4))

    def f(tape: Tape) -> Tensor:
        scores = scoring_network(tape, [params["query"], params["items"]], params, "score")
        return tape.sum(softmax_nll_smoothed(tape, scores, np.array([1, 4]), 0.0))
    return f


OPERATION_FAMILIES: Dict[str, Callable] = {
    "elementwise": _elementwise,
    "shapes": _shapes,
    "lstm": _lstm,
    "bilstm": _bilstm,
    "attention": _attention,
    "smoothed_nll": _smoothed_loss,
    "scoring": _scoring,
}


def _model_loss(task: str, seed: int, **overrides) -> Tuple[Callable[[Tape], Tensor], ParamSet]:
    config = preset(task, hidden_size=6, embedding_size=4, scoring_hidden=3, pos_size=2, seed=seed, **overrides)
    if task == "wikisql":
        examples, _ = wikisql_examples(n_tables=2, per_table=2, seed=seed)
    elif task == "django":
        examples = code_examples(count=8, seed=seed)
    else:
        examples = lambda_examples(count=3, seed=seed)
    vocabs = build_vocabularies(examples, config.min_freq)
    model = Coarse2Fine(config, vocabs)
    model = model.with_params(model.params.astype(np.float64))
    batch = examples[:3]
    return (lambda tape: compute_loss(model, batch, tape).total), model.params


LOSS_FAMILIES: Dict[str, Dict] = {
    "loss:coarse_fine": {"task": "geo"},
    "loss:onestage": {"task": "geo", "onestage": True},
    "loss:copy": {"task": "django", "min_freq": 2},
    "loss:sql": {"task": "wikisql"},
}


def gradient_checks(seeds: Sequence[int] = (0, 1, 2), max_per_param: int = 3) -> Dict[str, float]:
    """Maximum relative error per operation family and per full loss, in float64."""
    results: Dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, build in OPERATION_FAMILIES.items():
            params = ParamSet(seed=seed, init_range=0.5, dtype=np.float64)
            f = build(params, rng)
            results[name] = max(results.get(name, 0.0), grad_check(f, params, seed=seed))
        for name, spec in LOSS_FAMILIES.items():
            f, params = _model_loss(seed=seed, **spec)
            results[name] = max(results.get(name, 0.0), grad_check(f, params, max_per_param=max_per_param, seed=seed))
    return results


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = gradient_checks(tuple(range(args.seeds)), args.max_per_param)
    failed = False
    for name, error in results.items():
        ok = error < GRADCHECK_TOLERANCE
        failed |= not ok
        print(f"{'✅' if ok else '❌'} {name}: {error:.2e}")
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description=APP_TITLE)
    parser.add_argument("--log-level", default=DEFAULT_LOG_LEVEL, help="Logging level (default from C2F_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    kinds = sorted(set(TASK_KINDS) | {k.value for k in SketchKind})

    p = sub.add_parser("sketch", help="Print the sketch of meaning representations")
    p.add_argument("--kind", required=True, choices=kinds)
    p.add_argument("--mr", help="Meaning representation (default: one per stdin line)")
    p.add_argument("--cols", help="SQL column names separated by '|'")
    p.set_defaults(func=cmd_sketch)

    p = sub.add_parser("train", help="Train a model")
    p.add_argument("--kind", required=True, choices=sorted(TASK_KINDS))
    p.add_argument("--train", required=True, help="Training dataset (JSON lines)")
    p.add_argument("--dev", help="Model-selection dataset; default is a seeded split of --train")
    p.add_argument("--tables", help="Table file for WikiSQL records")
    p.add_argument("--config", help="KEY=value config file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="Run manifest path (default: <checkpoint>.manifest.json)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden-size", type=int)
    p.add_argument("--embedding-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-freq", type=int)
    p.add_argument("--no-sketch-encoder", action="store_true", help="Feed sketch token embeddings, not encodings")
    p.add_argument("--no-table-aware", action="store_true", help="Encode questions without column attention")
    p.add_argument("--onestage", action="store_true", help="Decode meaning representations without sketches")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="Greedy predictions from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="Records with src (and cols/table_id for SQL)")
    p.add_argument("--tables")
    p.add_argument("--output", help="Output file (default: stdout)")
    p.add_argument("--oracle-sketch", action="store_true", help="Condition the fine stage on gold sketches")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="Score a prediction file against gold data")
    p.add_argument("--kind", required=True, choices=kinds)
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--tables")
    p.add_argument("--label")
    p.add_argument("--xlsx", help="Also write per-example verdicts to this Excel file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("exec-sql", help="Run a query against one table")
    p.add_argument("--tables", required=True)
    p.add_argument("--table-id", required=True)
    p.add_argument("--sql", help="Query text: SELECT [agg] col [WHERE (col op value) AND ...]")
    p.add_argument("--record", help='WikiSQL record: {"sel": 0, "agg": 0, "conds": [[1, 0, "value"]]}')
    p.set_defaults(func=cmd_exec_sql)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--max-per-param", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, dispatch, and turn errors into a one-line diagnostic and a nonzero exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
    try:
        return args.func(args)
    except (ToolkitError, OSError, ValueError) as e:
        logger.debug("Command failed", exc_info=True)
        print(format_error_message(e), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(run())
