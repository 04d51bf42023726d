# -*- coding: utf-8 -*-
"""
Toy Corpus Module
Seeded generators for small λ-calculus, code and WikiSQL-style corpora, used by the
tests and the command line. Run directly to write the corpora as JSON-lines files.
"""

import argparse
import json
import logging
import os
from typing import Dict, List, Sequence, Tuple

import numpy as np

from eval_harness import TableInstance, example_from_record
from meaning_repr import AGG_OPS, COND_OPS, TableSchema
from sketch_extract import SketchKind
from train_infer import Example

logger = logging.getLogger(__name__)

STATES = ("texas", "ohio", "utah", "iowa", "maine", "idaho", "kansas", "nevada")
CITIES = ("austin", "boston", "dallas", "denver", "tampa", "reno")

# (question template, logical form template); {s} is a state, {c} a city
LAMBDA_TEMPLATES: Tuple[Tuple[str, str], ...] = (
    ("what is the capital of {s}", "( lambda $0 e ( and ( capital:t $0 ) ( loc:t $0 {s}:s ) ) )"),
    ("how many rivers are in {s}", "( count $0 ( and ( river:t $0 ) ( loc:t $0 {s}:s ) ) )"),
    ("what cities are in {s}", "( lambda $0 e ( and ( city:t $0 ) ( loc:t $0 {s}:s ) ) )"),
    ("which state borders {s}", "( lambda $0 e ( and ( state:t $0 ) ( next_to:t $0 {s}:s ) ) )"),
    ("what is the largest city in {s}", "( argmax $0 ( and ( city:t $0 ) ( loc:t $0 {s}:s ) ) ( size:i $0 ) )"),
    ("what is the area of {s}", "( area:i {s}:s )"),
    ("what rivers run through {s}", "( lambda $0 e ( and ( river:t $0 ) ( traverse:t $0 {s}:s ) ) )"),
    ("what is the population of {c}", "( population:i {c}:c )"),
)

COMMON_NAMES = ("self", "value", "result", "data", "items", "key", "name", "path")
RARE_PARTS = ("alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "zeta")

# (question template, code template); {x} and {y} are names, {n} a number
CODE_TEMPLATES: Tuple[Tuple[str, str], ...] = (
    ("call {x} with {y}", "{x} ( {y} )"),
    ("set {x} to {n}", "{x} = {n}"),
    ("return the attribute {y} of {x}", "return {x} . {y}"),
    ("if {x} is None return {n}", "if {x} is None : return {n}"),
    ("define the function {x} with argument {y}", "def {x} ( {y} ) :"),
    ("append {y} to {x}", "{x} . append ( {y} )"),
    ("increment {x} by {n}", "{x} += {n}"),
)

TABLE_DOMAINS: Tuple[Tuple[Tuple[str, ...], Tuple[str, ...]], ...] = (
    (("player", "team"), ("goals", "caps")),
    (("city", "country"), ("population", "rank")),
    (("driver", "car"), ("laps", "points")),
    (("album", "artist"), ("year", "sales")),
    (("school", "mascot"), ("students", "founded")),
)
VALUE_WORDS = (
    "alder", "birch", "cedar", "maple", "rowan", "willow", "aspen", "hazel", "juniper", "laurel",
    "amber", "coral", "ivory", "onyx", "slate", "indigo", "scarlet", "violet", "russet", "ochre",
)


def _lambda_pool() -> List[Tuple[str, str]]:
    pool = []
    for question, form in LAMBDA_TEMPLATES:
        fillers = CITIES if "{c}" in question else STATES
        for value in fillers:
            pool.append((question.format(s=value, c=value), form.format(s=value, c=value)))
    return pool


def lambda_records(count: int = 60, seed: int = 0) -> List[Dict]:
    """Distinct geography questions with their logical forms."""
    pool = _lambda_pool()
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))[:min(count, len(pool))]
    return [{"src": pool[i][0].split(), "mr": pool[i][1].split()} for i in order]


def code_records(count: int = 60, seed: int = 0) -> List[Dict]:
    """
    One-line code snippets with their descriptions.

    Every snippet names one identifier made for it alone, so with a vocabulary
    frequency threshold of 2 about half of the NAME tokens are out of vocabulary.
    """
    rng = np.random.default_rng(seed)
    records = []
    for i in range(count):
        question, code = CODE_TEMPLATES[i % len(CODE_TEMPLATES)]
        rare = f"{RARE_PARTS[int(rng.integers(len(RARE_PARTS)))]}_{i}"
        common = COMMON_NAMES[int(rng.integers(len(COMMON_NAMES)))]
        x, y = (rare, common) if rng.random() < 0.5 else (common, rare)
        if "{y}" not in question:
            x = rare
        n = str(int(rng.integers(1, 4)))
        records.append({
            "src": question.format(x=x, y=y, n=n).split(),
            "mr": code.format(x=x, y=y, n=n).split(),
        })
    return records


def _value(rng: np.random.Generator) -> str:
    words = int(rng.integers(1, 3))
    return " ".join(VALUE_WORDS[int(i)] for i in rng.choice(len(VALUE_WORDS), size=words, replace=False))


def make_table(table_id: str, rng: np.random.Generator, rows: int = 6) -> Dict:
    text_cols, num_cols = TABLE_DOMAINS[int(rng.integers(len(TABLE_DOMAINS)))]
    header = list(text_cols) + list(num_cols)
    body = []
    for _ in range(rows):
        body.append([_value(rng) for _ in text_cols] + [str(int(rng.integers(1, 100))) for _ in num_cols])
    return {"id": table_id, "header": header, "rows": body}


def _question(table: Dict, rng: np.random.Generator) -> Dict:
    header, rows = table["header"], table["rows"]
    row = rows[int(rng.integers(len(rows)))]
    text_a, text_b = (0, 1) if rng.random() < 0.5 else (1, 0)
    num = int(rng.integers(2, 4))
    v, n = row[text_b], row[num]
    pattern = int(rng.integers(8))

    eq = [text_b, COND_OPS.index("="), v]
    if pattern == 0:
        words, sel, agg, conds = f"what is the {header[text_a]} when {header[text_b]} is {v}", text_a, "", [eq]
    elif pattern == 1:
        words, sel, agg, conds = f"how many {header[text_a]} are there when {header[text_b]} is {v}", text_a, "COUNT", [eq]
    elif pattern in (2, 3, 4, 5):
        word = {2: "highest", 3: "lowest", 4: "total", 5: "average"}[pattern]
        agg = {2: "MAX", 3: "MIN", 4: "SUM", 5: "AVG"}[pattern]
        if rng.random() < 0.3:
            words, conds = f"what is the {word} {header[num]}", []
        else:
            words, conds = f"what is the {word} {header[num]} when {header[text_b]} is {v}", [eq]
        sel = num
    elif pattern == 6:
        op = ">" if rng.random() < 0.5 else "<"
        phrase = "more than" if op == ">" else "less than"
        words, sel, agg = f"what is the {header[text_a]} when {header[num]} is {phrase} {n}", text_a, ""
        conds = [[num, COND_OPS.index(op), n]]
    else:
        words, sel, agg = f"what is the {header[text_a]} when {header[text_b]} is {v} and {header[num]} is more than {n}", text_a, ""
        conds = [eq, [num, COND_OPS.index(">"), n]]

    return {
        "src": words.split(),
        "sql": {"sel": sel, "agg": AGG_OPS.index(agg), "conds": conds},
        "table_id": table["id"],
    }


def wikisql_records(n_tables: int = 40, per_table: int = 5, seed: int = 0) -> Tuple[List[Dict], List[Dict]]:
    """Templated questions over generated tables; returns (question records, table records)."""
    rng = np.random.default_rng(seed)
    tables = [make_table(f"t{i}", rng) for i in range(n_tables)]
    records = [_question(table, rng) for table in tables for _ in range(per_table)]
    return records, tables


# ---------------------------------------------------------------------------
# Examples
# ---------------------------------------------------------------------------

def lambda_examples(count: int = 60, seed: int = 0) -> List[Example]:
    return [example_from_record(r, SketchKind.LAMBDA) for r in lambda_records(count, seed)]


def code_examples(count: int = 60, seed: int = 0) -> List[Example]:
    return [example_from_record(r, SketchKind.CODE) for r in code_records(count, seed)]


def wikisql_examples(n_tables: int = 40, per_table: int = 5,
                     seed: int = 0) -> Tuple[List[Example], Dict[str, TableInstance]]:
    records, table_records = wikisql_records(n_tables, per_table, seed)
    tables = {
        t["id"]: TableInstance.from_rows(TableSchema.from_headers(t["header"]), t["rows"], t["id"])
        for t in table_records
    }
    return [example_from_record(r, SketchKind.SQL, tables) for r in records], tables


def write_jsonl(path: str, records: Sequence[Dict]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    logger.info(f"Wrote {len(records)} records to {path}")


def write_corpora(directory: str, seed: int = 0) -> Dict[str, str]:
    """Write geo.jsonl, django.jsonl, wikisql.jsonl and wikisql.tables.jsonl."""
    os.makedirs(directory, exist_ok=True)
    paths = {name: os.path.join(directory, f"{name}.jsonl") for name in ("geo", "django", "wikisql")}
    paths["tables"] = os.path.join(directory, "wikisql.tables.jsonl")
    write_jsonl(paths["geo"], lambda_records(seed=seed))
    write_jsonl(paths["django"], code_records(seed=seed))
    records, tables = wikisql_records(seed=seed)
    write_jsonl(paths["wikisql"], records)
    write_jsonl(paths["tables"], tables)
    return paths


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")
    parser = argparse.ArgumentParser(description="Write the toy corpora")
    parser.add_argument("--out", default="toy_data", help="Output directory")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    for name, path in write_corpora(args.out, args.seed).items():
        print(f"✅ {name}: {path}")
