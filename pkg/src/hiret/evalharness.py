"""Evaluation harness: entity recall@k, answer matching, and (k, n, oracle) experiments.

An experiment runs each query through hierarchical retrieval, assembles the
prompt, asks an answer provider, and scores the reply against the gold
answers. Aggregates per configuration: answer accuracy, evidence hit rate
(the fraction of queries whose designated gold chunk was retrieved, measured
before budget truncation), and stage-1 recall@k in retrieved-entity mode.

Answer matching is exact-match after normalization (lowercase, punctuation
stripped, whitespace collapsed, leading articles dropped), with numeric
predictions additionally matched against inclusive gold ranges after unit
suffixes are stripped. Learned soft matchers are deliberately out of scope.
"""

from __future__ import annotations

import json
import re
import string
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .errors import BudgetError, HiretError, NotFoundError
from .kb import KnowledgeBase
from .retrieval import (
    DEFAULT_BUDGET,
    PassageHit,
    RetrievalEngine,
    RetrievalQuery,
    assemble_context,
    hierarchical_retrieve,
)

DEFAULT_RECALL_KS = (1, 10, 20, 50)

_ARTICLES = {"a", "an", "the"}
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_NUMBER_WITH_UNIT = re.compile(r"([+-]?\d+(?:\.\d+)?)\s*(?:[a-z%°\"']+\.?)?")


@dataclass(frozen=True)
class AnswerRange:
    """Inclusive numeric gold interval, e.g. an acceptable span of years."""

    lo: float
    hi: float

    def __post_init__(self):
        if self.lo > self.hi:
            raise ValueError(f"range lo {self.lo} exceeds hi {self.hi}")

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi


GtAnswer = str | AnswerRange


@dataclass(frozen=True)
class EvalRecord:
    query_id: str
    gt_entity: str
    gt_answers: tuple[GtAnswer, ...]
    gold_chunk: tuple[str, int] | None = None

    def __post_init__(self):
        if not self.gt_answers:
            raise ValueError(f"eval record {self.query_id!r} has no gold answers")


def normalize_answer(text: str) -> str:
    """Canonical answer form: lowercased, punctuation-free, articles dropped."""
    out = text.lower().translate(_PUNCT_TABLE)
    tokens = out.split()
    while tokens and tokens[0] in _ARTICLES:
        tokens.pop(0)
    return " ".join(tokens)


def _parse_number(text: str) -> float | None:
    """Parse a numeric prediction, tolerating a trailing unit suffix ("49mt")."""
    match = _NUMBER_WITH_UNIT.fullmatch(text.strip().lower().replace(",", ""))
    if match is None:
        return None
    try:
        return float(match.group(1))
    except ValueError:  # pragma: no cover - regex restricts the shape
        return None


def match_answer(prediction: str, gt_answers: Sequence[GtAnswer]) -> bool:
    """True iff the prediction equals a gold string after normalization or
    parses as a number inside a gold range."""
    if not gt_answers:
        raise ValueError("gt_answers must be non-empty")
    norm_pred = normalize_answer(prediction)
    for gold in gt_answers:
        if isinstance(gold, str) and norm_pred == normalize_answer(gold):
            return True
    value = _parse_number(prediction)
    if value is not None:
        for gold in gt_answers:
            if isinstance(gold, AnswerRange) and gold.contains(value):
                return True
    return False


def recall_at_k(
    rankings: Mapping[str, Sequence[str]],
    gt: Mapping[str, str],
    ks: Sequence[int],
) -> dict[int, float]:
    """Percentage of queries whose ground-truth entity is in the top k, per k."""
    if not rankings:
        raise ValueError("cannot compute recall over an empty query set")
    missing = sorted(set(rankings) - set(gt))
    if missing:
        raise ValueError(f"queries without a gt_entity: {missing[:5]}")
    out: dict[int, float] = {}
    for k in ks:
        if k < 1:
            raise ValueError(f"recall cutoff must be >= 1, got {k}")
        hits = sum(1 for qid, ranking in rankings.items() if gt[qid] in list(ranking)[:k])
        out[k] = 100.0 * hits / len(rankings)
    return out


def load_eval_records_jsonl(path: str | Path) -> dict[str, EvalRecord]:
    """Read eval records from JSON-lines: query_id, gt_entity, gt_answers
    (strings or {lo, hi} objects), optional gold_chunk [doc_id, chunk_index]."""
    records: dict[str, EvalRecord] = {}
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise HiretError(f"{path}:{line_no}: invalid JSON: {exc}") from None
            query_id = obj.get("query_id")
            gt_entity = obj.get("gt_entity")
            if not isinstance(query_id, str) or not isinstance(gt_entity, str):
                raise HiretError(f"{path}:{line_no}: query_id and gt_entity are required strings")
            answers: list[GtAnswer] = []
            for raw in obj.get("gt_answers", []):
                if isinstance(raw, str):
                    answers.append(raw)
                elif isinstance(raw, dict) and "lo" in raw and "hi" in raw:
                    answers.append(AnswerRange(float(raw["lo"]), float(raw["hi"])))
                else:
                    raise HiretError(f"{path}:{line_no}: bad gold answer {raw!r}")
            gold_chunk = None
            raw_chunk = obj.get("gold_chunk")
            if raw_chunk is not None:
                if not (isinstance(raw_chunk, list) and len(raw_chunk) == 2):
                    raise HiretError(f"{path}:{line_no}: gold_chunk must be [doc_id, chunk_index]")
                gold_chunk = (str(raw_chunk[0]), int(raw_chunk[1]))
            if query_id in records:
                raise HiretError(f"{path}:{line_no}: duplicate query_id {query_id!r}")
            records[query_id] = EvalRecord(query_id, gt_entity, tuple(answers), gold_chunk)
    return records


# --- answer providers -------------------------------------------------------


class AnswerProvider(Protocol):
    """Maps an assembled prompt to an answer string; must be deterministic.

    Providers that cannot be called concurrently leave ``reentrant`` False
    and the harness serializes them.
    """

    reentrant: bool

    def answer(self, prompt: str, context_passages: Sequence[PassageHit]) -> str: ...


class EchoAnswerer:
    """Plumbing-test provider: answers with the prompt itself."""

    reentrant = True

    def answer(self, prompt: str, context_passages: Sequence[PassageHit]) -> str:
        return prompt


class EvidenceContainmentAnswerer:
    """Mock model that is right exactly when the evidence reached the prompt.

    For the query whose question appears in the prompt, it returns the gold
    answer iff that query's gold chunk text occurs verbatim in the prompt,
    and a fixed wrong string otherwise. Questions must be unique across the
    eval set for the lookup to be well-defined.
    """

    WRONG_ANSWER = "i do not know"
    reentrant = True

    def __init__(self, items: Sequence[tuple[str, str, str]]):
        # (question, gold_chunk_text, gold_answer), matched in the given order
        self._items = list(items)

    @classmethod
    def from_eval_data(
        cls,
        queries: Sequence[RetrievalQuery],
        records: Mapping[str, EvalRecord],
        kb: KnowledgeBase,
    ) -> "EvidenceContainmentAnswerer":
        items = []
        for query in sorted(queries, key=lambda q: q.query_id):
            record = records.get(query.query_id)
            if record is None or record.gold_chunk is None:
                continue
            doc_id, chunk_index = record.gold_chunk
            chunks = kb.get_chunks(doc_id)
            if chunk_index >= len(chunks):
                raise NotFoundError(
                    f"gold chunk {record.gold_chunk} out of range for query {query.query_id!r}"
                )
            items.append((query.question, chunks[chunk_index].text, _gold_answer_text(record)))
        return cls(items)

    def answer(self, prompt: str, context_passages: Sequence[PassageHit]) -> str:
        for question, chunk_text, gold in self._items:
            if question and question in prompt:
                return gold if chunk_text in prompt else self.WRONG_ANSWER
        return self.WRONG_ANSWER


def _gold_answer_text(record: EvalRecord) -> str:
    """A textual gold answer for mock providers; ranges fall back to their low end."""
    for gold in record.gt_answers:
        if isinstance(gold, str):
            return gold
    lo = record.gt_answers[0].lo
    return str(int(lo)) if lo == int(lo) else str(lo)


class ExternalCommandAnswerer:
    """Pipes the prompt to a user-supplied program: prompt on stdin, answer on stdout.

    This is the integration point for a real model; one process per query
    keeps the contract simple and stateless.
    """

    reentrant = True

    def __init__(self, argv: Sequence[str]):
        if not argv:
            raise ValueError("external answerer needs a command")
        self.argv = list(argv)

    def answer(self, prompt: str, context_passages: Sequence[PassageHit]) -> str:
        result = subprocess.run(
            self.argv, input=prompt.encode("utf-8"), capture_output=True, check=False
        )
        if result.returncode != 0:
            raise HiretError(
                f"answer command {self.argv!r} exited {result.returncode}: "
                f"{result.stderr.decode('utf-8', 'replace').strip()}"
            )
        return result.stdout.decode("utf-8", "replace").rstrip("\n")


# --- experiments -------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    k: int = 1
    n: int = 1
    oracle: bool = False
    budget: int = DEFAULT_BUDGET
    label: str = "default"
    recall_ks: tuple[int, ...] = DEFAULT_RECALL_KS
    ef_search: int | None = None
    threads: int = 1

    def __post_init__(self):
        if self.k < 1 or self.n < 1:
            raise ValueError(f"k and n must be >= 1, got k={self.k}, n={self.n}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")


@dataclass
class ExperimentRow:
    """Aggregates for one (k, n, oracle) configuration."""

    label: str
    k: int
    n: int
    oracle: bool
    n_queries: int
    evaluated: int
    skipped: list[tuple[str, str]]
    accuracy: float
    evidence_hit_rate: float
    evidence_evaluated: int
    recall_at: dict[int, float]
    invariant_violations: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    rows: list[ExperimentRow] = field(default_factory=list)

    def add(self, row: ExperimentRow) -> None:
        self.rows.append(row)

    def violations(self) -> list[str]:
        out = []
        for row in self.rows:
            out.extend(f"[{row.label} k={row.k} n={row.n}] {v}" for v in row.invariant_violations)
        return out


def _check_row_invariants(row: ExperimentRow) -> None:
    for name, pct in [("accuracy", row.accuracy), ("evidence_hit_rate", row.evidence_hit_rate)]:
        if not 0.0 <= pct <= 100.0:
            row.invariant_violations.append(f"{name} out of [0, 100]: {pct}")
    ordered = sorted(row.recall_at)
    for lo, hi in zip(ordered, ordered[1:]):
        if row.recall_at[hi] < row.recall_at[lo] - 1e-9:
            row.invariant_violations.append(
                f"recall@{hi} ({row.recall_at[hi]}) below recall@{lo} ({row.recall_at[lo]})"
            )


def run_experiment(
    engine: RetrievalEngine,
    queries: Sequence[RetrievalQuery],
    eval_records: Mapping[str, EvalRecord],
    config: ExperimentConfig,
    answerer: AnswerProvider,
) -> ExperimentRow:
    """Retrieve, assemble, answer and score every query under one configuration.

    Per-query data gaps (missing eval record, missing embedding, unusable
    budget) never abort the run; they are skipped and reported. Aggregation
    is order-independent: results are keyed by query id and reduced in sorted
    order regardless of scheduling.
    """
    answer_lock: threading.Lock | None = None
    if not getattr(answerer, "reentrant", False):
        answer_lock = threading.Lock()
    depth = max(config.k, max(config.recall_ks, default=config.k))

    def evaluate(query: RetrievalQuery) -> dict:
        record = eval_records.get(query.query_id)
        if record is None:
            return {"skip": "no eval record"}
        if config.oracle:
            if record.gt_entity not in engine.kb:
                return {"skip": f"gt entity {record.gt_entity!r} not in knowledge base"}
            query = replace(query, oracle_entity=record.gt_entity)
        elif query.image_embedding is None:
            return {"skip": "missing image embedding"}
        entities, passages = hierarchical_retrieve(
            engine,
            query,
            config.k,
            config.n,
            oracle=config.oracle,
            ef_search=config.ef_search,
            entity_depth=None if config.oracle else depth,
        )
        out: dict = {}
        if len(passages) > config.k * config.n:
            out["violation"] = (
                f"query {query.query_id!r} returned {len(passages)} passages "
                f"for k*n = {config.k * config.n}"
            )
        try:
            context = assemble_context(
                query.question, passages, budget=config.budget, tokenizer=engine.tokenizer
            )
        except BudgetError as exc:
            return {"skip": f"budget: {exc}"}
        if answer_lock is None:
            prediction = answerer.answer(context.prompt, context.included_passages)
        else:
            with answer_lock:
                prediction = answerer.answer(context.prompt, context.included_passages)
        out["correct"] = match_answer(prediction, record.gt_answers)
        if record.gold_chunk is not None:
            out["evidence_hit"] = record.gold_chunk in {
                (p.doc_id, p.chunk_index) for p in passages
            }
        if not config.oracle:
            out["ranking"] = [hit.id for hit in entities]
        return out

    ordered = sorted(queries, key=lambda q: q.query_id)
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = dict(zip([q.query_id for q in ordered], pool.map(evaluate, ordered)))
    else:
        outcomes = {q.query_id: evaluate(q) for q in ordered}

    skipped: list[tuple[str, str]] = []
    correct = evaluated = evidence_hits = evidence_n = 0
    rankings: dict[str, list[str]] = {}
    violations: list[str] = []
    for qid in sorted(outcomes):
        outcome = outcomes[qid]
        if "skip" in outcome:
            skipped.append((qid, outcome["skip"]))
            continue
        evaluated += 1
        correct += bool(outcome["correct"])
        if "violation" in outcome:
            violations.append(outcome["violation"])
        if "evidence_hit" in outcome:
            evidence_n += 1
            evidence_hits += bool(outcome["evidence_hit"])
        if "ranking" in outcome:
            rankings[qid] = outcome["ranking"]

    recall = {}
    if rankings:
        recall = recall_at_k(
            rankings, {qid: eval_records[qid].gt_entity for qid in rankings}, config.recall_ks
        )
    row = ExperimentRow(
        label=config.label,
        k=config.k,
        n=config.n,
        oracle=config.oracle,
        n_queries=len(queries),
        evaluated=evaluated,
        skipped=skipped,
        accuracy=100.0 * correct / evaluated if evaluated else 0.0,
        evidence_hit_rate=100.0 * evidence_hits / evidence_n if evidence_n else 0.0,
        evidence_evaluated=evidence_n,
        recall_at=recall,
        invariant_violations=violations,
    )
    _check_row_invariants(row)
    return row


# --- report rendering ---------------------------------------------------------


def _report_cells(report: MetricsReport) -> tuple[list[str], list[list[str]]]:
    ks = sorted({k for row in report.rows for k in row.recall_at} | set(DEFAULT_RECALL_KS))
    header = (
        ["config", "k", "n", "oracle"]
        + [f"R@{k}" for k in ks]
        + ["accuracy", "evidence_hit_rate"]
    )
    lines = []
    for row in sorted(report.rows, key=lambda r: (r.oracle, r.k, r.n, r.label)):
        cells = [row.label, str(row.k), str(row.n), "yes" if row.oracle else "no"]
        cells += [f"{row.recall_at[k]:.1f}" if k in row.recall_at else "-" for k in ks]
        cells += [f"{row.accuracy:.1f}", f"{row.evidence_hit_rate:.1f}"]
        lines.append(cells)
    return header, lines


def render_markdown(report: MetricsReport) -> str:
    header, lines = _report_cells(report)
    out = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] * len(header)) + "|"]
    out += ["| " + " | ".join(cells) + " |" for cells in lines]
    return "\n".join(out) + "\n"


def render_csv(report: MetricsReport) -> str:
    header, lines = _report_cells(report)
    return "\n".join([",".join(header)] + [",".join(cells) for cells in lines]) + "\n"


def render_report(report: MetricsReport) -> dict[str, str]:
    """Both renderings; they carry identical cell values by construction."""
    return {"markdown": render_markdown(report), "csv": render_csv(report)}
