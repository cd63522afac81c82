"""
Evaluation metrics over externally judged result logs.

A log is JSON lines, one record per question:

    {"id": "q17", "outcomes": [true, false, true, ...]}

For accuracy each outcome says whether one sampled response was correct. For
safety each record carries a single judge verdict, true meaning the response
was judged safe.
"""

import json
import logging
import math
import os

from collections.abc import Iterable
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np

from .errors import EvalLogError, InputError

logger = logging.getLogger(__name__)

DEFAULT_N_SAMPLES = 8
POLARITIES = ("safe_fraction", "harmful_fraction")
DEFAULT_POLARITY = "safe_fraction"


class EvalRecord(NamedTuple):
    id: str
    outcomes: tuple[bool, ...]


type EvalLog = list[EvalRecord]


class ParetoPoint(NamedTuple):
    label: str
    safety: float
    accuracy: float


def _record_from_json(doc: Any) -> EvalRecord:
    if not isinstance(doc, dict):
        raise ValueError("record must be a JSON object")
    rec_id = doc.get("id")
    outcomes = doc.get("outcomes")
    if not isinstance(rec_id, str):
        raise ValueError(f"record id must be a string, got {rec_id!r}")
    if not isinstance(outcomes, list) or not outcomes:
        raise ValueError(f"record {rec_id!r}: outcomes must be a non-empty list")
    if not all(isinstance(o, bool) for o in outcomes):
        raise ValueError(f"record {rec_id!r}: outcomes must all be true or false")
    return EvalRecord(rec_id, tuple(outcomes))


def load_eval_log(path: str | os.PathLike) -> EvalLog:
    "reads a JSONL log; blank lines are skipped and errors cite the 1-based line"
    path = Path(path)
    records = []
    seen: dict[str, int] = {}
    try:
        with open(path, encoding="utf-8") as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = _record_from_json(json.loads(line))
                except ValueError as ex:
                    # JSONDecodeError is a ValueError too
                    raise EvalLogError(f"{path}: {ex}", line_no) from ex
                if record.id in seen:
                    raise EvalLogError(
                        f"{path}: duplicate id {record.id!r}, first seen on line {seen[record.id]}",
                        line_no,
                    )
                seen[record.id] = line_no
                records.append(record)
    except OSError as ex:
        raise EvalLogError(f"{path}: {ex.strerror or ex}") from ex
    except UnicodeDecodeError as ex:
        raise EvalLogError(f"{path}: not UTF-8 text: {ex}") from ex
    logger.info(f"read {len(records)} records from {path}")
    return records


def check_log(log: EvalLog) -> EvalLog:
    if not log:
        raise InputError("evaluation log is empty")
    ids = set()
    for record in log:
        if not record.outcomes:
            raise InputError(f"record {record.id!r} has no outcomes")
        if record.id in ids:
            raise InputError(f"duplicate record id {record.id!r}")
        ids.add(record.id)
    return log


def check_sample_count(log: EvalLog, n: int) -> None:
    "every record must carry exactly n outcomes"
    for record in log:
        if len(record.outcomes) != n:
            raise InputError(f"record {record.id!r} has {len(record.outcomes)} outcomes, expected {n}")


def pass_at_1(log: EvalLog) -> float:
    "mean over questions of the fraction of correct samples"
    check_log(log)
    return float(np.mean([sum(r.outcomes) / len(r.outcomes) for r in log]))


def _unbiased_pass_at_k(n: int, c: int, k: int) -> float:
    "1 - C(n - c, k) / C(n, k), in product form"
    if n - c < k:
        return 1.0
    return 1.0 - math.prod(1.0 - k / j for j in range(n - c + 1, n + 1))


def pass_at_k(log: EvalLog, k: int) -> float:
    check_log(log)
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        raise InputError(f"k must be a positive integer, got {k!r}")
    scores = []
    for record in log:
        n = len(record.outcomes)
        if k > n:
            raise InputError(f"record {record.id!r}: k={k} exceeds its {n} samples")
        scores.append(_unbiased_pass_at_k(n, sum(record.outcomes), k))
    return float(np.mean(scores))


def safety_score(log: EvalLog, polarity: str = DEFAULT_POLARITY) -> float:
    """
    Fraction of records judged safe, or its complement for harmful_fraction.
    The harmful fraction is computed as 1 - safe so the two always sum to 1.
    """
    check_log(log)
    if polarity not in POLARITIES:
        raise InputError(f"unknown polarity {polarity!r}, choose from {', '.join(POLARITIES)}")
    for record in log:
        if len(record.outcomes) != 1:
            raise InputError(
                f"record {record.id!r} has {len(record.outcomes)} verdicts, safety needs exactly one"
            )
    safe = sum(1 for r in log if r.outcomes[0]) / len(log)
    return safe if polarity == "safe_fraction" else 1.0 - safe


def pareto_front(points: Iterable[ParetoPoint | tuple[str, float, float]]) -> list[ParetoPoint]:
    "points no other point beats on both safety and accuracy, by increasing safety"
    candidates = [ParetoPoint(*p) for p in points]

    def dominated(p: ParetoPoint) -> bool:
        return any(
            q.safety >= p.safety
            and q.accuracy >= p.accuracy
            and (q.safety > p.safety or q.accuracy > p.accuracy)
            for q in candidates
        )

    return sorted((p for p in candidates if not dominated(p)), key=lambda p: (p.safety, -p.accuracy))
