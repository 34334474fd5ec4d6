"""Full-catalog ranking metrics under the leave-one-out protocol.

With a single relevant item NDCG reduces to ``1 / log2(rank + 1)``.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import EvalCases

CUTOFFS = (5, 20)


@dataclass(frozen=True)
class RankResult:
    rank: int

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")


def rank_of_target(scores, target: int) -> RankResult:
    """1-based rank of ``target`` among ids 1..|V| by descending score.

    Items scoring the same as the target rank ahead of it when their id is smaller.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"scores must be a vector, got shape {scores.shape}")
    target = int(target)
    if not 1 <= target < len(scores):
        raise ValueError(f"target {target} outside vocabulary 1..{len(scores) - 1}")
    s = scores[1:]
    t = s[target - 1]
    ahead = int(np.count_nonzero(s > t)) + int(np.count_nonzero(s[: target - 1] == t))
    return RankResult(ahead + 1)


def metrics_at_n(ranks: Sequence, n: int) -> tuple:
    """(MRR@n, HR@n, NDCG@n) averaged over cases.

    Sums are exactly rounded, so the result does not depend on case order.
    """
    if n < 1:
        raise ValueError(f"N must be >= 1, got {n}")
    r = [x.rank if isinstance(x, RankResult) else int(x) for x in ranks]
    if not r:
        raise ValueError("no ranks to evaluate")
    if min(r) < 1:
        raise ValueError("ranks must be >= 1")
    hits = [k for k in r if k <= n]
    mrr = math.fsum(1.0 / k for k in hits) / len(r)
    hr = len(hits) / len(r)
    ndcg = math.fsum(1.0 / math.log2(k + 1) for k in hits) / len(r)
    return mrr, hr, ndcg


def score_cases(model, cases: EvalCases, batch_size: int = 256) -> np.ndarray:
    """Final-position logits (n, |V|+1) for each case."""
    out = []
    for start in range(0, len(cases), batch_size):
        out.append(model.logits(cases.inputs[start: start + batch_size])[:, -1, :])
    return np.concatenate(out) if out else np.zeros((0, 0))


def rank_cases(model, cases: EvalCases) -> list:
    if len(cases) == 0:
        raise ValueError("no evaluation cases")
    scores = score_cases(model, cases)
    return [rank_of_target(row, t).rank for row, t in zip(scores, cases.targets)]


def evaluate(model, cases: EvalCases, cutoffs: Sequence[int] = CUTOFFS) -> dict:
    """Metrics table plus raw per-case ranks."""
    ranks = rank_cases(model, cases)
    out = {}
    for n in cutoffs:
        mrr, hr, ndcg = metrics_at_n(ranks, n)
        out[f"MRR@{n}"], out[f"HR@{n}"], out[f"NDCG@{n}"] = mrr, hr, ndcg
    return {"metrics": out, "ranks": ranks}


def hit_rate_at_1(model, cases: EvalCases) -> float:
    return metrics_at_n(rank_cases(model, cases), 1)[1]


def inference_time(model, inputs: np.ndarray, batches: int = 100, batch_size: int = 32) -> float:
    """Seconds spent on ``batches`` forward passes over cycling slices of ``inputs``."""
    if len(inputs) == 0:
        raise ValueError("no inputs to time")
    reps = int(np.ceil(batch_size / len(inputs)))
    pool = np.concatenate([inputs] * reps) if reps > 1 else inputs
    start = time.perf_counter()
    for b in range(batches):
        lo = (b * batch_size) % (len(pool) - batch_size + 1)
        model.logits(pool[lo: lo + batch_size])
    return time.perf_counter() - start


def report(student_eval: dict, params: int, teacher_params: Optional[int] = None,
           teacher_eval: Optional[dict] = None) -> dict:
    """Deterministic metrics report; wall-clock speedup is kept out so the file hashes stably."""
    rep = {"student": dict(student_eval["metrics"]), "params": int(params),
           "teacher_params": teacher_params, "ranks": list(student_eval["ranks"])}
    if teacher_eval is not None:
        rep["teacher"] = dict(teacher_eval["metrics"])
        rep["teacher_ranks"] = list(teacher_eval["ranks"])
    return rep


def format_table(rep: dict, speedup: Optional[float] = None, cutoffs: Sequence[int] = CUTOFFS) -> str:
    cols = [f"{m}@{n}" for n in cutoffs for m in ("MRR", "HR", "NDCG")]
    header = ["model"] + cols + ["Params", "Speedup"]
    rows = []
    if "teacher" in rep:
        rows.append(["teacher"] + [f"{rep['teacher'][c]:.4f}" for c in cols]
                    + [str(rep.get("teacher_params")), "1.00x"])
    rows.append(["student"] + [f"{rep['student'][c]:.4f}" for c in cols]
                + [str(rep["params"]), f"{speedup:.2f}x" if speedup is not None else "-"])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in [header] + rows]
    return "\n".join(lines)


def write_report(path, rep: dict) -> None:
    Path(path).write_text(json.dumps(rep, indent=1) + "\n", encoding="utf-8")


__all__ = ["RankResult", "rank_of_target", "metrics_at_n", "evaluate", "hit_rate_at_1", "inference_time",
           "report", "format_table", "write_report"]
