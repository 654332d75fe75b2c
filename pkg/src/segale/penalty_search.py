"""Adaptive skip-cost search.

The percentile that prices a skip is lowered step by step.  Each step's
alignment is checked for signs of over-deletion; when one appears the search
falls back to the last step that looked healthy.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from segale.align import AlignmentPath, AlignParams, _AlignContext, path_stats
from segale.embeddings import EmbeddingMatrix

COST_INCREASE = "cost_increase"
COST_CEILING = "cost_ceiling"
COST_FLOOR = "cost_floor"
NA_SPIKE = "na_spike"
EXHAUSTED = "exhausted"
ACCEPTED = "accepted"
TERMINATION_REASONS = (COST_FLOOR, NA_SPIKE, COST_INCREASE, COST_CEILING, EXHAUSTED)


@dataclass(frozen=True)
class SearchParams:
    beta_start: float = 0.2
    beta_step: float = 0.005
    avg_cost_floor: float = 0.3
    step_na_ceiling: float = 0.15
    avg_cost_ceiling: float = 0.7
    max_steps: int = 40

    def __post_init__(self):
        if not 0 < self.beta_step < self.beta_start:
            raise ValueError("need 0 < beta_step < beta_start")
        if not 0 < self.avg_cost_floor < self.avg_cost_ceiling:
            raise ValueError("need 0 < avg_cost_floor < avg_cost_ceiling")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def betas(self) -> list[float]:
        out = []
        for k in range(self.max_steps):
            beta = round(self.beta_start - k * self.beta_step, 12)
            if beta <= 0:
                break
            out.append(beta)
        return out


@dataclass(frozen=True)
class TraceStep:
    beta: float
    na_ratio: float
    avg_cost: float
    verdict: str

    def to_json(self) -> dict:
        return {"beta": self.beta, "na_ratio": self.na_ratio, "avg_cost": self.avg_cost, "verdict": self.verdict}


@dataclass(frozen=True)
class AlignmentResult:
    path: AlignmentPath
    na_ratio: float
    avg_cost: float
    trace: tuple[TraceStep, ...]
    termination_reason: str
    selected: int

    @property
    def beta_skip_final(self) -> float:
        return self.trace[self.selected].beta


def adaptive_align(
    src_matrix: EmbeddingMatrix | None,
    tgt_matrix: EmbeddingMatrix | None,
    align_params: AlignParams,
    search_params: SearchParams,
    aligner: Callable[[float], AlignmentPath] | None = None,
) -> AlignmentResult:
    """Lower the skip percentile until an over-deletion signal fires, then return the last good step.

    ``aligner`` maps a skip percentile to a path and replaces the embedding-based
    aligner when given; the matrices are then ignored.
    """
    if aligner is None:
        ctx = _AlignContext(src_matrix, tgt_matrix, align_params)
        aligner = ctx.coarse_to_fine

    sp = search_params
    trace: list[TraceStep] = []
    paths: list[AlignmentPath] = []
    last_accepted: int | None = None
    best: int | None = None

    def finish(reason: str, index: int) -> AlignmentResult:
        path = paths[index]
        avg, na = path_stats(path)
        return AlignmentResult(path, na, avg, tuple(trace), reason, index)

    def revert(reason: str, current: int) -> AlignmentResult:
        # The first step has nothing to fall back to, so it stands.
        return finish(reason, current if last_accepted is None else last_accepted)

    for beta in sp.betas():
        path = aligner(beta)
        avg, na = path_stats(path)
        paths.append(path)
        step = len(paths) - 1

        if last_accepted is not None and avg > trace[last_accepted].avg_cost:
            verdict = COST_INCREASE
        elif avg > sp.avg_cost_ceiling:
            verdict = COST_CEILING
        elif avg < sp.avg_cost_floor:
            verdict = COST_FLOOR
        elif na > sp.step_na_ceiling:
            verdict = NA_SPIKE
        else:
            verdict = ACCEPTED
        trace.append(TraceStep(beta, na, avg, verdict))

        if verdict == COST_CEILING:
            return finish(COST_CEILING, step if best is None else best)
        if verdict != ACCEPTED:
            return revert(verdict, step)
        last_accepted = step
        if best is None or avg < trace[best].avg_cost:
            best = step

    if last_accepted is None:
        raise RuntimeError("adaptive search produced no steps")
    return finish(EXHAUSTED, last_accepted)


def trace_lines(result: AlignmentResult, doc_id: str) -> list[dict]:
    out = []
    for i, step in enumerate(result.trace):
        row = {"doc_id": doc_id, "step": i, **step.to_json(), "selected": i == result.selected}
        out.append(row)
    return out

