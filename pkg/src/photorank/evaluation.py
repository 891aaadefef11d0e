"""Offline ranking evaluation: test cases, per-case metrics, and aggregation.

One test case holds a held-out positive photo and the same-item candidate
pool.  The positive's rank is pessimistic (ties with negatives count against
it); AUC gives ties half credit, matching the ROC convention.  Recall@k and
NDCG@k are averaged only over cases with enough candidates and an active
enough author; AUC covers every case where it is defined; the median
percentile covers all cases.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .corpus import Corpus, SplitAssignment, TRAIN, TEST


class EvaluationError(ValueError):
    """Invalid test case, score, or aggregation request."""


@dataclass(frozen=True)
class TestCase:
    """One held-out positive plus the same-item candidates by other users."""

    __test__ = False  # not a pytest class, despite the name

    user: int
    item: int
    positive_photo: int
    candidates: np.ndarray
    author_train_count: int

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)


@dataclass(frozen=True)
class RankedCase:
    """Scores over a case's candidates and the positive's pessimistic rank."""

    scores: np.ndarray
    positive_index: int
    positive_rank: int
    n_candidates: int

    def negative_scores(self) -> np.ndarray:
        return np.delete(self.scores, self.positive_index)


def build_test_cases(corpus: Corpus, split: SplitAssignment, subset: int = TEST) -> list[TestCase]:
    """One case per held-out interaction of `subset` (val or test).

    Candidates are the positive plus every photo of the same item that is
    neither authored by the case's user nor itself a held-out positive of
    another case (which would leak labels across cases).  Cases with a
    single candidate are still built; the metrics filter them later.
    """
    rows = split.indices(subset)
    if rows.size == 0:
        raise EvaluationError("split has no rows for the requested subset")
    held_out = np.zeros(corpus.n_photos, dtype=bool)
    held_out[corpus.photos[rows]] = True
    train_counts = np.bincount(corpus.users[split.indices(TRAIN)], minlength=corpus.n_users)
    cases = []
    for row in rows.tolist():
        u = int(corpus.users[row])
        i = int(corpus.items[row])
        p = int(corpus.photos[row])
        pool = corpus.item_photos[i]
        keep = (corpus.photo_author[pool] != u) & ~held_out[pool]
        candidates = np.concatenate([np.asarray([p], dtype=np.int64), pool[keep]])
        candidates.setflags(write=False)
        cases.append(TestCase(u, i, p, candidates, int(train_counts[u])))
    return cases


def rank_candidates(scorer: Callable, case: TestCase) -> RankedCase:
    """Score a case's candidates and place the positive pessimistically.

    The positive's 1-based rank counts every negative scoring >= it ahead
    of it, so equal scores never flatter the model.
    """
    scores = np.asarray(scorer(case.user, case.candidates), dtype=np.float64)
    if scores.shape != (case.n_candidates,):
        raise EvaluationError(
            f"scorer returned shape {scores.shape}, expected ({case.n_candidates},)"
        )
    if not np.all(np.isfinite(scores)):
        raise EvaluationError(f"non-finite score for user {case.user}, item {case.item}")
    matches = np.nonzero(case.candidates == case.positive_photo)[0]
    if matches.size != 1:
        raise EvaluationError("positive photo must appear in candidates exactly once")
    pos_idx = int(matches[0])
    rank = int(np.count_nonzero(scores >= scores[pos_idx]))
    return RankedCase(scores, pos_idx, rank, case.n_candidates)


def recall_at_k(ranked: RankedCase, k: int = 10) -> int:
    """1 iff the single positive sits within the top k."""
    return 1 if ranked.positive_rank <= k else 0


def ndcg_at_k(ranked: RankedCase, k: int = 10) -> float:
    """Single-relevant NDCG: the ideal gain is 1, so the discount is the value."""
    if ranked.positive_rank > k:
        return 0.0
    return 1.0 / np.log2(ranked.positive_rank + 1.0)


def auc_single_positive(ranked: RankedCase) -> float:
    """Probability that the positive outranks a uniform negative, ties half."""
    if ranked.n_candidates < 2:
        raise EvaluationError("AUC is undefined for a single-candidate case")
    pos = ranked.scores[ranked.positive_index]
    neg = ranked.negative_scores()
    below = int(np.count_nonzero(neg < pos))
    ties = int(np.count_nonzero(neg == pos))
    return (below + 0.5 * ties) / neg.size


def percentile_of_positive(ranked: RankedCase) -> float:
    """1-based rank as a percentage of the pool size; lower is better."""
    return 100.0 * ranked.positive_rank / ranked.n_candidates


def _lower_median(values: Sequence[float]) -> float:
    ordered = sorted(values)
    return ordered[(len(ordered) - 1) // 2]


@dataclass
class MetricReport:
    """Aggregated metrics with the case counts behind each filter.

    Metrics whose filter leaves zero cases are None, never 0.0.
    """

    k: int
    min_activity: int
    min_candidates: int
    mrecall: float | None
    mndcg: float | None
    mauc: float | None
    medperc: float | None
    n_cases: int
    n_filtered: int
    n_auc: int
    n_single_excluded: int

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "filters": {
                "min_activity": self.min_activity,
                "min_candidates": self.min_candidates,
            },
            "metrics": {
                f"mrecall@{self.k}": self.mrecall,
                f"mndcg@{self.k}": self.mndcg,
                "mauc": self.mauc,
                "medperc": self.medperc,
            },
            "counts": {
                "cases": self.n_cases,
                "recall_ndcg_cases": self.n_filtered,
                "auc_cases": self.n_auc,
                "single_candidate_excluded": self.n_single_excluded,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def rank_all(cases: Sequence[TestCase], scorer: Callable, workers: int = 1) -> list[RankedCase]:
    """Rank every case once so several consumers can share one scoring pass.

    Cases are independent, so extra workers score them in threads; results
    are reduced in case order either way, but the scorer must be stateless
    for workers > 1.
    """
    if workers <= 1:
        return [rank_candidates(scorer, case) for case in cases]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda case: rank_candidates(scorer, case), cases))


def aggregate(
    cases: Sequence[TestCase],
    scorer: Callable,
    k: int = 10,
    min_activity: int = 10,
    min_candidates: int = 10,
) -> MetricReport:
    """Score all cases and aggregate the four metrics under their filters."""
    return aggregate_ranked(cases, rank_all(cases, scorer), k, min_activity, min_candidates)


def aggregate_ranked(
    cases: Sequence[TestCase],
    ranked: Sequence[RankedCase],
    k: int = 10,
    min_activity: int = 10,
    min_candidates: int = 10,
) -> MetricReport:
    if not cases:
        raise EvaluationError("no test cases to aggregate")
    if len(cases) != len(ranked):
        raise EvaluationError("cases and rankings disagree in length")
    recalls: list[float] = []
    ndcgs: list[float] = []
    aucs: list[float] = []
    percentiles: list[float] = []
    singles = 0
    for case, r in zip(cases, ranked):
        percentiles.append(percentile_of_positive(r))
        if r.n_candidates >= 2:
            aucs.append(auc_single_positive(r))
        else:
            singles += 1
        if r.n_candidates >= min_candidates and case.author_train_count >= min_activity:
            recalls.append(recall_at_k(r, k))
            ndcgs.append(ndcg_at_k(r, k))
    return MetricReport(
        k=k,
        min_activity=min_activity,
        min_candidates=min_candidates,
        mrecall=float(np.mean(recalls)) if recalls else None,
        mndcg=float(np.mean(ndcgs)) if ndcgs else None,
        mauc=float(np.mean(aucs)) if aucs else None,
        medperc=_lower_median(percentiles) if percentiles else None,
        n_cases=len(cases),
        n_filtered=len(recalls),
        n_auc=len(aucs),
        n_single_excluded=singles,
    )


@dataclass(frozen=True)
class SweepPoint:
    threshold: int
    medperc: float | None
    n_cases: int


def activity_sweep(cases: Sequence[TestCase], scorer: Callable, thresholds: Sequence[int]) -> list[SweepPoint]:
    """Median percentile restricted to increasingly active authors."""
    return activity_sweep_ranked(cases, rank_all(cases, scorer), thresholds)


def activity_sweep_ranked(
    cases: Sequence[TestCase], ranked: Sequence[RankedCase], thresholds: Sequence[int]
) -> list[SweepPoint]:
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise EvaluationError("thresholds must be non-decreasing")
    percentiles = np.asarray([percentile_of_positive(r) for r in ranked])
    activity = np.asarray([case.author_train_count for case in cases])
    points = []
    for t in thresholds:
        surviving = percentiles[activity >= t]
        med = _lower_median(surviving.tolist()) if surviving.size else None
        points.append(SweepPoint(int(t), med, int(surviving.size)))
    return points


# ---------------------------------------------------------------------------
# Report serialization: a one-row TSV in the summary-table column order,
# plus an optional per-case dump for oracle audits.
# ---------------------------------------------------------------------------


def report_tsv(report: MetricReport, model_name: str) -> str:
    def fmt(value: float | None) -> str:
        return "" if value is None else f"{value:.6f}"

    header = f"model\tMRecall@{report.k}\tMNDCG@{report.k}\tMAUC\tMedPerc"
    row = "\t".join(
        [model_name, fmt(report.mrecall), fmt(report.mndcg), fmt(report.mauc), fmt(report.medperc)]
    )
    return header + "\n" + row + "\n"


def sweep_tsv(points: Sequence[SweepPoint]) -> str:
    lines = ["threshold\tmedperc\tn_cases"]
    for pt in points:
        med = "" if pt.medperc is None else f"{pt.medperc:.6f}"
        lines.append(f"{pt.threshold}\t{med}\t{pt.n_cases}")
    return "\n".join(lines) + "\n"


def write_case_dump(path, ranked: Sequence[RankedCase]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("case_id\tn_candidates\tpositive_rank\tauc\tpercentile\n")
        for case_id, r in enumerate(ranked):
            auc = f"{auc_single_positive(r):.6f}" if r.n_candidates >= 2 else ""
            fh.write(
                f"{case_id}\t{r.n_candidates}\t{r.positive_rank}\t{auc}\t"
                f"{percentile_of_positive(r):.6f}\n"
            )
