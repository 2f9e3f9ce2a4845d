"""Uncertainty scores, AUROC and the two detection harnesses.

Every score is oriented so that larger means more uncertain: Max.P enters
AUROC as ``1 - max_p``. Positives are misclassified inputs or OOD inputs.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ImageDataset
from .dirichlet import categorical_entropy, dirichlet_entropy, match_moments, postprocess_alpha
from .masks import Ensemble

METRICS = ("max_p", "ent", "d_ent")
# AUROC when one of the two classes is empty
UNDEFINED = math.nan


@dataclass(frozen=True)
class ScoringOptions:
    postprocess: bool = False
    denominator: str = "classes"
    # "mean": entropy of the averaged probabilities; "expected": average of per-sample entropies
    entropy: str = "mean"


@dataclass
class ScoredSample:
    id: int
    pred: int
    label: int | None
    max_p: float
    ent: float
    d_ent: float | None
    positive: bool = False

    def uncertainty(self, metric: str) -> float:
        if metric == "max_p":
            return 1.0 - self.max_p
        return getattr(self, metric)


def score_sample(outputs, options: ScoringOptions = ScoringOptions()) -> tuple[int, float, float, float | None]:
    """(pred, max_p, ent, d_ent) from the S x K probability samples of one input.

    With a single sample (baseline) there is nothing to fit and d_ent is None.
    """
    out = np.asarray(outputs, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"expected S x K samples, got shape {out.shape}")
    mean = out.mean(axis=0)
    pred = int(np.argmax(mean))
    max_p = float(mean[pred])
    if options.entropy == "mean":
        ent = categorical_entropy(mean)
    elif options.entropy == "expected":
        ent = float(np.mean([categorical_entropy(row) for row in out]))
    else:
        raise ValueError(f"unknown entropy option {options.entropy!r}")
    if out.shape[0] < 2:
        return pred, max_p, ent, None
    params = match_moments(out)
    if options.postprocess:
        params = postprocess_alpha(params, options.denominator)
    return pred, max_p, ent, dirichlet_entropy(params)


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # boundaries of runs of equal values in sorted order
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0  # mean of 1-based ranks start+1 .. end
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auroc(positive_scores, negative_scores) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the Mann-Whitney rank sum."""
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUROC needs at least one positive and one negative score")
    if np.isnan(pos).any() or np.isnan(neg).any():
        raise ValueError("scores contain NaN")
    ranks = _midranks(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class DetectionReport:
    task: str
    auroc: dict[str, float]
    n_positive: int
    n_negative: int
    seed: int = 0
    runs: int = 1
    std: dict[str, float] = field(default_factory=dict)
    accuracy: float | None = None

    def rows(self) -> list[list]:
        return [
            [self.task, m, self.auroc[m], self.std.get(m, 0.0), self.runs, self.seed]
            for m in METRICS
            if m in self.auroc
        ]


def _report(task: str, samples: Sequence[ScoredSample], seed: int) -> DetectionReport:
    pos = [s for s in samples if s.positive]
    neg = [s for s in samples if not s.positive]
    result = {}
    for m in METRICS:
        if any(getattr(s, m) is None for s in samples):
            continue
        if not pos or not neg:
            result[m] = UNDEFINED
        else:
            result[m] = auroc([s.uncertainty(m) for s in pos], [s.uncertainty(m) for s in neg])
    return DetectionReport(task, result, len(pos), len(neg), seed=seed)


def score_outputs(outputs: np.ndarray, options: ScoringOptions, labels=None, start_id: int = 0) -> list[ScoredSample]:
    samples = []
    for i, out in enumerate(outputs):
        pred, max_p, ent, d_ent = score_sample(out, options)
        label = None if labels is None else int(labels[i])
        samples.append(ScoredSample(start_id + i, pred, label, max_p, ent, d_ent))
    return samples


def misclassification_detection(
    ensemble: Ensemble, test_set: ImageDataset, options: ScoringOptions = ScoringOptions(), seed: int = 0
) -> tuple[DetectionReport, list[ScoredSample]]:
    if len(test_set) == 0:
        raise ValueError("empty test set")
    if test_set.labels is None:
        raise ValueError("misclassification detection needs labels")
    samples = score_outputs(ensemble.outputs(test_set.images), options, test_set.labels)
    for s in samples:
        s.positive = s.pred != s.label
    report = _report("misclassification", samples, seed)
    report.accuracy = 1.0 - report.n_positive / len(samples)
    return report, samples


def ood_detection(
    ensemble: Ensemble,
    in_dist: ImageDataset,
    ood: ImageDataset,
    options: ScoringOptions = ScoringOptions(),
    seed: int = 0,
) -> tuple[DetectionReport, list[ScoredSample]]:
    if len(in_dist) == 0 or len(ood) == 0:
        raise ValueError("OOD detection needs non-empty in-distribution and OOD sets")
    inside = score_outputs(ensemble.outputs(in_dist.images), options, in_dist.labels)
    outside = score_outputs(ensemble.outputs(ood.images), options, None, start_id=len(inside))
    for s in outside:
        s.positive = True
    return _report("ood", inside + outside, seed), inside + outside


def aggregate(reports: Sequence[DetectionReport]) -> DetectionReport:
    """Mean and sample standard deviation of AUROC over repeated runs (std 0 for one run)."""
    if not reports:
        raise ValueError("nothing to aggregate")
    tasks = {r.task for r in reports}
    if len(tasks) != 1:
        raise ValueError(f"cannot merge reports of different tasks {sorted(tasks)}")
    if len(reports) > 1 and any(r.runs != 1 for r in reports):
        raise ValueError("only single-run reports can be merged")
    mean, std = {}, {}
    for m in METRICS:
        vals = [r.auroc[m] for r in reports if m in r.auroc]
        if not vals:
            continue
        # an undefined run makes the aggregate undefined
        mean[m] = float(np.mean(vals))
        std[m] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    first = reports[0]
    accs = [r.accuracy for r in reports if r.accuracy is not None]
    return DetectionReport(
        first.task,
        mean,
        sum(r.n_positive for r in reports),
        sum(r.n_negative for r in reports),
        seed=min(r.seed for r in reports),
        runs=sum(r.runs for r in reports),
        std=std,
        accuracy=statistics.fmean(accs) if accs else None,
    )
