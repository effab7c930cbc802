"""
Scoring of a run of diagnoses against incident labels.
"""
import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import pandas as pd

from .exceptions import EvaluationError

logger = logging.getLogger(__name__)

TOP_KS = (1, 2, 3, 4, 5)
TABLE_COLUMNS = (
    ('AD', 'P'), ('AD', 'R'), ('AD', 'F1'),
    ('FT', 'P'), ('FT', 'R'), ('FT', 'F1'),
    ('RCL', 'Top@1'), ('RCL', 'Top@3'), ('RCL', 'Avg@5'),
    ('', 'Time (s)'),
)


class PRF1(NamedTuple):
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    def to_record(self):
        return {'precision': self.precision, 'recall': self.recall, 'f1': self.f1, 'degenerate': self.degenerate}


def f1_from(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def prf1(tp, fp, fn):
    """Precision, recall and F1 of confusion counts; a zero denominator
    yields 0 and sets ``degenerate``."""
    if min(tp, fp, fn) < 0:
        raise EvaluationError("Confusion counts must be non-negative", code='empty_input')
    degenerate = False
    if tp + fp:
        precision = tp / (tp + fp)
    else:
        precision, degenerate = 0.0, True
    if tp + fn:
        recall = tp / (tp + fn)
    else:
        recall, degenerate = 0.0, True
    if precision + recall == 0:
        degenerate = True
    return PRF1(precision, recall, f1_from(precision, recall), degenerate)


def macro_prf1(pairs, classes=None):
    """Macro P/R/F1 over ``(truth, prediction)`` pairs. Classes default to
    every label seen on either side."""
    if classes is None:
        classes = sorted({label for pair in pairs for label in pair if label is not None})
    if not classes:
        return PRF1(0.0, 0.0, 0.0, True)
    per_class = []
    for label in classes:
        tp = sum(1 for truth, predicted in pairs if truth == label and predicted == label)
        fp = sum(1 for truth, predicted in pairs if truth != label and predicted == label)
        fn = sum(1 for truth, predicted in pairs if truth == label and predicted != label)
        per_class.append(prf1(tp, fp, fn))
    return PRF1(
        float(np.mean([scores.precision for scores in per_class])),
        float(np.mean([scores.recall for scores in per_class])),
        float(np.mean([scores.f1 for scores in per_class])),
        all(scores.degenerate for scores in per_class),
    )


def top_at_k(ranked_lists, gts, k):
    """Share of cases whose ground truth is within the first ``k`` ranks."""
    ranked_lists, gts = list(ranked_lists), list(gts)
    if not ranked_lists:
        raise EvaluationError("Top@K needs at least one case", code='empty_input')
    if len(ranked_lists) != len(gts):
        raise EvaluationError("One ground truth per ranking is required", code='case_id_mismatch')
    if k < 1:
        raise EvaluationError("k must be at least 1 (got %(k)s)", code='empty_input', params={'k': k})
    hits = sum(1 for ranking, gt in zip(ranked_lists, gts) if gt in list(ranking)[:k])
    return hits / len(ranked_lists)


def avg_at_5(ranked_lists, gts):
    ranked_lists, gts = list(ranked_lists), list(gts)
    return sum(top_at_k(ranked_lists, gts, k) for k in TOP_KS) / len(TOP_KS)


def rank_of(ranking, gt):
    """1-based position of ``gt`` in ``ranking`` or None."""
    ranking = list(ranking or ())
    return ranking.index(gt) + 1 if gt in ranking else None


# ==================== RUN REPORT ====================

@dataclass(frozen=True)
class CaseScore:
    case_id: str
    anomalous: bool
    ad_correct: bool = None
    ft_correct: bool = None
    rcl_rank: int = None
    wall_time: float = 0.0
    flags: tuple = ()

    def to_record(self):
        return {
            'case_id': self.case_id,
            'anomalous': self.anomalous,
            'ad_correct': self.ad_correct,
            'ft_correct': self.ft_correct,
            'rcl_rank': self.rcl_rank,
            'wall_time': self.wall_time,
            'flags': list(self.flags),
        }


@dataclass(frozen=True)
class RunReport:
    ad: PRF1
    ft: PRF1
    rcl: dict
    mean_time: float
    per_case: tuple = ()
    counts: dict = field(default_factory=dict)
    label: str = 'run'

    def metrics(self):
        """Metric sections only; stable across reruns."""
        return {
            'ad': self.ad.to_record(),
            'ft': self.ft.to_record(),
            'rcl': dict(self.rcl),
            'counts': dict(self.counts),
        }

    def to_document(self):
        document = self.metrics()
        document['label'] = self.label
        document['mean_time'] = self.mean_time
        document['per_case'] = [case.to_record() for case in self.per_case]
        return document

    def to_frame(self):
        row = [
            self.ad.precision, self.ad.recall, self.ad.f1,
            self.ft.precision, self.ft.recall, self.ft.f1,
            self.rcl.get('top@1', 0.0), self.rcl.get('top@3', 0.0), self.rcl.get('avg@5', 0.0),
            self.mean_time,
        ]
        return pd.DataFrame([row], index=[self.label], columns=pd.MultiIndex.from_tuples(TABLE_COLUMNS))

    def format_table(self):
        return self.to_frame().to_string(float_format=lambda value: f'{value:.3f}')


def _pair_up(diagnoses, labels):
    by_label = {}
    for label in labels:
        if label.case_id in by_label:
            raise EvaluationError("Duplicate label for case %(case)s", code='case_id_mismatch',
                                  params={'case': label.case_id})
        by_label[label.case_id] = label
    pairs, seen = [], set()
    for diagnosis in diagnoses:
        if diagnosis.case_id in seen:
            raise EvaluationError("Duplicate diagnosis for case %(case)s", code='case_id_mismatch',
                                  params={'case': diagnosis.case_id})
        seen.add(diagnosis.case_id)
        label = by_label.get(diagnosis.case_id)
        if label is None:
            raise EvaluationError("No label for case %(case)s", code='missing_label',
                                  params={'case': diagnosis.case_id})
        pairs.append((diagnosis, label))
    unmatched = sorted(set(by_label) - seen)
    if unmatched:
        raise EvaluationError("Labels without a diagnosis: %(cases)s", code='case_id_mismatch',
                              params={'cases': ', '.join(unmatched)})
    return pairs


def evaluate_run(diagnoses, labels, catalog, label='run'):
    labels = list(labels)
    if not labels:
        raise EvaluationError("No labeled cases to evaluate", code='empty_input')
    pairs = _pair_up(list(diagnoses), labels)

    tp = fp = fn = 0
    ft_pairs, rankings, truths, scores = [], [], [], []
    for diagnosis, truth in pairs:
        final = diagnosis.final
        ad_correct = ft_correct = rank = None
        if final.ad is not None:
            predicted = final.ad.is_anomalous
            tp += truth.is_anomalous and predicted
            fp += (not truth.is_anomalous) and predicted
            fn += truth.is_anomalous and not predicted
            ad_correct = predicted == truth.is_anomalous
        if truth.is_anomalous and final.ft is not None:
            top = final.ft[0] if final.ft else None
            ft_pairs.append((truth.failure_type, top))
            ft_correct = top == truth.failure_type
        if truth.is_anomalous and truth.root_cause is not None and final.rcl is not None:
            rankings.append(final.rcl)
            truths.append(truth.root_cause)
            rank = rank_of(final.rcl, truth.root_cause)
        scores.append(CaseScore(
            case_id=diagnosis.case_id,
            anomalous=truth.is_anomalous,
            ad_correct=ad_correct,
            ft_correct=ft_correct,
            rcl_rank=rank,
            wall_time=diagnosis.wall_time,
            flags=diagnosis.flags,
        ))

    ft_classes = [name for name in catalog.failure_types if any(name in pair for pair in ft_pairs)]
    rcl = {f'top@{k}': 0.0 for k in TOP_KS}
    rcl['avg@5'] = 0.0
    if rankings:
        rcl = {f'top@{k}': top_at_k(rankings, truths, k) for k in TOP_KS}
        rcl['avg@5'] = avg_at_5(rankings, truths)

    report = RunReport(
        ad=prf1(tp, fp, fn),
        ft=macro_prf1(ft_pairs, ft_classes or None),
        rcl=rcl,
        mean_time=float(np.mean([diagnosis.wall_time for diagnosis, _ in pairs])),
        per_case=tuple(scores),
        counts={
            'cases': len(pairs),
            'anomalous': sum(1 for _, truth in pairs if truth.is_anomalous),
            'normal': sum(1 for _, truth in pairs if not truth.is_anomalous),
            'ad_tp': int(tp), 'ad_fp': int(fp), 'ad_fn': int(fn),
        },
        label=label,
    )
    logger.info(
        "Evaluated %d cases: AD F1 %.3f, FT F1 %.3f, Avg@5 %.3f",
        len(pairs), report.ad.f1, report.ft.f1, report.rcl['avg@5'],
    )
    return report
