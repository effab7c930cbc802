"""
Weighted fusion of the numerical and textual expert results.
"""
from dataclasses import dataclass

from .exceptions import ConfigurationError
from .telemetry import ADResult, ExpertOutput, pad_ranking


@dataclass(frozen=True)
class FusionPolicy:
    textual_log_weight: float = 2.0
    textual_trace_weight: float = 1.0
    incident_numerical_weight: float = 2.0
    incident_textual_weight: float = 1.0

    def __post_init__(self):
        for name, value in self.to_record().items():
            if not value > 0:
                raise ConfigurationError(
                    "Fusion weight %(name)s must be positive (got %(value)s)",
                    params={'name': name, 'value': value},
                )

    def to_record(self):
        return {
            'textual_log_weight': self.textual_log_weight,
            'textual_trace_weight': self.textual_trace_weight,
            'incident_numerical_weight': self.incident_numerical_weight,
            'incident_textual_weight': self.incident_textual_weight,
        }


def borda(rankings):
    """Weighted Borda fusion of ``(ranking, weight)`` pairs.

    Each candidate scores ``weight * (len(ranking) - index)`` per list; ties
    keep the order of the first list, then the second.
    """
    scores = {}
    first_seen = {}
    for list_index, (ranking, weight) in enumerate(rankings):
        for index, candidate in enumerate(ranking):
            scores[candidate] = scores.get(candidate, 0.0) + weight * (len(ranking) - index)
            first_seen.setdefault(candidate, (list_index, index))
    return sorted(scores, key=lambda candidate: (-scores[candidate], first_seen[candidate])), scores


def weighted_vote(votes):
    """``votes`` holds ``(ADResult, weight)`` pairs; a tie is anomalous."""
    cast = [(result, weight) for result, weight in votes if result is not None]
    if not cast:
        return None
    for_anomaly = sum(weight for result, weight in cast if result.is_anomalous)
    against = sum(weight for result, weight in cast if not result.is_anomalous)
    if for_anomaly < against:
        return ADResult(False, ())
    stamps = sorted({stamp for result, _ in cast if result.is_anomalous for stamp in result.abnormal_timestamps})
    return ADResult(True, tuple(stamps))


def fallback_aggregate(numerical, textual, policy, catalog):
    """Deterministic reconciliation of the two expert outputs."""
    w_n = policy.incident_numerical_weight
    w_t = policy.incident_textual_weight

    ad = weighted_vote([(numerical.ad, w_n), (textual.ad, w_t)])

    ft = None
    if numerical.ft is not None or textual.ft is not None:
        ft, _ = borda([(numerical.ft or (), w_n), (textual.ft or (), w_t)])
        ft = tuple(ft)

    rcl = None
    if numerical.rcl is not None or textual.rcl is not None:
        fused, _ = borda([(numerical.rcl or (), w_n), (textual.rcl or (), w_t)])
        rcl = pad_ranking(fused, catalog.instances)

    evidence = (
        [f'numerical: {step}' for step in numerical.evidence]
        + [f'textual: {step}' for step in textual.evidence]
        + [f'fusion: weighted Borda ({w_n:g}, {w_t:g})']
    )
    return ExpertOutput(ad=ad, ft=ft, rcl=rcl, evidence=tuple(evidence), fallback=True)


def interleave(first, second):
    merged = []
    for index in range(max(len(first), len(second))):
        for ranking in (first, second):
            if index < len(ranking) and ranking[index] not in merged:
                merged.append(ranking[index])
    return tuple(merged)


def uncoordinated_merge(numerical, textual, catalog):
    """Combination without an incident expert or weights: AD is the logical
    OR, rankings alternate starting with the numerical one."""
    ad = None
    if numerical.ad is not None or textual.ad is not None:
        voters = [result for result in (numerical.ad, textual.ad) if result is not None]
        anomalous = any(result.is_anomalous for result in voters)
        stamps = sorted({stamp for result in voters if result.is_anomalous for stamp in result.abnormal_timestamps})
        ad = ADResult(anomalous, tuple(stamps) if anomalous else ())
    ft = None
    if numerical.ft is not None or textual.ft is not None:
        ft = interleave(numerical.ft or (), textual.ft or ())
    rcl = None
    if numerical.rcl is not None or textual.rcl is not None:
        rcl = pad_ranking(interleave(numerical.rcl or (), textual.rcl or ()), catalog.instances)
    evidence = (
        [f'numerical: {step}' for step in numerical.evidence]
        + [f'textual: {step}' for step in textual.evidence]
        + ['merge: OR vote, interleaved rankings']
    )
    return ExpertOutput(ad=ad, ft=ft, rcl=rcl, evidence=tuple(evidence))
