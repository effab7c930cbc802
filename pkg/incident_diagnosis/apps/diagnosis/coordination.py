"""
Dispatch of one case to the numerical and textual experts and
reconciliation of their results by the incident expert.

Expert failures never surface: every stage degrades to a deterministic
fallback and records a flag on the Diagnosis.
"""
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Optional

from .digest import (
    DEFAULT_CHANNEL_MAP,
    DEFAULT_KEYWORD_MAP,
    rank_instances_by_votes,
    rank_types,
    weighted_mentions,
    weighted_type_votes,
)
from .exceptions import ConfigurationError
from .fusion import FusionPolicy, fallback_aggregate, uncoordinated_merge
from .gateway import Answer
from .numerical import DEFAULT_MIN_ABNORMAL, TOP_CHANNEL_CAP, build_numerical_feature, triage_channels
from .telemetry import ALL_TASKS, ADResult, Diagnosis, ExpertOutput, Task, pad_ranking
from .textual import (
    DEFAULT_CONTEXT_BUDGET,
    DEFAULT_LOG_CAP,
    DEFAULT_SUMMARY_BUDGET,
    extract_topology,
    run_textual_pipeline,
)

logger = logging.getLogger(__name__)

MODE_FULL = 'full'
MODE_NUMERICAL_ONLY = 'numerical-only'
MODE_TEXTUAL_ONLY = 'textual-only'
MODE_UNCOORDINATED = 'uncoordinated'
MODES = (MODE_FULL, MODE_NUMERICAL_ONLY, MODE_TEXTUAL_ONLY, MODE_UNCOORDINATED)


@dataclass(frozen=True)
class CaseSettings:
    """Per-case tunables shared by every case of a run."""

    policy: FusionPolicy = field(default_factory=FusionPolicy)
    k: int = DEFAULT_MIN_ABNORMAL
    scale_factor: float = 1.0
    top_channels: int = TOP_CHANNEL_CAP
    topology_edge_cap: int = 30
    log_cap: int = DEFAULT_LOG_CAP
    summary_budget: int = DEFAULT_SUMMARY_BUDGET
    context_budget: int = DEFAULT_CONTEXT_BUDGET
    channel_map: Mapping = field(default_factory=lambda: dict(DEFAULT_CHANNEL_MAP))
    keyword_map: Mapping = field(default_factory=lambda: dict(DEFAULT_KEYWORD_MAP))


def _task_list(tasks):
    return ','.join(sorted(Task(task).value for task in tasks))


def _catalog_json(catalog, tasks):
    return json.dumps(catalog.with_tasks(tasks).to_record(), sort_keys=True)


# ==================== EXPERTS ====================

def numerical_expert(gateway, feature, catalog, tasks=ALL_TASKS, channel_map=None):
    answer = gateway.ask(
        'numerical-expert',
        {
            'feature': json.dumps(feature.to_payload(), sort_keys=True),
            'tasks': _task_list(tasks),
            'catalog': _catalog_json(catalog, tasks),
        },
        tasks,
        catalog,
    )
    if answer.output is not None:
        return answer

    preliminary = feature.preliminary
    cells = ', '.join(f'{name}/{channel}' for name, channel, _ in feature.top_channels[:5]) or 'none'
    logger.warning("Numerical expert fell back to the preliminary draft")
    output = ExpertOutput(
        ad=preliminary.ad,
        ft=triage_channels(feature, catalog, channel_map) if Task.FT in tasks else None,
        rcl=preliminary.rcl,
        evidence=preliminary.evidence + (f'numerical fallback: {cells}',),
        fallback=True,
    ).restricted(tasks)
    return Answer(output, answer.flags + ['numerical-expert:fallback'])


def textual_fallback(feature, catalog, tasks, policy, keyword_map=None):
    """Weighted log/trace votes, keyword triage and a non-empty-artifact
    anomaly rule."""
    votes = weighted_mentions(
        [
            (feature.log_instance_counts, policy.textual_log_weight),
            (feature.trace_terminal_counts, policy.textual_trace_weight),
        ],
        catalog.instances,
    )
    type_scores = weighted_type_votes(
        [(feature.log_summary, policy.textual_log_weight), (feature.trace_summary, policy.textual_trace_weight)],
        catalog.failure_types,
        keyword_map,
    )
    anomalous = feature.filtered_log_count > 0 or feature.filtered_chain_count > 0
    rcl = rank_instances_by_votes(votes, catalog.instances)
    evidence = (
        f'textual fallback: {feature.filtered_log_count} filtered logs, '
        f'{feature.filtered_chain_count} slow chains',
        'weighted votes: ' + (', '.join(f'{name} {votes[name]:g}' for name in rcl if votes[name] > 0) or 'none'),
    )
    return ExpertOutput(
        ad=ADResult(anomalous, ()),
        ft=rank_types(type_scores, catalog.failure_types),
        rcl=rcl,
        evidence=evidence,
        fallback=True,
    ).restricted(tasks)


def textual_expert(gateway, feature, catalog, tasks=ALL_TASKS, policy=None, keyword_map=None):
    policy = policy or FusionPolicy()
    answer = gateway.ask(
        'textual-expert',
        {
            'log_summary': feature.log_summary,
            'trace_summary': feature.trace_summary,
            'topology': feature.topology_digest or 'no topology edges observed',
            'log_weight': f'{policy.textual_log_weight:g}',
            'trace_weight': f'{policy.textual_trace_weight:g}',
            'keyword_map': json.dumps(dict(keyword_map or DEFAULT_KEYWORD_MAP)),
            'tasks': _task_list(tasks),
            'catalog': _catalog_json(catalog, tasks),
        },
        tasks,
        catalog,
    )
    if answer.output is not None:
        return answer
    logger.warning("Textual expert fell back to weighted votes")
    output = textual_fallback(feature, catalog, tasks, policy, keyword_map)
    return Answer(output, answer.flags + ['textual-expert:fallback'])


def incident_expert(gateway, numerical, textual, policy, catalog, tasks=ALL_TASKS):
    answer = gateway.ask(
        'incident-expert',
        {
            'numerical': json.dumps(numerical.to_record(), sort_keys=True),
            'textual': json.dumps(textual.to_record(), sort_keys=True),
            'numerical_weight': f'{policy.incident_numerical_weight:g}',
            'textual_weight': f'{policy.incident_textual_weight:g}',
            'tasks': _task_list(tasks),
            'catalog': _catalog_json(catalog, tasks),
        },
        tasks,
        catalog,
    )
    if answer.output is not None:
        return answer
    logger.warning("Incident expert fell back to weighted Borda fusion")
    output = fallback_aggregate(numerical, textual, policy, catalog).restricted(tasks)
    return Answer(output, answer.flags + ['incident-expert:fallback'])


# ==================== COORDINATION ====================

def _finalize(output, catalog, tasks):
    """Restrict to the requested tasks and complete the RCL ranking."""
    output = output.restricted(tasks)
    if output.rcl is None:
        return output
    return ExpertOutput(
        ad=output.ad,
        ft=output.ft,
        rcl=pad_ranking(output.rcl, catalog.instances),
        evidence=output.evidence,
        fallback=output.fallback,
        violations=output.violations,
    )


@dataclass(frozen=True)
class CaseOutcome:
    diagnosis: Diagnosis
    textual: Optional[object] = None


def run_case(gateway, bundle, model, keywords, tasks=ALL_TASKS, settings=None, mode=MODE_FULL, case_id=''):
    """Numerical and textual branches run concurrently; the incident
    expert awaits both."""
    if mode not in MODES:
        raise ConfigurationError("Unknown coordination mode %(mode)s", params={'mode': mode})
    settings = settings or CaseSettings()
    tasks = frozenset(Task(task) for task in tasks)
    catalog = bundle.catalog
    started = time.perf_counter()
    topology = extract_topology(bundle.spans, bundle.matrix.sampling_interval)

    def numerical_branch():
        feature = build_numerical_feature(
            model, bundle, k=settings.k, scale_factor=settings.scale_factor,
            top_cap=settings.top_channels, topology=topology, edge_cap=settings.topology_edge_cap,
            tasks=tasks, channel_map=settings.channel_map,
        )
        return numerical_expert(gateway, feature, catalog, tasks, settings.channel_map)

    def textual_branch():
        result = run_textual_pipeline(
            gateway, bundle, keywords, log_cap=settings.log_cap, summary_budget=settings.summary_budget,
            context_budget=settings.context_budget, edge_cap=settings.topology_edge_cap, topology=topology,
        )
        answer = textual_expert(gateway, result.feature, catalog, tasks, settings.policy, settings.keyword_map)
        return result, Answer(answer.output, list(result.flags) + answer.flags)

    with ThreadPoolExecutor(max_workers=2, thread_name_prefix='expert') as pool:
        numerical_future = pool.submit(numerical_branch) if mode != MODE_TEXTUAL_ONLY else None
        textual_future = pool.submit(textual_branch) if mode != MODE_NUMERICAL_ONLY else None
        numerical = numerical_future.result() if numerical_future else None
        textual_result, textual = textual_future.result() if textual_future else (None, None)

    per_expert, flags = {}, []
    if numerical is not None:
        per_expert['numerical'] = numerical.output
        flags.extend(numerical.flags)
    if textual is not None:
        per_expert['textual'] = textual.output
        flags.extend(textual.flags)

    if mode == MODE_NUMERICAL_ONLY:
        final = numerical.output
    elif mode == MODE_TEXTUAL_ONLY:
        final = textual.output
    elif mode == MODE_UNCOORDINATED:
        final = uncoordinated_merge(numerical.output, textual.output, catalog)
    else:
        incident = incident_expert(gateway, numerical.output, textual.output, settings.policy, catalog, tasks)
        per_expert['incident'] = incident.output
        flags.extend(incident.flags)
        final = incident.output

    wall_time = time.perf_counter() - started
    diagnosis = Diagnosis(
        case_id=case_id,
        window=bundle.window,
        final=_finalize(final, catalog, tasks),
        per_expert=per_expert,
        wall_time=wall_time,
        backend=gateway.config.identifier,
        model=gateway.config.model,
        tasks=tasks,
        mode=mode,
        flags=tuple(flags),
    ).check(catalog)
    logger.info("Diagnosed case %s in %.3f s (%s, %d flags)", case_id or '-', wall_time, mode, len(flags))
    return CaseOutcome(diagnosis, textual_result)


def coordinate(gateway, bundle, model, keywords, tasks=ALL_TASKS, settings=None, mode=MODE_FULL, case_id=''):
    return run_case(gateway, bundle, model, keywords, tasks, settings, mode, case_id).diagnosis
