"""
Rule-based backend used offline and in tests. Replies are pure functions of
the role and the prompt's input block; no network activity.
"""
import json
import re
from collections import Counter

from .digest import (
    EMPTY_LOG_SUMMARY,
    EMPTY_TRACE_SUMMARY,
    SEED_KEYWORDS,
    count_mentions,
    log_digest,
    rank_instances_by_votes,
    rank_types,
    rank_types_from_channels,
    trace_digest,
    weighted_mentions,
    weighted_type_votes,
)
from .exceptions import BackendError
from .fusion import FusionPolicy, fallback_aggregate
from .gateway import format_reply, read_prompt
from .telemetry import ADResult, ExpertOutput, LogEntry, Severity, SpanChain, Task, TaskCatalog

ROLES = (
    'keyword extractor',
    'log selector',
    'log summarizer',
    'trace summarizer',
    'numerical expert',
    'textual expert',
    'incident expert',
)

_WORD = re.compile(r'[a-z]{3,}')
_STOPWORDS = frozenset({
    'the', 'and', 'for', 'with', 'from', 'after', 'into', 'was', 'are', 'has', 'have', 'not', 'this', 'that',
})
KEYWORD_LIMIT = 20


def respond(prompt):
    role, inputs, _ = read_prompt(prompt)
    return mock_respond(role, inputs)


def resolve_role(role):
    folded = role.casefold().replace('-', ' ').replace('_', ' ')
    for name in ROLES:
        if name in folded:
            return name
    raise BackendError("No mock rules for role '%(role)s'", code='unknown_role', params={'role': role[:60]})


def mock_respond(role, inputs):
    handler = _HANDLERS[resolve_role(role)]
    try:
        return handler(inputs)
    except (KeyError, TypeError, ValueError) as exc:
        raise BackendError("Mock backend cannot read its input: %(detail)s", params={'detail': str(exc)})


def _catalog(inputs):
    record = json.loads(inputs['catalog'])
    return TaskCatalog(record['failure_types'], record['instances'], record['tasks'])


def _tasks(inputs):
    return frozenset(Task(item.strip()) for item in inputs['tasks'].split(',') if item.strip())


def _fenced(answer):
    return '```json\n' + json.dumps(answer, sort_keys=True) + '\n```\n'


# ==================== PREPROCESSING ROLES ====================

def _keyword_extractor(inputs):
    sample = json.loads(inputs['log_sample'])
    incident, routine = Counter(), set()
    for record in sample:
        words = set(_WORD.findall(record['message'].casefold())) - _STOPWORDS
        if Severity(record['severity']).is_incident_level:
            incident.update(words)
        else:
            routine.update(words)
    seeds_seen = [seed for seed in SEED_KEYWORDS if seed in incident]
    learned = sorted((word for word in incident if word not in routine), key=lambda word: (-incident[word], word))
    keywords = list(dict.fromkeys(seeds_seen + learned))[:KEYWORD_LIMIT]
    return ', '.join(keywords)


def _log_selector(inputs):
    candidates = json.loads(inputs['candidates'])
    selected = []
    for record in candidates:
        message = record['message'].casefold()
        if Severity(record['severity']).is_incident_level or any(seed in message for seed in SEED_KEYWORDS):
            selected.append(record['index'])
    return _fenced({'selected': selected})


def _log_summarizer(inputs):
    entries = [LogEntry.from_record(record) for record in json.loads(inputs['logs'])]
    return log_digest(entries)


def _trace_summarizer(inputs):
    chains = [SpanChain.from_record(record) for record in json.loads(inputs['chains'])]
    return trace_digest(chains)


# ==================== EXPERT ROLES ====================

def _numerical_expert(inputs):
    feature = json.loads(inputs['feature'])
    catalog = _catalog(inputs)
    tasks = _tasks(inputs)
    preliminary = ExpertOutput.from_record(feature['preliminary'])
    ranking = feature['instance_ranking']
    top = ranking[0][0] if ranking else None
    ft = rank_types_from_channels(
        [tuple(cell) for cell in feature['top_channels']], top, catalog.failure_types, feature.get('channel_map')
    )
    evidence = list(preliminary.evidence)
    if Task.FT in tasks and ft:
        evidence.append(f'channel evidence of {top} points to {ft[0]}')
    output = ExpertOutput(ad=preliminary.ad, ft=ft, rcl=preliminary.rcl, evidence=tuple(evidence))
    return format_reply(output.restricted(tasks))


def _textual_expert(inputs):
    catalog = _catalog(inputs)
    tasks = _tasks(inputs)
    log_summary = inputs['log_summary']
    trace_summary = inputs['trace_summary']
    log_weight = float(inputs['log_weight'])
    trace_weight = float(inputs['trace_weight'])
    keyword_map = json.loads(inputs.get('keyword_map') or '{}') or None

    votes = weighted_mentions(
        [
            (count_mentions(log_summary, catalog.instances), log_weight),
            (count_mentions(trace_summary, catalog.instances), trace_weight),
        ],
        catalog.instances,
    )
    rcl = rank_instances_by_votes(votes, catalog.instances)

    type_scores = weighted_type_votes(
        [(log_summary, log_weight), (trace_summary, trace_weight)], catalog.failure_types, keyword_map
    )
    ft = rank_types(type_scores, catalog.failure_types)

    quiet = log_summary.strip() == EMPTY_LOG_SUMMARY and trace_summary.strip() == EMPTY_TRACE_SUMMARY
    evidence = [
        'logs and traces are quiet' if quiet else 'incident-relevant logs or slow chains present',
        'mention votes: ' + (', '.join(f'{name} {votes[name]:g}' for name in rcl if votes[name] > 0) or 'none'),
    ]
    if type_scores:
        evidence.append(f'message keywords point to {ft[0]}')
    output = ExpertOutput(ad=ADResult(not quiet, ()), ft=ft, rcl=rcl, evidence=tuple(evidence))
    return format_reply(output.restricted(tasks))


def _incident_expert(inputs):
    catalog = _catalog(inputs)
    tasks = _tasks(inputs)
    policy = FusionPolicy(
        incident_numerical_weight=float(inputs['numerical_weight']),
        incident_textual_weight=float(inputs['textual_weight']),
    )
    numerical = ExpertOutput.from_record(json.loads(inputs['numerical']))
    textual = ExpertOutput.from_record(json.loads(inputs['textual']))
    fused = fallback_aggregate(numerical, textual, policy, catalog)
    return format_reply(fused.restricted(tasks))


_HANDLERS = {
    'keyword extractor': _keyword_extractor,
    'log selector': _log_selector,
    'log summarizer': _log_summarizer,
    'trace summarizer': _trace_summarizer,
    'numerical expert': _numerical_expert,
    'textual expert': _textual_expert,
    'incident expert': _incident_expert,
}
