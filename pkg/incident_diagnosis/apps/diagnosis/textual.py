"""
Textual perspective: keyword extraction, two-stage log filtering, P95 trace
filtering with root-chain backtrace, topology extraction and the log/trace
summarizers.
"""
import json
import logging
import math
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from django.utils import timezone

from .digest import (
    CHARS_PER_TOKEN,
    EMPTY_LOG_SUMMARY,
    EMPTY_TRACE_SUMMARY,
    SEED_KEYWORDS,
    log_digest,
    missing_mentions,
    required_mentions,
    topology_digest,
    trace_digest,
    truncate_to_budget,
)
from .exceptions import BackendError, StructuredReplyError, TelemetryError
from .gateway import extract_object
from .ingestion import atomic_write_text
from .telemetry import (
    FilteredLogs,
    FilteredTraces,
    LogStage,
    ServiceTopologyGraph,
    SpanChain,
    TopologyEdge,
)

logger = logging.getLogger(__name__)

SAMPLE_LIMIT = 500
DEFAULT_LOG_CAP = 50
DEFAULT_SUMMARY_BUDGET = 512
DEFAULT_CONTEXT_BUDGET = 4096
MENTION_SHARE = 0.2
MIN_LOCAL_SAMPLES = 20
PERCENTILE = 95
MIN_KEYWORD_LENGTH = 3

KEYWORD_HEADER = '# keywords'
_KEYWORD_TOKEN = re.compile(r'[^\s,;"\'`\[\]]+(?: [^\s,;"\'`\[\]]+)*')


# ==================== KEYWORDS ====================

@dataclass(frozen=True)
class KeywordSet:
    keywords: tuple
    source: str = ''
    created_at: str = ''
    fallback: bool = False

    def __post_init__(self):
        keywords = tuple(sorted({keyword.casefold().strip() for keyword in self.keywords}))
        if not keywords:
            raise TelemetryError("A keyword set cannot be empty")
        short = [keyword for keyword in keywords if len(keyword) < MIN_KEYWORD_LENGTH]
        if short:
            raise TelemetryError("Keywords shorter than 3 characters: %(words)s", params={'words': short})
        object.__setattr__(self, 'keywords', keywords)

    def __contains__(self, keyword):
        return keyword.casefold() in self.keywords

    def matches(self, message):
        folded = message.casefold()
        return any(keyword in folded for keyword in self.keywords)

    def dumps(self):
        meta = {'source': self.source, 'created_at': self.created_at, 'fallback': self.fallback}
        header = f'{KEYWORD_HEADER} {json.dumps(meta, sort_keys=True)}'
        return '\n'.join([header, *self.keywords]) + '\n'

    def save(self, path):
        return atomic_write_text(path, self.dumps())

    @classmethod
    def loads(cls, text):
        lines = text.splitlines()
        if not lines or not lines[0].startswith(KEYWORD_HEADER):
            raise TelemetryError("Keyword file lacks its provenance header")
        try:
            meta = json.loads(lines[0][len(KEYWORD_HEADER):].strip() or '{}')
        except json.JSONDecodeError:
            raise TelemetryError("Keyword file has an unreadable provenance header")
        return cls(
            keywords=tuple(line.strip() for line in lines[1:] if line.strip()),
            source=meta.get('source', ''),
            created_at=meta.get('created_at', ''),
            fallback=bool(meta.get('fallback')),
        )

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text(encoding='utf-8'))


def seed_keywords(source='', fallback=False):
    return KeywordSet(SEED_KEYWORDS, source=source, created_at=timezone.now().isoformat(), fallback=fallback)


def stratified_sample(logs, limit=SAMPLE_LIMIT):
    """Round-robin across severities (most severe first), each severity in
    time order."""
    buckets = {}
    for entry in logs:
        buckets.setdefault(entry.severity, []).append(entry)
    order = sorted(buckets, key=lambda severity: -severity.rank)
    sample, position = [], 0
    while len(sample) < limit and any(position < len(buckets[severity]) for severity in order):
        for severity in order:
            if position < len(buckets[severity]) and len(sample) < limit:
                sample.append(buckets[severity][position])
        position += 1
    return sorted(sample, key=lambda entry: entry.timestamp)


def parse_keyword_reply(raw):
    keywords = []
    for line in raw.replace(',', '\n').replace(';', '\n').splitlines():
        line = line.strip().lstrip('-*0123456789.) ').strip().strip('"\'`').casefold()
        match = _KEYWORD_TOKEN.search(line)
        if match and len(match.group(0)) >= MIN_KEYWORD_LENGTH:
            keywords.append(match.group(0))
    return keywords


def extract_keywords(gateway, log_sample, source=''):
    """Keywords suggested by the backend for ``log_sample`` unioned with the
    seed set; the seed set alone (flagged) when the backend fails."""
    payload = json.dumps(
        [{'severity': entry.severity.value, 'message': entry.message} for entry in log_sample[:SAMPLE_LIMIT]]
    )
    try:
        raw = gateway.call('keyword-extractor', {'log_sample': payload})
    except BackendError as exc:
        logger.warning("Keyword extraction failed (%s); using the seed set", exc.code)
        return seed_keywords(source=source, fallback=True)
    learned = parse_keyword_reply(raw)
    logger.info("Backend proposed %d keywords", len(learned))
    return KeywordSet(
        tuple(learned) + SEED_KEYWORDS, source=source, created_at=timezone.now().isoformat()
    )


# ==================== LOG FILTERING ====================

def keyword_filter(logs, keywords):
    """Entries whose message contains a keyword or whose severity is warn or
    above."""
    return [entry for entry in logs if entry.severity.is_incident_level or keywords.matches(entry.message)]


def _batches(candidates, context_budget):
    limit = context_budget * CHARS_PER_TOKEN
    batch, size = [], 0
    for index, entry in enumerate(candidates):
        record = {'index': index, 'instance': entry.instance, 'severity': entry.severity.value, 'message': entry.message}
        length = len(json.dumps(record)) + 2
        if batch and size + length > limit:
            yield batch
            batch, size = [], 0
        batch.append(record)
        size += length
    if batch:
        yield batch


def _selected_indices(raw, batch):
    try:
        answer = extract_object(raw)
    except StructuredReplyError:
        match = re.search(r'\[[^\]]*\]', raw)
        if not match:
            raise
        answer = {'selected': json.loads(match.group(0))}
    valid = {record['index'] for record in batch}
    selected = []
    for value in answer.get('selected') or []:
        if isinstance(value, int) and not isinstance(value, bool) and value in valid:
            selected.append(value)
        else:
            logger.debug("Ignoring out-of-range selection %r", value)
    return selected


def severity_truncate(candidates, cap):
    """Deterministic fallback: fatal > error > warn > keyword-matched info,
    earliest first within a level; result in time order."""
    ranked = sorted(
        enumerate(candidates), key=lambda item: (-item[1].severity.rank, item[1].timestamp, item[0])
    )[:cap]
    kept = sorted(ranked, key=lambda item: (item[1].timestamp, item[0]))
    entries = tuple(entry for _, entry in kept)
    return FilteredLogs(entries, (LogStage.KEYWORD,) * len(entries), fallback=True)


def semantic_select(gateway, candidates, cap=DEFAULT_LOG_CAP, context_budget=DEFAULT_CONTEXT_BUDGET):
    """Ask the backend which candidates indicate abnormal operation; the
    union of selections, first ``cap`` by timestamp."""
    if not candidates:
        return FilteredLogs()
    chosen = set()
    try:
        for batch in _batches(candidates, context_budget):
            raw = gateway.call('log-selector', {'candidates': json.dumps(batch)})
            chosen.update(_selected_indices(raw, batch))
    except (BackendError, StructuredReplyError, ValueError) as exc:
        logger.warning("Semantic log selection failed (%s); truncating by severity", exc)
        return severity_truncate(candidates, cap)
    kept = sorted(chosen, key=lambda index: (candidates[index].timestamp, index))[:cap]
    entries = tuple(candidates[index] for index in kept)
    return FilteredLogs(entries, (LogStage.SEMANTIC,) * len(entries))


# ==================== TRACE FILTERING ====================

def nearest_rank(values, percentile=PERCENTILE):
    ordered = sorted(values)
    index = -(-percentile * len(ordered) // 100)
    return ordered[max(index, 1) - 1]


def p95_thresholds(spans, min_samples=MIN_LOCAL_SAMPLES):
    """Nearest-rank P95 duration per call type; call types with fewer than
    ``min_samples`` spans use the P95 of all spans."""
    if not spans:
        return {}
    by_type = {}
    for span in spans:
        by_type.setdefault(span.call_type, []).append(span.duration)
    overall = nearest_rank([span.duration for span in spans])
    return {
        call_type: nearest_rank(durations) if len(durations) >= min_samples else overall
        for call_type, durations in sorted(by_type.items())
    }


def filter_traces(spans, thresholds):
    """Root-to-offender chains of every span strictly slower than its
    call type's threshold."""
    index = {span.key: span for span in spans}
    overall = max(thresholds.values()) if thresholds else math.inf
    chains, seen = [], set()
    orphans = cycles = 0
    for span in sorted(spans, key=lambda item: (item.trace_id, item.start, item.span_id)):
        if not span.duration > thresholds.get(span.call_type, overall):
            continue
        chain, visited, orphan = [span], {span.span_id}, False
        current = span
        while current.parent_span_id is not None:
            parent = index.get((current.trace_id, current.parent_span_id))
            if parent is None:
                orphan = True
                break
            if parent.span_id in visited:
                cycles += 1
                logger.warning("Cycle in trace %s at span %s", span.trace_id, parent.span_id)
                break
            visited.add(parent.span_id)
            chain.append(parent)
            current = parent
        chain.reverse()
        key = tuple(item.key for item in chain)
        if key in seen:
            continue
        seen.add(key)
        orphans += orphan
        chains.append(SpanChain(tuple(chain), orphan_root=orphan))
    return FilteredTraces(tuple(chains), orphan_roots=orphans, cycles_aborted=cycles)


def extract_topology(spans, sampling_interval):
    """Caller -> callee call counts per metric-interval bucket."""
    index = {span.key: span for span in spans}
    buckets = {}
    for span in spans:
        if span.parent_span_id is None:
            continue
        parent = index.get((span.trace_id, span.parent_span_id))
        if parent is None:
            continue
        bucket = math.floor(span.start_seconds / sampling_interval) * sampling_interval
        counts = buckets.setdefault(bucket, Counter())
        counts[(parent.instance, span.instance)] += 1
    return ServiceTopologyGraph(
        buckets={
            bucket: tuple(TopologyEdge(caller, callee, count) for (caller, callee), count in sorted(counts.items()))
            for bucket, counts in sorted(buckets.items())
        },
        sampling_interval=sampling_interval,
    )


# ==================== SUMMARIZERS ====================

@dataclass(frozen=True)
class SummaryResult:
    text: str
    fallback: bool = False
    violation: bool = False


def _summarize(gateway, template, variables, required, budget, fallback_text):
    reminder = None
    for attempt in range(2):
        try:
            text = gateway.call(template, variables, reminder=reminder).strip()
        except BackendError as exc:
            logger.warning("%s failed (%s); using the digest", template, exc.code)
            return SummaryResult(truncate_to_budget(fallback_text, budget), fallback=True)
        text = truncate_to_budget(text, budget)
        missing = missing_mentions(text, required)
        if not missing:
            return SummaryResult(text)
        logger.warning("%s omitted %s on attempt %d", template, ', '.join(missing), attempt + 1)
        reminder = 'The summary must mention these instances: ' + ', '.join(missing)
    return SummaryResult(text, violation=True)


def summarize_logs(gateway, filtered, budget=DEFAULT_SUMMARY_BUDGET):
    if not filtered.entries:
        return SummaryResult(EMPTY_LOG_SUMMARY)
    records = json.dumps([entry.to_record() for entry in filtered.entries])
    required = required_mentions(filtered.instance_counts(), MENTION_SHARE)
    return _summarize(
        gateway, 'log-summarizer', {'logs': records, 'budget': str(budget)},
        required, budget, log_digest(filtered.entries),
    )


def summarize_traces(gateway, filtered, budget=DEFAULT_SUMMARY_BUDGET):
    if not filtered.chains:
        return SummaryResult(EMPTY_TRACE_SUMMARY)
    records = json.dumps([chain.to_record() for chain in filtered.chains])
    required = required_mentions(filtered.terminal_counts(), MENTION_SHARE)
    return _summarize(
        gateway, 'trace-summarizer', {'chains': records, 'budget': str(budget)},
        required, budget, trace_digest(filtered.chains),
    )


# ==================== TEXTUAL FEATURE ====================

@dataclass(frozen=True)
class TextualFeature:
    log_summary: str
    trace_summary: str
    filtered_log_count: int = 0
    filtered_chain_count: int = 0
    topology_digest: str = ''
    log_instance_counts: Mapping = field(default_factory=dict)
    trace_terminal_counts: Mapping = field(default_factory=dict)
    budget: int = DEFAULT_SUMMARY_BUDGET

    def __post_init__(self):
        limit = self.budget * CHARS_PER_TOKEN
        if len(self.log_summary) > limit or len(self.trace_summary) > limit:
            raise TelemetryError("Summaries must fit the token budget")
        if sum(self.log_instance_counts.values()) != self.filtered_log_count:
            raise TelemetryError("Log instance counts disagree with the filtered log count")
        if sum(self.trace_terminal_counts.values()) != self.filtered_chain_count:
            raise TelemetryError("Terminal counts disagree with the chain count")


def implicated_instances(filtered_logs, filtered_traces, limit=5):
    votes = Counter(filtered_logs.instance_counts())
    votes.update(filtered_traces.terminal_counts())
    return [name for name, _ in sorted(votes.items(), key=lambda item: (-item[1], item[0]))[:limit]]


def build_textual_feature(log_summary, trace_summary, topology, implicated, filtered_logs=None,
                          filtered_traces=None, edge_cap=30, budget=DEFAULT_SUMMARY_BUDGET):
    filtered_logs = filtered_logs or FilteredLogs()
    filtered_traces = filtered_traces or FilteredTraces()
    return TextualFeature(
        log_summary=log_summary,
        trace_summary=trace_summary,
        filtered_log_count=len(filtered_logs),
        filtered_chain_count=len(filtered_traces),
        topology_digest=topology_digest(topology, implicated, edge_cap),
        log_instance_counts=filtered_logs.instance_counts(),
        trace_terminal_counts=filtered_traces.terminal_counts(),
        budget=budget,
    )


@dataclass(frozen=True)
class TextualResult:
    feature: TextualFeature
    filtered_logs: FilteredLogs
    filtered_traces: FilteredTraces
    flags: tuple = ()


def run_textual_pipeline(gateway, bundle, keywords, log_cap=DEFAULT_LOG_CAP, summary_budget=DEFAULT_SUMMARY_BUDGET,
                         context_budget=DEFAULT_CONTEXT_BUDGET, edge_cap=30, topology=None):
    """Log and trace branches run concurrently; stages within a branch run
    in order."""

    def log_branch():
        candidates = keyword_filter(bundle.logs, keywords)
        filtered = semantic_select(gateway, candidates, cap=log_cap, context_budget=context_budget)
        return filtered, summarize_logs(gateway, filtered, budget=summary_budget)

    def trace_branch():
        filtered = filter_traces(bundle.spans, p95_thresholds(bundle.spans))
        return filtered, summarize_traces(gateway, filtered, budget=summary_budget)

    with ThreadPoolExecutor(max_workers=2, thread_name_prefix='textual') as pool:
        logs_future = pool.submit(log_branch)
        traces_future = pool.submit(trace_branch)
        filtered_logs, log_summary = logs_future.result()
        filtered_traces, trace_summary = traces_future.result()

    flags = []
    if filtered_logs.fallback:
        flags.append('log-selector:fallback')
    for name, summary in (('log-summarizer', log_summary), ('trace-summarizer', trace_summary)):
        if summary.fallback:
            flags.append(f'{name}:fallback')
        if summary.violation:
            flags.append(f'{name}:mention_violation')
    if filtered_traces.cycles_aborted:
        flags.append('traces:cycles_aborted')

    feature = build_textual_feature(
        log_summary.text,
        trace_summary.text,
        topology,
        implicated_instances(filtered_logs, filtered_traces),
        filtered_logs=filtered_logs,
        filtered_traces=filtered_traces,
        edge_cap=edge_cap,
        budget=summary_budget,
    )
    return TextualResult(feature, filtered_logs, filtered_traces, tuple(flags))


def export_filtered(filtered_logs, filtered_traces, path):
    """Line-delimited audit records of the filtered artifacts."""
    lines = []
    for entry, stage in zip(filtered_logs.entries, filtered_logs.provenance):
        lines.append(json.dumps({'kind': 'log', 'stage': stage.value, **entry.to_record()}, sort_keys=True))
    for chain in filtered_traces.chains:
        lines.append(json.dumps({'kind': 'chain', **chain.to_record()}, sort_keys=True))
    return atomic_write_text(path, ''.join(line + '\n' for line in lines))
