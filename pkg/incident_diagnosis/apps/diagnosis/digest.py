"""
Deterministic text digests and lookup tables.

The digests are the fallback summaries of the textual pipeline and also
back the rule-based mock backend, so everything here is a pure function of
its arguments.
"""
import re
from collections import Counter

from .telemetry import Severity

EMPTY_LOG_SUMMARY = 'no incident-relevant logs'
EMPTY_TRACE_SUMMARY = 'no anomalous invocation chains'

CHARS_PER_TOKEN = 4
TOP_MESSAGES = 3

SEED_KEYWORDS = ('error', 'fail', 'failure', 'timeout', 'refused', 'exception', 'unavailable')

# substring -> failure type; first match wins
DEFAULT_CHANNEL_MAP = {
    'cpu': 'cpu-overload',
    'memory': 'memory-leak',
    'mem': 'memory-leak',
    'latency': 'network-latency',
    'connection': 'connection-pool-exhaustion',
    'conn': 'connection-pool-exhaustion',
    'pool': 'connection-pool-exhaustion',
    'throughput': 'service-crash',
    'qps': 'service-crash',
    'requests': 'service-crash',
}

DEFAULT_KEYWORD_MAP = {
    'cpu': 'cpu-overload',
    'throttl': 'cpu-overload',
    'oom': 'memory-leak',
    'out of memory': 'memory-leak',
    'heap': 'memory-leak',
    'memory': 'memory-leak',
    'gc ': 'memory-leak',
    'timeout': 'network-latency',
    'latency': 'network-latency',
    'slow': 'network-latency',
    'pool': 'connection-pool-exhaustion',
    'refused': 'connection-pool-exhaustion',
    'too many connections': 'connection-pool-exhaustion',
    'crash': 'service-crash',
    'unavailable': 'service-crash',
    '503': 'service-crash',
    'exited': 'service-crash',
}

_MULTIPLICITY = re.compile(r'\(x(\d+)\)')
_DIGITS = re.compile(r'\d+')


# ==================== CLASSIFICATION ====================

def classify(text, table):
    """Failure type of the first table key found in ``text`` (case-folded)."""
    folded = text.casefold()
    for needle, failure_type in table.items():
        if needle.casefold() in folded:
            return failure_type
    return None


def rank_types(scores, failure_types, pad=True):
    """Types with a positive score, best first (ties in catalog order),
    followed by the remaining catalog types when ``pad`` is set."""
    order = {name: index for index, name in enumerate(failure_types)}
    scored = [name for name in failure_types if scores.get(name, 0) > 0]
    scored.sort(key=lambda name: (-scores[name], order[name]))
    if not pad:
        return tuple(scored)
    return tuple(scored) + tuple(name for name in failure_types if name not in scored)


def rank_types_from_channels(top_channels, instance, failure_types, channel_map=None):
    """Failure types implied by the deviating channels of ``instance``.

    ``top_channels`` holds ``(instance, channel, score)`` triples; when the
    instance has no entry the whole list is used.
    """
    table = channel_map or DEFAULT_CHANNEL_MAP
    cells = [cell for cell in top_channels if cell[0] == instance] or list(top_channels)
    scores = Counter()
    for _, channel, score in cells:
        failure_type = classify(channel, table)
        if failure_type in failure_types:
            scores[failure_type] += float(score)
    return rank_types(scores, failure_types)


def type_votes(text, failure_types, keyword_map=None):
    """Failure types voted by the lines of a summary, weighted by their
    ``(xN)`` marks."""
    table = keyword_map or DEFAULT_KEYWORD_MAP
    scores = Counter()
    for line in text.splitlines():
        failure_type = classify(line, table)
        if failure_type in failure_types:
            scores[failure_type] += multiplicity(line)
    return scores


def weighted_type_votes(parts, failure_types, keyword_map=None):
    """Sum of ``type_votes`` over ``(text, weight)`` pairs."""
    scores = Counter()
    for text, weight in parts:
        for name, count in type_votes(text, failure_types, keyword_map).items():
            scores[name] += weight * count
    return scores


def weighted_mentions(parts, instances):
    """Instance votes summed over ``(counts, weight)`` pairs."""
    votes = Counter()
    for counts, weight in parts:
        for name, count in counts.items():
            if not instances or name in instances:
                votes[name] += weight * count
    return votes


def rank_instances_by_votes(votes, instances):
    """Instances with positive votes, best first (ties in catalog order),
    then the rest of the catalog."""
    order = {name: index for index, name in enumerate(instances)}
    voted = [name for name, score in votes.items() if score > 0]
    voted.sort(key=lambda name: (-votes[name], order.get(name, len(order)), name))
    return tuple(voted) + tuple(name for name in instances if name not in voted)


# ==================== MENTIONS ====================

def multiplicity(line):
    match = _MULTIPLICITY.search(line)
    return int(match.group(1)) if match else 1


def _mention_pattern(name):
    return re.compile(r'(?<![\w.-])' + re.escape(name) + r'(?![\w-])')


def count_mentions(text, instances):
    """Per-instance mention counts of a summary; each line naming an
    instance adds its ``(xN)`` multiplicity (1 when unmarked)."""
    patterns = {name: _mention_pattern(name) for name in instances}
    counts = Counter()
    for line in text.splitlines():
        weight = multiplicity(line)
        for name, pattern in patterns.items():
            if pattern.search(line):
                counts[name] += weight
    return dict(counts)


def required_mentions(instance_counts, share=0.2):
    """Instances holding at least ``share`` of the records."""
    total = sum(instance_counts.values())
    if not total:
        return []
    return sorted(name for name, count in instance_counts.items() if count >= share * total)


def missing_mentions(text, required):
    mentioned = count_mentions(text, required)
    return [name for name in required if not mentioned.get(name)]


def truncate_to_budget(text, tokens):
    """Cut ``text`` at a line boundary to fit ``tokens`` (4 chars each)."""
    limit = tokens * CHARS_PER_TOKEN
    if len(text) <= limit:
        return text
    kept = []
    size = 0
    for line in text.splitlines():
        if size + len(line) + 1 > limit:
            break
        kept.append(line)
        size += len(line) + 1
    return '\n'.join(kept) if kept else text[:limit]


# ==================== DIGESTS ====================

def message_template(message):
    return _DIGITS.sub('<*>', message.strip())


def log_digest(entries):
    """Per-instance error/warn/fatal counts plus the most frequent message
    templates."""
    if not entries:
        return EMPTY_LOG_SUMMARY
    per_instance = {}
    for entry in entries:
        counts = per_instance.setdefault(entry.instance, Counter())
        counts[entry.severity] += 1
        counts['total'] += 1
    lines = ['log digest:']
    for name in sorted(per_instance, key=lambda key: (-per_instance[key]['total'], key)):
        counts = per_instance[name]
        lines.append(
            f"- {name}: {counts[Severity.ERROR]} error, {counts[Severity.WARN]} warn, "
            f"{counts[Severity.FATAL]} fatal (x{counts['total']})"
        )
    templates = Counter(message_template(entry.message) for entry in entries)
    top = sorted(templates.items(), key=lambda item: (-item[1], item[0]))[:TOP_MESSAGES]
    lines.append('top messages:')
    lines.extend(f'- (x{count}) "{template}"' for template, count in top)
    return '\n'.join(lines)


def trace_digest(chains):
    """Per-instance counts of over-threshold terminal spans plus the
    longest chain."""
    if not chains:
        return EMPTY_TRACE_SUMMARY
    terminals = Counter(chain.terminal.instance for chain in chains)
    lines = ['trace digest:']
    for name, count in sorted(terminals.items(), key=lambda item: (-item[1], item[0])):
        lines.append(f'- {name}: {count} over-threshold spans (x{count})')
    longest = max(chains, key=lambda chain: (len(chain), chain.terminal.duration))
    lines.append(
        f"longest chain: {' -> '.join(longest.path())} "
        f"({longest.terminal.duration:.0f} ms at {longest.terminal.call_type})"
    )
    return '\n'.join(lines)


def topology_digest(graph, instances, cap=30):
    """In/out edges of ``instances``, busiest first, capped at ``cap``."""
    if graph is None or not instances:
        return ''
    edges = graph.edges_touching(instances)[:cap]
    return '\n'.join(edge.describe() for edge in edges)
