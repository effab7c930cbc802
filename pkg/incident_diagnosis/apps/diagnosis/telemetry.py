"""
Shared domain types of the diagnosis engine.

Every type is immutable once constructed (frozen dataclasses, read-only
numpy buffers), so bundles can be handed to worker threads without locks.
"""
import enum
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .exceptions import TelemetryError

logger = logging.getLogger(__name__)

DEFAULT_WINDOW_MARGIN = 30.0
SPACING_TOLERANCE = 0.01


# ==================== ENUMERATIONS ====================

class Severity(str, enum.Enum):
    DEBUG = 'debug'
    INFO = 'info'
    WARN = 'warn'
    ERROR = 'error'
    FATAL = 'fatal'

    @property
    def rank(self):
        return _SEVERITY_RANK[self]

    @property
    def is_incident_level(self):
        return self in (Severity.WARN, Severity.ERROR, Severity.FATAL)


_SEVERITY_RANK = {
    Severity.DEBUG: 0,
    Severity.INFO: 1,
    Severity.WARN: 2,
    Severity.ERROR: 3,
    Severity.FATAL: 4,
}


class Task(str, enum.Enum):
    AD = 'AD'
    FT = 'FT'
    RCL = 'RCL'

    @classmethod
    def parse_list(cls, text):
        """Parse ``"AD,FT"`` style task lists."""
        tasks = set()
        for item in str(text).split(','):
            item = item.strip().upper()
            if not item:
                continue
            try:
                tasks.add(cls(item))
            except ValueError:
                raise TelemetryError(
                    "Unknown task '%(task)s'", code='invalid_catalog', params={'task': item}
                )
        if not tasks:
            raise TelemetryError("At least one task is required", code='invalid_catalog')
        return frozenset(tasks)


ALL_TASKS = frozenset(Task)


class LogStage(str, enum.Enum):
    KEYWORD = 'keyword'
    SEMANTIC = 'semantic'


# ==================== TIME WINDOW ====================

@dataclass(frozen=True)
class TimeWindow:
    start: float
    end: float

    def __post_init__(self):
        start, end = float(self.start), float(self.end)
        if start < 0 or end < 0:
            raise TelemetryError(
                "Window bounds must be non-negative (got %(start)s, %(end)s)",
                code='invalid_window', params={'start': start, 'end': end},
            )
        if not start < end:
            raise TelemetryError(
                "Window start must precede end (got %(start)s >= %(end)s)",
                code='invalid_window', params={'start': start, 'end': end},
            )
        object.__setattr__(self, 'start', start)
        object.__setattr__(self, 'end', end)

    @property
    def duration(self):
        return self.end - self.start

    def contains(self, timestamp, margin=0.0):
        return self.start - margin <= timestamp <= self.end + margin

    def to_record(self):
        return {'start': self.start, 'end': self.end}


# ==================== TIME SERIES MATRIX ====================

@dataclass(frozen=True)
class TimeSeriesMatrix:
    """Dense timestamps x instances x channels metric tensor."""

    timestamps: np.ndarray
    instances: tuple
    channels: tuple
    values: np.ndarray
    sampling_interval: float
    units: tuple = ()

    def __post_init__(self):
        timestamps = np.array(self.timestamps, dtype=float)
        values = np.array(self.values, dtype=float)
        instances = tuple(self.instances)
        channels = tuple(self.channels)
        units = tuple(self.units) or ('',) * len(channels)

        if timestamps.ndim != 1:
            raise TelemetryError("timestamps must be one-dimensional", code='invalid_matrix')
        expected = (len(timestamps), len(instances), len(channels))
        if values.shape != expected:
            raise TelemetryError(
                "values shape %(shape)s does not match axes %(expected)s",
                code='invalid_matrix', params={'shape': values.shape, 'expected': expected},
            )
        if len(units) != len(channels):
            raise TelemetryError("one unit per channel is required", code='invalid_matrix')
        if len(set(instances)) != len(instances) or len(set(channels)) != len(channels):
            raise TelemetryError("instance and channel names must be unique", code='invalid_matrix')
        if not self.sampling_interval or self.sampling_interval <= 0:
            raise TelemetryError("sampling_interval must be positive", code='invalid_matrix')
        if np.isnan(values).any():
            raise TelemetryError("values contain NaN", code='invalid_matrix')
        if len(timestamps) > 1:
            steps = np.diff(timestamps)
            if (steps <= 0).any():
                raise TelemetryError("timestamps must be strictly increasing", code='invalid_matrix')
            tolerance = SPACING_TOLERANCE * self.sampling_interval
            if (np.abs(steps - self.sampling_interval) > tolerance).any():
                raise TelemetryError(
                    "timestamps are not uniformly spaced at %(interval)s s",
                    code='invalid_matrix', params={'interval': self.sampling_interval},
                )

        timestamps.flags.writeable = False
        values.flags.writeable = False
        object.__setattr__(self, 'timestamps', timestamps)
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'instances', instances)
        object.__setattr__(self, 'channels', channels)
        object.__setattr__(self, 'units', units)
        object.__setattr__(self, 'sampling_interval', float(self.sampling_interval))

    @property
    def shape(self):
        return self.values.shape

    def __len__(self):
        return len(self.timestamps)

    def restrict(self, start, end):
        """Rows whose timestamp lies in the inclusive interval [start, end]."""
        mask = (self.timestamps >= start) & (self.timestamps <= end)
        return TimeSeriesMatrix(
            timestamps=self.timestamps[mask],
            instances=self.instances,
            channels=self.channels,
            values=self.values[mask],
            sampling_interval=self.sampling_interval,
            units=self.units,
        )

    def series(self, instance, channel):
        return self.values[:, self.instances.index(instance), self.channels.index(channel)]

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesMatrix):
            return NotImplemented
        return (
            self.instances == other.instances
            and self.channels == other.channels
            and self.sampling_interval == other.sampling_interval
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values)
        )


# ==================== SERVICE TOPOLOGY ====================

@dataclass(frozen=True)
class TopologyEdge:
    caller: str
    callee: str
    count: int

    def describe(self):
        return f"{self.caller} -> {self.callee} ({self.count} calls)"


@dataclass(frozen=True)
class ServiceTopologyGraph:
    """Caller -> callee edges bucketed at the metric sampling interval."""

    buckets: Mapping = field(default_factory=dict)
    sampling_interval: float = 0.0

    @property
    def edge_count(self):
        return sum(edge.count for edges in self.buckets.values() for edge in edges)

    def aggregate(self):
        """Edges summed over all buckets."""
        totals = {}
        for edges in self.buckets.values():
            for edge in edges:
                key = (edge.caller, edge.callee)
                totals[key] = totals.get(key, 0) + edge.count
        return [TopologyEdge(caller, callee, count) for (caller, callee), count in totals.items()]

    def edges_touching(self, instances):
        """Aggregated in/out edges of ``instances``, busiest first."""
        wanted = set(instances)
        edges = [edge for edge in self.aggregate() if edge.caller in wanted or edge.callee in wanted]
        return sorted(edges, key=lambda edge: (-edge.count, edge.caller, edge.callee))

    def instances(self):
        names = set()
        for edges in self.buckets.values():
            for edge in edges:
                names.update((edge.caller, edge.callee))
        return names


# ==================== LOGS & TRACES ====================

@dataclass(frozen=True)
class LogEntry:
    timestamp: float
    instance: str
    severity: Severity
    message: str

    def __post_init__(self):
        if not isinstance(self.severity, Severity):
            try:
                object.__setattr__(self, 'severity', Severity(self.severity))
            except ValueError:
                raise TelemetryError(
                    "Unknown severity '%(severity)s'", params={'severity': self.severity}
                )
        if not self.message or not str(self.message).strip():
            raise TelemetryError("Log message must not be empty")
        if not self.instance:
            raise TelemetryError("Log instance must not be empty")

    def to_record(self):
        return {
            'timestamp': self.timestamp,
            'instance': self.instance,
            'severity': self.severity.value,
            'message': self.message,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            timestamp=float(record['timestamp']),
            instance=record['instance'],
            severity=Severity(record['severity']),
            message=record['message'],
        )


@dataclass(frozen=True)
class TraceSpan:
    trace_id: str
    span_id: str
    parent_span_id: Optional[str]
    instance: str
    call_type: str
    start: float
    duration: float
    status_code: int = 0

    def __post_init__(self):
        if self.duration < 0:
            raise TelemetryError(
                "Span %(span)s has negative duration", params={'span': self.span_id}
            )
        if self.parent_span_id is not None and self.parent_span_id == self.span_id:
            raise TelemetryError(
                "Span %(span)s is its own parent", params={'span': self.span_id}
            )

    @property
    def start_seconds(self):
        return self.start / 1000.0

    @property
    def key(self):
        return (self.trace_id, self.span_id)

    def to_record(self):
        return {
            'trace_id': self.trace_id,
            'span_id': self.span_id,
            'parent_span_id': self.parent_span_id,
            'instance': self.instance,
            'call_type': self.call_type,
            'start': self.start,
            'duration': self.duration,
            'status_code': self.status_code,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            trace_id=record['trace_id'],
            span_id=record['span_id'],
            parent_span_id=record.get('parent_span_id'),
            instance=record['instance'],
            call_type=record['call_type'],
            start=float(record['start']),
            duration=float(record['duration']),
            status_code=int(record.get('status_code') or 0),
        )


@dataclass(frozen=True)
class FilteredLogs:
    entries: tuple = ()
    provenance: tuple = ()
    fallback: bool = False

    def __post_init__(self):
        entries = tuple(self.entries)
        provenance = tuple(LogStage(tag) for tag in self.provenance)
        if len(provenance) != len(entries):
            raise TelemetryError("one provenance tag per filtered log entry is required")
        if any(a.timestamp > b.timestamp for a, b in zip(entries, entries[1:])):
            raise TelemetryError("filtered logs must be ordered by timestamp")
        object.__setattr__(self, 'entries', entries)
        object.__setattr__(self, 'provenance', provenance)

    def __len__(self):
        return len(self.entries)

    def instance_counts(self):
        counts = {}
        for entry in self.entries:
            counts[entry.instance] = counts.get(entry.instance, 0) + 1
        return counts


@dataclass(frozen=True)
class SpanChain:
    """Root-to-offender list of spans; ``orphan_root`` marks a root whose
    parent record is missing."""

    spans: tuple
    orphan_root: bool = False

    def __post_init__(self):
        spans = tuple(self.spans)
        if not spans:
            raise TelemetryError("a span chain needs at least one span")
        for parent, child in zip(spans, spans[1:]):
            if child.parent_span_id != parent.span_id:
                raise TelemetryError(
                    "span %(child)s does not descend from %(parent)s",
                    params={'child': child.span_id, 'parent': parent.span_id},
                )
        object.__setattr__(self, 'spans', spans)

    @property
    def terminal(self):
        return self.spans[-1]

    @property
    def root(self):
        return self.spans[0]

    def __len__(self):
        return len(self.spans)

    def path(self):
        return [span.instance for span in self.spans]

    def to_record(self):
        return {'orphan_root': self.orphan_root, 'spans': [span.to_record() for span in self.spans]}

    @classmethod
    def from_record(cls, record):
        return cls(
            spans=tuple(TraceSpan.from_record(span) for span in record['spans']),
            orphan_root=bool(record.get('orphan_root')),
        )


@dataclass(frozen=True)
class FilteredTraces:
    chains: tuple = ()
    orphan_roots: int = 0
    cycles_aborted: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'chains', tuple(self.chains))

    def __len__(self):
        return len(self.chains)

    def terminal_counts(self):
        counts = {}
        for chain in self.chains:
            name = chain.terminal.instance
            counts[name] = counts.get(name, 0) + 1
        return counts


# ==================== TASKS & LABELS ====================

@dataclass(frozen=True)
class TaskCatalog:
    failure_types: tuple = ()
    instances: tuple = ()
    tasks: frozenset = ALL_TASKS

    def __post_init__(self):
        failure_types = tuple(self.failure_types)
        instances = tuple(self.instances)
        tasks = frozenset(Task(task) for task in self.tasks)
        if len(set(failure_types)) != len(failure_types):
            raise TelemetryError("failure types must be unique", code='invalid_catalog')
        if len(set(instances)) != len(instances):
            raise TelemetryError("instances must be unique", code='invalid_catalog')
        if Task.FT in tasks and not failure_types:
            raise TelemetryError("FT requires a non-empty failure type set", code='invalid_catalog')
        if Task.RCL in tasks and not instances:
            raise TelemetryError("RCL requires a non-empty instance set", code='invalid_catalog')
        object.__setattr__(self, 'failure_types', failure_types)
        object.__setattr__(self, 'instances', instances)
        object.__setattr__(self, 'tasks', tasks)

    def with_tasks(self, tasks):
        return TaskCatalog(self.failure_types, self.instances, frozenset(tasks))

    def knows_instance(self, name):
        return not self.instances or name in self.instances

    def to_record(self):
        return {
            'failure_types': list(self.failure_types),
            'instances': list(self.instances),
            'tasks': sorted(task.value for task in self.tasks),
        }


@dataclass(frozen=True)
class IncidentLabel:
    """Ground truth of one case; no failure type means a normal window."""

    case_id: str
    window: TimeWindow
    failure_type: Optional[str] = None
    root_cause: Optional[str] = None

    @property
    def is_anomalous(self):
        return self.failure_type is not None

    def validate(self, catalog):
        if self.failure_type is not None and self.failure_type not in catalog.failure_types:
            raise TelemetryError(
                "Label %(case)s has unknown failure type '%(value)s'",
                code='invalid_catalog', params={'case': self.case_id, 'value': self.failure_type},
            )
        if self.root_cause is not None and catalog.instances and self.root_cause not in catalog.instances:
            raise TelemetryError(
                "Label %(case)s has unknown root cause '%(value)s'",
                code='unknown_instance', params={'case': self.case_id, 'value': self.root_cause},
            )
        return self


# ==================== EXPERT OUTPUTS ====================

@dataclass(frozen=True)
class ADResult:
    is_anomalous: bool
    abnormal_timestamps: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'is_anomalous', bool(self.is_anomalous))
        object.__setattr__(self, 'abnormal_timestamps', tuple(self.abnormal_timestamps))

    def to_record(self):
        return {'is_anomalous': self.is_anomalous, 'abnormal_timestamps': list(self.abnormal_timestamps)}


@dataclass(frozen=True)
class ExpertOutput:
    """Results R and evidence E of one expert. Unrequested tasks are None."""

    ad: Optional[ADResult] = None
    ft: Optional[tuple] = None
    rcl: Optional[tuple] = None
    evidence: tuple = ()
    fallback: bool = False
    violations: int = 0

    def __post_init__(self):
        for name in ('ft', 'rcl'):
            ranking = getattr(self, name)
            if ranking is None:
                continue
            ranking = tuple(ranking)
            if len(set(ranking)) != len(ranking):
                raise TelemetryError(
                    "%(task)s ranking contains duplicates", params={'task': name.upper()}
                )
            object.__setattr__(self, name, ranking)
        object.__setattr__(self, 'evidence', tuple(str(step) for step in self.evidence))
        if self.answered_tasks() and not self.evidence:
            raise TelemetryError("evidence is required when a task is answered")

    def answered_tasks(self):
        answered = set()
        if self.ad is not None:
            answered.add(Task.AD)
        if self.ft is not None:
            answered.add(Task.FT)
        if self.rcl is not None:
            answered.add(Task.RCL)
        return frozenset(answered)

    def check(self, catalog):
        """Raise when a ranking leaves the catalog."""
        if self.ft is not None:
            stray = [label for label in self.ft if label not in catalog.failure_types]
            if stray:
                raise TelemetryError(
                    "FT ranking has labels outside the catalog: %(labels)s",
                    code='invalid_catalog', params={'labels': stray},
                )
        if self.rcl is not None and catalog.instances:
            stray = [name for name in self.rcl if name not in catalog.instances]
            if stray:
                raise TelemetryError(
                    "RCL ranking has instances outside the catalog: %(names)s",
                    code='unknown_instance', params={'names': stray},
                )
        return self

    def restricted(self, tasks):
        """Copy with the answers of tasks outside ``tasks`` removed."""
        return ExpertOutput(
            ad=self.ad if Task.AD in tasks else None,
            ft=self.ft if Task.FT in tasks else None,
            rcl=self.rcl if Task.RCL in tasks else None,
            evidence=self.evidence or ('no task requested',),
            fallback=self.fallback,
            violations=self.violations,
        )

    def to_record(self):
        record = {}
        if self.ad is not None:
            record['ad'] = self.ad.to_record()
        if self.ft is not None:
            record['ft'] = list(self.ft)
        if self.rcl is not None:
            record['rcl'] = list(self.rcl)
        record['evidence'] = list(self.evidence)
        record['fallback'] = self.fallback
        record['violations'] = self.violations
        return record

    @classmethod
    def from_record(cls, record):
        ad = record.get('ad')
        return cls(
            ad=ADResult(ad['is_anomalous'], tuple(ad.get('abnormal_timestamps') or ())) if ad else None,
            ft=tuple(record['ft']) if record.get('ft') is not None else None,
            rcl=tuple(record['rcl']) if record.get('rcl') is not None else None,
            evidence=tuple(record.get('evidence') or ()),
            fallback=bool(record.get('fallback')),
            violations=int(record.get('violations') or 0),
        )


def pad_ranking(ranking, universe):
    """Append members of ``universe`` missing from ``ranking`` in universe order."""
    seen = list(dict.fromkeys(ranking))
    present = set(seen)
    return tuple(seen + [item for item in universe if item not in present])


# ==================== DIAGNOSIS ====================

@dataclass(frozen=True)
class Diagnosis:
    case_id: str
    window: TimeWindow
    final: ExpertOutput
    per_expert: Mapping
    wall_time: float
    backend: str
    model: str = ''
    tasks: frozenset = ALL_TASKS
    mode: str = 'full'
    flags: tuple = ()

    def __post_init__(self):
        if self.wall_time < 0:
            raise TelemetryError("wall_time must be non-negative")
        object.__setattr__(self, 'flags', tuple(self.flags))
        object.__setattr__(self, 'tasks', frozenset(Task(task) for task in self.tasks))

    def check(self, catalog):
        self.final.check(catalog)
        if Task.RCL in self.tasks and self.final.rcl is not None and len(catalog.instances) >= 5:
            if len(self.final.rcl) < 5:
                raise TelemetryError("final RCL ranking must hold at least five instances")
        return self

    def to_document(self):
        """Machine-readable diagnosis; evidence blocks are wrapped in
        ``<evidence>`` tokens."""
        def evidence_block(output):
            return '<evidence>\n' + '\n'.join(output.evidence) + '\n</evidence>'

        answers = self.final.to_record()
        for key in ('evidence', 'fallback', 'violations'):
            answers.pop(key)
        experts = {}
        for name, output in self.per_expert.items():
            record = output.to_record()
            record['evidence'] = evidence_block(output)
            experts[name] = record
        return {
            'case_id': self.case_id,
            'window': self.window.to_record(),
            'tasks': sorted(task.value for task in self.tasks),
            'mode': self.mode,
            'answers': answers,
            'evidence': evidence_block(self.final),
            'per_expert': experts,
            'flags': list(self.flags),
            'backend': self.backend,
            'model': self.model,
            'wall_time': self.wall_time,
        }


# ==================== CASE BUNDLE ====================

@dataclass(frozen=True)
class CaseBundle:
    window: TimeWindow
    matrix: TimeSeriesMatrix
    logs: tuple
    spans: tuple
    catalog: TaskCatalog

    @property
    def instances(self):
        return self.catalog.instances or self.matrix.instances


def validate_case_bundle(matrix, logs, spans, window, catalog, margin=DEFAULT_WINDOW_MARGIN):
    """Keep the records inside the window (plus ``margin`` seconds of clock
    skew) and check every instance against the catalog."""
    for name in matrix.instances:
        _check_instance(catalog, name, 'metric matrix')
    for entry in logs:
        _check_instance(catalog, entry.instance, 'log entry')
    for span in spans:
        _check_instance(catalog, span.instance, 'span %s' % span.span_id)

    in_window = (matrix.timestamps >= window.start) & (matrix.timestamps <= window.end)
    if not in_window.any():
        raise TelemetryError(
            "No metric rows inside window [%(start)s, %(end)s]",
            code='empty_window', params={'start': window.start, 'end': window.end},
        )

    kept_matrix = matrix.restrict(window.start - margin, window.end + margin)
    kept_logs = tuple(entry for entry in logs if window.contains(entry.timestamp, margin))
    kept_spans = tuple(span for span in spans if window.contains(span.start_seconds, margin))
    dropped = (len(logs) - len(kept_logs)) + (len(spans) - len(kept_spans))
    if dropped:
        logger.debug("Dropped %d out-of-window records", dropped)
    return CaseBundle(window, kept_matrix, kept_logs, kept_spans, catalog)


def _check_instance(catalog, name, where):
    if not catalog.knows_instance(name):
        raise TelemetryError(
            "Unknown instance '%(instance)s' in %(where)s",
            code='unknown_instance', params={'instance': name, 'where': where},
        )
