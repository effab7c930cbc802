"""
File ingestion: metrics CSV, line-delimited logs and spans, the dataset
manifest and the labels file.
"""
import json
import logging
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from .exceptions import IngestionError, TelemetryError, flatten_detail
from .serializers import (
    DatasetManifestSerializer,
    IncidentLabelSerializer,
    LogEntrySerializer,
    TraceSpanSerializer,
)
from .telemetry import (
    DEFAULT_WINDOW_MARGIN,
    IncidentLabel,
    LogEntry,
    Severity,
    TaskCatalog,
    TimeSeriesMatrix,
    TimeWindow,
    TraceSpan,
    validate_case_bundle,
)

logger = logging.getLogger(__name__)

METRICS_HEADER = ['timestamp', 'instance', 'channel', 'value']
MALFORMED_TOLERANCE = 0.01


@dataclass
class ParseReport:
    """Counters collected while parsing one file."""

    path: str = ''
    lines: int = 0
    malformed: int = 0
    unknown_severity: int = 0
    malformed_lines: list = field(default_factory=list)

    @property
    def malformed_ratio(self):
        return self.malformed / self.lines if self.lines else 0.0


# ==================== METRICS ====================

def parse_metrics(path, sampling_interval=None):
    """Read long-form ``timestamp,instance,channel,value`` rows into a dense
    matrix. Missing cells are carried forward. Leading gaps take the median
    of that channel on the same instance; a channel never observed on an
    instance takes the channel median across instances (0.0 when the
    channel has no values at all)."""
    path = Path(path)
    try:
        frame = pd.read_csv(
            path,
            dtype=str,
            keep_default_na=False,
            on_bad_lines='error',
            engine='c',
        )
    except pd.errors.ParserError as exc:
        raise IngestionError(
            "Malformed row in %(path)s: %(detail)s",
            code='malformed_row', params={'path': str(path), 'detail': str(exc).strip(), 'line': _parser_line(exc)},
        )
    except pd.errors.EmptyDataError:
        raise IngestionError("Empty metrics file %(path)s", code='bad_header', params={'path': str(path)})

    if list(frame.columns) != METRICS_HEADER:
        raise IngestionError(
            "Metrics header must be exactly %(expected)s",
            code='bad_header', params={'expected': ','.join(METRICS_HEADER)},
        )

    blank = (frame == '') | frame.isna()
    if blank.any(axis=None):
        row = int(np.flatnonzero(blank.any(axis=1).to_numpy())[0])
        raise IngestionError(
            "Malformed row on line %(line)d", code='malformed_row', params={'line': row + 2}
        )

    timestamps = frame['timestamp'].map(_parse_float)
    values = frame['value'].map(_parse_float)
    bad = timestamps.isna() | values.isna() | ~np.isfinite(values.fillna(0.0))
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise IngestionError(
            "Non-numeric value on line %(line)d", code='non_numeric_value', params={'line': row + 2}
        )

    frame = frame.assign(timestamp=timestamps.astype(float), value=values.astype(float))
    duplicated = frame.duplicated(subset=['timestamp', 'instance', 'channel'])
    if duplicated.any():
        row = int(np.flatnonzero(duplicated.to_numpy())[0])
        raise IngestionError(
            "Duplicate (timestamp, instance, channel) on line %(line)d",
            code='duplicate_triple', params={'line': row + 2},
        )
    if frame.empty:
        raise IngestionError("No metric rows in %(path)s", code='malformed_row', params={'path': str(path), 'line': 2})

    instances = sorted(frame['instance'].unique())
    channels = sorted(frame['channel'].unique())
    observed = np.sort(frame['timestamp'].unique())
    interval = float(sampling_interval) if sampling_interval else _infer_interval(observed)
    steps = np.round((observed - observed[0]) / interval).astype(int)
    grid = observed[0] + np.arange(steps[-1] + 1) * interval
    # keep observed stamps exact; only the gaps get synthesized stamps
    grid[steps] = observed

    wide = frame.pivot(index='timestamp', columns=['instance', 'channel'], values='value')
    columns = pd.MultiIndex.from_product([instances, channels], names=['instance', 'channel'])
    wide = wide.reindex(index=grid, columns=columns)

    filled = wide.ffill()
    series_median = wide.median()
    filled = filled.fillna(series_median)
    channel_median = wide.T.groupby(level='channel').median().T.median()
    for channel in channels:
        fallback = channel_median.get(channel, 0.0)
        if pd.isna(fallback):
            fallback = 0.0
        filled.loc[:, pd.IndexSlice[:, channel]] = filled.loc[:, pd.IndexSlice[:, channel]].fillna(fallback)

    tensor = filled.to_numpy(dtype=float).reshape(len(grid), len(instances), len(channels))
    logger.info(
        "Parsed metrics %s: %d timestamps x %d instances x %d channels",
        path.name, len(grid), len(instances), len(channels),
    )
    return TimeSeriesMatrix(
        timestamps=grid,
        instances=tuple(instances),
        channels=tuple(channels),
        values=tensor,
        sampling_interval=interval,
    )


def serialize_metrics(matrix, path):
    """Write ``matrix`` as long-form CSV that parses back bit-identically."""
    t_len, s_len, f_len = matrix.shape
    frame = pd.DataFrame({
        'timestamp': np.repeat(matrix.timestamps, s_len * f_len),
        'instance': np.tile(np.repeat(np.array(matrix.instances, dtype=object), f_len), t_len),
        'channel': np.tile(np.array(matrix.channels, dtype=object), t_len * s_len),
        'value': matrix.values.reshape(-1),
    })
    return atomic_write_text(path, frame.to_csv(index=False, float_format='%.17g', columns=METRICS_HEADER))


def _parse_float(text):
    try:
        return float(text)
    except (TypeError, ValueError):
        return np.nan


def _infer_interval(observed):
    if len(observed) < 2:
        return 1.0
    return float(np.median(np.diff(observed)))


def _parser_line(exc):
    for token in str(exc).replace(',', ' ').split():
        if token.isdigit():
            return int(token)
    return None


# ==================== LOGS & TRACES ====================

def _read_records(path, report):
    """Yield (line number, record dict or None) for non-blank lines."""
    with open(path, encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            report.lines += 1
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                yield number, None
                continue
            yield number, record if isinstance(record, dict) else None


def _mark_malformed(report, number, detail):
    report.malformed += 1
    report.malformed_lines.append(number)
    logger.warning("Skipping malformed line %d of %s: %s", number, report.path, detail)


def _check_tolerance(report):
    if report.malformed and report.malformed_ratio > MALFORMED_TOLERANCE:
        raise IngestionError(
            "%(malformed)d of %(lines)d lines malformed (%(percent).1f%%) in %(path)s",
            code='malformed_line',
            params={
                'malformed': report.malformed,
                'lines': report.lines,
                'percent': 100.0 * report.malformed_ratio,
                'path': report.path,
            },
        )


def parse_logs(path, report=None):
    """Parse line-delimited log records, sorted by timestamp."""
    report = report if report is not None else ParseReport()
    report.path = str(path)
    entries = []
    for number, record in _read_records(path, report):
        if record is None:
            _mark_malformed(report, number, 'not a JSON object')
            continue
        serializer = LogEntrySerializer(data=record)
        if not serializer.is_valid():
            _mark_malformed(report, number, flatten_detail(serializer.errors))
            continue
        if serializer.unknown_severity:
            report.unknown_severity += 1
        data = serializer.validated_data
        entries.append(LogEntry(
            timestamp=data['timestamp'],
            instance=data['instance'],
            severity=Severity(data['severity']),
            message=data['message'],
        ))
    _check_tolerance(report)
    if report.unknown_severity:
        logger.warning(
            "%d log lines in %s had unknown severities, mapped to info",
            report.unknown_severity, report.path,
        )
    entries.sort(key=lambda entry: entry.timestamp)
    return entries


def parse_traces(path, report=None):
    """Parse line-delimited span records, grouped by trace_id."""
    report = report if report is not None else ParseReport()
    report.path = str(path)
    spans = []
    seen = {}
    for number, record in _read_records(path, report):
        if record is None:
            _mark_malformed(report, number, 'not a JSON object')
            continue
        serializer = TraceSpanSerializer(data=record)
        if not serializer.is_valid():
            _mark_malformed(report, number, flatten_detail(serializer.errors))
            continue
        data = serializer.validated_data
        if data['duration'] < 0:
            raise IngestionError(
                "Negative duration on line %(line)d (span %(span)s)",
                code='negative_duration', params={'line': number, 'span': data['span_id']},
            )
        key = (data['trace_id'], data['span_id'])
        if key in seen:
            raise IngestionError(
                "Duplicate span %(span)s in trace %(trace)s on line %(line)d (first on line %(first)d)",
                code='duplicate_span',
                params={'span': data['span_id'], 'trace': data['trace_id'], 'line': number, 'first': seen[key]},
            )
        seen[key] = number
        spans.append(TraceSpan(**data))
    _check_tolerance(report)
    spans.sort(key=lambda span: (span.trace_id, span.start, span.span_id))
    return spans


# ==================== MANIFEST & LABELS ====================

@dataclass(frozen=True)
class DatasetManifest:
    metrics_path: Path
    logs_path: Path
    traces_path: Path
    labels_path: Path
    catalog: TaskCatalog
    sampling_interval: float
    training_windows: tuple = ()
    source: str = ''


def load_manifest(path):
    """Read and validate a manifest document; paths resolve against its
    directory and must exist."""
    path = Path(path)
    if not path.exists():
        raise IngestionError("Manifest %(path)s does not exist", code='missing_path', params={'path': str(path)})
    with open(path, encoding='utf-8') as handle:
        try:
            document = yaml.safe_load(handle) or {}
        except yaml.YAMLError as exc:
            raise IngestionError(
                "Manifest %(path)s is not valid YAML: %(detail)s",
                code='invalid_manifest', params={'path': str(path), 'detail': str(exc)},
            )
    serializer = DatasetManifestSerializer(data=document)
    if not serializer.is_valid():
        raise IngestionError(
            "Invalid manifest %(path)s: %(detail)s",
            code='invalid_manifest', params={'path': str(path), 'detail': flatten_detail(serializer.errors)},
        )
    data = serializer.validated_data
    base = path.parent

    def resolve(value):
        if value is None:
            return None
        resolved = (base / value).resolve()
        if not resolved.exists():
            raise IngestionError(
                "Manifest path %(path)s does not exist", code='missing_path', params={'path': str(resolved)}
            )
        return resolved

    catalog = data['catalog']
    return DatasetManifest(
        metrics_path=resolve(data['metrics_path']),
        logs_path=resolve(data['logs_path']),
        traces_path=resolve(data['traces_path']),
        labels_path=resolve(data['labels_path']),
        catalog=TaskCatalog(
            failure_types=tuple(catalog['failure_types']),
            instances=tuple(catalog['instances']),
            tasks=frozenset(catalog['tasks']),
        ),
        sampling_interval=data['sampling_interval'],
        training_windows=tuple(TimeWindow(w['start'], w['end']) for w in data['training_windows']),
        source=path.parent.name,
    )


def load_labels(path, catalog):
    """Parse the labels file; labels are validated against ``catalog``."""
    labels = []
    seen = set()
    path = Path(path)
    if not path.exists():
        raise IngestionError("Labels file %(path)s does not exist", code='missing_path', params={'path': str(path)})
    with open(path, encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError:
                raise IngestionError(
                    "Malformed label on line %(line)d", code='malformed_line', params={'line': number}
                )
            serializer = IncidentLabelSerializer(data=record)
            if not serializer.is_valid():
                raise IngestionError(
                    "Invalid label on line %(line)d: %(detail)s",
                    code='malformed_line', params={'line': number, 'detail': flatten_detail(serializer.errors)},
                )
            data = serializer.validated_data
            if data['case_id'] in seen:
                raise IngestionError(
                    "Duplicate case_id %(case)s on line %(line)d",
                    code='malformed_line', params={'case': data['case_id'], 'line': number},
                )
            seen.add(data['case_id'])
            label = IncidentLabel(
                case_id=data['case_id'],
                window=TimeWindow(data['start'], data['end']),
                failure_type=data['failure_type'],
                root_cause=data['root_cause'],
            )
            labels.append(label.validate(catalog))
    return labels


def write_labels(labels, path):
    lines = []
    for label in labels:
        lines.append(json.dumps({
            'case_id': label.case_id,
            'start': label.window.start,
            'end': label.window.end,
            'failure_type': label.failure_type,
            'root_cause': label.root_cause,
        }, sort_keys=True))
    atomic_write_text(path, ''.join(line + '\n' for line in lines))


# ==================== DATASET & CASE SLICING ====================

@dataclass(frozen=True)
class Dataset:
    manifest: DatasetManifest
    matrix: TimeSeriesMatrix
    logs: tuple
    spans: tuple
    reports: tuple = ()

    @classmethod
    def load(cls, manifest):
        """Parse the three telemetry files concurrently."""
        log_report, trace_report = ParseReport(), ParseReport()
        with ThreadPoolExecutor(max_workers=3, thread_name_prefix='ingest') as pool:
            metrics = pool.submit(parse_metrics, manifest.metrics_path, manifest.sampling_interval)
            logs = pool.submit(parse_logs, manifest.logs_path, log_report)
            spans = pool.submit(parse_traces, manifest.traces_path, trace_report)
            return cls(
                manifest=manifest,
                matrix=metrics.result(),
                logs=tuple(logs.result()),
                spans=tuple(spans.result()),
                reports=(log_report, trace_report),
            )


def slice_case(source, window, margin=DEFAULT_WINDOW_MARGIN):
    """Bundle of one case: metric rows, logs and spans within ``window``
    +- ``margin``."""
    dataset = source if isinstance(source, Dataset) else Dataset.load(source)
    if not isinstance(window, TimeWindow):
        raise TelemetryError("window must be a TimeWindow", code='invalid_window')
    return validate_case_bundle(
        dataset.matrix, dataset.logs, dataset.spans, window, dataset.manifest.catalog, margin=margin
    )


def atomic_write_text(path, text):
    """Write ``text`` to a sibling temp file and rename it over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile(
        'w', encoding='utf-8', dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp', delete=False
    )
    try:
        with handle:
            handle.write(text)
        os.replace(handle.name, path)
    except BaseException:
        Path(handle.name).unlink(missing_ok=True)
        raise
    return path
