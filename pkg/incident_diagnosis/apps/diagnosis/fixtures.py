"""
Seeded synthetic telemetry with injected failures.

Instances form a call tree (the first one is the entry point, instance
``i`` is called by instance ``(i - 1) // 2``). Every step emits metrics for
all instances, a few baseline logs and a handful of traces walking down the
tree. A failure perturbs the signature channels of its instance, makes the
instance and its caller log errors, and slows the instance's spans.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .exceptions import EvaluationError, flatten_detail
from .ingestion import atomic_write_text, serialize_metrics, write_labels
from .serializers import FixtureConfigSerializer
from .telemetry import ALL_TASKS, IncidentLabel, TimeSeriesMatrix, TimeWindow

logger = logging.getLogger(__name__)

DEFAULT_INSTANCES = ('frontend-1', 'cartservice-1', 'checkout-1', 'inventory-1', 'dbservice-1', 'payment-1')
DEFAULT_START = 1_700_000_000.0
DEFAULT_INTERVAL = 10.0
DEFAULT_AR = 0.3
FAULT_LEAD = 60.0
SLOWDOWN = 8.0
ROOT_ERRORS_PER_STEP = 2.0
CALLER_ERRORS_PER_STEP = 0.5

# channel -> (mean, sigma)
BASELINE = {
    'connections': (50.0, 5.0),
    'cpu': (40.0, 5.0),
    'latency': (120.0, 10.0),
    'memory': (60.0, 4.0),
    'throughput': (300.0, 20.0),
}


@dataclass(frozen=True)
class FailureKind:
    shifts: dict
    ramp: dict
    messages: tuple
    caller_latency: float = 2.0


FAILURE_LIBRARY = {
    'cpu-overload': FailureKind(
        shifts={'cpu': 8.0, 'latency': 3.0},
        ramp={},
        messages=(
            ('error', 'CPU throttling detected, usage at {n}%'),
            ('warn', 'worker thread starved by cpu saturation'),
        ),
    ),
    'memory-leak': FailureKind(
        shifts={},
        ramp={'memory': 12.0},
        messages=(
            ('error', 'java.lang.OutOfMemoryError: Java heap space'),
            ('warn', 'GC overhead limit exceeded, heap usage {n}%'),
        ),
    ),
    'network-latency': FailureKind(
        shifts={'latency': 8.0},
        ramp={},
        messages=(
            ('error', 'upstream request timeout after {n}ms'),
            ('warn', 'slow network response from peer, latency {n}ms'),
        ),
    ),
    'connection-pool-exhaustion': FailureKind(
        shifts={'connections': 8.0, 'latency': 3.0},
        ramp={},
        messages=(
            ('error', 'connection pool exhausted, {n} waiting'),
            ('error', 'Connection refused by database'),
        ),
    ),
    'service-crash': FailureKind(
        shifts={'throughput': -8.0, 'cpu': -3.0},
        ramp={},
        messages=(
            ('fatal', 'service process exited with code {n}'),
            ('error', '503 Service Unavailable'),
        ),
    ),
}
FAILURE_TYPES = tuple(FAILURE_LIBRARY)

BASELINE_MESSAGES = (
    ('info', 'handled {call} in {n}ms'),
    ('info', 'health check ok'),
    ('info', 'cache hit ratio {n}%'),
    ('info', 'served {n} calls since last report'),
    ('debug', 'scheduling tick {n}'),
    ('debug', 'config reload skipped'),
)


def call_type(instance):
    return 'rpc ' + instance.rsplit('-', 1)[0]


def call_tree(instances):
    """instance -> children"""
    children = {name: [] for name in instances}
    for index, name in enumerate(instances[1:], start=1):
        children[instances[(index - 1) // 2]].append(name)
    return children


def caller_of(instances, name):
    index = instances.index(name)
    return instances[(index - 1) // 2] if index else None


def default_fixture_config(instances=DEFAULT_INSTANCES, failures=8, normal=4, start_time=DEFAULT_START,
                           training=7200.0, window=600.0, gap=300.0):
    """Training period, then ``failures + normal`` case windows separated by
    gaps; every third window is normal."""
    roots = list(instances[1:])
    windows, failure_specs, normal_windows = [], [], []
    cursor = start_time + training
    for index in range(failures + normal):
        cursor += gap
        windows.append((cursor, cursor + window))
        cursor += window
    failure_index = 0
    for index, (start, end) in enumerate(windows):
        normal_slot = index % 3 == 2 and len(normal_windows) < normal
        if normal_slot or failure_index >= failures:
            normal_windows.append({'start': start, 'end': end})
            continue
        failure_specs.append({
            'type': FAILURE_TYPES[failure_index % len(FAILURE_TYPES)],
            'instance': roots[(3 * failure_index) % len(roots)],
            'start': start,
            'end': end,
        })
        failure_index += 1
    return {
        'instances': list(instances),
        'duration': cursor + gap - start_time,
        'sampling_interval': DEFAULT_INTERVAL,
        'start_time': start_time,
        'ar_coefficient': DEFAULT_AR,
        'requests_per_step': 3,
        'logs_per_step': 1.0,
        'failures': failure_specs,
        'normal_windows': normal_windows,
        'training_windows': [{'start': start_time, 'end': start_time + training}],
    }


def validate_fixture_config(config):
    serializer = FixtureConfigSerializer(data=config)
    if not serializer.is_valid():
        raise EvaluationError(
            "Invalid fixture config: %(detail)s", code='invalid_config',
            params={'detail': flatten_detail(serializer.errors)},
        )
    data = dict(serializer.validated_data)
    data.setdefault('sampling_interval', DEFAULT_INTERVAL)
    data.setdefault('start_time', DEFAULT_START)
    data.setdefault('ar_coefficient', DEFAULT_AR)
    data.setdefault('requests_per_step', 3)
    data.setdefault('logs_per_step', 1.0)
    data.setdefault('failures', [])
    data.setdefault('normal_windows', [])
    data.setdefault('training_windows', [])
    if len(set(data['instances'])) != len(data['instances']):
        raise EvaluationError("Fixture instances must be unique", code='invalid_config')
    end = data['start_time'] + data['duration']
    for failure in data['failures']:
        if failure['type'] not in FAILURE_LIBRARY:
            raise EvaluationError(
                "Unknown failure type %(type)s; known: %(known)s", code='invalid_config',
                params={'type': failure['type'], 'known': ', '.join(FAILURE_TYPES)},
            )
        if failure['instance'] not in data['instances']:
            raise EvaluationError("Unknown fixture instance %(instance)s", code='invalid_config',
                                  params={'instance': failure['instance']})
    for window in [*data['failures'], *data['normal_windows'], *data['training_windows']]:
        if window['start'] < data['start_time'] or window['end'] > end:
            raise EvaluationError(
                "Window [%(start)s, %(end)s] lies outside the fixture duration", code='invalid_config',
                params={'start': window['start'], 'end': window['end']},
            )
    return data


def _active_period(failure):
    lead = min(FAULT_LEAD, (failure['end'] - failure['start']) / 4)
    return failure['start'] + lead, failure['end'] - lead


class _Generator:
    def __init__(self, rng, config):
        self.rng = rng
        self.config = config
        self.instances = tuple(config['instances'])
        self.interval = config['sampling_interval']
        self.timestamps = config['start_time'] + np.arange(int(config['duration'] // self.interval)) * self.interval
        self.children = call_tree(self.instances)
        self.faults = [(failure, *_active_period(failure)) for failure in config['failures']]

    def active_faults(self, timestamp):
        return [failure for failure, start, end in self.faults if start <= timestamp < end]

    def metrics(self):
        instances = tuple(sorted(self.instances))
        channels = tuple(sorted(BASELINE))
        phi = self.config['ar_coefficient']
        noise = self.rng.standard_normal((len(self.timestamps), len(instances), len(channels)))
        noise *= np.sqrt(1.0 - phi ** 2)
        state = np.zeros_like(noise)
        state[0] = self.rng.standard_normal((len(instances), len(channels)))
        for step in range(1, len(self.timestamps)):
            state[step] = phi * state[step - 1] + noise[step]

        for failure, start, end in self.faults:
            kind = FAILURE_LIBRARY[failure['type']]
            mask = (self.timestamps >= start) & (self.timestamps < end)
            steps = int(mask.sum())
            s = instances.index(failure['instance'])
            for channel, shift in kind.shifts.items():
                state[mask, s, channels.index(channel)] += shift
            for channel, peak in kind.ramp.items():
                state[mask, s, channels.index(channel)] += np.linspace(0.0, peak, steps)
            caller = caller_of(self.instances, failure['instance'])
            if caller is not None:
                state[mask, instances.index(caller), channels.index('latency')] += kind.caller_latency

        means = np.array([BASELINE[channel][0] for channel in channels])
        sigmas = np.array([BASELINE[channel][1] for channel in channels])
        return TimeSeriesMatrix(
            timestamps=self.timestamps,
            instances=instances,
            channels=channels,
            values=means + sigmas * state,
            sampling_interval=self.interval,
        )

    def _log(self, records, timestamp, instance, severity, template):
        message = template.format(n=int(self.rng.integers(1, 1000)), call=call_type(instance))
        offset = float(self.rng.uniform(0.0, self.interval))
        records.append({
            'timestamp': round(float(timestamp) + offset, 3),
            'instance': instance,
            'severity': severity,
            'message': message,
        })

    def logs(self):
        records = []
        rate = self.config['logs_per_step']
        for timestamp in self.timestamps:
            for instance in self.instances:
                for _ in range(int(self.rng.poisson(rate))):
                    severity, template = BASELINE_MESSAGES[int(self.rng.integers(len(BASELINE_MESSAGES)))]
                    self._log(records, timestamp, instance, severity, template)
            for failure in self.active_faults(timestamp):
                kind = FAILURE_LIBRARY[failure['type']]
                root = failure['instance']
                for _ in range(int(self.rng.poisson(ROOT_ERRORS_PER_STEP))):
                    severity, template = kind.messages[int(self.rng.integers(len(kind.messages)))]
                    self._log(records, timestamp, root, severity, template)
                caller = caller_of(self.instances, root)
                if caller is not None:
                    for _ in range(int(self.rng.poisson(CALLER_ERRORS_PER_STEP))):
                        self._log(records, timestamp, caller, 'error', f'request to {root} failed')
        records.sort(key=lambda record: (record['timestamp'], record['instance'], record['message']))
        return records

    def _span(self, spans, trace_id, path, depth, start, slow):
        instance = path[depth]
        span_id = f'{trace_id}-s{depth}'
        own = float(self.rng.lognormal(np.log(5.0 + 3.0 * depth), 0.25))
        if instance in slow:
            own *= SLOWDOWN
        child = 0.0
        if depth + 1 < len(path):
            child = self._span(spans, trace_id, path, depth + 1, start + 1.0, slow)
        duration = round(own + child, 3)
        spans.append({
            'trace_id': trace_id,
            'span_id': span_id,
            'parent_span_id': f'{trace_id}-s{depth - 1}' if depth else None,
            'instance': instance,
            'call_type': call_type(instance),
            'start': round(start, 3),
            'duration': duration,
            'status_code': 500 if instance in slow else 200,
        })
        return duration

    def traces(self):
        spans = []
        for step, timestamp in enumerate(self.timestamps):
            slow = {failure['instance'] for failure in self.active_faults(timestamp)}
            for request in range(self.config['requests_per_step']):
                path = [self.instances[0]]
                while self.children[path[-1]]:
                    options = self.children[path[-1]]
                    path.append(options[int(self.rng.integers(len(options)))])
                start = (float(timestamp) + float(self.rng.uniform(0.0, self.interval))) * 1000.0
                self._span(spans, f't{step:06d}-{request}', path, 0, start, slow)
        spans.sort(key=lambda span: (span['trace_id'], span['start'], span['span_id']))
        return spans


def _jsonl(records):
    return ''.join(json.dumps(record, sort_keys=True) + '\n' for record in records)


def build_labels(config):
    windows = [
        (failure['start'], failure['end'], failure['type'], failure['instance']) for failure in config['failures']
    ] + [(window['start'], window['end'], None, None) for window in config['normal_windows']]
    windows.sort(key=lambda item: item[0])
    return [
        IncidentLabel(f'case-{index:02d}', TimeWindow(start, end), failure_type, root_cause)
        for index, (start, end, failure_type, root_cause) in enumerate(windows, start=1)
    ]


def gen_fixture(seed, config, out_dir):
    """Write metrics, logs, traces, labels and a manifest under ``out_dir``.
    Identical seed and config give identical files."""
    config = validate_fixture_config(config)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    generator = _Generator(np.random.default_rng(seed), config)

    matrix = generator.metrics()
    logs = generator.logs()
    spans = generator.traces()
    labels = build_labels(config)

    serialize_metrics(matrix, out_dir / 'metrics.csv')
    atomic_write_text(out_dir / 'logs.jsonl', _jsonl(logs))
    atomic_write_text(out_dir / 'traces.jsonl', _jsonl(spans))
    write_labels(labels, out_dir / 'labels.jsonl')
    manifest = {
        'metrics_path': 'metrics.csv',
        'logs_path': 'logs.jsonl',
        'traces_path': 'traces.jsonl',
        'labels_path': 'labels.jsonl',
        'sampling_interval': config['sampling_interval'],
        'catalog': {
            'failure_types': list(FAILURE_TYPES),
            'instances': list(config['instances']),
            'tasks': sorted(task.value for task in ALL_TASKS),
        },
        'training_windows': [dict(window) for window in config['training_windows']],
    }
    atomic_write_text(out_dir / 'manifest.yaml', yaml.safe_dump(manifest, sort_keys=False))
    logger.info(
        "Generated fixture in %s: %d timestamps, %d logs, %d spans, %d labeled cases (seed %s)",
        out_dir, len(matrix), len(logs), len(spans), len(labels), seed,
    )
    return {
        'manifest': out_dir / 'manifest.yaml',
        'timestamps': len(matrix),
        'logs': len(logs),
        'spans': len(spans),
        'labels': len(labels),
    }
