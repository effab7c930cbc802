import json
import tempfile
from pathlib import Path

import numpy as np
import yaml
from django.test import SimpleTestCase

from apps.diagnosis.exceptions import IngestionError, TelemetryError
from apps.diagnosis.ingestion import (
    Dataset,
    ParseReport,
    atomic_write_text,
    load_labels,
    load_manifest,
    parse_logs,
    parse_metrics,
    parse_traces,
    serialize_metrics,
    slice_case,
    write_labels,
)
from apps.diagnosis.telemetry import IncidentLabel, Severity, TaskCatalog, TimeSeriesMatrix, TimeWindow

CATALOG = TaskCatalog(failure_types=('cpu-overload',), instances=('a', 'b'))


def log_line(timestamp, instance='a', severity='info', message='request served'):
    return json.dumps({'timestamp': timestamp, 'instance': instance, 'severity': severity, 'message': message})


def span_line(span_id, parent=None, trace='t1', start=0.0, duration=5.0, instance='a'):
    return json.dumps({
        'trace_id': trace, 'span_id': span_id, 'parent_span_id': parent, 'instance': instance,
        'call_type': 'RPC', 'start': start, 'duration': duration, 'status_code': 200,
    })


class IngestionTestCase(SimpleTestCase):

    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def write(self, name, text):
        path = self.root / name
        path.write_text(text, encoding='utf-8')
        return path


class ParseMetricsTests(IngestionTestCase):

    def test_pivot_sorts_axes_and_imputes(self):
        path = self.write('metrics.csv', '\n'.join([
            'timestamp,instance,channel,value',
            '10,b,cpu,6',
            '20,b,cpu,8',
            '30,b,cpu,10',
            '0,a,cpu,1',
            '10,a,cpu,2',
            '30,a,cpu,4',
        ]) + '\n')
        matrix = parse_metrics(path, sampling_interval=10)
        self.assertEqual(matrix.instances, ('a', 'b'))
        self.assertEqual(list(matrix.timestamps), [0.0, 10.0, 20.0, 30.0])
        self.assertEqual(list(matrix.series('a', 'cpu')), [1.0, 2.0, 2.0, 4.0])
        self.assertEqual(list(matrix.series('b', 'cpu')), [8.0, 6.0, 8.0, 10.0])

    def test_unobserved_series_takes_the_channel_median(self):
        path = self.write('metrics.csv', '\n'.join([
            'timestamp,instance,channel,value',
            '0,a,cpu,1',
            '10,a,cpu,2',
            '20,a,cpu,3',
            '0,b,memory,4',
            '10,b,memory,6',
            '20,b,memory,8',
        ]) + '\n')
        matrix = parse_metrics(path, sampling_interval=10)
        self.assertEqual(list(matrix.series('a', 'memory')), [6.0, 6.0, 6.0])
        self.assertEqual(list(matrix.series('b', 'cpu')), [2.0, 2.0, 2.0])

    def test_missing_timestamps_are_synthesized(self):
        path = self.write('metrics.csv', 'timestamp,instance,channel,value\n0,a,cpu,1\n20,a,cpu,3\n')
        matrix = parse_metrics(path, sampling_interval=10)
        self.assertEqual(list(matrix.timestamps), [0.0, 10.0, 20.0])
        self.assertEqual(list(matrix.series('a', 'cpu')), [1.0, 1.0, 3.0])

    def test_bad_header(self):
        path = self.write('metrics.csv', 'time,instance,channel,value\n0,a,cpu,1\n')
        with self.assertRaises(IngestionError) as ctx:
            parse_metrics(path)
        self.assertEqual(ctx.exception.code, 'bad_header')

    def test_non_numeric_value_reports_line(self):
        path = self.write('metrics.csv', 'timestamp,instance,channel,value\n0,a,cpu,1\n10,a,cpu,high\n')
        with self.assertRaises(IngestionError) as ctx:
            parse_metrics(path)
        self.assertEqual(ctx.exception.code, 'non_numeric_value')
        self.assertEqual(ctx.exception.params['line'], 3)

    def test_duplicate_triple(self):
        path = self.write('metrics.csv', 'timestamp,instance,channel,value\n0,a,cpu,1\n0,a,cpu,2\n')
        with self.assertRaises(IngestionError) as ctx:
            parse_metrics(path)
        self.assertEqual(ctx.exception.code, 'duplicate_triple')

    def test_serialized_matrix_parses_back_identically(self):
        rng = np.random.default_rng(3)
        matrix = TimeSeriesMatrix(
            timestamps=1_700_000_000.0 + np.arange(12) * 10.0,
            instances=('a', 'b', 'c'),
            channels=('cpu', 'latency'),
            values=rng.normal(50.0, 7.0, size=(12, 3, 2)),
            sampling_interval=10.0,
        )
        path = serialize_metrics(matrix, self.root / 'metrics.csv')
        self.assertEqual(parse_metrics(path, sampling_interval=10.0), matrix)


class ParseLogsAndTracesTests(IngestionTestCase):

    def test_logs_sorted_and_severities_folded(self):
        path = self.write('logs.jsonl', '\n'.join([
            log_line(20, severity='WARNING', message='slow'),
            log_line(10, severity='verbose', message='chatty'),
        ]) + '\n')
        report = ParseReport()
        entries = parse_logs(path, report)
        self.assertEqual([entry.timestamp for entry in entries], [10.0, 20.0])
        self.assertEqual(entries[0].severity, Severity.INFO)
        self.assertEqual(entries[1].severity, Severity.WARN)
        self.assertEqual(report.unknown_severity, 1)

    def test_one_percent_malformed_tolerated(self):
        lines = [log_line(index) for index in range(99)] + ['{not json']
        report = ParseReport()
        entries = parse_logs(self.write('logs.jsonl', '\n'.join(lines) + '\n'), report)
        self.assertEqual(len(entries), 99)
        self.assertEqual(report.malformed_lines, [100])

    def test_above_one_percent_malformed_fails(self):
        lines = [log_line(index) for index in range(98)] + ['{not json', '[1, 2]']
        with self.assertRaises(IngestionError) as ctx:
            parse_logs(self.write('logs.jsonl', '\n'.join(lines) + '\n'))
        self.assertEqual(ctx.exception.code, 'malformed_line')

    def test_traces_parsed_with_folded_call_type(self):
        path = self.write('traces.jsonl', '\n'.join([
            span_line('child', parent='root', start=5.0),
            span_line('root', start=0.0),
        ]) + '\n')
        spans = parse_traces(path)
        self.assertEqual([item.span_id for item in spans], ['root', 'child'])
        self.assertEqual(spans[0].call_type, 'rpc')
        self.assertIsNone(spans[0].parent_span_id)

    def test_duplicate_span_fails(self):
        path = self.write('traces.jsonl', span_line('s1') + '\n' + span_line('s1') + '\n')
        with self.assertRaises(IngestionError) as ctx:
            parse_traces(path)
        self.assertEqual(ctx.exception.code, 'duplicate_span')

    def test_negative_duration_fails(self):
        path = self.write('traces.jsonl', span_line('s1', duration=-1.0) + '\n')
        with self.assertRaises(IngestionError) as ctx:
            parse_traces(path)
        self.assertEqual(ctx.exception.code, 'negative_duration')


class ManifestAndLabelTests(IngestionTestCase):

    def write_dataset(self, **extra):
        self.write('metrics.csv', '\n'.join(
            ['timestamp,instance,channel,value']
            + [f'{t},{name},cpu,{t / 10 + 1}' for t in range(0, 200, 10) for name in ('a', 'b')]
        ) + '\n')
        self.write('logs.jsonl', log_line(50, 'b', 'error', 'cpu throttled') + '\n' + log_line(190, 'a') + '\n')
        self.write('traces.jsonl', span_line('s1', start=60_000.0, instance='b') + '\n')
        self.write('labels.jsonl', json.dumps({
            'case_id': 'case-01', 'start': 40, 'end': 80, 'failure_type': 'cpu-overload', 'root_cause': 'b',
        }) + '\n')
        manifest = {
            'metrics_path': 'metrics.csv',
            'logs_path': 'logs.jsonl',
            'traces_path': 'traces.jsonl',
            'labels_path': 'labels.jsonl',
            'sampling_interval': 10,
            'catalog': {'failure_types': ['cpu-overload'], 'instances': ['a', 'b']},
            **extra,
        }
        return self.write('manifest.yaml', yaml.safe_dump(manifest))

    def test_manifest_resolves_paths(self):
        manifest = load_manifest(self.write_dataset(training_windows=[{'start': 0, 'end': 100}]))
        self.assertEqual(manifest.metrics_path, (self.root / 'metrics.csv').resolve())
        self.assertEqual(manifest.training_windows, (TimeWindow(0, 100),))
        self.assertEqual(manifest.catalog.instances, ('a', 'b'))

    def test_manifest_rejects_unknown_keys(self):
        with self.assertRaises(IngestionError) as ctx:
            load_manifest(self.write_dataset(colour='blue'))
        self.assertEqual(ctx.exception.code, 'invalid_manifest')

    def test_manifest_missing_file(self):
        path = self.write_dataset()
        (self.root / 'logs.jsonl').unlink()
        with self.assertRaises(IngestionError) as ctx:
            load_manifest(path)
        self.assertEqual(ctx.exception.code, 'missing_path')

    def test_slice_case_bundles_window(self):
        dataset = Dataset.load(load_manifest(self.write_dataset()))
        bundle = slice_case(dataset, TimeWindow(40, 80), margin=10)
        self.assertEqual(bundle.matrix.timestamps[0], 30.0)
        self.assertEqual(bundle.matrix.timestamps[-1], 90.0)
        self.assertEqual([entry.message for entry in bundle.logs], ['cpu throttled'])
        self.assertEqual(len(bundle.spans), 1)

    def test_labels_round_trip_and_validation(self):
        manifest = load_manifest(self.write_dataset())
        labels = load_labels(manifest.labels_path, manifest.catalog)
        self.assertEqual(labels[0].root_cause, 'b')
        self.assertTrue(labels[0].is_anomalous)

        normal = IncidentLabel('case-02', TimeWindow(100, 150))
        write_labels([*labels, normal], self.root / 'all.jsonl')
        reloaded = load_labels(self.root / 'all.jsonl', manifest.catalog)
        self.assertEqual(reloaded[1], normal)

        self.write('bad.jsonl', json.dumps({'case_id': 'x', 'start': 0, 'end': 5, 'failure_type': 'disk-full',
                                            'root_cause': 'a'}) + '\n')
        with self.assertRaises(TelemetryError):
            load_labels(self.root / 'bad.jsonl', CATALOG)

    def test_half_labeled_case_rejected(self):
        path = self.write('half.jsonl', json.dumps({'case_id': 'x', 'start': 0, 'end': 5,
                                                    'failure_type': 'cpu-overload'}) + '\n')
        with self.assertRaises(IngestionError):
            load_labels(path, CATALOG)


class AtomicWriteTests(IngestionTestCase):

    def test_replaces_without_leftovers(self):
        path = self.root / 'nested' / 'out.txt'
        atomic_write_text(path, 'one')
        atomic_write_text(path, 'two')
        self.assertEqual(path.read_text(encoding='utf-8'), 'two')
        self.assertEqual([item.name for item in path.parent.iterdir()], ['out.txt'])
