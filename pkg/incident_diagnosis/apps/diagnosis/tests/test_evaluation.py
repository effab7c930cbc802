import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from apps.diagnosis.evaluation import avg_at_5, evaluate_run, macro_prf1, prf1, rank_of, top_at_k
from apps.diagnosis.exceptions import EvaluationError
from apps.diagnosis.fixtures import FAILURE_TYPES, caller_of, call_tree, default_fixture_config, gen_fixture
from apps.diagnosis.ingestion import load_labels, load_manifest
from apps.diagnosis.telemetry import ADResult, Diagnosis, ExpertOutput, IncidentLabel, TaskCatalog, TimeWindow

CATALOG = TaskCatalog(failure_types=('cpu-overload', 'memory-leak'), instances=('cart', 'db', 'frontend'))


def diagnosis(case_id, anomalous, ft=(), rcl=('db', 'cart', 'frontend'), wall_time=1.0):
    final = ExpertOutput(ad=ADResult(anomalous), ft=ft, rcl=rcl, evidence=('e',))
    return Diagnosis(case_id, TimeWindow(0, 60), final, {}, wall_time, 'mock:rule-based-mock')


def label(case_id, failure_type=None, root_cause=None):
    return IncidentLabel(case_id, TimeWindow(0, 60), failure_type, root_cause)


class MetricTests(SimpleTestCase):

    def test_prf1_worked_example(self):
        scores = prf1(176, 24, 5)
        self.assertAlmostEqual(scores.precision, 0.88)
        self.assertAlmostEqual(scores.recall, 176 / 181)
        self.assertAlmostEqual(scores.f1, 0.9239, places=4)
        self.assertFalse(scores.degenerate)

    def test_prf1_degenerate_denominators(self):
        self.assertEqual(prf1(0, 0, 0), (0.0, 0.0, 0.0, True))
        only_misses = prf1(0, 0, 3)
        self.assertEqual((only_misses.f1, only_misses.degenerate), (0.0, True))
        with self.assertRaises(EvaluationError):
            prf1(-1, 0, 0)

    def test_prf1_matches_harmonic_mean(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            tp, fp, fn = (int(value) for value in rng.integers([1, 0, 0], 51))
            precision, recall = tp / (tp + fp), tp / (tp + fn)
            self.assertTrue(math.isclose(prf1(tp, fp, fn).f1, 2 / (1 / precision + 1 / recall)))

    def test_macro_average(self):
        scores = macro_prf1([('a', 'a'), ('a', 'b'), ('b', 'b')])
        self.assertAlmostEqual(scores.precision, 0.75)
        self.assertAlmostEqual(scores.recall, 0.75)
        self.assertAlmostEqual(scores.f1, 2 / 3)
        self.assertTrue(macro_prf1([]).degenerate)

    def test_top_at_k(self):
        rankings = [('x', 'y'), ('y', 'x'), ('z',)]
        self.assertAlmostEqual(top_at_k(rankings, ['x', 'x', 'x'], 1), 1 / 3)
        self.assertAlmostEqual(top_at_k(rankings, ['x', 'x', 'x'], 2), 2 / 3)
        self.assertAlmostEqual(avg_at_5([('a', 'b', 'c', 'd', 'e')], ['c']), 0.6)

    def test_top_at_k_by_rank(self):
        names = ('a', 'b', 'c', 'd', 'e', 'f')
        rankings = [names] * 4
        truths = [names[rank - 1] for rank in (1, 3, 6, 2)]
        self.assertEqual(top_at_k(rankings, truths, 3), 0.75)
        self.assertEqual(top_at_k(rankings, truths, 1), 0.25)
        self.assertEqual(top_at_k([names], ['a'], 5), 1.0)
        truths = [names[rank - 1] for rank in (1, 2, 6)]
        self.assertAlmostEqual(avg_at_5([names] * 3, truths), 0.6)

    def test_top_at_k_rejects_bad_input(self):
        for args, code in (
            (([], [], 1), 'empty_input'),
            (([('a',)], ['a', 'b'], 1), 'case_id_mismatch'),
            (([('a',)], ['a'], 0), 'empty_input'),
        ):
            with self.assertRaises(EvaluationError) as ctx:
                top_at_k(*args)
            self.assertEqual(ctx.exception.code, code)

    def test_avg_at_5_matches_rank_counting(self):
        rng = np.random.default_rng(9)
        names = list('abcdefgh')
        for _ in range(1000):
            rankings = [tuple(rng.permutation(names).tolist()) for _ in range(int(rng.integers(1, 13)))]
            truths = [names[int(rng.integers(len(names)))] for _ in rankings]
            expected = sum(
                sum(1 for ranking, truth in zip(rankings, truths) if rank_of(ranking, truth) <= k) / len(rankings)
                for k in range(1, 6)
            ) / 5
            self.assertTrue(math.isclose(avg_at_5(rankings, truths), expected))

    def test_rank_of(self):
        self.assertEqual(rank_of(('a', 'b'), 'b'), 2)
        self.assertIsNone(rank_of(('a',), 'z'))
        self.assertIsNone(rank_of(None, 'a'))


class EvaluateRunTests(SimpleTestCase):

    def setUp(self):
        self.labels = [
            label('c1', 'cpu-overload', 'db'),
            label('c2', 'memory-leak', 'cart'),
            label('c3'),
            label('c4'),
        ]
        self.diagnoses = [
            diagnosis('c1', True, ('cpu-overload', 'memory-leak'), wall_time=1.0),
            diagnosis('c2', False, ('cpu-overload',), wall_time=2.0),
            diagnosis('c3', True, wall_time=3.0),
            diagnosis('c4', False, wall_time=4.0),
        ]

    def test_report(self):
        report = evaluate_run(self.diagnoses, self.labels, CATALOG, label='mock full')
        self.assertEqual(report.ad[:3], (0.5, 0.5, 0.5))
        self.assertAlmostEqual(report.ft.precision, 0.25)
        self.assertAlmostEqual(report.ft.recall, 0.5)
        self.assertAlmostEqual(report.ft.f1, 1 / 3)
        self.assertAlmostEqual(report.rcl['top@1'], 0.5)
        self.assertAlmostEqual(report.rcl['top@2'], 1.0)
        self.assertAlmostEqual(report.rcl['avg@5'], 0.9)
        self.assertAlmostEqual(report.mean_time, 2.5)
        self.assertEqual(report.counts, {
            'cases': 4, 'anomalous': 2, 'normal': 2, 'ad_tp': 1, 'ad_fp': 1, 'ad_fn': 1,
        })
        per_case = {score.case_id: score for score in report.per_case}
        self.assertEqual(per_case['c2'].rcl_rank, 2)
        self.assertFalse(per_case['c2'].ft_correct)
        self.assertIsNone(per_case['c3'].ft_correct)

    def test_order_of_cases_does_not_matter(self):
        forward = evaluate_run(self.diagnoses, self.labels, CATALOG)
        backward = evaluate_run(self.diagnoses[::-1], self.labels, CATALOG)
        self.assertEqual(forward.metrics(), backward.metrics())

    def test_table(self):
        table = evaluate_run(self.diagnoses, self.labels, CATALOG, label='mock full').format_table()
        self.assertIn('Top@1', table)
        self.assertIn('Avg@5', table)
        self.assertIn('mock full', table)
        self.assertIn('0.900', table)

    def test_missing_label(self):
        with self.assertRaises(EvaluationError) as ctx:
            evaluate_run(self.diagnoses + [diagnosis('c9', True)], self.labels, CATALOG)
        self.assertEqual(ctx.exception.code, 'missing_label')

    def test_label_without_diagnosis(self):
        with self.assertRaises(EvaluationError) as ctx:
            evaluate_run(self.diagnoses[:3], self.labels, CATALOG)
        self.assertEqual(ctx.exception.code, 'case_id_mismatch')

    def test_empty_labels(self):
        with self.assertRaises(EvaluationError) as ctx:
            evaluate_run([], [], CATALOG)
        self.assertEqual(ctx.exception.code, 'empty_input')

    def test_unanswered_tasks_are_not_scored(self):
        bare = [
            Diagnosis(d.case_id, d.window, ExpertOutput(ad=d.final.ad, evidence=('e',)), {}, 1.0, 'mock')
            for d in self.diagnoses
        ]
        report = evaluate_run(bare, self.labels, CATALOG)
        self.assertTrue(report.ft.degenerate)
        self.assertEqual(report.rcl['avg@5'], 0.0)
        self.assertEqual(report.ad.f1, 0.5)


class FixtureTests(SimpleTestCase):

    def small_config(self):
        return default_fixture_config(failures=2, normal=1, training=1800.0)

    def test_call_tree(self):
        instances = ('a', 'b', 'c', 'd', 'e')
        self.assertEqual(call_tree(instances), {'a': ['b', 'c'], 'b': ['d', 'e'], 'c': [], 'd': [], 'e': []})
        self.assertEqual(caller_of(instances, 'e'), 'b')
        self.assertIsNone(caller_of(instances, 'a'))

    def test_default_layout(self):
        config = default_fixture_config()
        self.assertEqual(len(config['failures']), 8)
        self.assertEqual(len(config['normal_windows']), 4)
        self.assertTrue(all(failure['type'] in FAILURE_TYPES for failure in config['failures']))
        self.assertNotIn(config['instances'][0], {failure['instance'] for failure in config['failures']})

    def test_same_seed_same_files(self):
        with tempfile.TemporaryDirectory() as tmp:
            first = gen_fixture(4, self.small_config(), Path(tmp) / 'one')
            second = gen_fixture(4, self.small_config(), Path(tmp) / 'two')
            other = gen_fixture(5, self.small_config(), Path(tmp) / 'three')
            for name in ('metrics.csv', 'logs.jsonl', 'traces.jsonl', 'labels.jsonl', 'manifest.yaml'):
                self.assertEqual(
                    (Path(tmp) / 'one' / name).read_bytes(), (Path(tmp) / 'two' / name).read_bytes(), name
                )
            self.assertNotEqual(
                (Path(tmp) / 'one' / 'metrics.csv').read_bytes(), (Path(tmp) / 'three' / 'metrics.csv').read_bytes()
            )
            self.assertEqual(first['labels'], 3)
            self.assertEqual(first['timestamps'], second['timestamps'])
            self.assertEqual(other['labels'], 3)

            manifest = load_manifest(first['manifest'])
            labels = load_labels(manifest.labels_path, manifest.catalog)
        self.assertEqual([item.case_id for item in labels], ['case-01', 'case-02', 'case-03'])
        self.assertEqual(labels[0].failure_type, FAILURE_TYPES[0])
        self.assertEqual(labels[0].root_cause, 'cartservice-1')
        self.assertFalse(labels[2].is_anomalous)
        self.assertEqual(manifest.catalog.failure_types, FAILURE_TYPES)

    def test_invalid_configs(self):
        base = self.small_config()
        broken = [
            {**base, 'instances': ['solo']},
            {**base, 'colour': 'blue'},
            {**base, 'failures': [{**base['failures'][0], 'type': 'meteor-strike'}]},
            {**base, 'failures': [{**base['failures'][0], 'instance': 'ghost-1'}]},
            {**base, 'normal_windows': [{'start': base['start_time'] - 100, 'end': base['start_time']}]},
        ]
        with tempfile.TemporaryDirectory() as tmp:
            for config in broken:
                with self.assertRaises(EvaluationError) as ctx:
                    gen_fixture(0, config, tmp)
                self.assertEqual(ctx.exception.code, 'invalid_config')
