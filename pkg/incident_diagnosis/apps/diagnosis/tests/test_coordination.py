import json
import threading
from unittest import mock

import numpy as np
import requests
from django.test import SimpleTestCase

from apps.diagnosis.coordination import (
    MODE_NUMERICAL_ONLY,
    MODE_TEXTUAL_ONLY,
    MODE_UNCOORDINATED,
    coordinate,
    incident_expert,
    numerical_expert,
    run_case,
    textual_expert,
    textual_fallback,
)
from apps.diagnosis.exceptions import ConfigurationError
from apps.diagnosis.fusion import (
    FusionPolicy,
    borda,
    fallback_aggregate,
    interleave,
    uncoordinated_merge,
    weighted_vote,
)
from apps.diagnosis.gateway import BackendConfig, Gateway
from apps.diagnosis.mock_backend import respond
from apps.diagnosis.numerical import build_numerical_feature, fit_forecaster
from apps.diagnosis.telemetry import (
    ADResult,
    CaseBundle,
    ExpertOutput,
    LogEntry,
    Task,
    TaskCatalog,
    TimeSeriesMatrix,
    TimeWindow,
    TraceSpan,
    pad_ranking,
)
from apps.diagnosis.textual import KeywordSet, TextualFeature

from .support import ScriptedGateway

INSTANCES = ('cart', 'db', 'frontend')
CHANNELS = ('cpu', 'memory')
CATALOG = TaskCatalog(
    failure_types=('cpu-overload', 'memory-leak', 'connection-pool-exhaustion'), instances=INSTANCES
)
KEYWORDS = KeywordSet(('throttled', 'refused'))


def telemetry_matrix(seed=5, length=760, interval=10.0):
    rng = np.random.default_rng(seed)
    values = np.zeros((length, len(INSTANCES), len(CHANNELS)))
    noise = rng.normal(0.0, 1.0, size=values.shape)
    for t in range(1, length):
        values[t] = 0.3 * values[t - 1] + noise[t]
    return TimeSeriesMatrix(np.arange(length) * interval, INSTANCES, CHANNELS, 50.0 + 5.0 * values, interval)


def incident_bundle(matrix, catalog=CATALOG):
    """db burns cpu from 6520 s; its logs and one slow chain point at it."""
    window = TimeWindow(6500.0, 7000.0)
    case = matrix.restrict(6470.0, 7030.0)
    values = np.array(case.values)
    values[5:, INSTANCES.index('db'), CHANNELS.index('cpu')] += 60.0
    case = TimeSeriesMatrix(case.timestamps, case.instances, case.channels, values, case.sampling_interval)
    logs = (
        LogEntry(6600.0, 'db', 'error', 'db worker throttled at 100% cpu'),
        LogEntry(6610.0, 'db', 'warn', 'db worker throttled again'),
    )
    base = 6_500_000.0
    spans = tuple(
        TraceSpan('t1', f'r{i}', None, 'frontend', 'rpc', base + i * 1000.0, 20.0) for i in range(20)
    )
    spans += (TraceSpan('t1', 'c', 'r3', 'db', 'rpc', base + 3500.0, 700.0),)
    return CaseBundle(window, case, logs, spans, catalog)


def random_output(rng):
    ft = rng.permutation(list(CATALOG.failure_types))[: int(rng.integers(0, 4))].tolist()
    rcl = rng.permutation(list(INSTANCES))[: int(rng.integers(0, 4))].tolist()
    stamps = [float(stamp) for stamp in rng.integers(0, 100, size=int(rng.integers(0, 3)))]
    return ExpertOutput(ad=ADResult(bool(rng.integers(2)), stamps), ft=ft, rcl=rcl, evidence=('r',))


class FusionTests(SimpleTestCase):

    def test_borda_weights_positions(self):
        ranking, scores = borda([(('x', 'y', 'z'), 2.0), (('y', 'x'), 1.0)])
        self.assertEqual(ranking, ['x', 'y', 'z'])
        self.assertEqual(scores, {'x': 7.0, 'y': 6.0, 'z': 2.0})

    def test_borda_ties_follow_the_first_list(self):
        ranking, _ = borda([(('a', 'b'), 1.0), (('b', 'a'), 1.0)])
        self.assertEqual(ranking, ['a', 'b'])

    def test_weighted_vote(self):
        yes, no = ADResult(True, (30.0, 10.0)), ADResult(False)
        self.assertEqual(weighted_vote([(yes, 1.0), (no, 1.0)]), ADResult(True, (10.0, 30.0)))
        self.assertEqual(weighted_vote([(yes, 1.0), (no, 2.0)]), ADResult(False))
        self.assertEqual(weighted_vote([(None, 1.0), (yes, 1.0)]).is_anomalous, True)
        self.assertIsNone(weighted_vote([(None, 1.0), (None, 2.0)]))

    def test_fallback_aggregate_prefers_the_heavier_expert(self):
        numerical = ExpertOutput(
            ad=ADResult(True, (6600.0,)), ft=('cpu-overload', 'memory-leak'), rcl=('db', 'cart', 'frontend'),
            evidence=('db cpu deviates',),
        )
        textual = ExpertOutput(
            ad=ADResult(False), ft=('memory-leak',), rcl=('frontend', 'cart'), evidence=('quiet logs',),
        )
        fused = fallback_aggregate(numerical, textual, FusionPolicy(), CATALOG)
        self.assertEqual(fused.ad, ADResult(True, (6600.0,)))
        self.assertEqual(fused.ft, ('cpu-overload', 'memory-leak'))
        self.assertEqual(fused.rcl, ('db', 'cart', 'frontend'))
        self.assertTrue(fused.fallback)
        self.assertEqual(fused.evidence, (
            'numerical: db cpu deviates', 'textual: quiet logs', 'fusion: weighted Borda (2, 1)',
        ))

    def test_fallback_aggregate_pads_and_skips_missing_tasks(self):
        numerical = ExpertOutput(rcl=('cart',), evidence=('x',))
        textual = ExpertOutput(rcl=(), evidence=('y',))
        fused = fallback_aggregate(numerical, textual, FusionPolicy(), CATALOG)
        self.assertIsNone(fused.ad)
        self.assertIsNone(fused.ft)
        self.assertEqual(fused.rcl, ('cart', 'db', 'frontend'))

    def test_fusion_invariants_over_random_pairs(self):
        rng = np.random.default_rng(17)
        for _ in range(10000):
            numerical, textual = random_output(rng), random_output(rng)
            fused = fallback_aggregate(numerical, textual, FusionPolicy(), CATALOG)
            scale = 2.0 ** int(rng.integers(-4, 5))
            scaled = fallback_aggregate(
                numerical, textual, FusionPolicy(incident_numerical_weight=2 * scale, incident_textual_weight=scale),
                CATALOG,
            )
            self.assertEqual((fused.ad, fused.ft, fused.rcl), (scaled.ad, scaled.ft, scaled.rcl))

            agreed = fallback_aggregate(numerical, numerical, FusionPolicy(), CATALOG)
            self.assertEqual(agreed.ft, numerical.ft)
            self.assertEqual(agreed.rcl, pad_ranking(numerical.rcl, INSTANCES))
            self.assertEqual(agreed.ad.is_anomalous, numerical.ad.is_anomalous)

            first, second = rng.permutation(list(CATALOG.failure_types))[:2].tolist()
            conflict = fallback_aggregate(
                ExpertOutput(ad=ADResult(True), ft=(first, second), evidence=('n',)),
                ExpertOutput(ad=ADResult(False), ft=(second, first), evidence=('t',)),
                FusionPolicy(), CATALOG,
            )
            self.assertEqual(conflict.ft[0], first)
            self.assertTrue(conflict.ad.is_anomalous)

    def test_non_positive_weight_rejected(self):
        with self.assertRaises(ConfigurationError):
            FusionPolicy(incident_textual_weight=0)

    def test_interleave(self):
        self.assertEqual(interleave(('a', 'b', 'c'), ('c', 'd')), ('a', 'c', 'b', 'd'))
        self.assertEqual(interleave((), ('x',)), ('x',))

    def test_uncoordinated_merge(self):
        numerical = ExpertOutput(ad=ADResult(False), rcl=('db',), evidence=('n',))
        textual = ExpertOutput(ad=ADResult(True, (5.0,)), rcl=('frontend', 'db'), evidence=('t',))
        merged = uncoordinated_merge(numerical, textual, CATALOG)
        self.assertEqual(merged.ad, ADResult(True, (5.0,)))
        self.assertEqual(merged.rcl, ('db', 'frontend', 'cart'))
        self.assertEqual(merged.evidence[-1], 'merge: OR vote, interleaved rankings')
        self.assertFalse(merged.fallback)


class ExpertFallbackTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        matrix = telemetry_matrix()
        cls.model = fit_forecaster(matrix.restrict(0.0, 5990.0), p=5, q=0.995)
        cls.feature = build_numerical_feature(cls.model, incident_bundle(matrix))

    def test_numerical_expert_answer_is_used(self):
        reply = '<evidence>\n- cpu\n</evidence>{"ad": true, "ft": ["cpu-overload"], "rcl": ["db"]}'
        gateway = ScriptedGateway({'numerical-expert': [reply]})
        answer = numerical_expert(gateway, self.feature, CATALOG)
        self.assertEqual(answer.flags, [])
        self.assertEqual(answer.output.rcl, ('db',))
        _, variables, _ = gateway.calls_to('numerical-expert')[0]
        self.assertEqual(variables['tasks'], 'AD,FT,RCL')
        self.assertEqual(json.loads(variables['feature'])['instance_ranking'][0][0], 'db')

    def test_numerical_expert_falls_back_to_the_draft(self):
        answer = numerical_expert(ScriptedGateway(), self.feature, CATALOG)
        self.assertEqual(answer.flags, ['numerical-expert:backend_failure', 'numerical-expert:fallback'])
        output = answer.output
        self.assertTrue(output.fallback)
        self.assertEqual(output.ad, self.feature.preliminary.ad)
        self.assertEqual(output.rcl, self.feature.preliminary.rcl)
        self.assertEqual(output.ft[0], 'cpu-overload')
        self.assertTrue(output.evidence[-1].startswith('numerical fallback: db/cpu'))

    def test_numerical_expert_reasks_once(self):
        gateway = ScriptedGateway({'numerical-expert': ['no answer', 'still none']})
        answer = numerical_expert(gateway, self.feature, CATALOG, tasks={Task.AD})
        self.assertEqual(len(gateway.calls_to('numerical-expert')), 2)
        self.assertIsNotNone(gateway.calls_to('numerical-expert')[1][2])
        self.assertEqual(answer.flags[-1], 'numerical-expert:fallback')
        self.assertIsNone(answer.output.rcl)
        self.assertIsNone(answer.output.ft)

    def test_textual_fallback_votes(self):
        feature = TextualFeature(
            log_summary='log digest:\n- frontend request slow\n- db heap usage climbing (x2)',
            trace_summary='trace digest:\n- cart cpu throttled',
            filtered_log_count=3,
            filtered_chain_count=1,
            log_instance_counts={'frontend': 1, 'db': 2},
            trace_terminal_counts={'cart': 1},
        )
        output = textual_fallback(feature, CATALOG, frozenset(Task), FusionPolicy())
        self.assertEqual(output.rcl, ('db', 'frontend', 'cart'))
        self.assertEqual(output.ft, ('memory-leak', 'cpu-overload', 'connection-pool-exhaustion'))
        self.assertTrue(output.ad.is_anomalous)
        self.assertTrue(output.fallback)

    def test_textual_fallback_on_quiet_feature(self):
        feature = TextualFeature(log_summary='quiet', trace_summary='quiet')
        answer = textual_expert(ScriptedGateway(), feature, CATALOG, tasks={Task.AD, Task.RCL})
        self.assertEqual(answer.flags[-1], 'textual-expert:fallback')
        self.assertFalse(answer.output.ad.is_anomalous)
        self.assertEqual(answer.output.rcl, INSTANCES)
        self.assertIsNone(answer.output.ft)

    def test_textual_fallback_pads_types_in_catalog_order(self):
        feature = TextualFeature(log_summary='quiet', trace_summary='quiet')
        output = textual_fallback(feature, CATALOG, frozenset(Task), FusionPolicy())
        self.assertEqual(output.ft, CATALOG.failure_types)
        self.assertEqual(output.rcl, INSTANCES)
        self.assertFalse(output.ad.is_anomalous)

    def test_incident_expert_falls_back_to_borda(self):
        numerical = ExpertOutput(ad=ADResult(True, (1.0,)), rcl=('db',), evidence=('n',))
        textual = ExpertOutput(ad=ADResult(False), rcl=('cart',), evidence=('t',))
        answer = incident_expert(ScriptedGateway(), numerical, textual, FusionPolicy(), CATALOG,
                                 tasks={Task.AD, Task.RCL})
        self.assertEqual(answer.flags, ['incident-expert:backend_failure', 'incident-expert:fallback'])
        self.assertEqual(answer.output.rcl, ('db', 'cart', 'frontend'))
        self.assertTrue(answer.output.ad.is_anomalous)


class RunCaseTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        matrix = telemetry_matrix()
        cls.model = fit_forecaster(matrix.restrict(0.0, 5990.0), p=5, q=0.995)
        cls.bundle = incident_bundle(matrix)

    def run_mode(self, mode='full', tasks=frozenset(Task), gateway=None):
        gateway = gateway or Gateway(BackendConfig())
        return run_case(gateway, self.bundle, self.model, KEYWORDS, tasks=tasks, mode=mode, case_id='case-1')

    def test_full_mode_agrees_on_the_culprit(self):
        outcome = self.run_mode()
        diagnosis = outcome.diagnosis
        self.assertEqual(set(diagnosis.per_expert), {'numerical', 'textual', 'incident'})
        self.assertTrue(diagnosis.final.ad.is_anomalous)
        self.assertEqual(diagnosis.final.ft[0], 'cpu-overload')
        self.assertEqual(diagnosis.final.rcl[0], 'db')
        self.assertEqual(sorted(diagnosis.final.rcl), sorted(INSTANCES))
        self.assertFalse([flag for flag in diagnosis.flags if flag.endswith(':fallback')])
        self.assertIsNotNone(outcome.textual)
        document = diagnosis.to_document()
        self.assertEqual(document['case_id'], 'case-1')
        self.assertTrue(document['evidence'].startswith('<evidence>'))
        json.dumps(document)

    def test_coordinate_returns_the_diagnosis(self):
        diagnosis = coordinate(Gateway(BackendConfig()), self.bundle, self.model, KEYWORDS, case_id='case-1')
        self.assertEqual(diagnosis.case_id, 'case-1')
        self.assertEqual(diagnosis.final.rcl[0], 'db')

    def test_mock_runs_repeat_exactly_and_quickly(self):
        documents = []
        for _ in range(2):
            diagnosis = coordinate(Gateway(BackendConfig()), self.bundle, self.model, KEYWORDS, case_id='case-1')
            self.assertLess(diagnosis.wall_time, 1.0)
            document = diagnosis.to_document()
            document.pop('wall_time')
            documents.append(json.dumps(document, sort_keys=True).encode('utf-8'))
        self.assertEqual(documents[0], documents[1])

    def test_unrequested_tasks_are_omitted(self):
        diagnosis = self.run_mode(tasks={Task.AD}).diagnosis
        self.assertIsNone(diagnosis.final.ft)
        self.assertIsNone(diagnosis.final.rcl)
        self.assertEqual(set(diagnosis.to_document()['answers']), {'ad'})

    def test_single_expert_modes(self):
        numerical = self.run_mode(MODE_NUMERICAL_ONLY)
        self.assertEqual(set(numerical.diagnosis.per_expert), {'numerical'})
        self.assertIsNone(numerical.textual)
        textual = self.run_mode(MODE_TEXTUAL_ONLY).diagnosis
        self.assertEqual(set(textual.per_expert), {'textual'})
        self.assertEqual(textual.final.rcl[0], 'db')

    def test_uncoordinated_mode_skips_the_incident_expert(self):
        diagnosis = self.run_mode(MODE_UNCOORDINATED).diagnosis
        self.assertEqual(set(diagnosis.per_expert), {'numerical', 'textual'})
        self.assertEqual(diagnosis.final.evidence[-1], 'merge: OR vote, interleaved rankings')
        self.assertEqual(diagnosis.mode, MODE_UNCOORDINATED)

    def test_unknown_mode(self):
        with self.assertRaises(ConfigurationError):
            self.run_mode('majority')

    def test_dead_backend_still_diagnoses(self):
        diagnosis = self.run_mode(gateway=ScriptedGateway()).diagnosis
        for name in ('numerical-expert', 'textual-expert', 'incident-expert'):
            self.assertIn(f'{name}:fallback', diagnosis.flags)
        self.assertTrue(diagnosis.final.fallback)
        self.assertTrue(diagnosis.final.ad.is_anomalous)
        self.assertEqual(diagnosis.final.rcl[0], 'db')


class FaultyBackend:
    """Stands in for the remote endpoint: a seeded mix of timeouts, server
    errors, malformed or out-of-catalog replies and correct ones."""

    FAULTS = ('timeout', 'server_error', 'garbage', 'missing_keys', 'foreign_labels', 'correct', 'correct')

    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.lock = threading.Lock()

    def __call__(self, url, **kwargs):
        with self.lock:
            fault = self.FAULTS[int(self.rng.integers(len(self.FAULTS)))]
        if fault == 'timeout':
            raise requests.Timeout('injected')
        response = mock.Mock(status_code=200)
        if fault == 'server_error':
            response.status_code = 502
            return response
        prompt = kwargs['json']['messages'][0]['content']
        if fault == 'garbage':
            content = 'I am not sure what you mean.'
        elif fault == 'missing_keys':
            content = '```json\n{"verdict": "maybe"}\n```'
        elif fault == 'foreign_labels':
            content = '<evidence>\n- hunch\n</evidence>{"ad": true, "ft": ["alien"], "rcl": ["mars"]}'
        else:
            content = respond(prompt)
        response.json.return_value = {'choices': [{'message': {'content': content}}]}
        return response


@mock.patch('apps.diagnosis.gateway.time.sleep')
class FaultInjectionTests(SimpleTestCase):

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        matrix = telemetry_matrix()
        cls.model = fit_forecaster(matrix.restrict(0.0, 5990.0), p=5, q=0.995)
        cls.bundle = incident_bundle(matrix)

    def test_every_case_yields_a_valid_diagnosis(self, sleep):
        config = BackendConfig(kind='remote', endpoint='https://llm.example.test/v1', model='flaky', max_retries=1)
        with mock.patch('requests.Session.post', side_effect=FaultyBackend(seed=23)):
            for index in range(100):
                gateway = Gateway(config)
                diagnosis = run_case(gateway, self.bundle, self.model, KEYWORDS, case_id=f'case-{index}').diagnosis
                final = diagnosis.final
                self.assertIsInstance(final.ad.is_anomalous, bool)
                self.assertTrue(set(final.ft) <= set(CATALOG.failure_types))
                self.assertEqual(sorted(final.rcl), sorted(INSTANCES))
                self.assertTrue(final.evidence)
                json.dumps(diagnosis.to_document())
