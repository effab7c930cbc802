"""
Engine configuration and the operations behind the management commands.
"""
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Mapping, Optional

import yaml
from django.conf import settings

from . import ledger
from .coordination import MODE_FULL, CaseSettings, run_case
from .digest import DEFAULT_CHANNEL_MAP, DEFAULT_KEYWORD_MAP
from .evaluation import evaluate_run
from .exceptions import BackendError, ConfigurationError, EvaluationError, IngestionError, flatten_detail
from .fusion import FusionPolicy
from .gateway import BackendConfig, Gateway, load_templates
from .ingestion import Dataset, atomic_write_text, load_labels, load_manifest, parse_logs, parse_metrics, slice_case
from .numerical import (
    DEFAULT_MIN_ABNORMAL,
    DEFAULT_ORDER,
    DEFAULT_QUANTILE,
    TOP_CHANNEL_CAP,
    Forecaster,
    fit_forecaster,
    training_residual_stats,
)
from .serializers import EngineConfigSerializer
from .telemetry import ALL_TASKS, DEFAULT_WINDOW_MARGIN, Task, TimeWindow
from .textual import (
    DEFAULT_CONTEXT_BUDGET,
    DEFAULT_LOG_CAP,
    DEFAULT_SUMMARY_BUDGET,
    KeywordSet,
    export_filtered,
    extract_keywords,
    stratified_sample,
)

logger = logging.getLogger(__name__)

DEFAULT_CASE_CONCURRENCY = 4


# ==================== CONFIGURATION ====================

@dataclass(frozen=True)
class Thresholds:
    q: float = DEFAULT_QUANTILE
    k: int = DEFAULT_MIN_ABNORMAL
    scale_factor: float = 1.0
    p: int = DEFAULT_ORDER


@dataclass(frozen=True)
class Caps:
    log_cap: int = DEFAULT_LOG_CAP
    summary_budget: int = DEFAULT_SUMMARY_BUDGET
    topology_edge_cap: int = 30
    top_channels: int = TOP_CHANNEL_CAP
    context_budget: int = DEFAULT_CONTEXT_BUDGET


@dataclass(frozen=True)
class EngineConfig:
    manifest_path: Path
    model_path: Path
    keyword_path: Path
    output_dir: Path
    template_dir: Optional[Path] = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    thresholds: Thresholds = field(default_factory=Thresholds)
    fusion: FusionPolicy = field(default_factory=FusionPolicy)
    caps: Caps = field(default_factory=Caps)
    channel_map: Mapping = field(default_factory=lambda: dict(DEFAULT_CHANNEL_MAP))
    keyword_map: Mapping = field(default_factory=lambda: dict(DEFAULT_KEYWORD_MAP))
    window_margin: float = DEFAULT_WINDOW_MARGIN
    case_concurrency: int = DEFAULT_CASE_CONCURRENCY
    mode: str = MODE_FULL
    source: Optional[Path] = None

    def case_settings(self):
        return CaseSettings(
            policy=self.fusion,
            k=self.thresholds.k,
            scale_factor=self.thresholds.scale_factor,
            top_channels=self.caps.top_channels,
            topology_edge_cap=self.caps.topology_edge_cap,
            log_cap=self.caps.log_cap,
            summary_budget=self.caps.summary_budget,
            context_budget=self.caps.context_budget,
            channel_map=dict(self.channel_map),
            keyword_map=dict(self.keyword_map),
        )

    def with_backend(self, kind):
        if not kind or kind == self.backend.kind:
            return self
        return replace(self, backend=replace(self.backend, kind=kind))


def load_engine_config(path=None):
    """Validate the engine config document; relative paths resolve against
    its directory. The API key comes from the environment only."""
    path = path or getattr(settings, 'DIAGNOSIS_CONFIG', None)
    if not path:
        raise ConfigurationError("No config file given and DIAGNOSIS_CONFIG is unset")
    path = Path(path)
    if not path.exists():
        raise ConfigurationError("Config file %(path)s does not exist", params={'path': str(path)})
    try:
        document = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError("Config file %(path)s is not valid YAML: %(detail)s",
                                 params={'path': str(path), 'detail': str(exc)})
    serializer = EngineConfigSerializer(data=document)
    if not serializer.is_valid():
        raise ConfigurationError(
            "Invalid config %(path)s: %(detail)s",
            params={'path': str(path), 'detail': flatten_detail(serializer.errors)},
        )
    data = serializer.validated_data
    base = path.resolve().parent

    def resolve(value, default=None):
        value = value if value is not None else default
        return (base / value).resolve() if value is not None else None

    triage = data.get('triage', {})
    return EngineConfig(
        manifest_path=resolve(data['manifest']),
        model_path=resolve(data.get('model_path'), 'model.json'),
        keyword_path=resolve(data.get('keyword_path'), 'keywords.txt'),
        output_dir=resolve(data.get('output_dir'), 'out'),
        template_dir=resolve(data.get('template_dir')),
        backend=BackendConfig(**data.get('backend', {}), api_key=getattr(settings, 'LLM_API_KEY', None) or None),
        thresholds=Thresholds(**data.get('thresholds', {})),
        fusion=FusionPolicy(**data.get('fusion', {})),
        caps=Caps(**data.get('caps', {})),
        channel_map=dict(triage.get('channel_map') or DEFAULT_CHANNEL_MAP),
        keyword_map=dict(triage.get('keyword_map') or DEFAULT_KEYWORD_MAP),
        window_margin=data.get('window_margin', DEFAULT_WINDOW_MARGIN),
        case_concurrency=data.get('case_concurrency', DEFAULT_CASE_CONCURRENCY),
        mode=data.get('mode', MODE_FULL),
        source=path,
    )


def write_json(path, document):
    return atomic_write_text(path, json.dumps(document, indent=2, sort_keys=True) + '\n')


# ==================== ENGINE ====================

class Engine:
    """Loads the dataset, model and keywords lazily and runs the offline
    and per-case operations."""

    def __init__(self, config, strict=False):
        self.config = config
        self.strict = strict

    @cached_property
    def manifest(self):
        return load_manifest(self.config.manifest_path)

    @cached_property
    def dataset(self):
        return Dataset.load(self.manifest)

    @cached_property
    def gateway(self):
        return Gateway(self.config.backend, load_templates(self.config.template_dir))

    def _check_strict(self):
        failures = self.gateway.stats['backend_failures']
        if self.strict and failures:
            raise BackendError(
                "%(count)d backend requests failed and --strict forbids fallbacks",
                params={'count': failures},
            )

    # -------------------- offline --------------------

    def train(self, windows=None, out=None):
        windows = tuple(windows or self.manifest.training_windows)
        if not windows:
            raise ConfigurationError("No normal windows given and the manifest lists no training_windows")
        matrix = parse_metrics(self.manifest.metrics_path, self.manifest.sampling_interval)
        segments = [matrix.restrict(window.start, window.end) for window in windows]
        provenance = {
            'manifest': self.manifest.source,
            'windows': [window.to_record() for window in windows],
        }
        model = fit_forecaster(
            segments, p=self.config.thresholds.p, q=self.config.thresholds.q, provenance=provenance
        )
        path = Path(out or self.config.model_path)
        atomic_write_text(path, model.dumps())
        stats = training_residual_stats(model)
        ledger.record_action('TRAINED', details={'model_path': str(path), **stats})
        return model, stats, path

    def load_model(self):
        if not Path(self.config.model_path).exists():
            raise IngestionError(
                "Model file %(path)s does not exist; run train first",
                code='missing_path', params={'path': str(self.config.model_path)},
            )
        return Forecaster.load(self.config.model_path)

    def keywords(self, force=False, out=None):
        """(KeywordSet, written). An existing file is kept unless ``force``."""
        path = Path(out or self.config.keyword_path)
        if path.exists() and not force:
            logger.info("Keyword file %s exists; use --force to regenerate", path)
            return KeywordSet.load(path), False
        logs = parse_logs(self.manifest.logs_path)
        keywords = extract_keywords(self.gateway, stratified_sample(logs), source=self.manifest.source)
        self._check_strict()
        keywords.save(path)
        ledger.record_action('KEYWORDS_EXTRACTED', details={
            'keyword_path': str(path), 'count': len(keywords.keywords), 'fallback': keywords.fallback,
        })
        return keywords, True

    def load_keywords(self):
        if not Path(self.config.keyword_path).exists():
            raise IngestionError(
                "Keyword file %(path)s does not exist; run keywords first",
                code='missing_path', params={'path': str(self.config.keyword_path)},
            )
        return KeywordSet.load(self.config.keyword_path)

    # -------------------- per case --------------------

    def bundle(self, window, tasks=ALL_TASKS):
        bundle = slice_case(self.dataset, window, margin=self.config.window_margin)
        return replace(bundle, catalog=bundle.catalog.with_tasks(tasks))

    def _run(self, window, tasks, mode, case_id, model, keywords):
        return run_case(
            self.gateway, self.bundle(window, tasks), model, keywords,
            tasks=tasks, settings=self.config.case_settings(), mode=mode, case_id=case_id,
        )

    def diagnose(self, window, tasks=ALL_TASKS, mode=None, case_id=None, out=None):
        model, keywords = self.load_model(), self.load_keywords()
        window = window if isinstance(window, TimeWindow) else TimeWindow(*window)
        case_id = case_id or f'window-{window.start:g}-{window.end:g}'
        outcome = self._run(window, frozenset(Task(task) for task in tasks), mode or self.config.mode,
                            case_id, model, keywords)
        self._check_strict()
        diagnosis = outcome.diagnosis
        path = Path(out) if out else self.config.output_dir / f'{case_id}.json'
        write_json(path, diagnosis.to_document())
        if outcome.textual is not None:
            export_filtered(
                outcome.textual.filtered_logs, outcome.textual.filtered_traces,
                path.with_name(f'{path.stem}.filtered.jsonl'),
            )
        ledger.record_diagnosis(diagnosis)
        return diagnosis, path

    def evaluate(self, labels_path=None, tasks=ALL_TASKS, mode=None, out=None):
        """Diagnose every labeled case (normal windows included) and score
        the run."""
        labels_path = labels_path or self.manifest.labels_path
        if labels_path is None:
            raise IngestionError("The manifest lists no labels_path", code='missing_path')
        catalog = self.manifest.catalog
        labels = load_labels(labels_path, catalog)
        if not labels:
            raise EvaluationError("Label file %(path)s holds no cases", params={'path': str(labels_path)})
        model, keywords = self.load_model(), self.load_keywords()
        tasks = frozenset(Task(task) for task in tasks)
        mode = mode or self.config.mode

        def diagnose_case(label):
            return self._run(label.window, tasks, mode, label.case_id, model, keywords).diagnosis

        with ThreadPoolExecutor(max_workers=self.config.case_concurrency, thread_name_prefix='case') as pool:
            diagnoses = list(pool.map(diagnose_case, labels))
        self._check_strict()

        report = evaluate_run(diagnoses, labels, catalog, label=f'{self.config.backend.identifier} {mode}')
        out_dir = Path(out) if out else self.config.output_dir
        for diagnosis in diagnoses:
            write_json(out_dir / 'diagnoses' / f'{diagnosis.case_id}.json', diagnosis.to_document())
        write_json(out_dir / 'report.json', report.to_document())
        atomic_write_text(out_dir / 'report.txt', report.format_table() + '\n')
        ledger.record_evaluation(report, diagnoses, self.config.backend.identifier, mode)
        return report, out_dir
