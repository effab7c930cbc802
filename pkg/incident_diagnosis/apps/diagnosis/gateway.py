"""
Chat-completion backend abstraction: role-structured prompt templates, the remote
client with retry/backoff, structured reply parsing and the Gateway that
ties them together.
"""
import json
import logging
import re
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import requests
import yaml

from .exceptions import (
    BackendError,
    ConfigurationError,
    StructuredReplyError,
    TemplateError,
    flatten_detail,
)
from .serializers import PromptTemplateSerializer
from .telemetry import ADResult, ExpertOutput, Task

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent / 'prompts'
EVIDENCE_OPEN = '<evidence>'
EVIDENCE_CLOSE = '</evidence>'
MISSING_EVIDENCE = 'no evidence provided by the backend'
BACKOFF_BASE = 1.0
BACKOFF_FACTOR = 2.0

_PLACEHOLDER = re.compile(r'\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}')
_EVIDENCE = re.compile(re.escape(EVIDENCE_OPEN) + r'(.*?)' + re.escape(EVIDENCE_CLOSE), re.DOTALL)
_FENCE = re.compile(r'```(?:json)?\s*(\{.*?\})\s*```', re.DOTALL)

TASK_KEYS = {Task.AD: 'ad', Task.FT: 'ft', Task.RCL: 'rcl'}


# ==================== PROMPT TEMPLATES ====================

@dataclass(frozen=True)
class PromptTemplate:
    name: str
    role: str
    goal: str
    constraints: tuple
    instructions: tuple
    example: str
    variables: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, 'constraints', tuple(self.constraints))
        object.__setattr__(self, 'instructions', tuple(self.instructions))
        object.__setattr__(self, 'variables', tuple(self.variables))
        for section in ('role', 'goal', 'example'):
            if not str(getattr(self, section)).strip():
                raise TemplateError(
                    "Template %(name)s has an empty %(section)s section",
                    params={'name': self.name, 'section': section},
                )
        if not self.constraints or not self.instructions:
            raise TemplateError(
                "Template %(name)s needs constraints and instructions", params={'name': self.name}
            )
        undeclared = sorted(set(self.placeholders()) - set(self.variables))
        if undeclared:
            raise TemplateError(
                "Template %(name)s uses undeclared placeholders: %(names)s",
                params={'name': self.name, 'names': ', '.join(undeclared)},
            )

    def sections(self):
        return [self.role, self.goal, *self.constraints, *self.instructions, self.example]

    def placeholders(self):
        return [match.group(1) for text in self.sections() for match in _PLACEHOLDER.finditer(text)]


def load_template(path):
    path = Path(path)
    try:
        document = yaml.safe_load(path.read_text(encoding='utf-8'))
    except (OSError, yaml.YAMLError) as exc:
        raise TemplateError("Cannot read template %(path)s: %(detail)s",
                            params={'path': str(path), 'detail': str(exc)})
    serializer = PromptTemplateSerializer(data=document or {})
    if not serializer.is_valid():
        raise TemplateError(
            "Invalid template %(path)s: %(detail)s",
            params={'path': str(path), 'detail': flatten_detail(serializer.errors)},
        )
    return PromptTemplate(**serializer.validated_data)


def load_templates(directory=None):
    """Read every ``*.yaml`` template of ``directory``, keyed by name."""
    directory = Path(directory) if directory else TEMPLATE_DIR
    templates = {}
    for path in sorted(directory.glob('*.yaml')):
        template = load_template(path)
        templates[template.name] = template
    if not templates:
        raise TemplateError("No templates found in %(path)s", params={'path': str(directory)})
    logger.debug("Loaded %d prompt templates from %s", len(templates), directory)
    return templates


class _PromptDumper(yaml.SafeDumper):
    pass


def _represent_text(dumper, value):
    style = '|' if '\n' in value else None
    return dumper.represent_scalar('tag:yaml.org,2002:str', value, style=style)


_PromptDumper.add_representer(str, _represent_text)


def render(template, variables, reminder=None):
    """The prompt as a YAML document with role, goal, constraints,
    instructions, example and input keys."""
    missing = [name for name in template.variables if name not in variables]
    if missing:
        raise TemplateError(
            "Missing template variables: %(names)s",
            code='missing_variable', params={'names': ', '.join(missing), 'template': template.name},
        )

    def fill(text):
        return _PLACEHOLDER.sub(lambda match: str(variables[match.group(1)]), text)

    document = {
        'role': fill(template.role),
        'goal': fill(template.goal),
        'constraints': [fill(item) for item in template.constraints],
        'instructions': [fill(item) for item in template.instructions],
        'example': fill(template.example),
        'input': {name: str(variables[name]) for name in template.variables},
    }
    if reminder:
        document['reminder'] = reminder
    return yaml.dump(document, Dumper=_PromptDumper, sort_keys=False, allow_unicode=True, width=1_000_000)


def read_prompt(prompt):
    """(role text, input map, reminder) of a rendered prompt."""
    try:
        document = yaml.safe_load(prompt)
    except yaml.YAMLError as exc:
        raise BackendError("Prompt is not a valid document: %(detail)s", params={'detail': str(exc)})
    if not isinstance(document, dict) or 'role' not in document:
        raise BackendError("Prompt has no role section", code='unknown_role')
    return str(document['role']), dict(document.get('input') or {}), document.get('reminder')


# ==================== BACKEND ====================

@dataclass(frozen=True)
class BackendConfig:
    kind: str = 'mock'
    endpoint: str = ''
    model: str = 'rule-based-mock'
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 30.0
    max_retries: int = 2
    concurrency_limit: int = 4
    api_key: Optional[str] = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ('remote', 'mock'):
            raise ConfigurationError("Unknown backend kind %(kind)s", params={'kind': self.kind})
        if self.temperature < 0 or self.max_retries < 0:
            raise ConfigurationError("temperature and max_retries must be non-negative")
        if self.kind == 'remote' and not self.endpoint:
            raise ConfigurationError("Remote backends need an endpoint")

    @property
    def identifier(self):
        return f'{self.kind}:{self.model}'


def complete(config, prompt, session=None):
    """Raw reply text for ``prompt``."""
    if config.kind == 'mock':
        from .mock_backend import respond
        return respond(prompt)
    return _complete_remote(config, prompt, session or requests.Session())


def _complete_remote(config, prompt, session):
    headers = {'Content-Type': 'application/json'}
    if config.api_key:
        headers['Authorization'] = f'Bearer {config.api_key}'
    payload = {
        'model': config.model,
        'messages': [{'role': 'user', 'content': prompt}],
        'temperature': config.temperature,
        'max_tokens': config.max_tokens,
    }
    attempts = config.max_retries + 1
    last_error = None
    for attempt in range(attempts):
        try:
            response = session.post(config.endpoint, json=payload, headers=headers, timeout=config.timeout)
        except requests.Timeout as exc:
            last_error = BackendError("Backend timed out after %(timeout)ss", code='timeout',
                                      params={'timeout': config.timeout})
            logger.warning("Backend attempt %d/%d timed out: %s", attempt + 1, attempts, exc)
        except requests.RequestException as exc:
            last_error = BackendError("Backend unreachable: %(detail)s", params={'detail': str(exc)})
            logger.warning("Backend attempt %d/%d failed: %s", attempt + 1, attempts, exc)
        else:
            if response.status_code >= 500:
                last_error = BackendError("Backend returned HTTP %(status)d",
                                          params={'status': response.status_code})
                logger.warning("Backend attempt %d/%d returned %d", attempt + 1, attempts, response.status_code)
            elif response.status_code >= 400:
                raise BackendError("Backend rejected the request with HTTP %(status)d",
                                   params={'status': response.status_code})
            else:
                return _reply_content(response)
        if attempt + 1 < attempts:
            time.sleep(BACKOFF_BASE * BACKOFF_FACTOR ** attempt)
    raise last_error


def _reply_content(response):
    try:
        content = response.json()['choices'][0]['message']['content']
    except (ValueError, KeyError, IndexError, TypeError):
        raise BackendError("Backend reply has no message content")
    if not isinstance(content, str):
        raise BackendError("Backend reply content is not text")
    return content


# ==================== STRUCTURED REPLIES ====================

@dataclass(frozen=True)
class StructuredReply:
    raw_text: str
    parsed: Mapping
    evidence: tuple = ()
    violations: int = 0

    @property
    def evidence_missing(self):
        return not self.evidence

    def to_output(self, fallback=False):
        return ExpertOutput(
            ad=self.parsed.get('ad'),
            ft=self.parsed.get('ft'),
            rcl=self.parsed.get('rcl'),
            evidence=self.evidence or (MISSING_EVIDENCE,),
            fallback=fallback,
            violations=self.violations,
        )


def extract_object(raw):
    """First JSON object of ``raw``: a fenced block, else the first brace."""
    match = _FENCE.search(raw)
    if match:
        try:
            value = json.loads(match.group(1))
            if isinstance(value, dict):
                return value
        except json.JSONDecodeError:
            pass
    decoder = json.JSONDecoder()
    for match in re.finditer(r'\{', raw):
        try:
            value, _ = decoder.raw_decode(raw, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(value, dict):
            return value
    raise StructuredReplyError("Reply contains no answer object", code='parse_failure')


def extract_evidence(raw):
    match = _EVIDENCE.search(raw)
    if not match:
        return ()
    lines = []
    for line in match.group(1).splitlines():
        line = line.strip()
        if line.startswith('- '):
            line = line[2:].strip()
        if line:
            lines.append(line)
    return tuple(lines)


def _clean_ranking(values, allowed, task):
    if not isinstance(values, list):
        raise StructuredReplyError("%(task)s answer must be a list", code='schema_failure', params={'task': task})
    kept, violations = [], 0
    for value in values:
        value = str(value)
        if allowed and value not in allowed:
            violations += 1
            continue
        if value not in kept:
            kept.append(value)
    return tuple(kept), violations


def parse_structured(raw, expected_tasks, catalog):
    if not raw or not raw.strip():
        raise StructuredReplyError("Empty reply", code='parse_failure')
    answer = extract_object(raw)
    parsed, violations = {}, 0
    for task in sorted({Task(item) for item in expected_tasks}, key=lambda item: item.value):
        key = TASK_KEYS[task]
        if key not in answer:
            raise StructuredReplyError(
                "Reply is missing the %(task)s answer", code='schema_failure', params={'task': key.upper()}
            )
        value = answer[key]
        if key == 'ad':
            if isinstance(value, bool):
                value = {'is_anomalous': value}
            if not isinstance(value, dict) or not isinstance(value.get('is_anomalous'), bool):
                raise StructuredReplyError("AD answer needs a boolean is_anomalous", code='schema_failure')
            stamps = value.get('abnormal_timestamps') or []
            try:
                stamps = tuple(float(stamp) for stamp in stamps)
            except (TypeError, ValueError):
                raise StructuredReplyError("AD timestamps must be numbers", code='schema_failure')
            parsed['ad'] = ADResult(value['is_anomalous'], stamps)
        elif key == 'ft':
            parsed['ft'], dropped = _clean_ranking(value, catalog.failure_types, 'FT')
            violations += dropped
        else:
            parsed['rcl'], dropped = _clean_ranking(value, catalog.instances, 'RCL')
            violations += dropped
    if violations:
        logger.warning("Dropped %d answer labels outside the catalog", violations)
    evidence = extract_evidence(raw)
    return StructuredReply(raw_text=raw, parsed=parsed, evidence=evidence, violations=violations)


def format_reply(output):
    """Schema-valid reply text for ``output``."""
    answer = {}
    if output.ad is not None:
        answer['ad'] = output.ad.to_record()
    if output.ft is not None:
        answer['ft'] = list(output.ft)
    if output.rcl is not None:
        answer['rcl'] = list(output.rcl)
    evidence = '\n'.join(f'- {step}' for step in output.evidence)
    body = json.dumps(answer, sort_keys=True, indent=2)
    return f'{EVIDENCE_OPEN}\n{evidence}\n{EVIDENCE_CLOSE}\n```json\n{body}\n```\n'


# ==================== GATEWAY ====================

@dataclass
class Answer:
    output: Optional[ExpertOutput]
    flags: list = field(default_factory=list)


class Gateway:
    """Shared access to one backend: templates, request bound and stats."""

    def __init__(self, config, templates=None):
        self.config = config
        self.templates = templates if templates is not None else load_templates()
        self._slots = threading.BoundedSemaphore(config.concurrency_limit)
        self._lock = threading.Lock()
        self.session = requests.Session() if config.kind == 'remote' else None
        self.stats = Counter()

    def _count(self, key):
        with self._lock:
            self.stats[key] += 1

    def template(self, name):
        try:
            return self.templates[name]
        except KeyError:
            raise TemplateError("No template named %(name)s", params={'name': name})

    def call(self, name, variables, reminder=None):
        """Render template ``name`` and return the raw reply."""
        prompt = render(self.template(name), variables, reminder=reminder)
        logger.debug("Prompt %s: %d characters", name, len(prompt))
        with self._slots:
            self._count('requests')
            try:
                return complete(self.config, prompt, session=self.session)
            except BackendError:
                self._count('backend_failures')
                raise

    def ask(self, name, variables, tasks, catalog):
        """render -> complete -> parse, with one re-ask on a malformed reply.
        Returns an Answer whose output is None when the caller must fall
        back."""
        flags = []
        reminder = None
        for attempt in range(2):
            try:
                raw = self.call(name, variables, reminder=reminder)
            except BackendError as exc:
                logger.warning("%s: backend failure (%s)", name, exc.code)
                flags.append(f'{name}:backend_failure')
                return Answer(None, flags)
            try:
                reply = parse_structured(raw, tasks, catalog)
            except StructuredReplyError as exc:
                self._count(exc.code)
                flags.append(f'{name}:{exc.code}')
                logger.warning("%s: %s on attempt %d", name, exc.code, attempt + 1)
                reminder = (
                    'Your previous reply could not be used (%s). Answer with an evidence block and one '
                    'fenced JSON object holding: %s.' % (exc.text, ', '.join(sorted(TASK_KEYS[t] for t in tasks)))
                )
                continue
            if reply.evidence_missing:
                flags.append(f'{name}:missing_evidence')
            if reply.violations:
                flags.append(f'{name}:catalog_violation')
            return Answer(reply.to_output(), flags)
        return Answer(None, flags)
