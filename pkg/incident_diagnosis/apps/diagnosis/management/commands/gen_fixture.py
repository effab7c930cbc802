from pathlib import Path

import yaml

from ..base import DiagnosisCommand
from ... import ledger
from ...exceptions import EvaluationError
from ...fixtures import default_fixture_config, gen_fixture

DEFAULT_OUT = 'fixture'


class Command(DiagnosisCommand):
    help = 'Generate a seeded synthetic dataset with injected failures and labels'

    def add_command_arguments(self, parser):
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--fixture-config', help='YAML fixture layout (defaults to 8 failures + 4 normal windows)')

    def load_fixture_config(self, path):
        if not path:
            return default_fixture_config()
        try:
            config = yaml.safe_load(Path(path).read_text(encoding='utf-8'))
        except (OSError, yaml.YAMLError) as exc:
            raise EvaluationError(
                "Cannot read fixture config %(path)s: %(detail)s",
                code='invalid_config', params={'path': str(path), 'detail': str(exc)},
            )
        if not isinstance(config, dict):
            raise EvaluationError("Fixture config %(path)s is not a mapping", code='invalid_config',
                                  params={'path': str(path)})
        return config

    def run(self, **options):
        out_dir = Path(options.get('out') or DEFAULT_OUT)
        summary = gen_fixture(options['seed'], self.load_fixture_config(options.get('fixture_config')), out_dir)
        ledger.record_action('FIXTURE_GENERATED', details={'seed': options['seed'], **summary})
        self.stdout.write(self.style.SUCCESS(
            f"Fixture written to {out_dir}: {summary['timestamps']} timestamps, {summary['logs']} logs, "
            f"{summary['spans']} spans, {summary['labels']} labeled cases"
        ))
        self.stdout.write(f"manifest: {summary['manifest']}")
