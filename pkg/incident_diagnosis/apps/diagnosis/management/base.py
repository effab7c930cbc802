"""
Shared surface of the diagnosis management commands: the global flags and
the translation of engine errors into process exit codes.
"""
import logging

from django.core.management.base import BaseCommand, CommandError

from ..engine import Engine, load_engine_config
from ..exceptions import BackendError, DiagnosisError, EvaluationError, ForecasterError
from ..telemetry import Task

logger = logging.getLogger(__name__)

EXIT_INVALID = 2
EXIT_INSUFFICIENT_HISTORY = 3
EXIT_BACKEND = 4
EXIT_EVALUATION = 5
EVALUATION_CODES = frozenset({'missing_label', 'empty_input', 'case_id_mismatch'})


def exit_code(error):
    """Exit code of an engine error; everything unlisted is an input error."""
    if isinstance(error, ForecasterError) and error.code == 'insufficient_history':
        return EXIT_INSUFFICIENT_HISTORY
    if isinstance(error, BackendError):
        return EXIT_BACKEND
    if isinstance(error, EvaluationError) and error.code in EVALUATION_CODES:
        return EXIT_EVALUATION
    return EXIT_INVALID


class DiagnosisCommand(BaseCommand):
    """Subclasses implement ``add_command_arguments`` and ``run``."""

    requires_system_checks = []

    def add_arguments(self, parser):
        parser.add_argument('--config', help='Engine config file (defaults to DIAGNOSIS_CONFIG)')
        parser.add_argument('--backend', choices=['remote', 'mock'], help='Override backend.kind')
        parser.add_argument('--tasks', default='AD,FT,RCL', help='Comma list of AD, FT, RCL')
        parser.add_argument('--strict', action='store_true', help='Fail instead of falling back on backend errors')
        parser.add_argument('--force', action='store_true', help='Regenerate outputs that already exist')
        parser.add_argument('--out', help='Output file or directory')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            self.run(**options)
        except DiagnosisError as exc:
            code = exit_code(exc)
            logger.error("%s failed (%s): %s", self.command_name(), exc.code, exc.text)
            raise CommandError(exc.text, returncode=code) from exc

    def run(self, **options):
        raise NotImplementedError('subclasses of DiagnosisCommand must provide a run() method')

    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    # -------------------- helpers --------------------

    def engine(self, options):
        config = load_engine_config(options.get('config')).with_backend(options.get('backend'))
        return Engine(config, strict=options.get('strict', False))

    def tasks(self, options):
        return Task.parse_list(options.get('tasks') or 'AD,FT,RCL')

    def warn_flags(self, flags):
        for flag in flags:
            self.stderr.write(self.style.WARNING(f'fallback: {flag}'))
