from ..base import DiagnosisCommand
from ...coordination import MODES


class Command(DiagnosisCommand):
    help = 'Diagnose every labeled case and score the run'

    def add_command_arguments(self, parser):
        parser.add_argument('--labels', help='Labels file (defaults to the manifest labels_path)')
        parser.add_argument('--mode', choices=MODES, help='Coordination variant (defaults to the config mode)')

    def run(self, **options):
        engine = self.engine(options)
        report, out_dir = engine.evaluate(
            options.get('labels'), self.tasks(options), mode=options.get('mode'), out=options.get('out'),
        )
        self.stdout.write(report.format_table())
        fallbacks = sum(1 for case in report.per_case if case.flags)
        if fallbacks:
            self.stderr.write(self.style.WARNING(f'{fallbacks} cases used at least one fallback'))
        self.stdout.write(self.style.SUCCESS(f"Report for {report.counts['cases']} cases written to {out_dir}"))
