from ..base import DiagnosisCommand
from ...coordination import MODES
from ...telemetry import TimeWindow


class Command(DiagnosisCommand):
    help = 'Diagnose one time window and write the Diagnosis document'

    def add_command_arguments(self, parser):
        parser.add_argument('--window', nargs=2, type=float, required=True, metavar=('START', 'END'))
        parser.add_argument('--mode', choices=MODES, help='Coordination variant (defaults to the config mode)')
        parser.add_argument('--case-id', help='Case identifier used for the output file name')

    def run(self, **options):
        engine = self.engine(options)
        window = TimeWindow(*options['window'])
        diagnosis, path = engine.diagnose(
            window, self.tasks(options), mode=options.get('mode'),
            case_id=options.get('case_id'), out=options.get('out'),
        )
        self.print_summary(diagnosis)
        self.warn_flags(diagnosis.flags)
        self.stdout.write(self.style.SUCCESS(f'Diagnosis written to {path}'))

    def print_summary(self, diagnosis):
        final = diagnosis.final
        self.stdout.write(
            f'case {diagnosis.case_id} [{diagnosis.window.start:g}, {diagnosis.window.end:g}] '
            f'mode {diagnosis.mode}, {diagnosis.backend}, {diagnosis.wall_time:.3f} s'
        )
        if final.ad is not None:
            stamps = len(final.ad.abnormal_timestamps)
            self.stdout.write(f"AD:  {'anomalous' if final.ad.is_anomalous else 'normal'} ({stamps} abnormal timestamps)")
        if final.ft is not None:
            self.stdout.write('FT:  ' + (', '.join(final.ft) or '-'))
        if final.rcl is not None:
            self.stdout.write('RCL: ' + ', '.join(f'{rank}. {name}' for rank, name in enumerate(final.rcl[:5], 1)))
        self.stdout.write('evidence:')
        for step in final.evidence:
            self.stdout.write(f'  - {step}')
