from ..base import DiagnosisCommand
from ...telemetry import TimeWindow


class Command(DiagnosisCommand):
    help = 'Fit the metric forecaster on normal periods and write the model file'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--window', nargs=2, type=float, action='append', metavar=('START', 'END'),
            help='Normal period in epoch seconds; repeatable (defaults to the manifest training_windows)',
        )

    def run(self, **options):
        engine = self.engine(options)
        windows = [TimeWindow(start, end) for start, end in options.get('window') or ()]
        model, stats, path = engine.train(windows or None, out=options.get('out'))
        self.stdout.write(self.style.SUCCESS(f'Model written to {path}'))
        self.stdout.write(
            f"order {model.order}, {stats['samples']} training timestamps\n"
            f"training scores: mean {stats['score_mean']:.4f}, median {stats['score_median']:.4f}, "
            f"max {stats['score_max']:.4f}\n"
            f"threshold {stats['threshold']:.4f} (q={stats['quantile']}), "
            f"{stats['persistence_pairs']} pairs on persistence"
        )
