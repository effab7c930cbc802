from ..base import DiagnosisCommand


class Command(DiagnosisCommand):
    help = 'Extract the incident keyword set from the dataset logs'

    def run(self, **options):
        engine = self.engine(options)
        keywords, written = engine.keywords(force=options.get('force', False), out=options.get('out'))
        path = options.get('out') or engine.config.keyword_path
        if not written:
            self.stdout.write(f'Keyword file {path} exists ({len(keywords.keywords)} keywords); use --force')
            return
        if keywords.fallback:
            self.stderr.write(self.style.WARNING('Backend unavailable; wrote the seed keyword set'))
        self.stdout.write(self.style.SUCCESS(f'Wrote {len(keywords.keywords)} keywords to {path}'))
