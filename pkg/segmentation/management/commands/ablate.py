"""
Run the ablation matrix.
Usage: python manage.py ablate --data DIR --rows 1-5 --seeds 3 --out DIR [--workers N] [--check] [key=value ...]
"""

from django.conf import settings

from segmentation import harness
from segmentation.config import load_config, parse_overrides

from ._base import ScribbleMixCommand
from .train import process_defaults


class Command(ScribbleMixCommand):
    help = 'Train every configuration of the ablation matrix over several seeds and compare test Dice'

    def add_arguments(self, parser):
        parser.add_argument('--data', default=None, help='Dataset directory')
        parser.add_argument('--rows', default='1-5', help="Rows to run, e.g. '1-5' or '1,5'")
        parser.add_argument('--seeds', type=int, default=3)
        parser.add_argument('--out', default='runs/ablation')
        parser.add_argument('--config', default=None, help='Base key=value configuration file')
        parser.add_argument('--workers', type=int, default=settings.SCRIBBLEMIX_WORKERS)
        parser.add_argument('--check', action='store_true', help='Exit with code 3 unless the desk-scale thresholds hold')
        parser.add_argument('overrides', nargs='*', help='key=value settings for the base configuration')

    def run(self, **options):
        rows = harness.parse_rows(options['rows'])
        overrides = parse_overrides(options['overrides'])
        if options['data']:
            overrides['data_dir'] = options['data']
        base = load_config(options['config'], overrides, process_defaults())

        self.banner(f"Ablation rows {rows}, {options['seeds']} seed(s), {base.epochs} epochs")
        report = harness.ablate(
            base, rows, options['seeds'], options['out'],
            workers=options['workers'],
            check=options['check'],
        )

        stds = report.row_stds()
        for row, mean in report.row_means().items():
            self.stdout.write(f"  #{row}  test Dice {mean:.4f} ± {stds[row]:.4f}")
        self.stdout.write(f"  Results: {options['out']}")

        if report.check_passed is False:
            self.check_failed('ablation acceptance thresholds not met')
        if report.check_passed:
            self.banner('✓ Ablation acceptance check passed', self.style.SUCCESS)
