"""
Train the segmentor.
Usage: python manage.py train --data DIR [--config FILE] [--out DIR] [key=value ...]
"""

from django.conf import settings

from segmentation import harness
from segmentation.config import load_config, parse_overrides

from ._base import ScribbleMixCommand


def process_defaults():
    """Environment-level defaults, below the config file and the command line."""
    return {
        'epochs': str(settings.SCRIBBLEMIX_EPOCHS),
        'data_dir': str(settings.SCRIBBLEMIX_DATA_DIR),
    }


class Command(ScribbleMixCommand):
    help = 'Train the segmentor on scribbles with mixing and consistency losses'

    def add_arguments(self, parser):
        parser.add_argument('--data', default=None, help='Dataset directory (overrides data_dir)')
        parser.add_argument('--config', default=None, help='key=value configuration file')
        parser.add_argument('--out', default='runs/train', help='Run output directory')
        parser.add_argument('overrides', nargs='*', help='key=value settings overriding the config file')

    def run(self, **options):
        overrides = parse_overrides(options['overrides'])
        if options['data']:
            overrides['data_dir'] = options['data']
        cfg = load_config(options['config'], overrides, process_defaults())

        self.banner(f"Training ({cfg.mix_strategy}, {cfg.epochs} epochs, seed {cfg.seed})")
        report = harness.train(cfg, options['out'])

        self.banner('✓ Training finished', self.style.SUCCESS)
        self.stdout.write(f"  Best epoch: {report.best_epoch}")
        self.stdout.write(f"  Val Dice:  {report.val.mean:.4f}")
        self.stdout.write(f"  Test Dice: {report.test.mean:.4f} ± {report.test.std:.4f}")
        self.stdout.write(f"  Outputs:   {options['out']}")
