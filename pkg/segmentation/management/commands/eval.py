"""
Evaluate a checkpoint on one split.
Usage: python manage.py eval --ckpt FILE --data DIR --split test --report FILE
"""

from django.conf import settings

from segmentation import data, harness

from ._base import ScribbleMixCommand


class Command(ScribbleMixCommand):
    help = 'Per-class Dice of a checkpoint against the dense masks of a split'

    def add_arguments(self, parser):
        parser.add_argument('--ckpt', required=True, help='Checkpoint file')
        parser.add_argument('--data', default=str(settings.SCRIBBLEMIX_DATA_DIR), help='Dataset directory')
        parser.add_argument('--split', default='test', choices=data.SPLITS)
        parser.add_argument('--report', default=None, help='CSV file with one row per image')

    def run(self, **options):
        table = harness.evaluate(options['ckpt'], options['data'], options['split'], options['report'])

        self.banner(f"Dice on {options['split']} ({len(table.ids)} images)", self.style.SUCCESS)
        for name, mean, std in zip(table.class_names, table.per_class_mean, table.per_class_std):
            self.stdout.write(f"  {name:<6} {mean:.4f} ± {std:.4f}")
        self.stdout.write(f"  {'mean':<6} {table.mean:.4f} ± {table.std:.4f}")
        if options['report']:
            self.stdout.write(f"  Report: {options['report']}")
