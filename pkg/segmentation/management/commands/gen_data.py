"""
Generate the synthetic rings dataset.
Usage: python manage.py gen_data --out DIR --n N --size S --seed K [--coverage a,b,c,d]
"""

from django.conf import settings

from segmentation import data
from segmentation.exceptions import ConfigError

from ._base import ScribbleMixCommand


def parse_coverage(text):
    try:
        values = tuple(float(v) for v in text.split(','))
    except ValueError as exc:
        raise ConfigError({'coverage': [f"cannot parse {text!r}."]}) from exc
    if len(values) != data.NUM_CLASSES or not all(0 < v < 1 for v in values):
        raise ConfigError({'coverage': [f"expected {data.NUM_CLASSES} fractions in (0, 1), got {text!r}."]})
    return values


class Command(ScribbleMixCommand):
    help = 'Generate the synthetic cardiac-rings dataset with scribble annotations'

    def add_arguments(self, parser):
        parser.add_argument('--out', default=str(settings.SCRIBBLEMIX_DATA_DIR), help='Output directory')
        parser.add_argument('--n', type=int, default=200, help='Number of samples')
        parser.add_argument('--size', type=int, default=settings.SCRIBBLEMIX_IMAGE_SIZE, help='Image side in pixels')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument(
            '--coverage',
            default=','.join(str(v) for v in data.DEFAULT_COVERAGE),
            help='Per-class scribble coverage targets (background,RV,MYO,LV)',
        )

    def run(self, **options):
        coverage = parse_coverage(options['coverage'])
        entries = data.build_dataset(
            options['out'],
            n=options['n'],
            size=options['size'],
            seed=options['seed'],
            coverage_targets=coverage,
        )
        counts = {split: sum(1 for e in entries if e.split == split) for split in data.SPLITS}
        self.banner('✓ Dataset generated', self.style.SUCCESS)
        self.stdout.write(f"  Location: {options['out']}")
        self.stdout.write('  Splits: ' + ', '.join(f"{split}={count}" for split, count in counts.items()))
