"""
Write a preview of one mixed training pair.
Usage: python manage.py mix_demo --data DIR --out DIR --seed K --strategy puzzle
"""

from django.conf import settings

from segmentation import harness
from segmentation.config import MIX_STRATEGIES, load_config, parse_overrides

from ._base import ScribbleMixCommand


class Command(ScribbleMixCommand):
    help = 'Mix two training samples and write NST tensors, PGM previews and the mix plan'

    def add_arguments(self, parser):
        parser.add_argument('--data', default=str(settings.SCRIBBLEMIX_DATA_DIR))
        parser.add_argument('--out', default='runs/mix_demo')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--strategy', default='puzzle', choices=MIX_STRATEGIES)
        parser.add_argument('--ckpt', default=None, help='Checkpoint used for saliency (random init otherwise)')
        parser.add_argument('overrides', nargs='*', help='key=value settings, e.g. block_size=4')

    def run(self, **options):
        cfg = load_config(None, parse_overrides(options['overrides']))
        result = harness.mix_demo(
            options['data'], options['out'],
            seed=options['seed'],
            strategy=options['strategy'],
            cfg=cfg,
            checkpoint=options['ckpt'],
        )
        self.banner(f"✓ Mix preview ({options['strategy']}) written", self.style.SUCCESS)
        for path in result.files:
            self.stdout.write(f"  {path}")
