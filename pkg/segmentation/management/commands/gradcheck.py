"""
Finite-difference gradient checks.
Usage: python manage.py gradcheck [--seed K] [--instances N] [--tolerance T] [case ...]
"""

from segmentation.exceptions import ConfigError
from segmentation.gradcheck import CASES, DEFAULT_INSTANCES, DEFAULT_TOLERANCE, run_gradcheck

from ._base import ScribbleMixCommand


class Command(ScribbleMixCommand):
    help = 'Compare autodiff gradients of every op and loss with central differences'

    def add_arguments(self, parser):
        parser.add_argument('cases', nargs='*', help='Case names (all by default)')
        parser.add_argument('--seed', type=int, default=0)
        parser.add_argument('--instances', type=int, default=DEFAULT_INSTANCES)
        parser.add_argument('--tolerance', type=float, default=DEFAULT_TOLERANCE)

    def run(self, **options):
        unknown = [name for name in options['cases'] if name not in CASES]
        if unknown:
            raise ConfigError({'cases': [f"unknown case(s): {', '.join(unknown)}."]})
        rows = run_gradcheck(
            options['cases'] or None,
            seed=options['seed'],
            instances=options['instances'],
            tolerance=options['tolerance'],
        )

        self.banner('Gradient check')
        width = max(len(row.name) for row in rows)
        for row in rows:
            status = self.style.SUCCESS('✓ pass') if row.passed else self.style.ERROR('✗ FAIL')
            self.stdout.write(f"  {row.name:<{width}}  {row.error:.3e}  {status}")

        failed = [row.name for row in rows if not row.passed]
        if failed:
            self.check_failed(f"{len(failed)} case(s) above tolerance: {', '.join(failed)}")
        self.banner(f"✓ All {len(rows)} cases below {options['tolerance']:g}", self.style.SUCCESS)
