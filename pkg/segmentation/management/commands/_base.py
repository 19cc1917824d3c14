"""
Shared plumbing for the segmentation management commands.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 failed acceptance check.
"""

import logging
import sys

from django.core.management.base import BaseCommand, CommandError

from segmentation.exceptions import ConfigError, ScribbleMixError

logger = logging.getLogger('segmentation.commands')

EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CHECK_FAILED = 3
BANNER = '=' * 60


def _usage_error(parser, message):
    if parser.called_from_command_line:
        parser.print_usage(sys.stderr)
        parser.exit(EXIT_USAGE, f"{parser.prog}: error: {message}\n")
    raise CommandError(f"Error: {message}", returncode=EXIT_USAGE)


class ScribbleMixCommand(BaseCommand):
    """Subclasses implement `run(**options)` instead of `handle`."""

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        parser.error = lambda message: _usage_error(parser, message)
        return parser

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except ConfigError as exc:
            self.stderr.write(self.style.ERROR('Invalid configuration:'))
            for key, messages in exc.errors.items():
                self.stderr.write(f"  {key}: {' '.join(messages)}")
            raise CommandError(str(exc), returncode=EXIT_USAGE) from exc
        except ScribbleMixError as exc:
            logger.error(f"{self.__module__.rsplit('.', 1)[-1]} failed: {exc}")
            raise CommandError(str(exc), returncode=EXIT_RUNTIME) from exc

    def run(self, **options):
        raise NotImplementedError('subclasses of ScribbleMixCommand must provide a run() method')

    def banner(self, title, style=None):
        style = style or self.style.WARNING
        self.stdout.write(style(BANNER))
        self.stdout.write(style(title))
        self.stdout.write(style(BANNER))

    def check_failed(self, message):
        self.banner(f"✗ FAILED: {message}", self.style.ERROR)
        raise CommandError(message, returncode=EXIT_CHECK_FAILED)
