"""
Shared base for the pipeline management commands.
"""
import dataclasses
import json
import logging

from django.core.management.base import BaseCommand, CommandError

from apps.common.exceptions import ConfigError, DeformRegError, custom_exception_handler
from apps.common.utils import dumps, read_json, success_response
from apps.pipeline.serializers import PoseSerializer, load_run_config

logger = logging.getLogger(__name__)


def parse_pose(value):
    """Pose from a JSON file path or an inline JSON object."""
    try:
        payload = json.loads(value) if value.lstrip().startswith('{') else read_json(value)
    except (OSError, ValueError) as e:
        raise ConfigError(f"Could not read pose '{value}': {e}")
    serializer = PoseSerializer(data=payload)
    if not serializer.is_valid():
        raise ConfigError('Invalid pose', errors=serializer.errors)
    return serializer.save()


class PipelineCommand(BaseCommand):
    """
    Loads the run configuration, applies ``--seed`` / ``--out`` and reports the
    outcome as a JSON payload. Subclasses implement :meth:`run`.
    """

    def add_arguments(self, parser):
        parser.add_argument(
            '--config',
            type=str,
            default=None,
            help='Run configuration JSON file (defaults apply when omitted)'
        )
        parser.add_argument(
            '--seed',
            type=int,
            default=None,
            help='Override the run and optimizer seed'
        )
        parser.add_argument(
            '--out',
            type=str,
            default=None,
            help='Override the output directory'
        )
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def load_config(self, options):
        cfg = load_run_config(options['config'])
        if options['seed'] is not None:
            cfg = cfg.replace(seed=options['seed'],
                              optimizer=dataclasses.replace(cfg.optimizer, seed=options['seed']))
        if options['out']:
            cfg = cfg.with_output_dir(options['out'])
        return cfg

    def run(self, cfg, options):
        raise NotImplementedError

    def handle(self, *args, **options):
        try:
            cfg = self.load_config(options)
            message, data = self.run(cfg, options)
        except DeformRegError as e:
            payload = custom_exception_handler(e, context=self.__module__.rsplit('.', 1)[-1])
            raise CommandError(f"{payload['message']}: {dumps(payload['errors'])}")

        self.stdout.write(dumps(success_response(message, data)))
        self.stdout.write(self.style.SUCCESS(message))
