"""
Generate a synthetic training dataset from the shape model.
"""
import dataclasses

from apps.pipeline.management.base import PipelineCommand
from apps.pipeline.services.pipeline import generate_dataset_cmd


class Command(PipelineCommand):
    help = 'Sample poses, render, filter and augment a synthetic dataset'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--count',
            type=int,
            default=None,
            help='Number of frames to accept (default: sampling.count)'
        )
        parser.add_argument(
            '--model',
            type=str,
            default=None,
            help='Shape model file (default: paths.model_file)'
        )
        parser.add_argument(
            '--no-augment',
            action='store_true',
            help='Write clean renders only'
        )

    def run(self, cfg, options):
        changes = {}
        if options['count']:
            changes['count'] = options['count']
        if options['no_augment']:
            changes['augment'] = False
        if changes:
            cfg = cfg.replace(sampling=dataclasses.replace(cfg.sampling, **changes))
        manifest = generate_dataset_cmd(cfg, model_path=options['model'])
        return (
            f"Dataset: {manifest['accepted']} of {manifest['requested']} frames written",
            {'accepted': manifest['accepted'], 'attempts': manifest['attempts'], 'output_dir': cfg.paths.output_dir},
        )
