"""
Fit the canonical mesh to the corpus and build the statistical shape model.
"""
import dataclasses

from apps.pipeline.management.base import PipelineCommand
from apps.pipeline.services.pipeline import build_shape_model_cmd


class Command(PipelineCommand):
    help = 'Build the statistical shape model from a mesh corpus'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--components',
            type=int,
            default=None,
            help='Number of principal components (default: from the run configuration)'
        )

    def run(self, cfg, options):
        if options['components']:
            cfg = cfg.replace(shape_model=dataclasses.replace(cfg.shape_model, components=options['components']))
        path = build_shape_model_cmd(cfg)
        return f'Shape model written to {path}', {'model_file': str(path)}
