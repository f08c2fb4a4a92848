"""
Write an overlay PNG for a frame record.
"""
from pathlib import Path

from apps.common.exceptions import ConfigError
from apps.common.utils import sanitize_filename
from apps.pipeline.management.base import PipelineCommand
from apps.pipeline.serializers import load_frame_records
from apps.pipeline.services.pipeline import render_overlay_cmd
from apps.pipeline.tasks import load_cached_model


class Command(PipelineCommand):
    help = 'Render the estimate of a frame record over a background image'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--record',
            type=str,
            required=True,
            help='Frame record JSON file'
        )
        parser.add_argument(
            '--background',
            type=str,
            default=None,
            help='Background image (grey canvas when omitted)'
        )

    def run(self, cfg, options):
        records = load_frame_records(options['record'])
        if len(records) != 1:
            raise ConfigError(f"Expected one record in {options['record']}, found {len(records)}")
        record = records[0]
        model = load_cached_model(str(cfg.paths.model_path()))
        out = Path(cfg.paths.output_dir) / 'overlays' / f'{sanitize_filename(record.frame_id)}.png'
        path = render_overlay_cmd(record, model, cfg.camera, out, background=options['background'])
        return f'Overlay written to {path}', {'overlay': str(path)}
