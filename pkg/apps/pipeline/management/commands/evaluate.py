"""
Compare estimated frame records against ground truth.
"""
from pathlib import Path

from apps.common.utils import write_json
from apps.pipeline.management.base import PipelineCommand
from apps.pipeline.serializers import load_frame_records
from apps.pipeline.services.pipeline import evaluate_cmd
from apps.pipeline.tasks import load_cached_model


class Command(PipelineCommand):
    help = 'Target registration error and surface MSE of estimated records'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--records',
            type=str,
            required=True,
            help='Estimated records: a records directory or a sequence JSON file'
        )
        parser.add_argument(
            '--gt',
            type=str,
            required=True,
            help='Ground-truth records in the same layout'
        )
        parser.add_argument(
            '--tumor',
            type=float,
            nargs=3,
            required=True,
            metavar=('X', 'Y', 'Z'),
            help='Target point in canonical mesh coordinates (mm)'
        )

    def run(self, cfg, options):
        model = load_cached_model(str(cfg.paths.model_path()))
        metrics = evaluate_cmd(load_frame_records(options['records']), load_frame_records(options['gt']),
                               options['tumor'], model)
        path = write_json(Path(cfg.paths.output_dir) / 'metrics.json', metrics)
        median = metrics['tre_mm']['median']
        summary = 'n/a' if median is None else f'{median:.3f} mm'
        return f'Median TRE {summary}; metrics written to {path}', {
            'tre_mm': metrics['tre_mm'],
            'surface_mse_mm2': metrics['surface_mse_mm2'],
            'failed': metrics['failed'],
        }
