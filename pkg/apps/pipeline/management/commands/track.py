"""
Register an ordered sequence of frames, chaining each result into the next frame.
"""
from apps.common.exceptions import ConfigError
from apps.pipeline.management.base import PipelineCommand, parse_pose
from apps.pipeline.services.pipeline import load_frames, track_sequence_cmd
from apps.pipeline.tasks import load_cached_model


class Command(PipelineCommand):
    help = 'Track a frame sequence with chained pose-shape refinement'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--frames',
            type=str,
            default=None,
            help='Directory of frame subdirectories, registered in name order (default: paths.masks_dir)'
        )
        parser.add_argument(
            '--init-pose',
            type=str,
            required=True,
            help='Initial pose of the first frame (JSON file or inline JSON)'
        )
        parser.add_argument(
            '--rigid-only',
            action='store_true',
            help='Keep the shape at the mean and optimize the pose only'
        )

    def run(self, cfg, options):
        frames_dir = options['frames'] or cfg.paths.masks_dir
        if not frames_dir:
            raise ConfigError('No frames directory given', errors={'frames': ['This path is required.']})
        frames = load_frames(frames_dir)
        if not frames:
            raise ConfigError(f"No frames found in {frames_dir}")
        model = load_cached_model(str(cfg.paths.model_path()))
        records = track_sequence_cmd(cfg, frames, parse_pose(options['init_pose']), model,
                                     rigid_only=options['rigid_only'])
        failed = [record.frame_id for record in records if not record.ok]
        return f'Tracked {len(records)} frames ({len(failed)} failed)', {'frames': len(records), 'failed': failed}
