"""
Register the shape model to one frame of contour masks.
"""
from apps.pipeline.management.base import PipelineCommand, parse_pose
from apps.pipeline.services.pipeline import refine_cmd
from apps.pipeline.tasks import load_cached_model
from apps.rendering.services.image_io import read_frame, read_rgb_png


class Command(PipelineCommand):
    help = 'Pose-shape refinement of a single frame'

    def add_command_arguments(self, parser):
        parser.add_argument(
            '--masks',
            type=str,
            required=True,
            help='Frame directory holding the contour channel PNGs'
        )
        parser.add_argument(
            '--init-pose',
            type=str,
            required=True,
            help='Initial pose as a JSON file or inline {"rotation": [..], "translation": [..]}'
        )
        parser.add_argument(
            '--rigid-only',
            action='store_true',
            help='Keep the shape at the mean and optimize the pose only'
        )
        parser.add_argument(
            '--frame-id',
            type=str,
            default=None,
            help='Frame id for the record (default: masks directory name)'
        )
        parser.add_argument(
            '--background',
            type=str,
            default=None,
            help='Background image for the overlay PNG'
        )

    def run(self, cfg, options):
        masks, manifest = read_frame(options['masks'])
        frame_id = options['frame_id'] or manifest.get('frame_id') or options['masks'].rstrip('/').split('/')[-1]
        model = load_cached_model(str(cfg.paths.model_path()))
        background = read_rgb_png(options['background']) if options['background'] else None
        record = refine_cmd(cfg, parse_pose(options['init_pose']), masks, model,
                            rigid_only=options['rigid_only'], frame_id=frame_id, background=background)
        return f"Registered {frame_id}: cost {record.metrics['cost']:.4f}", record.as_dict()
