"""
Celery tasks for the frame-parallel pipeline stages.

Task arguments are plain JSON values (paths and dicts) so they can travel to workers.
"""
import logging
from functools import lru_cache

from celery import group, shared_task
from django.conf import settings

from apps.augmentation.services.augment import AugmentConfig
from apps.common.exceptions import DeformRegError
from apps.meshes.services.mesh_core import RigidPose, load_mesh, save_mesh
from apps.meshes.services.nicp import NicpConfig
from apps.pipeline.services.pipeline import fit_corpus_mesh, render_dataset_frame
from apps.pipeline.services.run_config import FrameStatus
from apps.rendering.services.camera_render import CameraIntrinsics
from apps.shape_models.services.shape_model import load_model

logger = logging.getLogger(__name__)


@lru_cache(maxsize=4)
def load_cached_model(path):
    return load_model(path)


@lru_cache(maxsize=4)
def load_cached_mesh(path):
    return load_mesh(path)


def run_tasks(task, arguments):
    """
    Run ``task`` once per argument tuple and return the results in order.

    Eager mode runs in-process; otherwise the calls go to workers as one group.
    """
    arguments = list(arguments)
    if not arguments:
        return []
    if getattr(settings, 'CELERY_TASK_ALWAYS_EAGER', True):
        return [task.apply(args=args).get() for args in arguments]
    return group(task.s(*args) for args in arguments).apply_async().get()


@shared_task
def fit_corpus_mesh_task(canonical_path, mesh_path, nicp_payload, out_path, require_watertight=False):
    """
    Fit the canonical mesh to one corpus mesh and write the result to ``out_path``.
    """
    try:
        fitted = fit_corpus_mesh(load_cached_mesh(canonical_path), mesh_path,
                                 NicpConfig.from_dict(nicp_payload), require_watertight)
    except DeformRegError as e:
        logger.error(f"Failed to fit corpus mesh {mesh_path}: {e.message}", exc_info=True)
        return {'status': FrameStatus.FAILED, 'path': None, 'error': e.message}
    if fitted is None:
        return {'status': FrameStatus.FAILED, 'path': None, 'error': 'not watertight'}
    save_mesh(fitted, out_path)
    return {'status': FrameStatus.OK, 'path': out_path, 'error': None}


@shared_task
def render_dataset_frame_task(model_path, camera, pose, alpha, index, frame_dir, min_contour_types,
                              augment_payload=None, seed=0):
    """
    Render, filter and augment one sampled dataset frame.
    """
    augment_cfg = AugmentConfig.from_dict(augment_payload) if augment_payload is not None else None
    return render_dataset_frame(
        load_cached_model(model_path),
        CameraIntrinsics.from_dict(camera),
        RigidPose.from_dict(pose),
        alpha,
        index,
        frame_dir,
        min_contour_types,
        augment_cfg=augment_cfg,
        seed=seed,
    )
