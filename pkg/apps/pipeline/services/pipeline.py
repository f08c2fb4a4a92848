"""
End-to-end orchestration: corpus fitting and model build, synthetic dataset
generation, pose-shape refinement, sequence tracking, evaluation and overlays.

Frame-parallel stages dispatch through :func:`apps.pipeline.tasks.run_tasks`.
"""
import dataclasses
import logging
from pathlib import Path

import numpy as np

from apps.common.exceptions import ConfigError, CorpusSizeError, DeformRegError, FrameMismatchError
from apps.common.utils import frame_rng, sanitize_filename, write_json
from apps.common.validators import MESH_EXTENSIONS
from apps.meshes.services.mesh_core import RigidPose, apply_pose, load_mesh, rigid_icp
from apps.meshes.services.nicp import nicp_register
from apps.pipeline.services.run_config import FrameRecord, FrameStatus
from apps.registration.services.cmaes_opt import minimize
from apps.registration.services.objective import (
    RegistrationObjective,
    channel_hausdorff,
    join_parameters,
    split_parameters,
    surface_mse,
    target_registration_error,
)
from apps.rendering.services.camera_render import render_full, render_overlay
from apps.rendering.services.image_io import read_frame, read_rgb_png, write_frame, write_rgb_png
from apps.shape_models.services.shape_model import build_model, eval_shape, save_model

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
FULL_CONTOUR_TYPES = 3
# Second entropy word of the split stream; frame streams use [seed, frame index].
SPLIT_STREAM = 2 ** 31 - 1


# ---------------------------------------------------------------------------
# Shape model
# ---------------------------------------------------------------------------

def corpus_files(corpus_dir):
    return sorted(path for path in Path(corpus_dir).iterdir() if path.suffix.lower() in MESH_EXTENSIONS)


def prealign_and_fit(canonical, target, nicp_cfg):
    """Rigidly align ``target`` to ``canonical``, then deform the canonical onto it."""
    pose = rigid_icp(target, canonical)
    aligned = apply_pose(target, pose)
    return nicp_register(canonical, aligned, nicp_cfg)


def fit_corpus_mesh(canonical, path, nicp_cfg, require_watertight=False):
    """
    Corresponded copy of the corpus mesh at ``path``, or None when the watertight
    filter rejects it.
    """
    target = load_mesh(path)
    if require_watertight and not target.to_trimesh().is_watertight:
        logger.warning(f"Skipping {Path(path).name}: mesh is not watertight")
        return None
    fitted = prealign_and_fit(canonical, target, nicp_cfg)
    logger.info(f"Fitted canonical mesh to {Path(path).name}")
    return fitted


def build_shape_model_cmd(cfg):
    """
    Fit the canonical mesh to every corpus mesh and build the PCA model.

    Returns the path of the written model file.
    """
    from apps.pipeline.serializers import require_paths
    from apps.pipeline.tasks import fit_corpus_mesh_task, run_tasks

    paths = require_paths(cfg, 'canonical_mesh', 'corpus_dir')
    K = cfg.shape_model.components
    files = corpus_files(paths['corpus_dir'])
    if len(files) < K + 1:
        raise CorpusSizeError(
            f"Corpus has {len(files)} meshes; at least {K + 1} are needed for K={K}",
            corpus_size=len(files), components=K,
        )

    canonical = load_mesh(paths['canonical_mesh'])
    fitted_dir = Path(cfg.paths.output_dir) / 'registered'
    nicp_payload = dataclasses.asdict(cfg.nicp)
    results = run_tasks(fit_corpus_mesh_task, [
        (str(paths['canonical_mesh']), str(path), nicp_payload,
         str(fitted_dir / f'{path.stem}.ply'), cfg.shape_model.require_watertight)
        for path in files
    ])

    survivors = [(path, result['path']) for path, result in zip(files, results) if result['status'] == FrameStatus.OK]
    skipped = len(files) - len(survivors)
    if skipped:
        logger.warning(f"{skipped} of {len(files)} corpus meshes were skipped")
    if len(survivors) < K:
        raise CorpusSizeError(
            f"Only {len(survivors)} corpus meshes survived fitting; K={K}",
            corpus_size=len(survivors), components=K,
        )

    registered = [load_mesh(fitted) for _, fitted in survivors]
    model = build_model(canonical, registered, K=K, names=[path.name for path, _ in survivors])
    return save_model(model, cfg.paths.model_path())


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def sample_pose(base_pose, sampling, rng):
    """Pose drawn uniformly within the sampling ranges around ``base_pose``."""
    half = np.array([sampling.translation_mm] * 3 + [sampling.rotation_deg] * 3)
    return RigidPose.from_vector(base_pose.as_vector() + rng.uniform(-half, half))


def sample_shape(K, sampling, rng):
    if not sampling.sample_shape:
        return np.zeros(K)
    return rng.uniform(-1.0, 1.0, K)


def frame_name(index):
    return f'frame_{index:06d}'


def render_dataset_frame(model, cam, pose, alpha, index, frame_dir, min_contour_types,
                         augment_cfg=None, seed=0):
    """
    Render one sampled frame; write it only when enough contour types are visible.

    Acceptance looks at the clean render; augmentation is applied afterwards.
    """
    label_set = render_full(eval_shape(model, alpha), pose, cam)
    types = label_set.contour_types()
    if types < min_contour_types:
        logger.debug(f"Rejected sample {index}: {types} contour types visible")
        return {'index': index, 'accepted': False, 'contour_types': types}

    counts = label_set.channel_counts()
    if augment_cfg is not None:
        label_set = augment_frame_images(label_set, augment_cfg, frame_rng(seed, index))
    write_frame(frame_dir, label_set, pose=pose, cam=cam,
                extra={'shape': [float(a) for a in alpha], 'frame_id': Path(frame_dir).name})
    return {
        'index': index,
        'accepted': True,
        'contour_types': types,
        'counts': counts,
    }


def augment_frame_images(label_set, augment_cfg, rng):
    from apps.augmentation.services.augment import augment_frame

    return augment_frame(label_set, augment_cfg, rng)


def split_frames(frame_ids, val_fraction, seed):
    """Deterministic train/val split of ``frame_ids``."""
    order = np.random.default_rng([int(seed), SPLIT_STREAM]).permutation(len(frame_ids))
    n_val = int(round(len(frame_ids) * val_fraction))
    val = sorted(frame_ids[i] for i in order[:n_val])
    train = sorted(frame_ids[i] for i in order[n_val:])
    return {'train': train, 'val': val}


def generate_dataset_cmd(cfg, model_path=None):
    """
    Sample poses around the base pose, render, filter, augment and write frames.

    Returns the manifest dict (also written to ``<output_dir>/manifest.json``).
    """
    from apps.pipeline.tasks import load_cached_model, render_dataset_frame_task, run_tasks

    model_path = Path(model_path or cfg.paths.model_path())
    model = load_cached_model(str(model_path))
    sampling = cfg.sampling
    cam = cfg.camera
    out = Path(cfg.paths.output_dir)
    frames_dir = out / 'frames'

    base_types = render_full(model.neutral_mesh(), sampling.base_pose, cam).contour_types()
    if base_types < FULL_CONTOUR_TYPES:
        logger.warning(f"Only {base_types} contour types are visible at the base pose")

    rng = np.random.default_rng(cfg.seed)
    augment_payload = dataclasses.asdict(cfg.augmentation) if sampling.augment else None
    accepted = []
    attempts = 0
    while len(accepted) < sampling.count and attempts < sampling.max_attempts:
        batch = min(sampling.count - len(accepted), sampling.max_attempts - attempts)
        samples = []
        for _ in range(batch):
            pose = sample_pose(sampling.base_pose, sampling, rng)
            alpha = sample_shape(model.K, sampling, rng)
            samples.append((attempts, pose, alpha))
            attempts += 1
        results = run_tasks(render_dataset_frame_task, [
            (str(model_path), cam.as_dict(), pose.as_dict(), alpha.tolist(), index,
             str(frames_dir / frame_name(index)), sampling.min_contour_types, augment_payload, cfg.seed)
            for index, pose, alpha in samples
        ])
        for (index, pose, alpha), result in zip(samples, results):
            if result['accepted']:
                accepted.append({
                    'frame_id': frame_name(index),
                    'path': f'frames/{frame_name(index)}',
                    'pose': pose.as_dict(),
                    'shape': alpha.tolist(),
                    'counts': result['counts'],
                })
        logger.info(f"Dataset: {len(accepted)}/{sampling.count} frames accepted after {attempts} samples")

    if len(accepted) < sampling.count:
        logger.warning(
            f"Rejection cap reached: {len(accepted)} of {sampling.count} frames accepted "
            f"after {attempts} samples"
        )

    frame_ids = [frame['frame_id'] for frame in accepted]
    manifest = {
        'seed': cfg.seed,
        'requested': sampling.count,
        'accepted': len(accepted),
        'attempts': attempts,
        'base_pose': sampling.base_pose.as_dict(),
        'translation_mm': sampling.translation_mm,
        'rotation_deg': sampling.rotation_deg,
        'min_contour_types': sampling.min_contour_types,
        'augmented': sampling.augment,
        'intrinsics': cam.as_dict(),
        'frames': accepted,
        'split': split_frames(frame_ids, sampling.val_fraction, cfg.seed),
    }
    write_json(out / MANIFEST_NAME, manifest)
    return manifest


# ---------------------------------------------------------------------------
# Refinement and tracking
# ---------------------------------------------------------------------------

def refine(cfg, init_pose, masks, model, rigid_only=False, init_shape=None, map_fn=None):
    """
    Pose-shape refinement by restarted CMA-ES inside a fixed box around ``init_pose``.

    Restarts continue from the best point so far until the translation update drops
    below ``refinement.translation_update_mm`` or the restart cap is reached.
    Returns ``(pose, alpha, metrics)``.
    """
    spec = cfg.refinement
    K = 0 if rigid_only else model.K
    objective = RegistrationObjective(model, masks, cfg.camera)
    bounds = spec.bounds(init_pose, K)

    alpha0 = np.zeros(K)
    if init_shape is not None and K:
        alpha0 = np.clip(np.asarray(init_shape, dtype=np.float64)[:K], -spec.shape_bound, spec.shape_bound)
    theta = join_parameters(init_pose, alpha0)
    best = initial = objective(theta)
    evaluations = 1
    restarts = 0
    reason = None
    for restart in range(spec.max_outer_iterations):
        opt_cfg = dataclasses.replace(cfg.optimizer, bounds=bounds, seed=cfg.optimizer.seed + restart)
        result = minimize(objective, theta, opt_cfg, map_fn=map_fn)
        restarts += 1
        evaluations += result.evaluations
        step = float(np.linalg.norm(result.x_best[:3] - theta[:3]))
        if result.f_best <= best:
            theta, best = result.x_best, result.f_best
        reason = result.termination_reason
        logger.debug(f"Restart {restart}: cost {best:.4f}, translation update {step:.3f} mm")
        if step < spec.translation_update_mm:
            break

    pose, alpha = split_parameters(theta, model.K)
    logger.info(f"Refinement: cost {initial:.4f} -> {best:.4f} after {restarts} restarts")
    metrics = {
        'cost': float(best),
        'initial_cost': float(initial),
        'restarts': restarts,
        'evaluations': evaluations,
        'termination_reason': reason,
        'rigid_only': bool(rigid_only),
    }
    return pose, alpha, metrics


def write_record(record, out_dir):
    path = Path(out_dir) / 'records' / f'{sanitize_filename(record.frame_id)}.json'
    write_json(path, record.as_dict())
    return path


def write_overlay(model, cam, pose, alpha, path, background=None):
    rendered = render_full(eval_shape(model, alpha), pose, cam)
    return write_rgb_png(path, render_overlay(rendered, background=background))


def refine_cmd(cfg, init_pose, masks, model, rigid_only=False, frame_id='frame', init_shape=None,
               background=None, out_dir=None, map_fn=None):
    """
    Register one frame and write its FrameRecord and overlay PNG under ``out_dir``.
    """
    out_dir = Path(out_dir or cfg.paths.output_dir)
    pose, alpha, metrics = refine(cfg, init_pose, masks, model, rigid_only=rigid_only,
                                  init_shape=init_shape, map_fn=map_fn)
    rendered = render_full(eval_shape(model, alpha), pose, cfg.camera)
    metrics['channel_hausdorff'] = channel_hausdorff(rendered, masks)

    overlay = out_dir / 'overlays' / f'{sanitize_filename(frame_id)}.png'
    write_rgb_png(overlay, render_overlay(rendered, background=background))
    record = FrameRecord(
        frame_id=frame_id,
        pose=pose,
        shape=tuple(float(a) for a in alpha),
        images={'overlay': str(overlay)},
        metrics=metrics,
    )
    write_record(record, out_dir)
    return record


def load_frames(frames_dir):
    """Ordered ``(frame_id, masks)`` pairs from the frame subdirectories of ``frames_dir``."""
    frames = []
    for directory in sorted(path for path in Path(frames_dir).iterdir() if path.is_dir()):
        label_set, _ = read_frame(directory)
        frames.append((directory.name, label_set))
    return frames


def track_sequence_cmd(cfg, frames, init_pose, model, rigid_only=False, out_dir=None, init_shape=None):
    """
    Refine each frame in order, starting every frame from the previous optimum.
    The first frame starts from ``init_pose`` and ``init_shape`` (mean shape when None).

    A failed frame gets a ``failed`` record and the chain continues from the last
    successful estimate.
    """
    out_dir = Path(out_dir or cfg.paths.output_dir)
    pose = init_pose
    shape = None if init_shape is None else np.asarray(init_shape, dtype=np.float64)
    records = []
    for frame_id, masks in frames:
        try:
            record = refine_cmd(cfg, pose, masks, model, rigid_only=rigid_only, frame_id=frame_id,
                                init_shape=shape, out_dir=out_dir)
        except DeformRegError as exc:
            logger.error(f"Frame {frame_id} failed: {exc.message}", exc_info=True)
            record = FrameRecord(frame_id=frame_id, pose=pose, shape=tuple(shape if shape is not None else ()),
                                 status=FrameStatus.FAILED, error=exc.message)
            write_record(record, out_dir)
        else:
            pose, shape = record.pose, np.asarray(record.shape)
        records.append(record)
    failed = sum(1 for record in records if not record.ok)
    logger.info(f"Tracked {len(records)} frames ({failed} failed)")
    write_json(out_dir / 'sequence.json', {'frames': [record.as_dict() for record in records]})
    return records


# ---------------------------------------------------------------------------
# Evaluation and overlays
# ---------------------------------------------------------------------------

def _summary(values):
    if not values:
        return {'mean': None, 'median': None}
    return {'mean': float(np.mean(values)), 'median': float(np.median(values))}


def _check_shape_lengths(records, K, source):
    for frame_id in sorted(records):
        count = len(records[frame_id].shape)
        if count != K:
            raise ConfigError(
                f"Frame {frame_id} {source} has {count} shape coefficients; the model has K={K}",
                frame_id=frame_id, expected=K, got=count,
            )


def evaluate_cmd(records, gt, tumor, model):
    """
    Per-frame TRE of ``tumor`` (canonical coordinates) and pose surface MSE, with
    mean and median over the successful frames.
    """
    estimates = {record.frame_id: record for record in records}
    truths = {record.frame_id: record for record in gt}
    missing = sorted(set(estimates) ^ set(truths))
    if missing:
        raise FrameMismatchError(f"Frame ids do not match: {', '.join(missing)}", missing=missing)
    _check_shape_lengths(truths, model.K, 'ground truth')
    _check_shape_lengths({i: r for i, r in estimates.items() if r.ok}, model.K, 'estimate')

    neutral = model.neutral_mesh()
    identity = RigidPose.identity()
    frames, failed = [], []
    for frame_id in sorted(truths):
        estimate, truth = estimates[frame_id], truths[frame_id]
        if not estimate.ok:
            failed.append(frame_id)
            continue
        tre = target_registration_error(tumor, truth.pose, np.asarray(truth.shape), estimate.pose,
                                        np.asarray(estimate.shape), model)
        mse = surface_mse(neutral, identity, truth.pose, estimate.pose)
        frames.append({'frame_id': frame_id, 'tre_mm': tre, 'surface_mse_mm2': mse})

    metrics = {
        'frames': frames,
        'failed': failed,
        'tre_mm': _summary([frame['tre_mm'] for frame in frames]),
        'surface_mse_mm2': _summary([frame['surface_mse_mm2'] for frame in frames]),
    }
    logger.info(f"Evaluated {len(frames)} frames: median TRE {metrics['tre_mm']['median']}")
    return metrics


def render_overlay_cmd(record, model, cam, out_path, background=None):
    """Overlay PNG of the estimate in ``record``; ``background`` is an image path."""
    image = read_rgb_png(background) if background else None
    return write_overlay(model, cam, record.pose, np.asarray(record.shape), out_path, background=image)
