"""End-to-end animation: pose alignment, inversion, embedding optimisation,
fused-attention generation and export."""
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backend import make_backend, site_filter, token_indices_for
from .config import ConfigError
from .dcam import (REPLACED_SITES, DualConsistencyProcessor, extract_body_mask,
                   load_body_mask)
from .diffusion import cfg_combine, ddim_step
from .pacm import (EmbeddingSchedule, optimize_pose_aware_embeddings,
                   pose_aware_inversion)
from .pose import build_target_sequence, parse_pose_file, rasterize_pose

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage, cause, frame=None, timestep=None):
        where = "".join(f", {k} {v}" for k, v in (("frame", frame), ("timestep", timestep)) if v is not None)
        super().__init__(f"stage {stage!r} failed{where}: {cause}")
        self.stage = stage
        self.frame = frame
        self.timestep = timestep


@dataclass
class RunManifest:
    config_hash: str
    schedule_hash: str
    backend_seed: int
    frames: int
    outputs: list = field(default_factory=list)
    reports: dict = field(default_factory=dict)
    anchor_reconstruction_error: float = None
    stage_times: dict = field(default_factory=dict)

    def to_dict(self):
        """Deterministic content; wall times live in ``timings.json``."""
        return {
            "version": __version__,
            "config_hash": self.config_hash,
            "schedule_hash": self.schedule_hash,
            "backend_seed": self.backend_seed,
            "frames": self.frames,
            "anchor_reconstruction_error": self.anchor_reconstruction_error,
            "optimization": self.reports,
            "outputs": list(self.outputs),
        }


# --- generation -------------------------------------------------------------

def generate_frames(backend, schedule, z_T, embeddings, pose_images, prompt_embedding, null_embedding,
                    guidance=7.5, weights=None, dcam=True, mgdm=False, source_mask=None,
                    subject_indices=(), mask_threshold=0.35, mask_block="up", mask_min_resolution=16,
                    head_mean=True, drop_masked_tokens=True, role="conditional", site_match=REPLACED_SITES):
    """Denoise every frame from ``z_T``, frames advancing together one timestep at a time.

    ``embeddings[i]`` maps timestep -> optimised embedding for frame ``i``
    (frame 0 uses the source embeddings).  Frame 0 runs plain attention and
    fills the anchor bank; later frames use fused attention at the sites
    selected by ``site_match``.  Returns the final latents of all frames.
    """
    n = len(pose_images)
    sites = [s for s in backend.list_attention_sites() if site_match(s)] if dcam else []
    processor = DualConsistencyProcessor(weights, mgdm=mgdm, drop_masked_tokens=drop_masked_tokens)
    bank = processor.bank
    chosen = set(sites)
    handle = backend.install_attention_processor(lambda s: s in chosen, processor) if sites else None
    res = backend.latent_shape[1:]
    latents = [z_T.clone() for _ in range(n)]
    try:
        for t in schedule.timestep_map:
            t = int(t)
            t_prev = schedule.previous(t)
            for i in range(n):
                emb = embeddings[i][t]
                cond, uncond = (emb, null_embedding) if role == "conditional" else (prompt_embedding, emb)
                z = latents[i]
                with torch.no_grad():
                    if mgdm and sites:
                        if i == 0 and source_mask is not None:
                            mask = source_mask
                        else:
                            processor.mode = "bypass"
                            maps = backend.collect_cross_attention_maps(z, t, cond, pose_images[i], subject_indices,
                                                                        head_mean=head_mean)
                            mask = extract_body_mask(maps, mask_threshold, res, block_kind=mask_block,
                                                     min_resolution=mask_min_resolution)
                        if i == 0:
                            bank.set_anchor_mask(mask)
                        else:
                            bank.current_mask = mask
                    processor.mode = "anchor" if i == 0 else "fuse"
                    processor.branch = "cond"
                    eps = backend.predict_noise(z, t, cond, pose_images[i])
                    if guidance != 1.0:
                        processor.branch = "uncond"
                        eps_u = backend.predict_noise(z, t, uncond, pose_images[i])
                        eps = cfg_combine(eps_u, eps, guidance)
                    latents[i] = ddim_step(z, eps, t, t_prev, schedule)
                if i > 0:
                    bank.commit()
    finally:
        if handle is not None:
            handle.remove()
    return latents


# --- persistence ------------------------------------------------------------

def save_embedding_cache(path, meta, z_T, schedules, timesteps):
    arr = np.stack([s.stacked(timesteps).numpy() for s in schedules])
    tmp = Path(str(path) + ".tmp.npz")
    np.savez(tmp, meta=np.array(json.dumps(meta, sort_keys=True)), z_T=z_T.numpy(),
             embeddings=arr, timesteps=np.asarray(timesteps, dtype=np.int64))
    tmp.replace(path)


def load_embedding_cache(path, meta):
    """``(z_T, schedules)`` if the cache matches ``meta``, else ``None``."""
    try:
        with np.load(path) as data:
            stored = json.loads(str(data["meta"]))
            if stored != json.loads(json.dumps(meta, sort_keys=True)):
                log.info("embedding cache %s does not match this run; recomputing", path)
                return None
            z_T = torch.tensor(data["z_T"])
            emb = data["embeddings"]
            ts = [int(t) for t in data["timesteps"]]
    except (OSError, KeyError, ValueError) as e:
        log.warning("cannot read embedding cache %s: %s", path, e)
        return None
    scheds = [EmbeddingSchedule(i, {t: torch.tensor(emb[i, k]) for k, t in enumerate(ts)},
                                "source_optimized" if i == 0 else "pose_aware")
              for i in range(emb.shape[0])]
    return z_T, scheds


def export_frames(images, out_dir, pose_images=None, overlay=False, files=None):
    """Write ``frame_%04d.png`` per image (and ``pose_sheet.png`` when ``overlay``).

    Names are appended to ``files`` as they are written, so a caller can
    clean up after a failure part-way through.
    """
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [] if files is None else files
    for i, img in enumerate(images):
        p = out / f"frame_{i:04d}.png"
        try:
            Image.fromarray(np.asarray(img)).save(p)
        except OSError as e:
            raise OSError(f"cannot write {p}: {e}") from e
        files.append(p.name)
    if overlay and images:
        p = out / "pose_sheet.png"
        Image.fromarray(overlay_sheet(images, pose_images)).save(p)
        files.append(p.name)
    return files


def overlay_sheet(images, pose_images=None):
    """Frames side by side as RGB tiles with the pose skeleton drawn over each."""
    tiles = []
    for i, img in enumerate(images):
        img = np.asarray(img)
        rgb = np.repeat(img[..., None], 3, axis=2) if img.ndim == 2 else img[..., :3].copy()
        if pose_images is not None:
            pose = np.asarray(pose_images[i])
            if pose.shape[:2] != rgb.shape[:2]:
                from .kernels import nearest_resample
                pose = np.stack([nearest_resample(pose[..., c], *rgb.shape[:2]) for c in range(3)], axis=-1)
            drawn = pose.any(axis=2)
            rgb[drawn] = pose[drawn]
        tiles.append(rgb)
    return np.concatenate(tiles, axis=1)


# --- orchestration ----------------------------------------------------------

def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def run_pipeline(config, pose_override=None):
    """Run every stage and write frames plus ``manifest.json``.

    ``pose_override`` (tests) replaces the pose file by ``(source_pose, desired_poses)``.
    """
    from PIL import Image

    if not config.image or (not config.pose and pose_override is None):
        raise ConfigError("image and pose files are required")
    if config.mgdm_enabled and config.dcam_enabled and not config.subject_tokens:
        raise ConfigError("mgdm.enabled needs subject tokens (--subject-tokens) naming the character")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    times = {}
    stage = "setup"
    clock = time.perf_counter()

    def lap(name):
        nonlocal clock
        now = time.perf_counter()
        times[name] = now - clock
        clock = now
        log.info("stage %s done in %.2fs", name, times[name])

    try:
        stage = "pose_alignment"
        if pose_override is not None:
            source_pose, desired = pose_override
        else:
            seq = parse_pose_file(config.pose)
            if seq.source is not None:
                source_pose, desired = seq.source, list(seq.poses)
            else:
                source_pose, desired = seq.poses[0], list(seq.poses[1:])
        t = config.transition_frames
        n_frames = config.frames
        m = n_frames - 1 - t
        if n_frames > 1 and m < 1:
            raise ConfigError(f"frames ({n_frames}) must be at least pata.transition_frames + 2 ({t + 2})")
        if n_frames > 1:
            if len(desired) < m:
                log.warning("pose file holds %d target poses, %d requested; producing %d frames",
                            len(desired), m, len(desired) + t + 1)
                m = len(desired)
            if m < 1:
                raise ConfigError("pose file holds no target poses")
            targets = build_target_sequence(source_pose, desired[:m], t, easing=config.easing,
                                            allow_rotation=config.allow_rotation,
                                            per_frame=config.per_frame_alignment).poses
        else:
            targets = [source_pose]
        n_frames = len(targets)
        lap(stage)

        stage = "encode"
        backend = make_backend(config.backend_kind, seed=config.seed, cond_scale=config.cond_scale)
        size = backend.image_size
        scale = size / 512.0
        pose_images = [rasterize_pose(p, size, size, joint_radius=max(1.0, config.joint_radius * scale),
                                      limb_width=max(1.0, config.limb_width * scale)) for p in targets]
        z0 = backend.encode_image(Image.open(config.image))
        prompt_emb, tokens = backend.embed_prompt(config.prompt)
        null_emb, _ = backend.embed_prompt("")
        schedule = config.schedule()
        subject = ()
        if config.mgdm_enabled and config.dcam_enabled:
            try:
                subject = token_indices_for(tokens, config.subject_tokens)
            except KeyError as e:
                raise ConfigError(str(e.args[0])) from None
        source_mask = None
        if config.source_mask:
            source_mask = load_body_mask(config.source_mask, backend.latent_shape[1:])
        lap(stage)

        stage = "pacm"
        meta = {"config_hash": config.digest(), "schedule_hash": schedule.digest(), "seed": config.seed,
                "frames": n_frames}
        cached = None
        if config.embedding_cache and Path(config.embedding_cache).is_file():
            cached = load_embedding_cache(config.embedding_cache, meta)
        reports = {}
        if cached is not None:
            z_T, schedules = cached
            log.info("reusing embeddings from %s", config.embedding_cache)
        else:
            opt = config.optimizer
            source_sched, trajectory = pose_aware_inversion(
                z0, pose_images[0], prompt_emb, backend, schedule, opt, null_emb,
                guidance=config.generation_guidance, inversion_guidance=config.inversion_guidance)
            frame_scheds = optimize_pose_aware_embeddings(
                source_sched, trajectory, pose_images[1:], backend, schedule, opt, null_emb,
                guidance=config.generation_guidance, jobs=config.jobs)
            z_T = trajectory[-1]
            schedules = [source_sched, *frame_scheds]
            reports = {str(s.frame_index): s.report.to_dict() for s in schedules}
            if config.embedding_cache:
                save_embedding_cache(config.embedding_cache, meta, z_T, schedules, schedule.timestep_map)
        lap(stage)

        stage = "generation"
        latents = generate_frames(
            backend, schedule, z_T, [s.per_timestep for s in schedules], pose_images, prompt_emb, null_emb,
            guidance=config.generation_guidance, weights=config.weights, dcam=config.dcam_enabled,
            mgdm=config.mgdm_enabled, source_mask=source_mask, subject_indices=subject,
            mask_threshold=config.mask_threshold, mask_block=config.mask_sites,
            mask_min_resolution=config.mask_min_resolution, head_mean=config.head_mean,
            drop_masked_tokens=config.drop_masked_tokens, role=config.pacm_role)
        anchor_err = float((latents[0] - z0).abs().max())
        # the first frame is the source itself; its denoising pass only fed the anchor bank
        latents[0] = z0
        lap(stage)

        stage = "export"
        images = [backend.decode_latent(z) for z in latents]
        export_frames(images, out, pose_images, overlay=True, files=written)
        manifest = RunManifest(meta["config_hash"], meta["schedule_hash"], config.seed, n_frames,
                               outputs=list(written), reports=reports, anchor_reconstruction_error=anchor_err)
        np.save(out / "latents.npy", torch.stack(latents).numpy())
        written.append("latents.npy")
        manifest.outputs = list(written) + ["manifest.json", "timings.json"]
        lap(stage)
        manifest.stage_times = dict(times)
        (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True))
        (out / "timings.json").write_text(json.dumps(times, indent=2, sort_keys=True))
        return manifest
    except ConfigError:
        raise
    except StageError:
        raise
    except Exception as e:
        if not config.keep_partial:
            for name in written:
                (out / name).unlink(missing_ok=True)
        raise StageError(stage, e, frame=getattr(e, "frame", None), timestep=getattr(e, "timestep", None)) from e
