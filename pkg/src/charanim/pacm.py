"""Pose-aware embedding optimisation.

Stage 1 (pose-aware inversion) tunes the prompt's conditional embedding at
every timestep so that guided DDIM sampling under the source pose retraces
the inversion trajectory of the source latent.  Stage 2 starts every target
frame from those embeddings and the same noisy latent, samples under the
frame's own pose, and pulls each step back toward the source trajectory.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import cfg_combine, ddim_invert, ddim_step
from .pose import Pose, rasterize_pose

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    def __init__(self, message, timestep=None, frame=None):
        where = ", ".join(f"{k} {v}" for k, v in (("frame", frame), ("timestep", timestep)) if v is not None)
        super().__init__(f"{message} ({where})" if where else message)
        self.timestep = timestep
        self.frame = frame


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float = 1e-2
    inner_iterations: int = 5
    early_stop_loss: float = 1e-5

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"learning rate must be positive, got {self.eta}")
        if self.inner_iterations < 1:
            raise ValueError(f"inner_iterations must be >= 1, got {self.inner_iterations}")


@dataclass
class OptimizationReport:
    initial_loss: dict = field(default_factory=dict)
    final_loss: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def total_iterations(self):
        return sum(self.iterations.values())

    def to_dict(self):
        return {
            "timesteps": [int(t) for t in self.initial_loss],
            "initial_loss": [float(v) for v in self.initial_loss.values()],
            "final_loss": [float(v) for v in self.final_loss.values()],
            "iterations": [int(v) for v in self.iterations.values()],
            "total_iterations": self.total_iterations,
        }


@dataclass
class EmbeddingSchedule:
    frame_index: int
    per_timestep: dict
    provenance: str
    report: OptimizationReport = None

    def __getitem__(self, t):
        return self.per_timestep[t]

    def stacked(self, timesteps):
        return torch.stack([self.per_timestep[int(t)] for t in timesteps])


def sample_step(backend, z_t, t, embedding, pose, schedule, guidance, uncond_eps=None, uncond=None):
    """One guided DDIM step from ``t`` with ``embedding`` on the conditional branch."""
    eps_c = backend.predict_noise(z_t, t, embedding, pose)
    if guidance != 1.0:
        if uncond_eps is None:
            with torch.no_grad():
                uncond_eps = backend.predict_noise(z_t, t, uncond, pose)
        eps_c = cfg_combine(uncond_eps, eps_c, guidance)
    return ddim_step(z_t, eps_c, t, schedule.previous(t), schedule)


def step_loss(backend, z_t, t, target, embedding, pose, schedule, guidance, uncond):
    """Mean squared distance between a sampled step and its target latent."""
    z = sample_step(backend, z_t, t, embedding, pose, schedule, guidance, uncond=uncond)
    return torch.mean((z - target) ** 2)


def _optimize_timestep(backend, z_t, t, target, init, pose, schedule, guidance, uncond, opt, frame):
    with torch.no_grad():
        uncond_eps = backend.predict_noise(z_t, t, uncond, pose) if guidance != 1.0 else None
    emb = init.detach().clone().requires_grad_(True)
    adam = torch.optim.Adam([emb], lr=opt.eta)
    n = opt.inner_iterations
    first = best_loss = None
    best_emb = best_z = None
    steps = 0
    for k in range(n + 1):
        last = k == n
        with torch.set_grad_enabled(not last):
            z = sample_step(backend, z_t, t, emb, pose, schedule, guidance, uncond_eps=uncond_eps)
            loss = torch.mean((z - target) ** 2)
        value = float(loss.detach())
        if not np.isfinite(value):
            raise OptimizationError("loss diverged", timestep=t, frame=frame)
        if first is None:
            first = value
        if best_loss is None or value < best_loss:
            best_loss, best_emb, best_z = value, emb.detach().clone(), z.detach()
        if last or value < opt.early_stop_loss:
            break
        adam.zero_grad()
        if loss.requires_grad:
            loss.backward()
        else:
            emb.grad = torch.zeros_like(emb)
        adam.step()
        steps += 1
    return best_emb, best_z, first, best_loss, steps


def _level_index(schedule):
    return {t: i for i, t in enumerate(schedule.levels)}


def _run_chain(backend, trajectory, init_embeddings, pose, schedule, guidance, uncond, opt, frame):
    level = _level_index(schedule)
    report = OptimizationReport()
    out = {}
    start = time.perf_counter()
    z = trajectory[-1]
    for t in schedule.timestep_map:
        t = int(t)
        target = trajectory[level[schedule.previous(t)]]
        emb, z, first, best, steps = _optimize_timestep(
            backend, z, t, target, init_embeddings[t], pose, schedule, guidance, uncond, opt, frame)
        out[t] = emb
        report.initial_loss[t] = first
        report.final_loss[t] = best
        report.iterations[t] = steps
    report.wall_time = time.perf_counter() - start
    return out, report


def pose_aware_inversion(source_latent, source_pose, prompt_embedding, backend, schedule, opt=None,
                         uncond_embedding=None, guidance=7.5, inversion_guidance=1.0):
    """Stage 1: per-timestep conditional embeddings that reconstruct the source.

    Returns ``(embeddings, trajectory)`` where ``trajectory`` is the DDIM
    inversion ``[Z_0, ..., Z_S]`` and ``embeddings.report`` holds the losses.
    """
    opt = opt or OptimizerConfig()
    if uncond_embedding is None:
        uncond_embedding = backend.embed_prompt("")[0]
    trajectory = ddim_invert(source_latent, backend, prompt_embedding, source_pose, schedule,
                             guidance=inversion_guidance, uncond_embedding=uncond_embedding)
    # every timestep starts from the previous timestep's optimum (t = T from the prompt)
    per_t = {}
    report = OptimizationReport()
    level = _level_index(schedule)
    start = time.perf_counter()
    z = trajectory[-1]
    current = prompt_embedding.detach().to(torch.float64)
    for t in schedule.timestep_map:
        t = int(t)
        target = trajectory[level[schedule.previous(t)]]
        current, z, first, best, steps = _optimize_timestep(
            backend, z, t, target, current, source_pose, schedule, guidance, uncond_embedding, opt, None)
        per_t[t] = current
        report.initial_loss[t] = first
        report.final_loss[t] = best
        report.iterations[t] = steps
    report.wall_time = time.perf_counter() - start
    log.info("pose-aware inversion: %d inner iterations, final loss %.3g",
             report.total_iterations, report.final_loss[int(schedule.timestep_map[-1])])
    return EmbeddingSchedule(0, per_t, "source_optimized", report), trajectory


def optimize_frame(frame_index, source_schedule, trajectory, pose_image, backend, schedule, opt=None,
                   uncond_embedding=None, guidance=7.5):
    """Stage 2 for one frame: start from the source embeddings and ``Z_T``."""
    opt = opt or OptimizerConfig()
    if uncond_embedding is None:
        uncond_embedding = backend.embed_prompt("")[0]
    try:
        per_t, report = _run_chain(backend, trajectory, source_schedule.per_timestep, pose_image, schedule,
                                   guidance, uncond_embedding, opt, frame_index)
    except OptimizationError:
        raise
    except Exception as e:
        raise OptimizationError(f"frame optimisation failed: {e}", frame=frame_index) from e
    return EmbeddingSchedule(frame_index, per_t, "pose_aware", report)


def _conditioning(pose, backend, joint_radius=None, limb_width=None):
    if isinstance(pose, Pose):
        size = backend.image_size
        scale = size / 512.0
        r = joint_radius if joint_radius is not None else max(1.0, 4.0 * scale)
        lw = limb_width if limb_width is not None else max(1.0, 4.0 * scale)
        return rasterize_pose(pose, size, size, joint_radius=r, limb_width=lw)
    return pose


def optimize_pose_aware_embeddings(source_schedule, trajectory, target_poses, backend, schedule, opt=None,
                                   uncond_embedding=None, guidance=7.5, jobs=1, order=None):
    """Stage 2 for every target pose; frame ``i`` (1-based) uses ``target_poses[i - 1]``.

    Frames are independent; ``jobs > 1`` runs them on a thread pool and
    ``order`` only changes the processing order, never the results.
    """
    poses = [_conditioning(p, backend) for p in target_poses]
    if uncond_embedding is None:
        uncond_embedding = backend.embed_prompt("")[0]
    frames = list(range(1, len(poses) + 1)) if order is None else list(order)

    def work(i):
        log.info("pose-aware optimisation: frame %d", i)
        return optimize_frame(i, source_schedule, trajectory, poses[i - 1], backend, schedule, opt,
                              uncond_embedding, guidance)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = dict(zip(frames, pool.map(work, frames)))
    else:
        results = {i: work(i) for i in frames}
    return [results[i] for i in sorted(results)]
