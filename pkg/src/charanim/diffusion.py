"""Noise schedules and deterministic DDIM arithmetic.

The update functions are written against plain arithmetic so they accept
numpy arrays and torch tensors alike; schedule tables are float64 and are
read out as Python floats.
"""
import hashlib
import json
from dataclasses import dataclass

import numpy as np

CLEAN = -1  # timestep sentinel for the noise-free latent (alpha_bar = 1)


class ScheduleError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    timestep_map: np.ndarray  # descending inference timesteps

    @property
    def train_steps(self):
        return len(self.betas)

    @property
    def inference_steps(self):
        return len(self.timestep_map)

    def alpha_bar(self, t):
        if t == CLEAN:
            return 1.0
        return float(self.alpha_bars[t])

    def previous(self, t):
        """The timestep the sampler moves to from ``t`` (``CLEAN`` after the last)."""
        pos = self._position(t)
        return int(self.timestep_map[pos + 1]) if pos + 1 < len(self.timestep_map) else CLEAN

    def _position(self, t):
        hits = np.nonzero(self.timestep_map == t)[0]
        if len(hits) == 0:
            raise ScheduleError(f"timestep {t} is not an inference timestep")
        return int(hits[0])

    @property
    def levels(self):
        """Trajectory timesteps from clean to noisiest: ``[CLEAN, t_min, ..., t_max]``."""
        return [CLEAN] + [int(t) for t in self.timestep_map[::-1]]

    def digest(self):
        payload = json.dumps({
            "kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end,
            "train_steps": self.train_steps, "timesteps": [int(t) for t in self.timestep_map],
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def make_schedule(kind="scaled_linear", beta_start=0.00085, beta_end=0.012, train_steps=1000,
                  inference_steps=50):
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if not 1 <= inference_steps <= train_steps:
        raise ScheduleError(f"need 1 <= inference_steps <= train_steps, got {inference_steps}, {train_steps}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, train_steps, dtype=np.float64)
    elif kind == "scaled_linear":
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, train_steps, dtype=np.float64) ** 2
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    stride = train_steps // inference_steps
    timestep_map = (np.arange(inference_steps, dtype=np.int64) * stride)[::-1].copy()
    for a in (betas, alphas, alpha_bars, timestep_map):
        a.setflags(write=False)
    return NoiseSchedule(kind, float(beta_start), float(beta_end), betas, alphas, alpha_bars, timestep_map)


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(z0, t, noise, schedule):
    """Noise a clean latent straight to timestep ``t``."""
    _check_shapes(z0, noise)
    ab = schedule.alpha_bar(t)
    return ab ** 0.5 * z0 + (1.0 - ab) ** 0.5 * noise


def predict_z0(z_t, eps, t, schedule):
    _check_shapes(z_t, eps)
    ab = schedule.alpha_bar(t)
    return (z_t - (1.0 - ab) ** 0.5 * eps) / ab ** 0.5


def ddim_transfer(z, eps, t_from, t_to, schedule):
    """Move a latent between noise levels along the eta = 0 DDIM path."""
    ab_to = schedule.alpha_bar(t_to)
    return ab_to ** 0.5 * predict_z0(z, eps, t_from, schedule) + (1.0 - ab_to) ** 0.5 * eps


def ddim_step(z_t, eps, t, t_prev, schedule):
    """One denoising step from ``t`` to the less noisy ``t_prev`` (or ``CLEAN``)."""
    if t == CLEAN or (t_prev != CLEAN and t_prev >= t):
        raise ScheduleError(f"DDIM step must go to a smaller timestep: {t} -> {t_prev}")
    return ddim_transfer(z_t, eps, t, t_prev, schedule)


def cfg_combine(eps_uncond, eps_cond, scale):
    _check_shapes(eps_uncond, eps_cond)
    if scale == 1.0:
        return eps_cond
    if scale == 0.0:
        return eps_uncond
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_invert(z0, denoiser, embedding, pose, schedule, guidance=1.0, uncond_embedding=None):
    """Run DDIM backwards from the clean latent, returning ``[Z_0, ..., Z_S]``.

    The noise used to climb from one level to the next is predicted at the
    destination timestep from the current latent.
    """
    import torch

    levels = schedule.levels
    traj = [z0]
    z = z0
    with torch.no_grad():
        for t_from, t_to in zip(levels[:-1], levels[1:]):
            try:
                eps = guided_noise(denoiser, z, t_to, embedding, pose, guidance, uncond_embedding)
            except Exception as e:
                raise RuntimeError(f"denoiser failed during inversion at timestep {t_to}: {e}") from e
            z = ddim_transfer(z, eps, t_from, t_to, schedule)
            traj.append(z)
    return traj


def guided_noise(denoiser, z, t, cond, pose, guidance, uncond=None, **kw):
    """Classifier-free guided noise prediction; one network call when ``guidance == 1``."""
    eps_c = denoiser.predict_noise(z, t, cond, pose, **kw)
    if guidance == 1.0:
        return eps_c
    if uncond is None:
        raise ValueError("guidance != 1 needs an unconditional embedding")
    eps_u = denoiser.predict_noise(z, t, uncond, pose, **kw)
    return cfg_combine(eps_u, eps_c, guidance)


def ddim_sample(z_T, denoiser, embeddings, pose, schedule, guidance=1.0, uncond_embedding=None,
                start=None):
    """Deterministic sampling from the noisiest level; ``embeddings`` maps timestep -> embedding
    (or is a single tensor used at every step)."""
    import torch

    z = z_T
    with torch.no_grad():
        for t in schedule.timestep_map[(0 if start is None else start):]:
            t = int(t)
            emb = embeddings[t] if isinstance(embeddings, dict) else embeddings
            eps = guided_noise(denoiser, z, t, emb, pose, guidance, uncond_embedding)
            z = ddim_step(z, eps, t, schedule.previous(t), schedule)
    return z
