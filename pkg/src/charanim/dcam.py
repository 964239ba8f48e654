"""Dual consistency attention with optional mask-guided character/background split.

Generated frame ``i`` replaces self-attention in the up blocks by a weighted
sum of attentions against the anchor frame 0, the previous frame and itself.
With masks, each of those three attentions is computed twice, once on
character-masked keys/values and once on background-masked ones, and the two
fused results are recombined by the current frame's mask.
"""
import logging
from dataclasses import dataclass

import numpy as np
import torch

from .attention import cross_frame_attention
from .backend import site_filter
from .diffusion import ShapeError
from .kernels import nearest_resample

log = logging.getLogger(__name__)


class BankStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class FusionWeights:
    lambda1: float = 0.7   # anchor frame
    lambda2: float = 0.15  # previous frame
    lambda3: float = 0.15  # current frame

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3)
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValueError(f"fusion weights must lie in [0, 1], got {vals}")
        if abs(sum(vals) - 1.0) > 1e-9:
            raise ValueError(f"fusion weights must sum to 1, got {sum(vals)!r}")


@dataclass
class BodyMask:
    data: np.ndarray  # (h, w) uint8 in {0, 1}
    source: str = "cross_attention"

    def at(self, resolution):
        return nearest_resample(self.data, *resolution)


def dual_consistency_attention(q, anchor, previous, current, weights):
    """``l1 * CFA(q, anchor) + l2 * CFA(q, previous) + l3 * CFA(q, current)``.

    ``anchor``, ``previous``, ``current`` are ``(K, V)`` pairs.
    """
    return (weights.lambda1 * cross_frame_attention(q, *anchor)
            + weights.lambda2 * cross_frame_attention(q, *previous)
            + weights.lambda3 * cross_frame_attention(q, *current))


def _flat_mask(mask, n_tokens, like):
    m = torch.as_tensor(np.asarray(mask), dtype=like.dtype).reshape(-1)
    if m.numel() != n_tokens:
        raise ShapeError(f"mask has {m.numel()} cells but keys span {n_tokens} tokens")
    return m[:, None]


def masked_kv_split(k, v, mask):
    """Character and background copies of ``k, v``: ``(K_c, V_c, K_b, V_b)``."""
    m = _flat_mask(mask, k.shape[-2], k)
    return m * k, m * v, (1 - m) * k, (1 - m) * v


def mgdm_attention(q, anchor, previous, current, weights, masks, drop_masked_tokens=False):
    """Mask-decoupled dual consistency attention.

    ``masks`` holds the binary masks of (anchor, previous, current) frames at
    this site's resolution; the current frame's mask also selects which
    fused result each query position takes.
    """
    if any(m is None for m in masks):
        raise BankStateError("mask-guided attention needs masks for the anchor, previous and current frames")
    char, back = [], []
    for (k, v), m in zip((anchor, previous, current), masks):
        kc, vc, kb, vb = masked_kv_split(k, v, m)
        keep = None
        if drop_masked_tokens:
            keep = torch.as_tensor(np.asarray(m).reshape(-1) > 0)
        char.append(cross_frame_attention(q, kc, vc, key_mask=keep))
        back.append(cross_frame_attention(q, kb, vb, key_mask=None if keep is None else ~keep))
    w = (weights.lambda1, weights.lambda2, weights.lambda3)
    dca_c = w[0] * char[0] + w[1] * char[1] + w[2] * char[2]
    dca_b = w[0] * back[0] + w[1] * back[1] + w[2] * back[2]
    m_cur = _flat_mask(masks[2], q.shape[-2], q)
    return m_cur * dca_c + (1 - m_cur) * dca_b


# --- masks ------------------------------------------------------------------

def extract_body_mask(maps, threshold=0.35, target_resolution=(8, 8), token_indices=None,
                      block_kind="up", min_resolution=16):
    """Binary character mask from cross-attention maps.

    ``maps`` is the dict returned by ``collect_cross_attention_maps``.  Uses
    ``block_kind`` cross sites whose shorter side is at least
    ``min_resolution``, or the finest such sites when none qualify.  The
    per-site token-averaged maps are brought to a common grid, averaged,
    min-max normalised and thresholded (``>= threshold``).  A constant map
    yields an all-zero mask.
    """
    sites = [s for s in maps if s.attention_kind == "cross" and (block_kind is None or s.block_kind == block_kind)]
    if not sites:
        raise ValueError("no cross-attention maps for the requested blocks")
    big = [s for s in sites if min(s.spatial_resolution) >= min_resolution]
    if not big:
        finest = max(s.spatial_resolution[0] * s.spatial_resolution[1] for s in sites)
        big = [s for s in sites if s.spatial_resolution[0] * s.spatial_resolution[1] == finest]
    big.sort(key=lambda s: (s.block_kind, s.layer_index))
    grid = max((s.spatial_resolution for s in big), key=lambda r: r[0] * r[1])
    acc = np.zeros(grid, dtype=np.float64)
    for s in big:
        m = maps[s].detach().cpu().numpy().astype(np.float64)
        if m.ndim == 3:
            m = m.mean(axis=0)
        if token_indices is not None:
            m = m[:, list(token_indices)]
        if m.shape[-1] == 0:
            raise ValueError("empty subject token set")
        acc += nearest_resample(m.mean(axis=-1).reshape(s.spatial_resolution), *grid)
    acc /= len(big)
    lo, hi = acc.min(), acc.max()
    if not hi > lo:
        log.warning("cross-attention map is constant; mask is empty")
        binary = np.zeros(grid, dtype=np.uint8)
    else:
        binary = ((acc - lo) / (hi - lo) >= threshold).astype(np.uint8)
    return BodyMask(nearest_resample(binary, *target_resolution), "cross_attention")


def load_body_mask(path, target_resolution):
    """Segmentation mask from a PNG/PGM file (nonzero = character)."""
    from PIL import Image

    arr = np.asarray(Image.open(path).convert("L"))
    return BodyMask(nearest_resample((arr > 0).astype(np.uint8), *target_resolution), "segmentation_file")


# --- bank and processor -----------------------------------------------------

class AttentionBank:
    """Keys/values (and masks) of the anchor frame and the previous frame, per site and branch."""

    def __init__(self):
        self.anchor = {}
        self.previous = {}
        self._staged = {}
        self.anchor_mask = None
        self.previous_mask = None
        self.current_mask = None
        self._staged_mask = None

    def entry(self, key):
        if key not in self.anchor or key not in self.previous:
            site, branch = key
            raise BankStateError(f"attention bank is empty for site {site.name} ({branch} branch)")
        return self.anchor[key], self.previous[key]

    def store_anchor(self, key, k, v):
        self.anchor[key] = (k, v)
        self.previous[key] = (k, v)

    def stage(self, key, k, v):
        self._staged[key] = (k, v)

    def set_anchor_mask(self, mask):
        self.anchor_mask = self.previous_mask = self.current_mask = mask

    def commit(self):
        """The frame just processed becomes the previous frame."""
        self.previous.update(self._staged)
        self._staged.clear()
        self.previous_mask = self.current_mask

    def clear(self):
        self.__init__()


class DualConsistencyProcessor:
    """Attention processor driven by the generation loop.

    ``mode = "anchor"`` computes plain attention and records frame 0's keys
    and values; ``mode = "fuse"`` applies dual consistency (or mask-guided)
    attention using the bank; ``mode = "bypass"`` is plain attention that
    leaves the bank alone.  ``branch`` separates guidance branches.
    """

    def __init__(self, weights=None, mgdm=False, drop_masked_tokens=False, bank=None):
        self.weights = weights or FusionWeights()
        self.mgdm = mgdm
        self.drop_masked_tokens = drop_masked_tokens
        self.bank = bank or AttentionBank()
        self.mode = "anchor"
        self.branch = "cond"

    def _mask(self, mask, site):
        return None if mask is None else mask.at(site.spatial_resolution)

    def __call__(self, site, q, k, v):
        if self.mode == "bypass":
            return cross_frame_attention(q, k, v)
        key = (site, self.branch)
        if self.mode == "anchor":
            self.bank.store_anchor(key, k, v)
            return cross_frame_attention(q, k, v)
        anchor, previous = self.bank.entry(key)
        self.bank.stage(key, k, v)
        if not self.mgdm:
            return dual_consistency_attention(q, anchor, previous, (k, v), self.weights)
        b = self.bank
        masks = [self._mask(m, site) for m in (b.anchor_mask, b.previous_mask, b.current_mask)]
        return mgdm_attention(q, anchor, previous, (k, v), self.weights, masks, self.drop_masked_tokens)


@dataclass(frozen=True)
class WiringPlan:
    frame_index: int
    sites: tuple

    def install(self, backend, processor):
        chosen = set(self.sites)
        return backend.install_attention_processor(lambda s: s in chosen, processor)


REPLACED_SITES = site_filter(block_kind="up", attention_kind="self")


def frame_generation_attention_schedule(frame_index, backend, match=REPLACED_SITES):
    """Sites whose self-attention is replaced while generating ``frame_index``.

    Frame 0 is a plain reconstruction and gets an empty plan.
    """
    if frame_index < 0:
        raise ValueError("frame index must be non-negative")
    if frame_index == 0:
        return WiringPlan(0, ())
    return WiringPlan(frame_index, tuple(s for s in backend.list_attention_sites() if match(s)))
