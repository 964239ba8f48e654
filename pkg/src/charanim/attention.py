"""Scaled dot-product attention shared by the backend and the fusion processors."""
import torch

from .diffusion import ShapeError


def cross_frame_attention(q, k, v, key_mask=None):
    """``softmax(q k^T / sqrt(d)) v`` for (..., Lq, d) queries against (..., Lk, d) keys.

    With ``q`` from one frame and ``k, v`` from another this is cross-frame
    attention; with all three from the same frame it is ordinary
    self-attention.  ``key_mask`` (Lk,) bool drops keys from the softmax;
    rows with no surviving key return zeros.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"incompatible attention shapes q{tuple(q.shape)} k{tuple(k.shape)} v{tuple(v.shape)}")
    return attention_probs(q, k, key_mask) @ v


def attention_probs(q, k, key_mask=None):
    scores = q @ k.transpose(-1, -2) / q.shape[-1] ** 0.5
    if key_mask is None:
        return scores.softmax(dim=-1)
    if not bool(key_mask.any()):
        return torch.zeros_like(scores)
    scores = scores.masked_fill(~key_mask, float("-inf"))
    return scores.softmax(dim=-1)
