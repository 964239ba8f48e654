"""Noise-prediction backends.

A backend predicts noise for a latent given a timestep, a text embedding and
a rasterised pose, and exposes its attention layers as labelled sites where
custom processors can be swapped in.  ``ToyDenoiser`` is a small seeded
network with the same conditioning topology as a pose-conditioned latent
U-Net (text through cross-attention, pose through additive features), fast
enough to run whole pipelines in tests.
"""
import abc
import hashlib
import itertools
import logging
import threading
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .attention import attention_probs, cross_frame_attention

log = logging.getLogger(__name__)

BLOCK_KINDS = ("down", "mid", "up")
ATTENTION_KINDS = ("self", "cross")


class BackendError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class AttentionSite:
    block_kind: str
    layer_index: int
    attention_kind: str
    spatial_resolution: tuple

    @property
    def name(self):
        return f"{self.block_kind}{self.layer_index}.{self.attention_kind}"


def site_filter(block_kind=None, attention_kind=None, min_resolution=None):
    """Predicate matching sites by block, attention kind and minimum side length."""
    def match(site):
        if block_kind is not None and site.block_kind not in _as_set(block_kind):
            return False
        if attention_kind is not None and site.attention_kind not in _as_set(attention_kind):
            return False
        if min_resolution is not None and min(site.spatial_resolution) < min_resolution:
            return False
        return True
    return match


def _as_set(v):
    return {v} if isinstance(v, str) else set(v)


def default_processor(site, q, k, v):
    return cross_frame_attention(q, k, v)


class ProcessorHandle:
    """Returned by ``install_attention_processor``; ``remove()`` undoes the install."""

    def __init__(self, backend, uid, sites, warning=None):
        self._backend = backend
        self._uid = uid
        self.sites = tuple(sites)
        self.warning = warning
        self.active = True

    def remove(self):
        if self.active:
            self._backend._uninstall(self._uid)
            self.active = False

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.remove()


class DenoiserBackend(abc.ABC):
    latent_shape: tuple
    embedding_shape: tuple
    image_size: int

    def __init__(self):
        self._lock = threading.RLock()
        self._stacks = {}
        self._uids = itertools.count()

    @abc.abstractmethod
    def list_attention_sites(self):
        ...

    @abc.abstractmethod
    def _forward(self, latent, t, embedding, pose, maps=None):
        ...

    def predict_noise(self, latent, t, embedding, pose):
        """Noise prediction of ``latent``'s shape.  Differentiable in ``embedding``."""
        return self._forward(latent, t, embedding, pose)

    def install_attention_processor(self, match, processor):
        sites = [s for s in self.list_attention_sites() if match(s)]
        with self._lock:
            uid = next(self._uids)
            for s in sites:
                self._stacks.setdefault(s, []).append((uid, processor))
        warning = None
        if not sites:
            warning = "attention processor matched no sites"
            log.warning(warning)
        return ProcessorHandle(self, uid, sites, warning)

    def _uninstall(self, uid):
        with self._lock:
            for s in list(self._stacks):
                self._stacks[s] = [e for e in self._stacks[s] if e[0] != uid]
                if not self._stacks[s]:
                    del self._stacks[s]

    def processor_for(self, site):
        stack = self._stacks.get(site)
        return stack[-1][1] if stack else default_processor

    def collect_cross_attention_maps(self, latent, t, embedding, pose, token_indices, head_mean=True):
        """Cross-attention probabilities per cross site, columns restricted to ``token_indices``.

        Each value is (query_positions, len(token_indices)) when ``head_mean``
        else (heads, query_positions, len(token_indices)).
        """
        n_tokens = self.embedding_shape[0]
        token_indices = list(token_indices)
        bad = [i for i in token_indices if not 0 <= i < n_tokens]
        if bad:
            raise IndexError(f"token indices {bad} outside [0, {n_tokens})")
        maps = {}
        with torch.no_grad():
            self._forward(latent, t, embedding, pose, maps=maps)
        out = {}
        for site, probs in maps.items():
            sel = probs[..., token_indices]
            out[site] = sel.mean(dim=0) if head_mean else sel
        return out

    # image/text plumbing used by the pipeline
    @abc.abstractmethod
    def encode_image(self, image):
        ...

    @abc.abstractmethod
    def decode_latent(self, latent):
        ...

    @abc.abstractmethod
    def embed_prompt(self, text):
        """Return ``(embedding, tokens)`` for a prompt string."""


class AdapterBackend(DenoiserBackend):
    """Placeholder for pretrained latent-diffusion + pose-control weights.

    The interface is the one above; no weights ship with this package.
    """

    def __new__(cls, *args, **kwargs):
        raise BackendError("the pretrained-weights adapter is not bundled; use backend.kind = toy")


# --- toy backend ------------------------------------------------------------

TOY_TOKENS = 8
TOY_EMBED_DIM = 32


def _word_vector(word, dim):
    seed = int.from_bytes(hashlib.sha256(word.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).standard_normal(dim)


def tokenize(text, n_tokens=TOY_TOKENS):
    words = text.lower().replace(",", " ").replace(".", " ").split()
    tokens = ["<bos>", *words[: n_tokens - 2], "<eos>"]
    return tokens + ["<pad>"] * (n_tokens - len(tokens))


def toy_prompt_embedding(text, n_tokens=TOY_TOKENS, dim=TOY_EMBED_DIM):
    """Deterministic stand-in for a text encoder: hashed word vectors plus positions."""
    tokens = tokenize(text, n_tokens)
    pos = np.random.default_rng(7).standard_normal((n_tokens, dim)) * 0.1
    emb = np.stack([_word_vector(w, dim) for w in tokens]) + pos
    return torch.tensor(emb, dtype=torch.float64), tokens


def token_indices_for(tokens, words):
    """Positions of ``words`` in a token list; unknown words raise ``KeyError``."""
    out = []
    for w in words:
        hits = [i for i, tok in enumerate(tokens) if tok == w.lower()]
        if not hits:
            raise KeyError(f"subject token {w!r} does not occur in the prompt")
        out.extend(hits)
    return sorted(set(out))


class ToyImageCodec:
    """Fixed linear codec between a 64x64 grayscale image and a 4x8x8 latent.

    The basis is the 16x16 block of lowest 2-D DCT frequencies, mixed by a
    seeded random rotation, so its rows are orthonormal and decoding gives a
    low-pass copy of the image.  Latents are scaled by ``scaling`` to stay
    near unit variance.
    """

    def __init__(self, seed=1234, latent_shape=(4, 8, 8), image_size=64, scaling=0.25):
        self.latent_shape = latent_shape
        self.image_size = image_size
        self.scaling = scaling
        n_lat = int(np.prod(latent_shape))
        k = int(round(n_lat ** 0.5))
        x = np.arange(image_size)
        freq = np.arange(k)
        dct = np.cos(np.pi * (2 * x[None, :] + 1) * freq[:, None] / (2 * image_size))
        dct *= np.where(freq == 0, np.sqrt(1.0 / image_size), np.sqrt(2.0 / image_size))[:, None]
        basis = np.einsum("ux,vy->uvxy", dct, dct).reshape(k * k, image_size * image_size)
        rot, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((n_lat, n_lat)))
        self.basis = torch.tensor(rot @ basis, dtype=torch.float64)  # (n_lat, pixels), orthonormal rows

    def encode(self, image):
        from PIL import Image

        if not isinstance(image, Image.Image):
            image = Image.fromarray(np.asarray(image))
        gray = image.convert("L").resize((self.image_size, self.image_size), Image.BILINEAR)
        x = torch.tensor(np.asarray(gray, dtype=np.float64).reshape(-1) / 127.5 - 1.0)
        return (self.basis @ x).reshape(self.latent_shape) * self.scaling

    def decode(self, latent):
        x = self.basis.T @ (latent.reshape(-1).to(torch.float64) / self.scaling)
        pix = ((x + 1.0) * 127.5).clamp(0, 255).round().to(torch.uint8)
        return pix.reshape(self.image_size, self.image_size).numpy()


class ToyDenoiser(DenoiserBackend):
    """Seeded miniature U-Net over a 4x8x8 latent.

    Layout: down0 @ 8x8 -> pool -> mid0 @ 4x4 -> up0 @ 4x4 -> upsample + skip
    -> up1 @ 8x8; every block is self-attention, cross-attention, MLP.
    The latent enters through a deliberately weak projection so the deterministic
    sampler is close to invertible at coarse step counts.
    """

    latent_shape = (4, 8, 8)
    embedding_shape = (TOY_TOKENS, TOY_EMBED_DIM)
    image_size = 64
    width = 32
    heads = 2

    def __init__(self, seed=0, cond_scale=1.0, latent_gain=0.02, out_gain=0.3, attn_gain=1.0, text_gain=0.03):
        super().__init__()
        self.seed = seed
        self.cond_scale = float(cond_scale)
        self.out_gain = out_gain
        self.codec = ToyImageCodec()
        rng = np.random.default_rng(seed)
        c, d = self.width, TOY_EMBED_DIM

        def w(*shape, gain=1.0):
            fan_in = shape[0]
            return torch.tensor(rng.standard_normal(shape) * gain / fan_in ** 0.5, dtype=torch.float64)

        self.w_in = w(4, c, gain=latent_gain)
        self.w_time = w(16, c)
        self.w_pose = w(3, c, gain=2.0)
        self.blocks = {}
        self._sites = []
        for block, idx, res in (("down", 0, (8, 8)), ("mid", 0, (4, 4)), ("up", 0, (4, 4)), ("up", 1, (8, 8))):
            self.blocks[(block, idx)] = {
                "q": w(c, c), "k": w(c, c), "v": w(c, c), "o": w(c, c, gain=attn_gain),
                "cq": w(c, c), "ck": w(d, c), "cv": w(d, c), "co": w(c, c, gain=text_gain),
                "m1": w(c, 2 * c), "m2": w(2 * c, c, gain=0.5),
            }
            for kind in ATTENTION_KINDS:
                self._sites.append(AttentionSite(block, idx, kind, res))
        self.w_out = w(c, 4)
        self._site_index = {(s.block_kind, s.layer_index, s.attention_kind): s for s in self._sites}

    def list_attention_sites(self):
        return list(self._sites)

    # -- plumbing
    def encode_image(self, image):
        return self.codec.encode(image)

    def decode_latent(self, latent):
        return self.codec.decode(latent)

    def embed_prompt(self, text):
        return toy_prompt_embedding(text)

    # -- network
    def _time_features(self, t):
        half = 8
        freqs = torch.exp(-np.log(1000.0) * torch.arange(half, dtype=torch.float64) / half)
        ang = float(max(t, 0)) / 1000.0 * 50.0 * freqs
        return torch.cat([ang.sin(), ang.cos()]) @ self.w_time

    def _pose_features(self, pose):
        img = torch.as_tensor(np.asarray(pose), dtype=torch.float64) / 255.0
        if img.ndim != 3 or img.shape[-1] != 3:
            raise ContractError(f"pose image must be (H, W, 3), got {tuple(img.shape)}")
        pooled = F.adaptive_avg_pool2d(img.permute(2, 0, 1)[None], self.latent_shape[1:])[0]
        return pooled.reshape(3, -1).T @ self.w_pose

    def _attend(self, site, x, ctx, wq, wk, wv, wo, maps):
        n, c = x.shape
        h = self.heads
        q = (x @ wq).reshape(n, h, c // h).transpose(0, 1)
        k = (ctx @ wk).reshape(ctx.shape[0], h, c // h).transpose(0, 1)
        v = (ctx @ wv).reshape(ctx.shape[0], h, c // h).transpose(0, 1)
        if maps is not None and site.attention_kind == "cross":
            maps[site] = attention_probs(q, k)
        out = self.processor_for(site)(site, q, k, v)
        return out.transpose(0, 1).reshape(n, c) @ wo

    def _block(self, key, x, emb, maps):
        p = self.blocks[key]
        s_self = self._site_index[(*key, "self")]
        s_cross = self._site_index[(*key, "cross")]
        y = F.layer_norm(x, (self.width,))
        x = x + self._attend(s_self, y, y, p["q"], p["k"], p["v"], p["o"], maps)
        y = F.layer_norm(x, (self.width,))
        x = x + self._attend(s_cross, y, emb, p["cq"], p["ck"], p["cv"], p["co"], maps)
        y = F.layer_norm(x, (self.width,))
        return x + F.gelu(y @ p["m1"]) @ p["m2"]

    def _forward(self, latent, t, embedding, pose, maps=None):
        latent = torch.as_tensor(latent, dtype=torch.float64)
        if tuple(latent.shape) != self.latent_shape:
            raise ContractError(f"latent must be {self.latent_shape}, got {tuple(latent.shape)}")
        embedding = torch.as_tensor(embedding, dtype=torch.float64)
        if tuple(embedding.shape) != self.embedding_shape:
            raise ContractError(f"embedding must be {self.embedding_shape} (tokens, dim {TOY_EMBED_DIM}), "
                                f"got {tuple(embedding.shape)}")
        ch, hh, ww = self.latent_shape
        x = latent.reshape(ch, -1).T @ self.w_in
        x = x + self._time_features(t) + self.cond_scale * self._pose_features(pose)
        x = self._block(("down", 0), x, embedding, maps)
        skip = x
        grid = x.T.reshape(1, self.width, hh, ww)
        x = F.avg_pool2d(grid, 2)[0].reshape(self.width, -1).T
        x = self._block(("mid", 0), x, embedding, maps)
        x = self._block(("up", 0), x, embedding, maps)
        grid = x.T.reshape(1, self.width, hh // 2, ww // 2)
        x = F.interpolate(grid, scale_factor=2, mode="nearest")[0].reshape(self.width, -1).T + skip
        x = self._block(("up", 1), x, embedding, maps)
        out = F.layer_norm(x, (self.width,)) @ self.w_out
        return self.out_gain * out.T.reshape(self.latent_shape)


def make_backend(kind="toy", seed=0, cond_scale=1.0):
    if kind == "toy":
        return ToyDenoiser(seed=seed, cond_scale=cond_scale)
    if kind == "adapter":
        return AdapterBackend(seed=seed, cond_scale=cond_scale)
    raise BackendError(f"unknown backend kind {kind!r}")
