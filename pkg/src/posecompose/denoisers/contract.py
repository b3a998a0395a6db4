"""The denoiser interface consumed by the sampling loop.

A denoiser predicts the noise in x_t given the timestep, a stack of text
token vectors, and a spatially aligned control map. It declares named
composition sites where its internal latent can be intercepted and replaced
mid-forward; the sampler uses those to blend per-instance branches.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import Enum

import numpy as np

from ..errors import DomainError
from ..pose_geometry import Pose2D, rasterize_skeleton

TOKEN_DIM = 16


class ControlModality(str, Enum):
    POSE = "POSE"
    CANNY = "CANNY"
    MLSD = "MLSD"
    HED = "HED"
    SKETCH = "SKETCH"


@dataclass(frozen=True)
class TextEmbedding:
    """Deterministic hash embedding of one token of text."""

    vector: np.ndarray
    source_text: str


@dataclass(frozen=True)
class ControlEmbedding:
    """(H, W, 1) rasterized-and-dilated skeleton field. Only POSE is
    implemented; the other modalities are declared for interface parity."""

    pose_map: np.ndarray
    modality: ControlModality = ControlModality.POSE


def embed_token(text: str) -> TextEmbedding:
    """Unit vector of width 16 seeded from the token text."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    v = rng.standard_normal(TOKEN_DIM)
    v /= np.linalg.norm(v)
    return TextEmbedding(vector=v, source_text=text)


def embed_tokens(texts) -> np.ndarray:
    """(K, 16) matrix, one row per token text."""
    return np.stack([embed_token(t).vector for t in texts], axis=0)


def skeleton_band(pose: Pose2D, H: int, W: int) -> np.ndarray:
    """Width-1 raster grown by one pixel in every direction. Shared by the
    control embedding, the renderer, and the skeleton-region metric crops so
    all three agree on which pixels belong to a figure."""
    occ = rasterize_skeleton(pose, H, W, line_width=1.0)
    if not occ.any():
        return occ
    grown = np.zeros_like(occ)
    grown[1:-1, 1:-1] = occ[1:-1, 1:-1]
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            ys = slice(max(dy, 0), H + min(dy, 0))
            yd = slice(max(-dy, 0), H + min(-dy, 0))
            xs = slice(max(dx, 0), W + min(dx, 0))
            xd = slice(max(-dx, 0), W + min(-dx, 0))
            grown[yd, xd] = np.maximum(grown[yd, xd], occ[ys, xs])
    return grown


def pose_control(pose: Pose2D, H: int, W: int) -> ControlEmbedding:
    band = skeleton_band(pose, H, W)
    return ControlEmbedding(pose_map=band[:, :, None])


class DenoiserContract:
    """Base class: batched epsilon prediction with composition-site hooks.

    ``sites`` is an ordered list of (name, downsample_factor) pairs; a hook
    dict must provide a callable per site name (identity allowed) mapping a
    (B, H/f, W/f, C) latent to a latent of the same shape.
    """

    sites: list = []

    def site_shapes(self, H: int, W: int) -> list:
        return [(name, (H // f, W // f)) for name, f in self.sites]

    def check_hooks(self, hooks):
        if hooks is None:
            return {name: None for name, _ in self.sites}
        names = [name for name, _ in self.sites]
        if sorted(hooks.keys()) != sorted(names):
            raise DomainError(
                "HOOK_ARITY",
                f"expected hooks for {names}, got {sorted(hooks.keys())}",
            )
        return hooks

    def epsilon(self, x, t, tokens, pose_maps, hooks=None, control_levels=None):
        raise NotImplementedError
