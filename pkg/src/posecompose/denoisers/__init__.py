from .contract import (
    ControlEmbedding,
    ControlModality,
    DenoiserContract,
    TextEmbedding,
    embed_token,
    embed_tokens,
    skeleton_band,
)
from .delta import DeltaDenoiser, delta_denoiser, stack_denoisers
from .render import IDENTITY_PALETTE, SETTING_PALETTE, palette_word, render_instance, render_scene
from .tiny import (
    TinyConfig,
    TinyDenoiser,
    init_params,
    loss_and_grads,
    make_training_set,
    train_tiny_denoiser,
)
from .checkpoint import load_params, save_params

__all__ = [
    "ControlEmbedding",
    "ControlModality",
    "DenoiserContract",
    "TextEmbedding",
    "embed_token",
    "embed_tokens",
    "skeleton_band",
    "DeltaDenoiser",
    "delta_denoiser",
    "stack_denoisers",
    "IDENTITY_PALETTE",
    "SETTING_PALETTE",
    "palette_word",
    "render_instance",
    "render_scene",
    "TinyConfig",
    "TinyDenoiser",
    "init_params",
    "loss_and_grads",
    "make_training_set",
    "train_tiny_denoiser",
    "load_params",
    "save_params",
]
