"""Deterministic stick-figure renderer for toy ground truth and delta targets.

Images are (H, W, 3) float arrays in [-1, 1]. Identity tokens map to
saturated palette colors; setting tokens map to flat background tones.
"""

from __future__ import annotations

import numpy as np

from ..errors import DomainError
from ..pose_geometry import Pose2D
from .contract import skeleton_band

IDENTITY_PALETTE = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "magenta": (1.0, 0.0, 1.0),
    "cyan": (0.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
}

SETTING_PALETTE = {
    "plain gray backdrop": (0.5, 0.5, 0.5),
    "dim studio": (0.35, 0.35, 0.35),
    "bright studio": (0.68, 0.68, 0.68),
    "warm room": (0.55, 0.50, 0.45),
}

NEUTRAL_BACKGROUND = (0.5, 0.5, 0.5)


def color_to_value(color) -> np.ndarray:
    """[0, 1] rgb to image value space [-1, 1]."""
    return 2.0 * np.asarray(color, dtype=np.float64) - 1.0


def value_to_color(value) -> np.ndarray:
    return (np.asarray(value, dtype=np.float64) + 1.0) / 2.0


def palette_word(text: str, palette=IDENTITY_PALETTE) -> str:
    """First palette key appearing as a word in the text."""
    words = text.lower().replace(",", " ").split()
    for w in words:
        if w in palette:
            return w
    raise DomainError("UNKNOWN_TOKEN", f"no palette word in {text!r}")


def setting_color(setting_text: str) -> np.ndarray:
    if setting_text in SETTING_PALETTE:
        return np.asarray(SETTING_PALETTE[setting_text], dtype=np.float64)
    return np.asarray(NEUTRAL_BACKGROUND, dtype=np.float64)


def render_instance(identity_token: str, pose: Pose2D, palette, H: int, W: int,
                    background=NEUTRAL_BACKGROUND) -> np.ndarray:
    """Figure in the palette color bound to identity_token, flat background."""
    key = palette_word(identity_token, palette)
    band = skeleton_band(pose, H, W)
    img = np.tile(color_to_value(background), (H, W, 1))
    img[band > 0] = color_to_value(palette[key])
    return img


def render_scene(poses, identity_texts, setting_text: str, H: int, W: int) -> np.ndarray:
    """All figures drawn over the setting background, in list order."""
    img = np.tile(color_to_value(setting_color(setting_text)), (H, W, 1))
    for pose, ident in zip(poses, identity_texts):
        key = palette_word(ident)
        band = skeleton_band(pose, H, W)
        img[band > 0] = color_to_value(IDENTITY_PALETTE[key])
    return img
