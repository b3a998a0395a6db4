"""2D skeletons to occupancy maps to normalized per-instance attention masks.

Pipeline: rasterize bone segments, dilate with a canvas-scaled square kernel,
softmax-normalize across instances (temperature-controlled, or hard argmax),
then area-average down to the resolutions used inside a denoiser.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import DomainError


class PoseFormat(str, Enum):
    COCO17 = "COCO17"
    OPENPOSE18 = "OPENPOSE18"


# 0-based bone lists. COCO17 follows the standard annotation skeleton,
# OPENPOSE18 the 18-joint body model with an explicit neck joint.
COCO17_EDGES = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12),
    (5, 6), (5, 7), (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2),
    (1, 3), (2, 4), (3, 5), (4, 6),
)
OPENPOSE18_EDGES = (
    (1, 2), (1, 5), (2, 3), (3, 4), (5, 6), (6, 7), (1, 8), (8, 9),
    (9, 10), (1, 11), (11, 12), (12, 13), (1, 0), (0, 14), (14, 16),
    (0, 15), (15, 17),
)

KEYPOINT_COUNT = {PoseFormat.COCO17: 17, PoseFormat.OPENPOSE18: 18}
EDGES = {PoseFormat.COCO17: COCO17_EDGES, PoseFormat.OPENPOSE18: OPENPOSE18_EDGES}

# Canonical standing stick figure in COCO17 order, coordinates normalized to
# a unit box (x right, y down). Used by scene synthesis and the toy renderer.
FIGURE_TEMPLATE_COCO17 = np.array([
    (0.50, 0.08), (0.54, 0.055), (0.46, 0.055), (0.58, 0.07), (0.42, 0.07),
    (0.65, 0.22), (0.35, 0.22), (0.72, 0.40), (0.28, 0.40), (0.76, 0.56),
    (0.24, 0.56), (0.60, 0.52), (0.40, 0.52), (0.62, 0.74), (0.38, 0.74),
    (0.63, 0.95), (0.37, 0.95),
])


@dataclass(frozen=True)
class Pose2D:
    """One 2D skeleton: rows of (x, y, v) with v in {0, 1}."""

    keypoints: np.ndarray
    format: PoseFormat = PoseFormat.COCO17
    allow_out_of_frame: bool = False

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.ndim != 2 or kp.shape[1] != 3:
            raise DomainError("FORMAT_MISMATCH", f"keypoints must be (K, 3), got {kp.shape}")
        expected = KEYPOINT_COUNT[PoseFormat(self.format)]
        if kp.shape[0] != expected:
            raise DomainError(
                "FORMAT_MISMATCH",
                f"{self.format} expects {expected} keypoints, got {kp.shape[0]}",
            )
        if not np.isin(kp[:, 2], (0.0, 1.0)).all():
            raise DomainError("FORMAT_MISMATCH", "visibility flags must be 0 or 1")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "format", PoseFormat(self.format))

    @property
    def visible(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    def visible_count(self) -> int:
        return int(self.visible.sum())

    def centroid(self) -> np.ndarray:
        """Mean (x, y) over visible keypoints."""
        vis = self.visible
        if not vis.any():
            raise DomainError("DEGENERATE_POSE", "no visible keypoints")
        return self.keypoints[vis, :2].mean(axis=0)

    def bbox(self) -> tuple[float, float, float, float]:
        """Tight (x0, y0, x1, y1) box over visible keypoints."""
        vis = self.visible
        if not vis.any():
            raise DomainError("DEGENERATE_POSE", "no visible keypoints")
        pts = self.keypoints[vis, :2]
        return float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max())

    def translated(self, dx: float, dy: float) -> "Pose2D":
        kp = self.keypoints.copy()
        kp[:, 0] += dx
        kp[:, 1] += dy
        return Pose2D(kp, self.format, self.allow_out_of_frame)


class MaskMode(str, Enum):
    SOFT = "SOFT"
    HARD = "HARD"


@dataclass
class AttentionMaskSet:
    """Per-instance spatial weights summing to 1 at every pixel.

    ``base`` is (N, H, W); ``pyramid`` maps (h, w) shapes to area-averaged
    (N, h, w) arrays, re-normalized pixelwise.
    """

    base: np.ndarray
    tau: float
    mode: MaskMode
    pyramid: dict = field(default_factory=dict)

    @property
    def n_instances(self) -> int:
        return self.base.shape[0]

    def at_shape(self, shape: tuple[int, int]) -> np.ndarray:
        """Masks at a given (h, w); base shape is always available."""
        if shape == self.base.shape[1:]:
            return self.base
        try:
            return self.pyramid[shape]
        except KeyError:
            raise DomainError("SHAPE_MISMATCH", f"no mask level of shape {shape}") from None


def make_figure_pose(cx: float, cy: float, height_px: float,
                     rng: np.random.Generator | None = None,
                     jitter: float = 0.0) -> Pose2D:
    """Template stick figure centered at (cx, cy) with the given pixel height."""
    pts = FIGURE_TEMPLATE_COCO17.copy()
    pts -= pts.mean(axis=0)
    pts *= height_px
    pts[:, 0] += cx
    pts[:, 1] += cy
    if rng is not None and jitter > 0:
        pts += rng.normal(0.0, jitter * height_px, size=pts.shape)
    kp = np.concatenate([pts, np.ones((len(pts), 1))], axis=1)
    return Pose2D(kp, PoseFormat.COCO17)


def rasterize_skeleton(pose: Pose2D, H: int, W: int, line_width: float = 1.0) -> np.ndarray:
    """Binary (H, W) occupancy: pixels within line_width/2 of any bone between
    two visible keypoints."""
    if pose.visible_count() < 2:
        raise DomainError("DEGENERATE_POSE", "need at least 2 visible keypoints")
    if line_width < 1:
        raise DomainError("FORMAT_MISMATCH", f"line_width must be >= 1, got {line_width}")
    if not pose.allow_out_of_frame:
        vis = pose.keypoints[pose.visible, :2]
        if (vis[:, 0] < 0).any() or (vis[:, 0] >= W).any() or (vis[:, 1] < 0).any() or (vis[:, 1] >= H).any():
            raise DomainError(
                "FORMAT_MISMATCH",
                "visible keypoint outside canvas (set allow_out_of_frame to permit)",
            )

    occ = np.zeros((H, W), dtype=np.float64)
    r = line_width / 2.0
    vis = pose.visible
    kp = pose.keypoints
    for a, b in EDGES[pose.format]:
        if not (vis[a] and vis[b]):
            continue
        p = kp[a, :2]
        q = kp[b, :2]
        # limit the distance test to the segment's padded bounding box
        x0 = max(int(np.floor(min(p[0], q[0]) - r - 1)), 0)
        x1 = min(int(np.ceil(max(p[0], q[0]) + r + 1)) + 1, W)
        y0 = max(int(np.floor(min(p[1], q[1]) - r - 1)), 0)
        y1 = min(int(np.ceil(max(p[1], q[1]) + r + 1)) + 1, H)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        d = q - p
        len2 = float(d @ d)
        if len2 == 0.0:
            dist2 = (xs - p[0]) ** 2 + (ys - p[1]) ** 2
        else:
            t = ((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / len2
            t = np.clip(t, 0.0, 1.0)
            dist2 = (xs - (p[0] + t * d[0])) ** 2 + (ys - (p[1] + t * d[1])) ** 2
        occ[y0:y1, x0:x1] = np.maximum(occ[y0:y1, x0:x1], (dist2 <= r * r).astype(np.float64))
    return occ


def dilation_radius(H: int) -> int:
    """Chebyshev radius of the square structuring element: side 2*floor(H/16)+1."""
    return H // 16


def dilate(occ: np.ndarray, H: int) -> np.ndarray:
    """Morphological dilation by a square structuring element whose odd side
    is 2*floor(H/16)+1, where H is the scene canvas height."""
    occ = np.asarray(occ, dtype=np.float64)
    if not np.isin(occ, (0.0, 1.0)).all():
        raise DomainError("FORMAT_MISMATCH", "occupancy must be binary")
    k = dilation_radius(H)
    if k == 0 or not occ.any():
        return occ.copy()
    # square-SE dilation == thresholded chessboard distance to the foreground
    dist = ndimage.distance_transform_cdt(occ == 0, metric="chessboard")
    return (dist <= k).astype(np.float64)


def normalize_masks(occs, tau: float = 0.001, mode: MaskMode = MaskMode.SOFT) -> AttentionMaskSet:
    """Turn N occupancy maps into attention masks summing to 1 per pixel.

    SOFT applies a per-pixel softmax over instances at temperature tau
    (max-subtracted, so tau=1e-3 is safe). HARD assigns each pixel to the
    argmax occupancy, splitting uniformly among ties; pixels covered by no
    instance therefore get uniform weight 1/N in both modes.
    """
    try:
        stack = np.stack([np.asarray(o, dtype=np.float64) for o in occs], axis=0)
    except ValueError:
        raise DomainError("SHAPE_MISMATCH", "occupancy maps must share a shape") from None
    if stack.ndim != 3:
        raise DomainError("SHAPE_MISMATCH", "occupancy maps must be 2D and share a shape")
    mode = MaskMode(mode)
    if mode == MaskMode.SOFT:
        if tau <= 0:
            raise DomainError("NONPOSITIVE_TEMPERATURE", f"tau must be > 0, got {tau}")
        z = stack / tau
        z -= z.max(axis=0, keepdims=True)
        e = np.exp(z)
        masks = e / e.sum(axis=0, keepdims=True)
    else:
        top = stack.max(axis=0, keepdims=True)
        tied = (stack == top).astype(np.float64)
        masks = tied / tied.sum(axis=0, keepdims=True)
    return AttentionMaskSet(base=masks, tau=float(tau), mode=mode)


def resize_mask_pyramid(masks: AttentionMaskSet, level_shapes) -> AttentionMaskSet:
    """Area-average the base masks to each (h, w) level and re-normalize."""
    N, H, W = masks.base.shape
    pyramid = {}
    for h, w in level_shapes:
        if H % h != 0 or W % w != 0:
            raise DomainError(
                "NON_DIVISIBLE_SHAPE",
                f"level ({h}, {w}) does not divide base ({H}, {W})",
            )
        fy, fx = H // h, W // w
        pooled = masks.base.reshape(N, h, fy, w, fx).mean(axis=(2, 4))
        pooled /= pooled.sum(axis=0, keepdims=True)
        pyramid[(h, w)] = pooled
    return AttentionMaskSet(base=masks.base, tau=masks.tau, mode=masks.mode, pyramid=pyramid)


def masks_for_scene(poses, H: int, W: int, tau: float, mode: MaskMode,
                    line_width: float = 3.0, level_shapes=()) -> AttentionMaskSet:
    """Full pipeline: rasterize, dilate, normalize, build the pyramid."""
    occs = [dilate(rasterize_skeleton(p, H, W, line_width), H) for p in poses]
    masks = normalize_masks(occs, tau=tau, mode=mode)
    if level_shapes:
        masks = resize_mask_pyramid(masks, level_shapes)
    return masks


def pose_to_json(pose: Pose2D) -> dict:
    return {"format": pose.format.value, "keypoints": pose.keypoints.tolist()}


def pose_from_json(obj: dict) -> Pose2D:
    return Pose2D(np.asarray(obj["keypoints"], dtype=np.float64), PoseFormat(obj["format"]))


def save_pose(path, pose: Pose2D):
    with open(path, "w") as f:
        json.dump(pose_to_json(pose), f)


def load_pose(path) -> Pose2D:
    with open(path) as f:
        return pose_from_json(json.load(f))


def mask_to_png_bytes(mask: np.ndarray) -> bytes:
    """8-bit grayscale PNG, pixel = round(255 * m)."""
    from io import BytesIO

    from PIL import Image

    arr = np.clip(np.round(255.0 * np.asarray(mask)), 0, 255).astype(np.uint8)
    buf = BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def save_mask_pngs(maskset: AttentionMaskSet, directory):
    """One PNG per instance: mask_00.png, mask_01.png, ..."""
    import os

    os.makedirs(directory, exist_ok=True)
    paths = []
    for i in range(maskset.n_instances):
        p = os.path.join(directory, f"mask_{i:02d}.png")
        with open(p, "wb") as f:
            f.write(mask_to_png_bytes(maskset.base[i]))
        paths.append(p)
    return paths
