"""Instance-level text-image consistency metrics plus pose accuracy.

The identity-observance family scores a local patch around each instance
against the prompt set: mean similarity, a softmax share for the true prompt
(overflow-safe), and the true-vs-others similarity gap. Pose accuracy is
COCO-style keypoint AP over OKS thresholds .50:.05:.95 with medium/large
area splits, and HND is the absolute gap between ground-truth and detected
person counts.

Similarity scores live on a logit scale (cosine x 100). The toy oracle
embeds a patch by its mean skeleton-region color and a prompt by its palette
color; the toy detector finds saturated connected components and fits the
canonical figure template into each component's bounding box.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .denoisers.contract import skeleton_band
from .denoisers.render import IDENTITY_PALETTE, palette_word, value_to_color
from .errors import DomainError
from .pose_geometry import FIGURE_TEMPLATE_COCO17, Pose2D, PoseFormat

# per-keypoint falloff constants, twice the standard COCO sigmas
COCO17_SIGMAS = np.array([
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
])
OPENPOSE18_SIGMAS = np.array([
    0.026, 0.079, 0.079, 0.072, 0.062, 0.079, 0.072, 0.062, 0.107,
    0.087, 0.089, 0.107, 0.087, 0.089, 0.025, 0.025, 0.035, 0.035,
])
DEFAULT_K = {
    PoseFormat.COCO17: 2.0 * COCO17_SIGMAS,
    PoseFormat.OPENPOSE18: 2.0 * OPENPOSE18_SIGMAS,
}

OKS_THRESHOLDS = np.arange(0.50, 0.99, 0.05)
AREA_ALL = (0.0, float("inf"))
AREA_MEDIUM = (32.0 ** 2, 96.0 ** 2)
AREA_LARGE = (96.0 ** 2, float("inf"))

PATCH_PAD = 0.10
DETECT_SATURATION = 0.5
DETECT_MIN_PIXELS = 25
DETECT_BAND_MARGIN = 1.5


@dataclass
class InstancePatch:
    """Crop around one instance: 10%-padded tight keypoint box, plus the
    in-crop skeleton pixels the toy oracle averages over."""

    crop: np.ndarray
    bbox: tuple
    index: int
    skeleton_mask: np.ndarray


@dataclass
class MetricsReport:
    cio_sim: float = float("nan")
    cio_sigma: float = float("nan")
    cio_sigma_std: float = float("nan")
    cio_diff: float = float("nan")
    cio_diff_std: float = float("nan")
    hnd: float = float("nan")
    hnd_std: float = float("nan")
    ap: float = float("nan")
    ap_m: float = float("nan")
    ap_l: float = float("nan")
    fid: float | None = None
    per_instance: list = field(default_factory=list)

    def to_rows(self):
        return [
            ("cio_sim", self.cio_sim, None),
            ("cio_sigma", self.cio_sigma, self.cio_sigma_std),
            ("cio_diff", self.cio_diff, self.cio_diff_std),
            ("hnd", self.hnd, self.hnd_std),
            ("ap", self.ap, None),
            ("ap_m", self.ap_m, None),
            ("ap_l", self.ap_l, None),
            ("fid", self.fid, None),
        ]


def extract_instance_patches(image: np.ndarray, poses) -> list:
    H, W = image.shape[:2]
    patches = []
    for i, pose in enumerate(poses):
        x0, y0, x1, y1 = pose.bbox()
        pw, ph = x1 - x0, y1 - y0
        x0 = max(int(np.floor(x0 - PATCH_PAD * pw)), 0)
        x1 = min(int(np.ceil(x1 + PATCH_PAD * pw)) + 1, W)
        y0 = max(int(np.floor(y0 - PATCH_PAD * ph)), 0)
        y1 = min(int(np.ceil(y1 + PATCH_PAD * ph)) + 1, H)
        band = skeleton_band(pose, H, W)
        patches.append(InstancePatch(
            crop=image[y0:y1, x0:x1],
            bbox=(x0, y0, x1, y1),
            index=i,
            skeleton_mask=band[y0:y1, x0:x1] > 0,
        ))
    return patches


class ToySimilarityOracle:
    """Cosine (x 100) between the patch's mean skeleton-region color and the
    prompt's palette color."""

    def score(self, patch: InstancePatch, text: str) -> float:
        crop = value_to_color(patch.crop)
        if patch.skeleton_mask.any():
            e_img = crop[patch.skeleton_mask].mean(axis=0)
        else:
            e_img = crop.reshape(-1, 3).mean(axis=0)
        e_txt = np.asarray(IDENTITY_PALETTE[palette_word(text)], dtype=np.float64)
        ni, nt = np.linalg.norm(e_img), np.linalg.norm(e_txt)
        if ni == 0.0 or nt == 0.0:
            return 0.0
        return float(e_img @ e_txt / (ni * nt) * 100.0)


def toy_similarity_oracle() -> ToySimilarityOracle:
    return ToySimilarityOracle()


def cio_sim(patches, prompts, oracle) -> float:
    """Mean over instances of the true-prompt similarity."""
    if len(patches) != len(prompts) or not patches:
        raise DomainError("LENGTH_MISMATCH", f"{len(patches)} patches vs {len(prompts)} prompts")
    return float(np.mean([oracle.score(p, txt) for p, txt in zip(patches, prompts)]))


def _scores_with_true(patch, prompts, true_prompt, oracle):
    prompts = list(prompts)
    if true_prompt not in prompts:
        raise DomainError("MISSING_TRUE_PROMPT", f"{true_prompt!r} not in prompt set")
    scores = np.array([oracle.score(patch, p) for p in prompts], dtype=np.float64)
    return scores, prompts.index(true_prompt)


def cio_sigma(patch, prompts, true_prompt, oracle) -> float:
    """Softmax share of the true prompt among all instance prompts."""
    scores, idx = _scores_with_true(patch, prompts, true_prompt, oracle)
    z = scores - scores.max()
    e = np.exp(z)
    return float(e[idx] / e.sum())


def cio_diff(patch, prompts, true_prompt, oracle) -> float:
    """True-prompt similarity minus the mean similarity of the other
    prompts."""
    scores, idx = _scores_with_true(patch, prompts, true_prompt, oracle)
    if len(scores) < 2:
        raise DomainError("LENGTH_MISMATCH", "need at least 2 prompts for a contrast")
    others = np.delete(scores, idx)
    return float(scores[idx] - others.mean())


def hnd(gt_count: int, detected_count: int) -> int:
    """Absolute person-count gap."""
    if gt_count < 0 or detected_count < 0:
        raise DomainError("INVALID_RANGE", "counts must be non-negative")
    return abs(int(gt_count) - int(detected_count))


def oks(gt: Pose2D, det: Pose2D, area: float, k=None) -> float:
    """COCO object keypoint similarity over the gt's visible keypoints."""
    if gt.format != det.format:
        raise DomainError("FORMAT_MISMATCH", f"{gt.format} vs {det.format}")
    if area <= 0:
        raise DomainError("INVALID_RANGE", f"area must be > 0, got {area}")
    vis = gt.visible
    if not vis.any():
        raise DomainError("NO_VISIBLE_KEYPOINTS", "gt has no visible keypoints")
    k = DEFAULT_K[gt.format] if k is None else np.asarray(k, dtype=np.float64)
    d2 = ((gt.keypoints[:, :2] - det.keypoints[:, :2]) ** 2).sum(axis=1)
    e = np.exp(-d2 / (2.0 * area * k ** 2))
    return float(e[vis].sum() / vis.sum())


def keypoint_area(pose: Pose2D) -> float:
    x0, y0, x1, y1 = pose.bbox()
    return max((x1 - x0) * (y1 - y0), 1.0)


def _match_scene(gts, dets, thr, area_range):
    """Greedy per-scene matching at one threshold. Returns per-detection
    (confidence, is_tp, is_ignored) plus the count of counted gts."""
    lo, hi = area_range
    gt_areas = [keypoint_area(g) for g in gts]
    gt_ignore = [not (lo < a <= hi) for a in gt_areas]
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    taken = [False] * len(gts)
    results = []
    for di in order:
        pose_d, conf = dets[di]
        best, best_oks = -1, thr
        best_ignored = -1, thr
        for gi, g in enumerate(gts):
            if taken[gi]:
                continue
            s = oks(g, pose_d, gt_areas[gi])
            if gt_ignore[gi]:
                if s >= best_ignored[1]:
                    best_ignored = gi, s
            elif s >= best_oks:
                best, best_oks = gi, s
        if best >= 0:
            taken[best] = True
            results.append((conf, True, False))
        elif best_ignored[0] >= 0:
            taken[best_ignored[0]] = True
            results.append((conf, False, True))
        else:
            results.append((conf, False, False))
    n_gt = sum(1 for ig in gt_ignore if not ig)
    return results, n_gt


def _ap_at(gt_scenes, det_scenes, thr, area_range) -> tuple:
    all_results = []
    total_gt = 0
    for gts, dets in zip(gt_scenes, det_scenes):
        res, n_gt = _match_scene(gts, dets, thr, area_range)
        all_results.extend(res)
        total_gt += n_gt
    if total_gt == 0:
        return float("nan"), 0
    kept = [(c, tp) for c, tp, ign in all_results if not ign]
    kept.sort(key=lambda r: -r[0])
    tps = np.cumsum([1 if tp else 0 for _, tp in kept]) if kept else np.array([])
    fps = np.cumsum([0 if tp else 1 for _, tp in kept]) if kept else np.array([])
    if len(kept) == 0:
        return 0.0, total_gt
    recall = tps / total_gt
    precision = tps / (tps + fps)
    # 101-point interpolated AP
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        mask = recall >= r
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0, total_gt


def keypoint_ap(gt_scenes, det_scenes, thresholds=OKS_THRESHOLDS):
    """(ap, ap_m, ap_l) on a 0..100 scale; -1 for an empty area split."""
    if len(gt_scenes) != len(det_scenes):
        raise DomainError("LENGTH_MISMATCH", "gt and detection scene lists differ")
    if sum(len(g) for g in gt_scenes) == 0:
        raise DomainError("EMPTY_GT", "no ground-truth instances")
    out = []
    for area_range in (AREA_ALL, AREA_MEDIUM, AREA_LARGE):
        vals = []
        for thr in thresholds:
            ap, total = _ap_at(gt_scenes, det_scenes, thr, area_range)
            if total > 0:
                vals.append(ap)
        out.append(100.0 * float(np.mean(vals)) if vals else -1.0)
    return tuple(out)


class ToyPoseDetector:
    """Finds saturated connected components in the (smoothed) image and fits
    the canonical figure template into each component's bounding box,
    corrected for the painted band's margin around the keypoint box."""

    def __init__(self, saturation=DETECT_SATURATION, min_pixels=DETECT_MIN_PIXELS,
                 band_margin=DETECT_BAND_MARGIN):
        self.saturation = saturation
        self.min_pixels = min_pixels
        self.band_margin = band_margin

    def detect(self, image: np.ndarray):
        rgb = np.clip(value_to_color(image), 0.0, 1.0)
        colorfulness = rgb.max(axis=2) - rgb.min(axis=2)
        smoothed = ndimage.uniform_filter(colorfulness, size=3)
        mask = smoothed > self.saturation
        mask = ndimage.binary_closing(mask, structure=np.ones((3, 3)))
        labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
        dets = []
        tpl = FIGURE_TEMPLATE_COCO17
        tx0, ty0 = tpl.min(axis=0)
        tx1, ty1 = tpl.max(axis=0)
        for comp in range(1, n + 1):
            ys, xs = np.nonzero(labels == comp)
            if len(ys) < self.min_pixels:
                continue
            m = self.band_margin
            x0, x1 = xs.min() + m, xs.max() - m
            y0, y1 = ys.min() + m, ys.max() - m
            w = max(x1 - x0, 1.0)
            h = max(y1 - y0, 1.0)
            kx = x0 + (tpl[:, 0] - tx0) / (tx1 - tx0) * w
            ky = y0 + (tpl[:, 1] - ty0) / (ty1 - ty0) * h
            kp = np.stack([kx, ky, np.ones_like(kx)], axis=1)
            conf = float(np.clip(smoothed[ys, xs].mean() / 0.8, 0.0, 1.0))
            dets.append((Pose2D(kp, PoseFormat.COCO17, allow_out_of_frame=True), conf))
        return dets


def toy_pose_detector() -> ToyPoseDetector:
    return ToyPoseDetector()
