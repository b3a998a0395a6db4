"""Scene synthesis, benchmark execution, robustness sweeps, and reports.

Scenes are synthetic: template stick figures placed along the canvas width
with seeded jitter, identities drawn without replacement from a pool. Every
cross-mode comparison reuses the same per-scene seed so the initial noise is
paired. The MSCOCO-derived benchmark of the original evaluation is
represented by the SceneSpec JSON schema and this module's importer
(`load_scene_list`); synthetic scenes are the executable path.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from enum import Enum
from io import BytesIO

import numpy as np

from .composer import generate
from .denoisers import delta_denoiser, render_scene, stack_denoisers
from .denoisers.tiny import TinyDenoiser
from .diffusion import NoiseSchedule, SamplerConfig, make_schedule
from .errors import DomainError
from .metrics import (
    MetricsReport,
    cio_diff,
    cio_sigma,
    extract_instance_patches,
    hnd,
    keypoint_ap,
    toy_pose_detector,
    toy_similarity_oracle,
)
from .pose_geometry import make_figure_pose
from .prompting import HarmonyParams, InstanceSpec, SceneSpec, scene_from_json, scene_to_json

DEFAULT_IDENTITIES = ["red", "green", "blue", "yellow", "magenta", "cyan", "orange", "purple"]
DEFAULT_SETTINGS = ["plain gray backdrop"]

BASE_HEIGHT_FRAC = 0.50       # figure height at person scale 1.0
BASE_SPACING_FRAC = 0.33      # neighbor distance at inter-person distance 1.0
COUNT_SWEEP_SPACING_FRAC = 0.115  # fixed spacing that still fits 7 figures


class SweepAxis(str, Enum):
    PEOPLE_COUNT = "PEOPLE_COUNT"
    PERSON_SCALE = "PERSON_SCALE"
    INTER_DISTANCE = "INTER_DISTANCE"


DEFAULT_SWEEP_VALUES = {
    SweepAxis.PEOPLE_COUNT: [3, 5, 7],
    SweepAxis.PERSON_SCALE: [1.0, 0.75, 0.5, 0.25, 0.1],
    SweepAxis.INTER_DISTANCE: [1.0, 0.75, 0.5, 0.25],
}


@dataclass
class BenchmarkManifest:
    identity_pool: list = field(default_factory=lambda: list(DEFAULT_IDENTITIES))
    setting_pool: list = field(default_factory=lambda: list(DEFAULT_SETTINGS))
    seed: int = 0
    counts: list = field(default_factory=lambda: [2] * 20)
    canvas: tuple = (64, 64)
    person_scale: float = 0.75
    distance: float = 1.0
    spacing_frac: float = BASE_SPACING_FRAC
    jitter: float = 0.02
    num_steps: int = 20
    harmony: HarmonyParams = field(default_factory=HarmonyParams)

    def __post_init__(self):
        if not self.identity_pool or not self.setting_pool:
            raise DomainError("POOL_EXHAUSTED", "identity and setting pools must be non-empty")
        if not self.counts:
            raise DomainError("INVALID_RANGE", "need at least one scene")


@dataclass
class SweepConfig:
    axis: SweepAxis
    values: list = None

    def __post_init__(self):
        self.axis = SweepAxis(self.axis)
        if self.values is None:
            self.values = list(DEFAULT_SWEEP_VALUES[self.axis])
        if not self.values:
            raise DomainError("INVALID_AXIS_VALUE", "values must be non-empty")
        asc = all(a <= b for a, b in zip(self.values, self.values[1:]))
        desc = all(a >= b for a, b in zip(self.values, self.values[1:]))
        if not (asc or desc):
            raise DomainError("INVALID_AXIS_VALUE", "values must be sorted")
        for v in self.values:
            if self.axis == SweepAxis.PEOPLE_COUNT and (int(v) != v or v < 1):
                raise DomainError("INVALID_AXIS_VALUE", f"bad people count {v}")
            if self.axis == SweepAxis.PERSON_SCALE and v <= 0:
                raise DomainError("INVALID_AXIS_VALUE", f"scale must be > 0, got {v}")
            if self.axis == SweepAxis.INTER_DISTANCE and v < 0:
                raise DomainError("INVALID_AXIS_VALUE", f"distance must be >= 0, got {v}")


def synth_scene(identities, setting, canvas, seed, person_scale=0.75, distance=1.0,
                spacing_frac=BASE_SPACING_FRAC, jitter=0.02, num_steps=20,
                harmony=None, rng=None) -> SceneSpec:
    """One scene with len(identities) figures spread around the canvas
    center; neighbor spacing is spacing_frac * W * distance, clipped so all
    figures stay in frame."""
    H, W = canvas
    n = len(identities)
    rng = rng or np.random.default_rng(seed)
    height = BASE_HEIGHT_FRAC * H * person_scale
    gap = spacing_frac * W * distance
    half_extent = 0.30 * height + H / 16.0 + 1
    max_gap = (W - 2 * half_extent) / max(n - 1, 1)
    gap = min(gap, max_gap) if n > 1 else 0.0
    centers = [W / 2.0 + (i - (n - 1) / 2.0) * gap for i in range(n)]
    instances = []
    for ident, cx in zip(identities, centers):
        cy = H / 2.0 + rng.uniform(-0.03, 0.03) * H
        pose = make_figure_pose(cx, cy, height, rng=rng, jitter=jitter)
        kp = pose.keypoints.copy()
        kp[:, 0] = np.clip(kp[:, 0], 1.0, W - 2.0)
        kp[:, 1] = np.clip(kp[:, 1], 1.0, H - 2.0)
        instances.append(InstanceSpec(pose=type(pose)(kp, pose.format), identity_text=ident))
    return SceneSpec(
        instances=instances,
        setting_text=setting,
        canvas=canvas,
        seed=seed,
        sampler=SamplerConfig(num_steps=num_steps, seed=seed),
        harmony=harmony or HarmonyParams(),
    )


def synth_scenes(manifest: BenchmarkManifest) -> list:
    """Deterministic scene list from a manifest; identities are sampled
    without replacement within each scene."""
    rng = np.random.default_rng(manifest.seed)
    scenes = []
    for i, n in enumerate(manifest.counts):
        if n > len(manifest.identity_pool):
            raise DomainError(
                "POOL_EXHAUSTED",
                f"scene wants {n} identities, pool has {len(manifest.identity_pool)}",
            )
        idents = list(rng.choice(manifest.identity_pool, size=n, replace=False))
        setting = manifest.setting_pool[rng.integers(len(manifest.setting_pool))]
        scenes.append(synth_scene(
            idents, setting, manifest.canvas, seed=int(manifest.seed + 1000 + i),
            person_scale=manifest.person_scale, distance=manifest.distance,
            spacing_frac=manifest.spacing_frac, jitter=manifest.jitter,
            num_steps=manifest.num_steps, harmony=manifest.harmony, rng=rng,
        ))
    return scenes


# denoiser factories ------------------------------------------------------


def delta_render_factory(sched: NoiseSchedule):
    """Delta denoisers whose targets are the scene's own renders: branch i
    is pulled toward instance i alone on the setting background; GLOBAL mode
    gets the full-scene render."""

    def factory(scene: SceneSpec, mode: str):
        H, W = scene.canvas
        poses = [inst.pose for inst in scene.instances]
        idents = [inst.identity_text for inst in scene.instances]
        if mode == "GLOBAL":
            target = render_scene(poses, idents, scene.setting_text, H, W)
            return stack_denoisers([delta_denoiser(target, sched)])
        targets = [render_scene([p], [i], scene.setting_text, H, W)
                   for p, i in zip(poses, idents)]
        return stack_denoisers([delta_denoiser(t, sched) for t in targets])

    return factory


def tiny_factory(params: dict, sched: NoiseSchedule):
    den = TinyDenoiser(params, sched)

    def factory(scene: SceneSpec, mode: str):
        return den

    return factory


# benchmark ---------------------------------------------------------------


def scene_instance_rows(image, scene: SceneSpec, oracle, detector):
    """Per-instance CIO rows plus the scene's detections."""
    poses = [inst.pose for inst in scene.instances]
    prompts = scene.prompts()
    patches = extract_instance_patches(image, poses)
    rows = []
    for i, patch in enumerate(patches):
        row = {"instance": i, "prompt": prompts[i]}
        row["cio_sim"] = oracle.score(patch, prompts[i])
        if len(prompts) >= 2:
            row["cio_sigma"] = cio_sigma(patch, prompts, prompts[i], oracle)
            row["cio_diff"] = cio_diff(patch, prompts, prompts[i], oracle)
        rows.append(row)
    dets = detector.detect(image)
    return rows, dets


def aggregate_report(instance_rows, hnds, gt_scenes, det_scenes) -> MetricsReport:
    report = MetricsReport()
    sims = [r["cio_sim"] for r in instance_rows]
    sigmas = [r["cio_sigma"] for r in instance_rows if "cio_sigma" in r]
    diffs = [r["cio_diff"] for r in instance_rows if "cio_diff" in r]
    if sims:
        report.cio_sim = float(np.mean(sims))
    if sigmas:
        report.cio_sigma = float(np.mean(sigmas))
        report.cio_sigma_std = float(np.std(sigmas))
    if diffs:
        report.cio_diff = float(np.mean(diffs))
        report.cio_diff_std = float(np.std(diffs))
    if hnds:
        report.hnd = float(np.mean(hnds))
        report.hnd_std = float(np.std(hnds))
    if gt_scenes:
        report.ap, report.ap_m, report.ap_l = keypoint_ap(gt_scenes, det_scenes)
    return report


def run_benchmark(scenes, modes, denoiser, oracle=None, detector=None,
                  jsonl_path=None, seeds=None, progress=None):
    """Generate every scene under every mode (paired seeds) and aggregate a
    MetricsReport per mode. ``seeds`` optionally replicates each scene under
    several noise seeds."""
    oracle = oracle or toy_similarity_oracle()
    detector = detector or toy_pose_detector()
    seeds = seeds or [None]
    jsonl_rows = []
    per_mode = {m: {"rows": [], "hnds": [], "gt": [], "det": []} for m in modes}
    for si, scene in enumerate(scenes):
        for seed in seeds:
            run_scene = scene if seed is None else dataclasses.replace(scene, seed=seed)
            for mode in modes:
                image, trace = generate(run_scene, denoiser, mode=mode)
                rows, dets = scene_instance_rows(image, run_scene, oracle, detector)
                bucket = per_mode[mode]
                bucket["rows"].extend(rows)
                bucket["hnds"].append(hnd(run_scene.n_instances, len(dets)))
                bucket["gt"].append([inst.pose for inst in run_scene.instances])
                bucket["det"].append(dets)
                for r in rows:
                    jsonl_rows.append({"scene": si, "seed": run_scene.seed, "mode": mode, **r})
            if progress:
                progress(si, seed)
    if jsonl_path:
        with open(jsonl_path, "w") as f:
            for row in jsonl_rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return {
        m: aggregate_report(b["rows"], b["hnds"], b["gt"], b["det"])
        for m, b in per_mode.items()
    }, jsonl_rows


def robustness_sweep(config: SweepConfig, denoiser, seeds=None, manifest=None,
                     mode="FINECONTROL", oracle=None, detector=None, progress=None):
    """Re-synthesize scenes per axis value (other factors fixed, same seeds)
    and report metrics per value. Counts fix scale and a canvas-feasible
    spacing; scales and distances fix three people."""
    manifest = manifest or BenchmarkManifest()
    seeds = seeds or [0]
    results = {}
    for value in config.values:
        m = dataclasses.replace(manifest)
        if config.axis == SweepAxis.PEOPLE_COUNT:
            m.counts = [int(value)] * len(manifest.counts)
            m.spacing_frac = COUNT_SWEEP_SPACING_FRAC
        elif config.axis == SweepAxis.PERSON_SCALE:
            m.counts = [3] * len(manifest.counts)
            m.person_scale = float(value)
        else:
            m.counts = [3] * len(manifest.counts)
            m.distance = float(value)
        scenes = synth_scenes(m)
        report, _ = run_benchmark(scenes, [mode], denoiser, oracle=oracle,
                                  detector=detector, seeds=seeds)
        results[value] = report[mode]
        if progress:
            progress(value)
    return results


# report emission ---------------------------------------------------------


def report_table_rows(table: dict) -> list:
    rows = []
    for mode in table:
        for metric, value, std in table[mode].to_rows():
            rows.append((mode, metric,
                         "" if value is None or (isinstance(value, float) and np.isnan(value))
                         else f"{value:.4f}",
                         "" if std is None or (isinstance(std, float) and np.isnan(std))
                         else f"{std:.4f}"))
    return rows


def write_report(table: dict, fmt: str = "CSV", path=None) -> str:
    """Render {mode: MetricsReport} as CSV or Markdown; one row per
    (mode, metric)."""
    fmt = fmt.upper()
    rows = report_table_rows(table)
    if fmt == "CSV":
        lines = ["mode,metric,value,std"]
        lines += [",".join(r) for r in rows]
        text = "\n".join(lines) + "\n"
    elif fmt == "MARKDOWN":
        lines = ["| mode | metric | value | std |", "| --- | --- | --- | --- |"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        text = "\n".join(lines) + "\n"
    else:
        raise DomainError("INVALID_RANGE", f"unknown report format {fmt!r}")
    if path:
        with open(path, "w") as f:
            f.write(text)
    return text


def emit_plots(sweep_results: dict, out_dir, axis_label="value"):
    """One line plot per metric across sweep values."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    os.makedirs(out_dir, exist_ok=True)
    values = list(sweep_results.keys())
    paths = []
    for metric in ("cio_sim", "cio_sigma", "cio_diff", "hnd", "ap"):
        ys = [getattr(sweep_results[v], metric) for v in values]
        if all(isinstance(y, float) and np.isnan(y) for y in ys):
            continue
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(values, ys, marker="o")
        ax.set_xlabel(axis_label)
        ax.set_ylabel(metric)
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        p = os.path.join(out_dir, f"sweep_{metric}.png")
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths


# image and manifest I/O ---------------------------------------------------


def image_to_png_bytes(image: np.ndarray) -> bytes:
    """[-1, 1] float image to 8-bit RGB PNG bytes."""
    from PIL import Image

    arr = np.clip((np.asarray(image) + 1.0) / 2.0 * 255.0, 0, 255).round().astype(np.uint8)
    buf = BytesIO()
    Image.fromarray(arr, mode="RGB").save(buf, format="PNG", compress_level=1)
    return buf.getvalue()


def png_bytes_to_image(data: bytes) -> np.ndarray:
    from PIL import Image

    arr = np.asarray(Image.open(BytesIO(data)).convert("RGB"), dtype=np.float64)
    return arr / 255.0 * 2.0 - 1.0


def save_image(image: np.ndarray, path):
    with open(path, "wb") as f:
        f.write(image_to_png_bytes(image))


def load_image(path) -> np.ndarray:
    with open(path, "rb") as f:
        return png_bytes_to_image(f.read())


def manifest_to_json(manifest: BenchmarkManifest) -> dict:
    return {
        "version": 1,
        "identity_pool": manifest.identity_pool,
        "setting_pool": manifest.setting_pool,
        "seed": manifest.seed,
        "counts": manifest.counts,
        "canvas": {"h": manifest.canvas[0], "w": manifest.canvas[1]},
        "person_scale": manifest.person_scale,
        "distance": manifest.distance,
        "jitter": manifest.jitter,
        "num_steps": manifest.num_steps,
        "harmony": {"tau": manifest.harmony.tau,
                    "hard_fraction": manifest.harmony.hard_fraction},
    }


def manifest_from_json(obj: dict) -> BenchmarkManifest:
    harmony = obj.get("harmony", {})
    return BenchmarkManifest(
        identity_pool=obj["identity_pool"],
        setting_pool=obj["setting_pool"],
        seed=obj.get("seed", 0),
        counts=obj["counts"],
        canvas=(obj["canvas"]["h"], obj["canvas"]["w"]) if "canvas" in obj else (64, 64),
        person_scale=obj.get("person_scale", 0.75),
        distance=obj.get("distance", 1.0),
        jitter=obj.get("jitter", 0.02),
        num_steps=obj.get("num_steps", 20),
        harmony=HarmonyParams(tau=harmony.get("tau", 0.001),
                              hard_fraction=harmony.get("hard_fraction", 0.25)),
    )


def load_manifest(path) -> BenchmarkManifest:
    with open(path) as f:
        return manifest_from_json(json.load(f))


def save_manifest(manifest: BenchmarkManifest, path):
    with open(path, "w") as f:
        json.dump(manifest_to_json(manifest), f, indent=2)


def save_scene_list(scenes, path):
    with open(path, "w") as f:
        json.dump({"version": 1, "scenes": [scene_to_json(s) for s in scenes]}, f, indent=2)


def load_scene_list(path) -> list:
    with open(path) as f:
        obj = json.load(f)
    return [scene_from_json(s) for s in obj["scenes"]]
