"""Per-instance prompt assembly and rule-based global prompt parsing.

A scene is N (pose, identity text) pairs plus a shared setting text. A global
description like "a wizard on the left and a knight on the right, in a
forest" can be parsed back into per-instance assignments by matching the
stated relative positions against the poses' centroid order.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .diffusion import SamplerConfig
from .errors import DomainError
from .pose_geometry import Pose2D, pose_from_json, pose_to_json

SCENE_SCHEMA_VERSION = 1

MODES = ("FINECONTROL", "X_COMPOSE", "H_V2", "GLOBAL")


@dataclass
class HarmonyParams:
    """Mask temperature and the fraction of initial steps run with hard
    (argmax) masks."""

    tau: float = 0.001
    hard_fraction: float = 0.25

    def __post_init__(self):
        if self.tau <= 0:
            raise DomainError("NONPOSITIVE_TEMPERATURE", f"tau must be > 0, got {self.tau}")
        if not 0.0 <= self.hard_fraction <= 1.0:
            raise DomainError("INVALID_RANGE", "hard_fraction must be in [0, 1]")


@dataclass
class InstanceSpec:
    pose: Pose2D
    identity_text: str

    def __post_init__(self):
        if not self.identity_text:
            raise DomainError("EMPTY_IDENTITY", "identity_text must be non-empty")

    @property
    def assigned_prompt(self) -> str:
        return ""  # populated per scene via build_instance_prompt


@dataclass
class SceneSpec:
    instances: list
    setting_text: str = ""
    canvas: tuple = (64, 64)
    seed: int = 0
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    harmony: HarmonyParams = field(default_factory=HarmonyParams)
    mode: str = "FINECONTROL"

    def __post_init__(self):
        if not self.instances:
            raise DomainError("EMPTY_SCENE", "a scene needs at least one instance")
        if self.canvas[0] <= 0 or self.canvas[1] <= 0:
            raise DomainError("INVALID_RANGE", f"canvas must be positive, got {self.canvas}")
        if self.mode not in MODES:
            raise DomainError("INVALID_RANGE", f"mode must be one of {MODES}")

    @property
    def n_instances(self) -> int:
        return len(self.instances)

    def prompts(self) -> list:
        return [build_instance_prompt(i.identity_text, self.setting_text) for i in self.instances]


def build_instance_prompt(identity: str, setting: str) -> str:
    """"{identity}, {setting}"; the setting is elided when empty."""
    if not identity:
        raise DomainError("EMPTY_IDENTITY", "identity must be non-empty")
    if not setting:
        return identity
    return f"{identity}, {setting}"


# position grammar -------------------------------------------------------

_ORDINALS = {"first": 1, "second": 2, "third": 3, "fourth": 4, "fifth": 5,
             "sixth": 6, "seventh": 7, "eighth": 8}

_POSITION_PATTERNS = [
    (re.compile(r"\bon the (far )?left\b"), lambda n, m: 0),
    (re.compile(r"\bon the (far )?right\b"), lambda n, m: n - 1),
    (re.compile(r"\bin the (middle|center)\b"), lambda n, m: (n - 1) // 2),
    (re.compile(r"\b(" + "|".join(_ORDINALS) + r") from (the )?left\b"),
     lambda n, m: _ORDINALS[m.group(1)] - 1),
    (re.compile(r"\b(" + "|".join(_ORDINALS) + r") from (the )?right\b"),
     lambda n, m: n - _ORDINALS[m.group(1)]),
]


def _extract_position(clause: str, n: int):
    """(identity text without the position phrase, slot index or None)."""
    for pattern, slot_fn in _POSITION_PATTERNS:
        m = pattern.search(clause)
        if m:
            slot = slot_fn(n, m)
            ident = (clause[:m.start()] + clause[m.end():]).strip(" ,")
            return ident, slot
    return clause.strip(" ,"), None


def _split_clauses(text: str) -> list:
    parts = []
    for chunk in text.split(","):
        parts.extend(re.split(r"\band\b", chunk))
    return [p.strip() for p in parts if p.strip()]


def parse_global_prompt(global_text: str, poses) -> tuple:
    """Split a global description into per-pose identity bindings and a
    setting.

    Identity clauses are bound to poses by sorting pose centroids by x and
    matching the clauses' position keywords; clauses without keywords fill
    the remaining slots left to right. The trailing keyword-free clause is
    the setting. Returns ([(pose_index, identity_text), ...], setting_text).
    """
    n = len(poses)
    clauses = _split_clauses(global_text)
    if not clauses:
        raise DomainError("COUNT_MISMATCH", "empty global prompt")

    parsed = [_extract_position(c, n) for c in clauses]
    setting = ""
    any_keyword = any(slot is not None for _, slot in parsed[:-1])
    trailing_free = parsed and parsed[-1][1] is None
    if trailing_free and (len(parsed) > n or (len(parsed) == n and any_keyword)):
        setting = parsed[-1][0]
        parsed = parsed[:-1]
    if len(parsed) != n:
        raise DomainError(
            "COUNT_MISMATCH",
            f"{len(parsed)} identity clauses for {n} poses in {global_text!r}",
        )

    order = sorted(range(n), key=lambda i: float(poses[i].centroid()[0]))
    slots: dict = {}
    unplaced = []
    for ident, slot in parsed:
        if slot is None:
            unplaced.append(ident)
            continue
        if not 0 <= slot < n:
            raise DomainError("AMBIGUOUS_POSITION", f"position of {ident!r} is out of range")
        if slot in slots:
            raise DomainError("AMBIGUOUS_POSITION", f"two clauses claim slot {slot}")
        slots[slot] = ident
    free = [s for s in range(n) if s not in slots]
    for ident, slot in zip(unplaced, free):
        slots[slot] = ident

    assignments = [(order[slot], ident) for slot, ident in sorted(slots.items())]
    assignments.sort(key=lambda pair: pair[0])
    return assignments, setting


def global_prompt_for(scene: SceneSpec) -> str:
    """GLOBAL-mode baseline text: identities in left-to-right pose order,
    then the setting."""
    order = sorted(range(scene.n_instances),
                   key=lambda i: float(scene.instances[i].pose.centroid()[0]))
    parts = [scene.instances[i].identity_text for i in order]
    if scene.setting_text:
        parts.append(scene.setting_text)
    return ", ".join(parts)


# serialization ----------------------------------------------------------

SCENE_JSON_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "canvas", "instances"],
    "properties": {
        "version": {"const": SCENE_SCHEMA_VERSION},
        "canvas": {
            "type": "object",
            "required": ["h", "w"],
            "properties": {
                "h": {"type": "integer", "minimum": 8},
                "w": {"type": "integer", "minimum": 8},
            },
        },
        "seed": {"type": "integer"},
        "mode": {"enum": list(MODES)},
        "sampler": {
            "type": "object",
            "properties": {
                "steps": {"type": "integer", "minimum": 1},
                "eta": {"type": "number", "minimum": 0},
                "guidance": {"type": "number"},
            },
        },
        "harmony": {
            "type": "object",
            "properties": {
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "hard_fraction": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
        "setting": {"type": "string"},
        "instances": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["identity", "pose"],
                "properties": {
                    "identity": {"type": "string", "minLength": 1},
                    "pose": {
                        "type": "object",
                        "required": ["format", "keypoints"],
                        "properties": {
                            "format": {"enum": ["COCO17", "OPENPOSE18"]},
                            "keypoints": {
                                "type": "array",
                                "items": {
                                    "type": "array",
                                    "minItems": 3,
                                    "maxItems": 3,
                                    "items": {"type": "number"},
                                },
                            },
                        },
                    },
                },
            },
        },
    },
}


def scene_to_json(scene: SceneSpec) -> dict:
    return {
        "version": SCENE_SCHEMA_VERSION,
        "canvas": {"h": scene.canvas[0], "w": scene.canvas[1]},
        "seed": scene.seed,
        "mode": scene.mode,
        "sampler": {
            "steps": scene.sampler.num_steps,
            "eta": scene.sampler.eta,
            "guidance": scene.sampler.guidance_scale,
        },
        "harmony": {"tau": scene.harmony.tau, "hard_fraction": scene.harmony.hard_fraction},
        "setting": scene.setting_text,
        "instances": [
            {"identity": inst.identity_text, "pose": pose_to_json(inst.pose)}
            for inst in scene.instances
        ],
    }


def scene_from_json(obj: dict) -> SceneSpec:
    sampler = obj.get("sampler", {})
    harmony = obj.get("harmony", {})
    return SceneSpec(
        instances=[
            InstanceSpec(pose=pose_from_json(i["pose"]), identity_text=i["identity"])
            for i in obj["instances"]
        ],
        setting_text=obj.get("setting", ""),
        canvas=(obj["canvas"]["h"], obj["canvas"]["w"]),
        seed=obj.get("seed", 0),
        sampler=SamplerConfig(
            num_steps=sampler.get("steps", 20),
            eta=sampler.get("eta", 0.0),
            seed=obj.get("seed", 0),
            guidance_scale=sampler.get("guidance", 1.0),
        ),
        harmony=HarmonyParams(
            tau=harmony.get("tau", 0.001),
            hard_fraction=harmony.get("hard_fraction", 0.25),
        ),
        mode=obj.get("mode", "FINECONTROL"),
    )


def save_scene(scene: SceneSpec, path):
    with open(path, "w") as f:
        json.dump(scene_to_json(scene), f, indent=2)


def load_scene(path) -> SceneSpec:
    with open(path) as f:
        return scene_from_json(json.load(f))
