import itertools

import numpy as np
import pytest

from posecompose.errors import DomainError
from posecompose.pose_geometry import make_figure_pose
from posecompose.prompting import (
    HarmonyParams,
    InstanceSpec,
    SceneSpec,
    build_instance_prompt,
    global_prompt_for,
    parse_global_prompt,
    scene_from_json,
    scene_to_json,
)


def poses_at(xs):
    return [make_figure_pose(x, 32, 20) for x in xs]


class TestBuildPrompt:
    def test_template(self):
        assert build_instance_prompt("an astronaut", "on the moon") == "an astronaut, on the moon"

    def test_empty_setting_elided(self):
        assert build_instance_prompt("a soldier", "") == "a soldier"

    def test_empty_identity(self):
        with pytest.raises(DomainError) as e:
            build_instance_prompt("", "x")
        assert e.value.code == "EMPTY_IDENTITY"


class TestParseGlobal:
    def test_two_slot_grammar(self):
        poses = poses_at([10, 50])
        binding, setting = parse_global_prompt(
            "a wizard on the left and a knight on the right, in a forest", poses)
        assert binding == [(0, "a wizard"), (1, "a knight")]
        assert setting == "in a forest"

    def test_reversed_pose_list_same_binding(self):
        poses = poses_at([50, 10])
        binding, setting = parse_global_prompt(
            "a wizard on the left and a knight on the right, in a forest", poses)
        # pose index 1 is the leftmost centroid now
        assert sorted(binding) == [(0, "a knight"), (1, "a wizard")]

    def test_middle_keyword_matches_exhaustive_assignment(self):
        poses = poses_at([40, 12, 55])
        text = ("a monk on the left, a pirate in the middle and "
                "a queen on the right, in a castle")
        binding, setting = parse_global_prompt(text, poses)

        # oracle: enumerate all assignments, minimize keyword-slot mismatch
        idents = [("a monk", 0), ("a pirate", 1), ("a queen", 2)]
        order = sorted(range(3), key=lambda i: poses[i].centroid()[0])
        best, best_cost = None, None
        for perm in itertools.permutations(range(3)):
            cost = sum(1 for slot, (_, want) in zip(perm, idents) if slot != want)
            if best_cost is None or cost < best_cost:
                best_cost, best = cost, perm
        expected = sorted((order[slot], idents[k][0]) for k, slot in enumerate(best))
        assert sorted(binding) == expected
        assert setting == "in a castle"

    def test_residual_left_to_right(self):
        poses = poses_at([10, 30, 50])
        binding, setting = parse_global_prompt("a cat, a dog, a fox, in a yard", poses)
        assert binding == [(0, "a cat"), (1, "a dog"), (2, "a fox")]
        assert setting == "in a yard"

    def test_count_mismatch(self):
        with pytest.raises(DomainError) as e:
            parse_global_prompt("a cat on the left, in a yard", poses_at([10, 40]))
        assert e.value.code == "COUNT_MISMATCH"

    def test_ambiguous_position(self):
        with pytest.raises(DomainError) as e:
            parse_global_prompt("a cat on the left and a dog on the left, in a yard",
                                poses_at([10, 40]))
        assert e.value.code == "AMBIGUOUS_POSITION"

    def test_round_trip_from_global_builder(self):
        scene = SceneSpec(
            instances=[InstanceSpec(p, t) for p, t in
                       zip(poses_at([12, 32, 52]), ["a cat", "a dog", "a fox"])],
            setting_text="in a yard", canvas=(64, 64))
        text = global_prompt_for(scene)
        binding, setting = parse_global_prompt(text, [i.pose for i in scene.instances])
        assert binding == [(0, "a cat"), (1, "a dog"), (2, "a fox")]
        assert setting == "in a yard"

    def test_build_parse_build_fixed_point(self):
        poses = poses_at([10, 50])
        text = "a wizard on the left and a knight on the right, in a forest"
        binding, setting = parse_global_prompt(text, poses)
        prompts = [build_instance_prompt(ident, setting) for _, ident in binding]
        binding2, setting2 = parse_global_prompt(
            ", ".join([ident for _, ident in binding] + [setting]), poses)
        assert binding2 == binding
        assert setting2 == setting
        assert prompts == [build_instance_prompt(i, setting2) for _, i in binding2]


class TestSceneJson:
    def test_round_trip(self):
        scene = SceneSpec(
            instances=[InstanceSpec(p, t) for p, t in
                       zip(poses_at([20, 44]), ["red", "cyan"])],
            setting_text="plain gray backdrop", canvas=(64, 64), seed=7,
            harmony=HarmonyParams(tau=0.01, hard_fraction=0.5), mode="X_COMPOSE")
        obj = scene_to_json(scene)
        again = scene_from_json(obj)
        assert again.setting_text == scene.setting_text
        assert again.seed == 7
        assert again.mode == "X_COMPOSE"
        assert again.harmony.tau == 0.01
        assert np.allclose(again.instances[0].pose.keypoints,
                           scene.instances[0].pose.keypoints)

    def test_validation(self):
        with pytest.raises(DomainError):
            SceneSpec(instances=[], setting_text="x", canvas=(64, 64))
        with pytest.raises(DomainError):
            HarmonyParams(tau=-1.0)
        with pytest.raises(DomainError):
            HarmonyParams(hard_fraction=1.5)
