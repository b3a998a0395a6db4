import numpy as np
import pytest

from posecompose.composer import (
    branch_conditions,
    compose_latents,
    generate,
    global_conditions,
    hard_step_count,
    run_single_branch,
)
from posecompose.denoisers import delta_denoiser, stack_denoisers
from posecompose.diffusion import SamplerConfig, make_schedule
from posecompose.errors import DomainError
from posecompose.pose_geometry import MaskMode, make_figure_pose, masks_for_scene
from posecompose.prompting import HarmonyParams, InstanceSpec, SceneSpec


@pytest.fixture(scope="module")
def sched():
    return make_schedule()


def two_instance_scene(seed=5, steps=20, hard_fraction=0.25, identities=("red", "green")):
    p1 = make_figure_pose(20, 32, 34)
    p2 = make_figure_pose(45, 32, 34)
    return SceneSpec(
        instances=[InstanceSpec(p1, identities[0]), InstanceSpec(p2, identities[1])],
        setting_text="plain gray backdrop",
        canvas=(64, 64),
        seed=seed,
        sampler=SamplerConfig(num_steps=steps, seed=seed),
        harmony=HarmonyParams(hard_fraction=hard_fraction),
    )


class TestComposeLatents:
    def test_single_instance_identity(self):
        h = np.random.default_rng(0).standard_normal((1, 8, 8, 3))
        out = compose_latents(h, np.ones((1, 8, 8)))
        assert np.array_equal(out, h[0])

    def test_identical_latents_fixed_point(self):
        rng = np.random.default_rng(1)
        h = rng.standard_normal((8, 8, 4))
        stack = np.stack([h, h, h])
        occs = (rng.random((3, 8, 8)) < 0.4).astype(float)
        from posecompose.pose_geometry import normalize_masks
        masks = normalize_masks(list(occs), tau=0.1)
        out = compose_latents(stack, masks.base)
        assert np.abs(out - h).max() < 1e-12

    def test_matches_per_pixel_loop_oracle(self):
        rng = np.random.default_rng(2)
        stack = rng.standard_normal((2, 6, 5, 3))
        m = rng.random((2, 6, 5))
        m /= m.sum(axis=0)
        out = compose_latents(stack, m)
        expected = np.zeros((6, 5, 3))
        for y in range(6):
            for x in range(5):
                for c in range(3):
                    expected[y, x, c] = sum(m[i, y, x] * stack[i, y, x, c] for i in range(2))
        assert np.abs(out - expected).max() < 1e-7

    def test_convexity(self):
        rng = np.random.default_rng(3)
        stack = rng.standard_normal((3, 8, 8, 2))
        m = rng.random((3, 8, 8))
        m /= m.sum(axis=0)
        out = compose_latents(stack, m)
        lo = stack.min(axis=0) - 1e-12
        hi = stack.max(axis=0) + 1e-12
        assert (out >= lo).all() and (out <= hi).all()

    def test_shape_mismatch(self):
        with pytest.raises(DomainError) as e:
            compose_latents(np.zeros((2, 4, 4, 3)), np.zeros((2, 5, 5)))
        assert e.value.code == "SHAPE_MISMATCH"


class TestClosedFormComposition:
    def test_fine_equals_masked_blend_n2(self, sched):
        scene = two_instance_scene()
        rng = np.random.default_rng(0)
        A = rng.standard_normal((64, 64, 3))
        B = rng.standard_normal((64, 64, 3))
        den = stack_denoisers([delta_denoiser(A, sched), delta_denoiser(B, sched)])
        img, trace = generate(scene, den, mode="FINECONTROL")
        masks = masks_for_scene([i.pose for i in scene.instances], 64, 64,
                                tau=scene.harmony.tau, mode=MaskMode.SOFT, line_width=1.0)
        expected = compose_latents(np.stack([A, B]), masks.base)
        assert np.abs(img - expected).max() < 1e-4

    def test_fine_equals_masked_blend_n3(self, sched):
        poses = [make_figure_pose(14, 32, 26), make_figure_pose(32, 32, 26),
                 make_figure_pose(50, 32, 26)]
        scene = SceneSpec(
            instances=[InstanceSpec(p, t) for p, t in zip(poses, ["red", "green", "blue"])],
            setting_text="", canvas=(64, 64), seed=3,
            sampler=SamplerConfig(num_steps=20), harmony=HarmonyParams())
        rng = np.random.default_rng(1)
        targets = [rng.standard_normal((64, 64, 3)) for _ in range(3)]
        den = stack_denoisers([delta_denoiser(t, sched) for t in targets])
        img, _ = generate(scene, den, mode="FINECONTROL")
        masks = masks_for_scene(poses, 64, 64, tau=0.001, mode=MaskMode.SOFT, line_width=1.0)
        expected = compose_latents(np.stack(targets), masks.base)
        assert np.abs(img - expected).max() < 1e-4

    def test_hard_disjoint_bit_invariance(self, sched):
        # all-hard schedule, well-separated figures: region pixels match their
        # own target bitwise and ignore the other target entirely
        scene = two_instance_scene(hard_fraction=1.0)
        rng = np.random.default_rng(4)
        A = rng.standard_normal((64, 64, 3))
        B1 = rng.standard_normal((64, 64, 3))
        B2 = rng.standard_normal((64, 64, 3))
        img1, _ = generate(scene, stack_denoisers(
            [delta_denoiser(A, sched), delta_denoiser(B1, sched)]), mode="FINECONTROL")
        img2, _ = generate(scene, stack_denoisers(
            [delta_denoiser(A, sched), delta_denoiser(B2, sched)]), mode="FINECONTROL")
        masks = masks_for_scene([i.pose for i in scene.instances], 64, 64,
                                tau=0.001, mode=MaskMode.HARD, line_width=1.0)
        region0 = masks.base[0] == 1.0
        assert region0.sum() > 100
        # own-region pixels reproduce the target to float accumulation error
        assert np.abs(img1[region0] - A[region0]).max() < 1e-9
        # and are bit-identical no matter what the other instance's target is
        assert np.array_equal(img1[region0], img2[region0])
        background = (masks.base[0] == 0.5)
        expected_bg1 = 0.5 * A + 0.5 * B1
        assert np.abs(img1[background] - expected_bg1[background]).max() < 1e-4

    def test_x_compose_same_fixed_point_for_delta(self, sched):
        scene = two_instance_scene()
        rng = np.random.default_rng(5)
        A = rng.standard_normal((64, 64, 3))
        B = rng.standard_normal((64, 64, 3))
        den = stack_denoisers([delta_denoiser(A, sched), delta_denoiser(B, sched)])
        img_fine, _ = generate(scene, den, mode="FINECONTROL")
        img_x, _ = generate(scene, den, mode="X_COMPOSE")
        assert np.abs(img_fine - img_x).max() < 1e-8

    def test_ddim_telescopes_to_target(self, sched):
        # delta denoiser drives any x_T to the target for any step count
        rng = np.random.default_rng(6)
        target = rng.standard_normal((16, 16, 3))
        den = stack_denoisers([delta_denoiser(target, sched)])
        pose = make_figure_pose(8, 8, 10)
        for steps in (1, 4, 20):
            scene = SceneSpec(instances=[InstanceSpec(pose, "red")], setting_text="",
                              canvas=(16, 16), seed=11,
                              sampler=SamplerConfig(num_steps=steps),
                              harmony=HarmonyParams())
            img, _ = generate(scene, den, mode="GLOBAL")
            assert np.abs(img - target).max() < 1e-4


class TestDegeneracyAndTrace:
    def test_n1_all_modes_equal_vanilla(self, sched):
        pose = make_figure_pose(32, 32, 34)
        scene = SceneSpec(instances=[InstanceSpec(pose, "red")],
                          setting_text="plain gray backdrop", canvas=(64, 64), seed=21,
                          sampler=SamplerConfig(num_steps=10), harmony=HarmonyParams())
        rng = np.random.default_rng(7)
        target = rng.standard_normal((64, 64, 3))
        den = stack_denoisers([delta_denoiser(target, sched)])
        tokens, control = branch_conditions(scene)
        ref = run_single_branch(den, tokens, control, scene.canvas,
                                scene.sampler, scene.seed)
        for mode in ("FINECONTROL", "X_COMPOSE", "H_V2", "GLOBAL"):
            out, _ = generate(scene, den, mode=mode)
            assert np.abs(out - ref).max() < 1e-6, mode

    def test_permutation_equivariance(self, sched):
        scene = two_instance_scene(seed=31)
        rng = np.random.default_rng(8)
        A = rng.standard_normal((64, 64, 3))
        B = rng.standard_normal((64, 64, 3))
        img1, _ = generate(scene, stack_denoisers(
            [delta_denoiser(A, sched), delta_denoiser(B, sched)]), mode="FINECONTROL")
        swapped = SceneSpec(
            instances=[scene.instances[1], scene.instances[0]],
            setting_text=scene.setting_text, canvas=scene.canvas, seed=scene.seed,
            sampler=scene.sampler, harmony=scene.harmony)
        img2, _ = generate(swapped, stack_denoisers(
            [delta_denoiser(B, sched), delta_denoiser(A, sched)]), mode="FINECONTROL")
        assert np.abs(img1 - img2).max() < 1e-9

    @pytest.mark.parametrize("steps,expected", [(4, 1), (20, 5), (50, 13)])
    def test_hard_step_count(self, steps, expected):
        assert hard_step_count(0.25, steps) == expected

    def test_trace_schedule(self, sched):
        scene = two_instance_scene(steps=20)
        rng = np.random.default_rng(9)
        den = stack_denoisers([delta_denoiser(rng.standard_normal((64, 64, 3)), sched)
                               for _ in range(2)])
        _, trace = generate(scene, den, mode="FINECONTROL")
        hard = [s for s in trace["steps"] if s["mask_mode"] == "HARD"]
        assert len(hard) == 5
        assert all(s["mask_mode"] == "HARD" for s in trace["steps"][:5])
        assert all(s["mask_mode"] == "SOFT" for s in trace["steps"][5:])
        assert trace["hard_steps"] == 5
        assert all(s["sites_composed"] == 2 for s in trace["steps"])  # delta: 1 site + eps

    def test_global_conditions_order(self):
        scene = two_instance_scene()
        tokens, union = global_conditions(scene)
        assert tokens.shape == (1, 3, 16)  # two identities + setting
        assert union.shape == (1, 64, 64, 1)

    def test_empty_scene_rejected(self):
        with pytest.raises(DomainError):
            SceneSpec(instances=[], setting_text="", canvas=(64, 64))
