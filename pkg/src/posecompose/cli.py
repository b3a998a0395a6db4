"""Command line entry points.

Subcommands: generate, bench, sweep, train-toy, metrics, serve. The delta
(render-target) denoiser is the default backend; pass --checkpoint to use a
trained tiny denoiser.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys


def _build_parser():
    p = argparse.ArgumentParser(prog="posecompose")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate one scene")
    g.add_argument("--scene", required=True, help="SceneSpec JSON file")
    g.add_argument("--mode", default=None,
                   choices=["FINECONTROL", "X_COMPOSE", "H_V2", "GLOBAL"])
    g.add_argument("--steps", type=int, default=None)
    g.add_argument("--tau", type=float, default=None)
    g.add_argument("--hard-frac", type=float, default=None)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--checkpoint", default=None)

    b = sub.add_parser("bench", help="run the benchmark over modes")
    b.add_argument("--manifest", required=True)
    b.add_argument("--modes", nargs="+",
                   default=["FINECONTROL", "X_COMPOSE", "H_V2", "GLOBAL"])
    b.add_argument("--seeds", type=int, default=1, help="noise seeds per scene")
    b.add_argument("--out", required=True)
    b.add_argument("--checkpoint", default=None)

    s = sub.add_parser("sweep", help="robustness sweep along one axis")
    s.add_argument("--axis", required=True,
                   choices=["PEOPLE_COUNT", "PERSON_SCALE", "INTER_DISTANCE"])
    s.add_argument("--values", nargs="+", type=float, default=None)
    s.add_argument("--scenes", type=int, default=8)
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", default=None)

    t = sub.add_parser("train-toy", help="train the tiny denoiser")
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--scenes", type=int, default=192)
    t.add_argument("--identities", nargs="+", default=["red", "green"])
    t.add_argument("--out", required=True, help="checkpoint path")

    m = sub.add_parser("metrics", help="score pre-generated images")
    m.add_argument("--pred", required=True, help="directory of scene_NNNN.png files")
    m.add_argument("--gt", required=True, help="scene list JSON")
    m.add_argument("--out", default=None, help="optional CSV path")

    v = sub.add_parser("serve", help="run the HTTP job service")
    v.add_argument("--port", type=int, default=int(os.environ.get("PORT", 8000)))
    v.add_argument("--host", default="127.0.0.1")
    return p


def _denoiser(args, sched):
    from .benchio import delta_render_factory, tiny_factory
    from .denoisers.checkpoint import load_params

    if getattr(args, "checkpoint", None):
        return tiny_factory(load_params(args.checkpoint), sched)
    return delta_render_factory(sched)


def _cmd_generate(args):
    from .benchio import save_image
    from .composer import generate
    from .diffusion import make_schedule
    from .pose_geometry import masks_for_scene, save_mask_pngs
    from .prompting import load_scene

    scene = load_scene(args.scene)
    if args.seed is not None:
        scene = dataclasses.replace(scene, seed=args.seed)
    if args.steps is not None:
        scene = dataclasses.replace(
            scene, sampler=dataclasses.replace(scene.sampler, num_steps=args.steps))
    harmony = scene.harmony
    if args.tau is not None:
        harmony = dataclasses.replace(harmony, tau=args.tau)
    if args.hard_frac is not None:
        harmony = dataclasses.replace(harmony, hard_fraction=args.hard_frac)
    scene = dataclasses.replace(scene, harmony=harmony)
    if args.mode:
        scene = dataclasses.replace(scene, mode=args.mode)

    sched = make_schedule()
    image, trace = generate(scene, _denoiser(args, sched))
    os.makedirs(args.out, exist_ok=True)
    save_image(image, os.path.join(args.out, "image.png"))
    with open(os.path.join(args.out, "trace.json"), "w") as f:
        json.dump(trace, f, indent=2)
    maskset = masks_for_scene([i.pose for i in scene.instances], *scene.canvas,
                              tau=scene.harmony.tau, mode="SOFT")
    save_mask_pngs(maskset, os.path.join(args.out, "masks"))
    print(f"wrote image, trace, and masks to {args.out}")


def _cmd_bench(args):
    from .benchio import load_manifest, run_benchmark, synth_scenes, write_report
    from .diffusion import make_schedule

    manifest = load_manifest(args.manifest)
    scenes = synth_scenes(manifest)
    sched = make_schedule()
    os.makedirs(args.out, exist_ok=True)
    seeds = list(range(args.seeds)) if args.seeds > 1 else None
    table, _ = run_benchmark(
        scenes, args.modes, _denoiser(args, sched),
        jsonl_path=os.path.join(args.out, "per_instance.jsonl"), seeds=seeds)
    csv_text = write_report(table, "CSV", os.path.join(args.out, "report.csv"))
    write_report(table, "MARKDOWN", os.path.join(args.out, "report.md"))
    print(csv_text)


def _cmd_sweep(args):
    from .benchio import (BenchmarkManifest, SweepConfig, emit_plots,
                          robustness_sweep, write_report)
    from .diffusion import make_schedule

    values = args.values
    if values is not None and args.axis == "PEOPLE_COUNT":
        values = [int(v) for v in values]
    config = SweepConfig(axis=args.axis, values=values)
    manifest = BenchmarkManifest(counts=[3] * args.scenes)
    sched = make_schedule()
    results = robustness_sweep(config, _denoiser(args, sched),
                               seeds=list(range(args.seeds)), manifest=manifest)
    os.makedirs(args.out, exist_ok=True)
    table = {f"{args.axis}={v}": r for v, r in results.items()}
    print(write_report(table, "CSV", os.path.join(args.out, "sweep.csv")))
    emit_plots(results, args.out, axis_label=args.axis.lower())


def _cmd_train_toy(args):
    from .denoisers.checkpoint import save_params
    from .denoisers.tiny import make_training_set, train_tiny_denoiser
    from .diffusion import make_schedule

    sched = make_schedule()
    dataset = make_training_set(args.scenes, args.identities,
                                ["plain gray backdrop"], 64, 64, seed=args.seed)
    params, history = train_tiny_denoiser(
        dataset, sched, epochs=args.epochs, seed=args.seed, batch_size=16, lr=3e-3,
        log=lambda e, l: print(f"epoch {e}: loss {l:.2f}", flush=True))
    save_params(params, args.out)
    drop = 1.0 - history[-1] / history[0]
    print(f"saved {args.out}; loss {history[0]:.1f} -> {history[-1]:.1f} ({drop:.1%} drop)")


def _cmd_metrics(args):
    from .benchio import (aggregate_report, load_image, load_scene_list,
                          scene_instance_rows, write_report)
    from .metrics import hnd, toy_pose_detector, toy_similarity_oracle

    scenes = load_scene_list(args.gt)
    oracle, detector = toy_similarity_oracle(), toy_pose_detector()
    rows, hnds, gts, dets = [], [], [], []
    for i, scene in enumerate(scenes):
        path = os.path.join(args.pred, f"scene_{i:04d}.png")
        if not os.path.exists(path):
            print(f"missing {path}", file=sys.stderr)
            continue
        image = load_image(path)
        r, d = scene_instance_rows(image, scene, oracle, detector)
        rows.extend(r)
        hnds.append(hnd(scene.n_instances, len(d)))
        gts.append([inst.pose for inst in scene.instances])
        dets.append(d)
    report = aggregate_report(rows, hnds, gts, dets)
    text = write_report({"pred": report}, "CSV", args.out)
    print(text)


def _cmd_serve(args):
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)


def main(argv=None):
    args = _build_parser().parse_args(argv)
    cmd = {
        "generate": _cmd_generate,
        "bench": _cmd_bench,
        "sweep": _cmd_sweep,
        "train-toy": _cmd_train_toy,
        "metrics": _cmd_metrics,
        "serve": _cmd_serve,
    }[args.command]
    cmd(args)


if __name__ == "__main__":
    main()
