"""Command-line interface.

Subcommands: make-synth, train-prior, optimize, eval, export, repose,
transfer-texture. Configuration comes from a JSON file plus flag
overrides; every run is seeded.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", type=str, default=None)


def _cmd_make_synth(args) -> int:
    from .synth import SyntheticSpec, make_synth

    spec = SyntheticSpec(
        template=args.template,
        n=args.n,
        image_size=(args.size, args.size),
        feature_size=(args.size, args.size),
        noise_sigma=args.noise,
        nu=args.nu,
        nv=args.nv,
    )
    out, _ = make_synth(spec, seed=args.seed, out_dir=args.out)
    print(f"wrote synthetic ensemble to {out}")
    return 0


def _cmd_train_prior(args) -> int:
    from .parts import make_sphere
    from .prior import VaeConfig, sample_primitive_dataset, save_vae, train_part_vae

    topo = make_sphere(args.nu, args.nv)
    rng = np.random.default_rng(args.seed)
    dataset = sample_primitive_dataset(topo, args.samples, rng)
    cfg = VaeConfig(
        latent_dim=args.latent_dim,
        hidden=args.hidden,
        epochs=args.epochs,
        batch_size=args.batch_size,
        lr=args.lr,
        beta=args.beta,
    )
    vae, history = train_part_vae(dataset, topo, cfg, seed=args.seed, log_every=args.log_every)
    save_vae(args.out, vae, extra_meta={"samples": args.samples, "seed": args.seed})
    print(f"trained prior saved to {args.out} (final recon {history[-1]['recon']:.5f})")
    return 0


def _load_config(args):
    from .pipeline import FitConfig

    cfg = FitConfig.from_json(args.config) if args.config else FitConfig()
    for key in ("ensemble", "prior", "part_map", "skeleton", "out_dir"):
        val = getattr(args, key.replace("-", "_"), None)
        if val is not None:
            setattr(cfg, key, val)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.phases:
        cfg.phases = tuple(int(x) for x in args.phases.split(","))
    if args.no_part_prior:
        cfg.use_part_prior = False
    if args.sem_weight is not None:
        cfg.weights.sem = args.sem_weight
    return cfg


def _cmd_optimize(args) -> int:
    from .pipeline import optimize_ensemble

    cfg = _load_config(args)
    result = optimize_ensemble(cfg, progress=not args.quiet)
    if not cfg.out_dir:
        result.save(args.checkpoint or "result.ckpt")
    print("optimization finished")
    return 0


def _cmd_eval(args) -> int:
    from .features import load_ensemble
    from .metrics import build_scene, iou, part_iou, pck, transfer_part_pcp
    from .pipeline import FitResult
    from .render import Camera, hard_rasterize
    from .synth import load_truth

    result = FitResult.load(args.checkpoint)
    ensemble = load_ensemble(args.ensemble)
    scenes = [
        build_scene(result.meshes(j), result.cameras[j], vis_eps=result.config.vis_eps)
        for j in range(result.n)
    ]
    report: dict = {}
    if any(k is not None for k in ensemble.keypoints):
        report["pck@0.1"] = pck(scenes, ensemble.keypoints, 0.1)
        report["pck@0.05"] = pck(scenes, ensemble.keypoints, 0.05)
    if ensemble.masks is not None:
        vals = []
        for j in range(result.n):
            buf = hard_rasterize(result.meshes(j), result.cameras[j])
            vals.append(iou(buf.silhouette, ensemble.masks[j]))
        report["mean_overall_iou"] = float(np.mean(vals))
    gt_dir = Path(args.ensemble) / "gt"
    if gt_dir.exists():
        truth = load_truth(args.ensemble)
        groups = torch.from_numpy(truth.part_groups)

        def label_cam(j):
            cam = result.cameras[j]
            return Camera(
                rotation=cam.rotation,
                translation=cam.translation,
                focal=cam.focal,
                size=tuple(truth.label_size),
            )

        label_scenes = [
            build_scene(result.meshes(j), label_cam(j), vis_eps=result.config.vis_eps)
            for j in range(result.n)
        ]
        report["pcp"] = transfer_part_pcp(label_scenes, truth.group_labels)
        pivals = []
        for j in range(result.n):
            buf = hard_rasterize(result.meshes(j), label_cam(j))
            pred_groups = torch.where(
                buf.part_index >= 0,
                groups[buf.part_index.clamp(min=0)],
                torch.tensor(-1),
            )
            pivals.append(part_iou(pred_groups, truth.group_labels[j]))
        report["mean_part_iou"] = float(np.mean(pivals))
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _cmd_export(args) -> int:
    from .features import load_ensemble
    from .pipeline import FitResult, export_meshes, sample_texture

    result = FitResult.load(args.checkpoint)
    colors = None
    if args.ensemble:
        ens = load_ensemble(args.ensemble)
        if ens.images[args.instance] is not None:
            colors = sample_texture(result, args.instance, ens.images[args.instance])
    paths = export_meshes(
        result,
        args.instance,
        args.out_dir or ".",
        colors=colors,
        overlays=args.overlays,
    )
    for p in paths:
        print(f"wrote {p}")
    return 0


def _cmd_repose(args) -> int:
    from .pipeline import FitResult, export_meshes, repose

    result = FitResult.load(args.checkpoint)
    pose = torch.tensor(json.loads(Path(args.pose).read_text()), dtype=torch.float32)
    meshes = repose(result, pose)
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "reposed.obj"
    m = result.topo.num_vertices
    with open(path, "w") as fh:
        for mesh in meshes:
            for v in mesh.vertices.tolist():
                fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for i, mesh in enumerate(meshes):
            fh.write(f"g {result.skeleton.part_names[i]}\n")
            for f in (mesh.faces + i * m + 1).tolist():
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")
    print(f"wrote {path}")
    return 0


def _cmd_transfer_texture(args) -> int:
    from .features import load_ensemble
    from .pipeline import FitResult, export_meshes, sample_texture, transfer_texture

    src = FitResult.load(args.src_checkpoint)
    dst = FitResult.load(args.dst_checkpoint)
    ens = load_ensemble(args.src_ensemble)
    colors = sample_texture(src, args.src_instance, ens.images[args.src_instance])
    moved = transfer_texture(src, colors, dst)
    paths = export_meshes(dst, args.dst_instance, args.out_dir or ".", formats=("ply",), colors=moved)
    for p in paths:
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partfit",
        description="Articulated part-based 3D shape fitting from feature ensembles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synth", help="generate a synthetic ensemble with ground truth")
    p.add_argument("--out", required=True)
    p.add_argument("--template", default="quadruped")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--nu", type=int, default=16)
    p.add_argument("--nv", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_make_synth)

    p = sub.add_parser("train-prior", help="train the primitive shape prior")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--latent-dim", type=int, default=32)
    p.add_argument("--hidden", type=int, default=256)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--beta", type=float, default=1e-3)
    p.add_argument("--nu", type=int, default=16)
    p.add_argument("--nv", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=20)
    p.set_defaults(func=_cmd_train_prior)

    p = sub.add_parser("optimize", help="fit an ensemble")
    p.add_argument("--config", default=None)
    p.add_argument("--ensemble", default=None)
    p.add_argument("--prior", default=None)
    p.add_argument("--part-map", dest="part_map", default=None)
    p.add_argument("--skeleton", default=None)
    p.add_argument("--phases", default=None, help="comma-separated phase lengths")
    p.add_argument("--no-part-prior", action="store_true")
    p.add_argument("--sem-weight", type=float, default=None)
    p.add_argument("--checkpoint", default=None, help="output checkpoint when no out-dir")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.set_defaults(func=_cmd_optimize)

    p = sub.add_parser("eval", help="score a checkpoint against ensemble annotations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export", help="export meshes and overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--ensemble", default=None)
    p.add_argument("--overlays", action="store_true")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("repose", help="write the shared shape under a new pose")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pose", required=True, help="JSON file with a (b, 3) angle array")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.set_defaults(func=_cmd_repose)

    p = sub.add_parser("transfer-texture", help="move sampled texture between results")
    p.add_argument("--src-checkpoint", required=True)
    p.add_argument("--src-ensemble", required=True)
    p.add_argument("--src-instance", type=int, default=0)
    p.add_argument("--dst-checkpoint", required=True)
    p.add_argument("--dst-instance", type=int, default=0)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.set_defaults(func=_cmd_transfer_texture)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
