"""Command-line interface.

Subcommands: gen-data, train-teacher, distill, ablate (attention | heads |
aux | lambda | cascade), export-attn, gradcheck, routing-check. Every
subcommand accepts --config (plain `key = value` file), --seed, --out-dir.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint, load_group
from .config import ExperimentConfig, load_config
from .heatmap import export_attention, write_ppm
from .instances import compute_stats, encode_set, make_query
from .pyramid import flatten_pyramid
from .scenes import generate_dataset
from .train import (
    ablate_attention,
    ablate_aux,
    ablate_cascade,
    ablate_heads,
    ablate_lambda,
    build_system,
    check_teacher_state,
    distill_student,
    heldout_scenes,
    strip_meta,
    train_teacher,
)
from . import verify

logger = logging.getLogger("condkd")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="plain-text key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out-dir", default="runs", help="artifact directory (default: runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condkd",
                                     description="instance-conditional distillation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="materialize scenes, stats, and previews")
    _add_common(p)
    p.add_argument("--count", type=int, default=64, help="number of scenes (default 64)")

    p = sub.add_parser("train-teacher", help="detection-only teacher pretraining")
    _add_common(p)

    p = sub.add_parser("distill", help="train a student against a teacher checkpoint")
    _add_common(p)
    p.add_argument("--teacher", help="teacher checkpoint (default <out-dir>/teacher.ckpt)")
    p.add_argument("--run-name", default="distill")

    p = sub.add_parser("ablate", help="run an ablation sweep")
    p.add_argument("which", choices=("attention", "heads", "aux", "lambda", "cascade"))
    _add_common(p)
    p.add_argument("--teacher", help="teacher checkpoint (default <out-dir>/teacher.ckpt)")
    p.add_argument("--seeds", default="0", help="comma-separated run seeds (default: 0)")

    p = sub.add_parser("export-attn", help="write attention heatmaps for one instance")
    _add_common(p)
    p.add_argument("--teacher", help="teacher checkpoint (default <out-dir>/teacher.ckpt)")
    p.add_argument("--student", required=True, help="distilled checkpoint with decoder weights")
    p.add_argument("--scene", type=int, default=0, help="held-out scene index")
    p.add_argument("--instance", type=int, default=0)
    p.add_argument("--head", type=int, default=0)

    p = sub.add_parser("gradcheck", help="finite-difference checks: ops + composed loss")
    _add_common(p)

    p = sub.add_parser("routing-check", help="gradient routing audit")
    _add_common(p)

    return parser


def _config(args) -> ExperimentConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, overrides)


def _teacher_path(args) -> str:
    return args.teacher or os.path.join(args.out_dir, "teacher.ckpt")


def _load_teacher_state(args):
    path = _teacher_path(args)
    if not os.path.exists(path):
        raise CheckpointError(f"teacher checkpoint not found: {path} (run train-teacher first)")
    return load_checkpoint(path)


def _seeds(raw: str) -> tuple[int, ...]:
    return tuple(int(s) for s in raw.split(",") if s.strip())


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    scenes = generate_dataset(cfg.scene_spec(), cfg.seed, args.count)
    s = cfg.image_size
    with open(os.path.join(args.out_dir, "scenes.csv"), "w") as f:
        f.write("scene,category,x1,y1,x2,y2\n")
        for i, scene in enumerate(scenes):
            for inst in scene.instances:
                x1, y1, x2, y2 = (int(round(c * s)) for c in inst.corners())
                f.write(f"{i},{inst.category},{x1},{y1},{x2},{y2}\n")
    stats = compute_stats([sc.instances for sc in scenes], cfg.num_classes, s, s)
    with open(os.path.join(args.out_dir, "stats.txt"), "w") as f:
        f.write(f"scenes: {len(scenes)}\ninstances: {stats.total}\n")
        for c in range(cfg.num_classes):
            f.write(f"class {c}: count={int(stats.class_freq[c])} "
                    f"freq={stats.class_freq[c] / stats.total:.4f} "
                    f"w={stats.mean_w[c]:.2f}+-{stats.std_w[c]:.2f}px "
                    f"h={stats.mean_h[c]:.2f}+-{stats.std_h[c]:.2f}px\n")
    for i, scene in enumerate(scenes[:4]):
        img = np.clip(scene.image.data, 0.0, 1.0)
        rgb = np.round(img.transpose(1, 2, 0) * 255.0).astype(np.uint8)
        write_ppm(os.path.join(args.out_dir, f"scene{i}.ppm"), rgb)
    print(f"wrote {len(scenes)} scenes to {args.out_dir} ({stats.total} instances)")
    return 0


def cmd_train_teacher(args) -> int:
    cfg = _config(args)
    result = train_teacher(cfg, args.out_dir)
    print(f"teacher toy-AP@0.5 = {result.toy_ap:.4f} -> {result.checkpoint}")
    return 0


def cmd_distill(args) -> int:
    cfg = _config(args)
    result = distill_student(cfg, _load_teacher_state(args), args.out_dir, args.run_name)
    print(f"{result.name}: toy-AP@0.5 = {result.toy_ap:.4f} "
          f"(variant={cfg.attention_variant}, lam={cfg.lam}, inherit={cfg.inherit})")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    state = _load_teacher_state(args)
    seeds = _seeds(args.seeds)
    runner = {"attention": ablate_attention, "heads": ablate_heads, "aux": ablate_aux,
              "lambda": ablate_lambda, "cascade": ablate_cascade}[args.which]
    results = runner(cfg, state, args.out_dir, seeds=seeds)
    print(f"{args.which} ablation ({len(results)} runs):")
    for r in results:
        print(f"  {r.name:<24s} toy-AP@0.5 = {r.toy_ap:.4f}")
    return 0


def cmd_export_attn(args) -> int:
    cfg = _config(args)
    sys_ = build_system(cfg)
    teacher_state = _load_teacher_state(args)
    check_teacher_state(cfg, teacher_state)
    load_group(sys_.groups["teacher"], strip_meta(teacher_state))
    sys_.groups["teacher"].freeze()
    student_state = load_checkpoint(args.student)
    for gname in ("student", "decoder", "aux"):
        sub = {k.removeprefix(f"{gname}."): v for k, v in student_state.items()
               if k.startswith(f"{gname}.")}
        load_group(sys_.groups[gname], sub)
    scenes = heldout_scenes(cfg)
    if not 0 <= args.scene < len(scenes):
        raise ValueError(f"scene index {args.scene} out of range [0, {len(scenes)})")
    scene = scenes[args.scene]
    rng = np.random.default_rng((cfg.seed, 30))
    cset = encode_set(scene.instances, sys_.espec, rng, include_scale=cfg.use_scale)
    queries = make_query(cset.vectors, sys_.f_q)
    flat = flatten_pyramid(sys_.teacher.backbone_forward(scene.image), cfg.pos_dim)
    _, k = sys_.decoder.decode(flat, queries, source="teacher")
    os.makedirs(args.out_dir, exist_ok=True)
    prefix = os.path.join(args.out_dir,
                          f"attn_scene{args.scene}_inst{args.instance}_head{args.head}")
    paths = export_attention(k, flat, args.instance, args.head, prefix)
    print("\n".join(paths))
    return 0


def cmd_gradcheck(args) -> int:
    cfg_seed = args.seed if args.seed is not None else 0
    ops = verify.gradcheck_ops(seed=cfg_seed)
    print(ops)
    composed = verify.gradcheck_composed(seed=cfg_seed)
    print(composed)
    return 0 if (ops.passed and composed.passed) else 1


def cmd_routing_check(args) -> int:
    cfg_seed = args.seed if args.seed is not None else 0
    report = verify.routing_audit(seed=cfg_seed)
    print(report)
    return 0 if report.passed else 1


def cli_main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    handlers = {
        "gen-data": cmd_gen_data,
        "train-teacher": cmd_train_teacher,
        "distill": cmd_distill,
        "ablate": cmd_ablate,
        "export-attn": cmd_export_attn,
        "gradcheck": cmd_gradcheck,
        "routing-check": cmd_routing_check,
    }
    try:
        return handlers[args.command](args)
    except (CheckpointError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
