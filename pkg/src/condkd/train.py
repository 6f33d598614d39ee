"""Training harness: teacher pretraining, conditional distillation, and the
ablation runners, all fully deterministic from the experiment config.

Every run draws its scenes from a per-seed stream (seed, 1, i) and evaluates
on a held-out stream (seed, 2, i), so runs that share a seed consume
bit-identical data regardless of variant, and no training scene ever leaks
into evaluation.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, group_state, load_group, save_checkpoint
from .config import ATTENTION_VARIANTS, ExperimentConfig
from .decoder import ConditionalDecoder, Knowledge
from .evaluate import evaluate_toy_ap
from .instances import EncoderSpec, build_conditions, compute_stats, encode_set, make_query
from .losses import AuxHeads, LossBundle, aux_loss, distill_loss, total_loss
from .nn import Mlp3, MomentumSGD
from .pyramid import FlatPyramid, ToyDetector, det_loss, flatten_pyramid, inherit_parameters
from .scenes import Scene, generate_scene
from .tensor import ParamGroup, Tensor

METRICS_HEADER = "run,iter,loss_det,loss_aux_idf,loss_aux_reg,loss_distill,toy_ap"
LOG_EVERY = 100


def _fmt(x) -> str:
    """Shortest round-trip decimal; keeps the CSV bit-deterministic."""
    return repr(float(x)) if x is not None else ""


class MetricsWriter:
    """Append-only CSV with the pinned header; one writer per run directory."""

    def __init__(self, out_dir: str):
        os.makedirs(out_dir, exist_ok=True)
        self.path = os.path.join(out_dir, "metrics.csv")
        if not os.path.exists(self.path):
            with open(self.path, "w") as f:
                f.write(METRICS_HEADER + "\n")

    def row(self, run: str, it: int, det, idf, reg, dis, ap=None) -> None:
        cells = [run, str(it), _fmt(det), _fmt(idf), _fmt(reg), _fmt(dis), _fmt(ap)]
        with open(self.path, "a") as f:
            f.write(",".join(cells) + "\n")


@dataclass
class RunResult:
    name: str
    toy_ap: float
    final: dict  # last-iteration mean loss components
    checkpoint: str | None


def train_scene(cfg: ExperimentConfig, i: int) -> Scene:
    return generate_scene(cfg.scene_spec(), (cfg.seed, 1, i))


def heldout_scenes(cfg: ExperimentConfig) -> list[Scene]:
    spec = cfg.scene_spec()
    return [generate_scene(spec, (cfg.seed, 2, i)) for i in range(cfg.eval_scenes)]


def _batch(cfg: ExperimentConfig, it: int) -> list[Scene]:
    return [train_scene(cfg, it * cfg.batch_size + j) for j in range(cfg.batch_size)]


def _mean(parts: list[Tensor]) -> Tensor:
    acc = parts[0]
    for p in parts[1:]:
        acc = T.add(acc, p)
    return acc * (1.0 / len(parts))


# -- teacher -----------------------------------------------------------------

_META_FIELDS = ("image_size", "num_classes", "feat_dim", "pos_dim")


def _teacher_meta(cfg: ExperimentConfig) -> dict[str, np.ndarray]:
    meta = {f"__cfg__.{k}": np.array(float(getattr(cfg, k))) for k in _META_FIELDS}
    meta["__cfg__.strides"] = np.array(cfg.strides, dtype=float)
    meta["__cfg__.teacher_widths"] = np.array(cfg.teacher_widths, dtype=float)
    return meta


def check_teacher_state(cfg: ExperimentConfig, state: dict[str, np.ndarray]) -> None:
    """Reject a checkpoint whose recorded geometry disagrees with cfg."""
    want = _teacher_meta(cfg)
    for key, val in want.items():
        if key not in state:
            raise CheckpointError(f"teacher checkpoint lacks {key}")
        if state[key].shape != val.shape or np.any(state[key] != val):
            raise CheckpointError(
                f"teacher checkpoint mismatch on {key.removeprefix('__cfg__.')}: "
                f"checkpoint {state[key].tolist()} vs config {val.tolist()}")


def strip_meta(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v for k, v in state.items() if not k.startswith("__cfg__.")}


def train_teacher(cfg: ExperimentConfig, out_dir: str, run_name: str = "teacher") -> RunResult:
    """Detection-only pretraining; saves `<out_dir>/teacher.ckpt` with the
    geometry fields embedded so distillation can validate compatibility."""
    metrics = MetricsWriter(out_dir)
    group = ParamGroup("teacher")
    teacher = ToyDetector(cfg.teacher_config(), group, np.random.default_rng((cfg.seed, 10)))
    opt = MomentumSGD(group, cfg.lr_teacher, cfg.momentum, cfg.weight_decay)
    last = 0.0
    for it in range(cfg.teacher_iters):
        batch = _batch(cfg, it)
        loss = _mean([det_loss(teacher.det_head_forward(teacher.backbone_forward(s.image)),
                               s.instances, teacher.cfg) for s in batch])
        last = loss.item()
        if not np.isfinite(last):
            raise RuntimeError(
                f"teacher training diverged: loss {last} at iteration {it}, seed {cfg.seed}")
        group.zero_grad()
        T.backward(loss)
        opt.step()
        if it % LOG_EVERY == 0:
            metrics.row(run_name, it, last, 0.0, 0.0, 0.0)
    ap = evaluate_toy_ap(teacher, heldout_scenes(cfg))
    metrics.row(run_name, cfg.teacher_iters, last, 0.0, 0.0, 0.0, ap)
    path = os.path.join(out_dir, "teacher.ckpt")
    save_checkpoint(path, group_state(group) | _teacher_meta(cfg))
    return RunResult(run_name, ap, {"loss_det": last}, path)


# -- distillation ------------------------------------------------------------


@dataclass
class System:
    """Everything one distillation run needs, grouped for routing audits."""

    groups: dict[str, ParamGroup]
    teacher: ToyDetector
    student: ToyDetector
    decoder: ConditionalDecoder
    aux: AuxHeads
    f_q: Mlp3
    espec: EncoderSpec


def build_system(cfg: ExperimentConfig) -> System:
    groups = {name: ParamGroup(name) for name in ("teacher", "student", "decoder", "aux")}
    teacher = ToyDetector(cfg.teacher_config(), groups["teacher"],
                          np.random.default_rng((cfg.seed, 11)))
    student = ToyDetector(cfg.student_config(), groups["student"],
                          np.random.default_rng((cfg.seed, 12)))
    decoder = ConditionalDecoder(cfg.feat_dim, cfg.heads, cfg.pos_dim + 2,
                                 groups["decoder"], np.random.default_rng((cfg.seed, 13)),
                                 cfg.depth)
    espec = cfg.encoder_spec()
    f_q = Mlp3(espec.width, cfg.feat_dim, cfg.feat_dim, groups["decoder"],
               np.random.default_rng((cfg.seed, 14)), "f_q")
    aux = AuxHeads(cfg.feat_dim, groups["aux"], np.random.default_rng((cfg.seed, 15)))
    return System(groups, teacher, student, decoder, aux, f_q, espec)


def _cell_misses_every_box(cx, cy, boxes) -> bool:
    return all(not (x1 < cx < x2 and y1 < cy < y2) for x1, y1, x2, y2 in boxes)


def baseline_mask_row(variant: str, flat: FlatPyramid, instances, image_size: int) -> np.ndarray:
    """One shared [L] weight row for the attention-free distillation variants.

    All rows sum to 1 so every variant feeds the identical loss formula. When
    a geometric variant selects no cell at all (every box slips between cell
    centers), it degrades to uniform.
    """
    n = flat.num_rows
    if variant == "none":
        return np.full(n, 1.0 / n)
    if variant == "activation":
        a = np.abs(flat.A.data).mean(axis=-1)
        e = np.exp(a - a.max())
        return e / e.sum()
    boxes = [inst.corners() for inst in instances if inst.is_real]
    if variant == "foreground":
        row = np.zeros(n)
        for r, (lvl, y, x) in enumerate(flat.index):
            s = flat.strides[lvl] / image_size
            cx, cy = (x + 0.5) * s, (y + 0.5) * s
            if not _cell_misses_every_box(cx, cy, boxes):
                row[r] = 1.0
        return row / row.sum() if row.sum() > 0 else np.full(n, 1.0 / n)
    if variant == "fine_grained":
        # membership of a cell in a box = fraction of the cell's s x s square
        # the box covers; per-cell max over instances keeps small boxes visible
        row = np.zeros(n)
        for r, (lvl, y, x) in enumerate(flat.index):
            s = flat.strides[lvl] / image_size
            gx1, gy1 = x * s, y * s
            best = 0.0
            for x1, y1, x2, y2 in boxes:
                ox = max(0.0, min(x2, gx1 + s) - max(x1, gx1))
                oy = max(0.0, min(y2, gy1 + s) - max(y1, gy1))
                best = max(best, (ox * oy) / (s * s))
            row[r] = best
        return row / row.sum() if row.sum() > 0 else np.full(n, 1.0 / n)
    raise ValueError(f"unknown attention variant {variant!r}")


def substitute_masks(k: Knowledge, variant: str, flat: FlatPyramid, instances,
                     image_size: int, n_rows: int) -> Knowledge:
    if variant == "icd":
        return k
    row = baseline_mask_row(variant, flat, instances, image_size)
    fixed = T.constant(np.tile(row, (n_rows, 1)))
    return Knowledge(masks=[fixed] * k.num_heads, values=k.values, source=k.source)


def scene_losses(cfg: ExperimentConfig, sys: System, scene: Scene, stats,
                 cond_rng: np.random.Generator, distill_active: bool,
                 distill_detach: bool = True):
    """Forward one scene through teacher, decoder, and student; returns the
    four loss components (distill is a constant 0 when inactive).

    distill_detach=False removes the stop-gradients; only the verification
    tools use it, to expose the full graph to finite differences and to the
    routing mutation check."""
    conds = build_conditions(scene.instances, stats, cfg.fake_ratio, cond_rng)
    cset = encode_set(conds, sys.espec, cond_rng, include_scale=cfg.use_scale)
    queries = make_query(cset.vectors, sys.f_q)
    t_flat = flatten_pyramid(sys.teacher.backbone_forward(scene.image), cfg.pos_dim)
    g, knowledge = sys.decoder.decode(t_flat, queries, source="teacher")
    idf, loc = aux_loss(g, cset, sys.aux, use_idf=cfg.use_idf, use_loc=cfg.use_loc)
    s_pyr = sys.student.backbone_forward(scene.image)
    det = det_loss(sys.student.det_head_forward(s_pyr), scene.instances, sys.student.cfg)
    if distill_active:
        s_flat = flatten_pyramid(s_pyr, cfg.pos_dim)
        s_values = sys.decoder.student_values(
            s_flat, detach_weights=cfg.detach_fv and distill_detach)
        k_used = substitute_masks(knowledge, cfg.attention_variant, t_flat,
                                  scene.instances, cfg.image_size, len(conds))
        dis = distill_loss(k_used, s_values, cset.flags, detach_inputs=distill_detach)
    else:
        dis = T.constant(0.0)
    return det, idf, loc, dis


def dataset_stats(cfg: ExperimentConfig):
    scenes = [train_scene(cfg, i) for i in range(cfg.stats_scenes)]
    return compute_stats([s.instances for s in scenes], cfg.num_classes,
                         cfg.image_size, cfg.image_size)


def distill_student(cfg: ExperimentConfig, teacher_state: dict, out_dir: str,
                    run_name: str = "distill") -> RunResult:
    """The joint loop: every iteration trains the decoder/aux heads with the
    auxiliary losses and the student with detection (+ distillation after
    warm-up, when lam is nonzero)."""
    check_teacher_state(cfg, teacher_state)
    metrics = MetricsWriter(out_dir)
    sys = build_system(cfg)
    load_group(sys.groups["teacher"], strip_meta(teacher_state))
    sys.groups["teacher"].freeze()
    if cfg.inherit:
        inherit_parameters(sys.student, sys.teacher)
    opt_student = MomentumSGD(sys.groups["student"], cfg.lr_student, cfg.momentum,
                              cfg.weight_decay)
    opt_decoder = MomentumSGD(sys.groups["decoder"], cfg.lr_decoder, cfg.momentum,
                              cfg.weight_decay)
    opt_aux = MomentumSGD(sys.groups["aux"], cfg.lr_decoder, cfg.momentum,
                          cfg.weight_decay)
    stats = dataset_stats(cfg)
    cond_rng = np.random.default_rng((cfg.seed, 20))
    final = {"loss_det": 0.0, "loss_aux_idf": 0.0, "loss_aux_reg": 0.0, "loss_distill": 0.0}
    for it in range(cfg.student_iters):
        active = cfg.lam != 0.0 and it >= cfg.warmup_iters
        parts = [scene_losses(cfg, sys, s, stats, cond_rng, active)
                 for s in _batch(cfg, it)]
        det = _mean([p[0] for p in parts])
        idf = _mean([p[1] for p in parts])
        loc = _mean([p[2] for p in parts])
        dis = _mean([p[3] for p in parts])
        bundle = total_loss(det, idf, loc, dis, cfg.lam)
        final = {"loss_det": det.item(), "loss_aux_idf": idf.item(),
                 "loss_aux_reg": loc.item(), "loss_distill": dis.item()}
        if not np.isfinite(bundle.total.item()):
            raise RuntimeError(
                f"distillation diverged: loss {bundle.total.item()} at iteration {it}, "
                f"seed {cfg.seed}")
        for name in ("student", "decoder", "aux"):
            sys.groups[name].zero_grad()
        T.backward(bundle.total)
        opt_student.step()
        opt_decoder.step()
        opt_aux.step()
        if it % LOG_EVERY == 0:
            metrics.row(run_name, it, *[final[k] for k in
                                        ("loss_det", "loss_aux_idf", "loss_aux_reg", "loss_distill")])
        if cfg.eval_every and it and it % cfg.eval_every == 0:
            ap_now = evaluate_toy_ap(sys.student, heldout_scenes(cfg))
            metrics.row(run_name, it, *[final[k] for k in
                                        ("loss_det", "loss_aux_idf", "loss_aux_reg", "loss_distill")],
                        ap_now)
    ap = evaluate_toy_ap(sys.student, heldout_scenes(cfg))
    metrics.row(run_name, cfg.student_iters,
                *[final[k] for k in ("loss_det", "loss_aux_idf", "loss_aux_reg", "loss_distill")],
                ap)
    path = os.path.join(out_dir, f"{run_name}.ckpt")
    save_checkpoint(path, {f"student.{k}": v for k, v in group_state(sys.groups["student"]).items()}
                    | {f"decoder.{k}": v for k, v in group_state(sys.groups["decoder"]).items()}
                    | {f"aux.{k}": v for k, v in group_state(sys.groups["aux"]).items()})
    return RunResult(run_name, ap, final, path)


# -- ablations ---------------------------------------------------------------


def ablate_attention(cfg: ExperimentConfig, teacher_state: dict, out_dir: str,
                     seeds=(0, 1, 2, 3, 4),
                     variants=ATTENTION_VARIANTS) -> list[RunResult]:
    """One distillation per (variant, seed) with shared per-seed data streams."""
    out = []
    for variant in variants:
        for seed in seeds:
            rcfg = replace(cfg, attention_variant=variant, seed=seed)
            out.append(distill_student(rcfg, teacher_state, out_dir,
                                       run_name=f"attn-{variant}-s{seed}"))
    return out


def ablate_heads(cfg: ExperimentConfig, teacher_state: dict, out_dir: str,
                 head_counts=(1, 4, 8), seeds=(0,)) -> list[RunResult]:
    out = []
    for m in head_counts:
        for seed in seeds:
            rcfg = replace(cfg, heads=m, seed=seed)
            out.append(distill_student(rcfg, teacher_state, out_dir,
                                       run_name=f"heads-{m}-s{seed}"))
    return out


AUX_VARIANTS = (
    ("idf", dict(use_idf=True, use_loc=False, use_scale=False)),
    ("loc", dict(use_idf=False, use_loc=True, use_scale=False)),
    ("loc_scale", dict(use_idf=False, use_loc=True, use_scale=True)),
    ("full", dict(use_idf=True, use_loc=True, use_scale=True)),
)


def ablate_aux(cfg: ExperimentConfig, teacher_state: dict, out_dir: str,
               seeds=(0,)) -> list[RunResult]:
    out = []
    for name, flags in AUX_VARIANTS:
        for seed in seeds:
            rcfg = replace(cfg, seed=seed, **flags)
            out.append(distill_student(rcfg, teacher_state, out_dir,
                                       run_name=f"aux-{name}-s{seed}"))
    return out


def ablate_lambda(cfg: ExperimentConfig, teacher_state: dict, out_dir: str,
                  lams=(0.0, 2.0, 6.0, 12.0), seeds=(0,)) -> list[RunResult]:
    out = []
    for lam in lams:
        for seed in seeds:
            rcfg = replace(cfg, lam=lam, seed=seed)
            out.append(distill_student(rcfg, teacher_state, out_dir,
                                       run_name=f"lambda-{_fmt(lam)}-s{seed}"))
    return out


def ablate_cascade(cfg: ExperimentConfig, teacher_state: dict, out_dir: str,
                   depths=(1, 2, 4), seeds=(0,)) -> list[RunResult]:
    out = []
    for depth in depths:
        for seed in seeds:
            rcfg = replace(cfg, depth=depth, seed=seed)
            out.append(distill_student(rcfg, teacher_state, out_dir,
                                       run_name=f"cascade-{depth}-s{seed}"))
    return out
