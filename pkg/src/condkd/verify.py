"""Self-verification entry points: exhaustive finite-difference gradient
checks (every differentiable op, then the fully composed training loss) and
the gradient-routing audit. The CLI and the acceptance suite both call these.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .losses import RoutingReport, total_loss, verify_gradient_routing
from .tensor import GradCheckReport, ParamGroup, Tensor, finite_diff_check
from .train import build_system, dataset_stats, scene_losses, train_scene


def mini_config(**overrides) -> ExperimentConfig:
    """Smallest config that exercises every code path; sized so elementwise
    finite differences over all trainable parameters stay under a minute."""
    base = dict(
        image_size=16, num_classes=2, feat_dim=8, heads=2, depth=1,
        teacher_widths=(2, 3, 4, 4), student_widths=(2, 2, 3, 3), pos_dim=4,
        enc_pos_dim=4, enc_scale_dim=4, max_log2=4, fake_ratio=2,
        stats_scenes=16, eval_scenes=4, batch_size=2,
        teacher_iters=0, student_iters=0, warmup_iters=0)
    base.update(overrides)
    return ExperimentConfig(**base)


def _param(rng, shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _kink_free(rng, shape, margin=0.1) -> Tensor:
    """Values pushed away from zero so |x|, relu, clamp stay differentiable
    at every probe point."""
    x = rng.normal(size=shape)
    return Tensor(x + np.sign(x) * margin, requires_grad=True)


def gradcheck_ops(seed: int = 0, tol: float = 1e-4) -> GradCheckReport:
    """One finite-difference sweep per differentiable op. Each case reduces
    the op output against a fixed random weight so every output element
    influences the scalar."""
    rng = np.random.default_rng(seed)

    def w(*shape):
        return T.constant(rng.normal(size=shape))

    w34 = w(3, 4)
    cases = [
        ("add", _param(rng, (3, 4)), lambda x: T.mul(T.add(x, w34), w34)),
        ("broadcast_add", _param(rng, (1, 4)), lambda x: T.mul(T.add(x, w34), w34)),
        ("neg", _param(rng, (3, 4)), lambda x: T.mul(T.neg(x), w34)),
        ("mul", _param(rng, (3, 4)), lambda x: T.mul(T.mul(x, w34), w34)),
        ("div", _kink_free(rng, (3, 4), 0.5), lambda x: T.mul(T.div(w34, x), w34)),
        ("power", Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True),
         lambda x: T.mul(T.power(x, 3.0), w34)),
        ("absolute", _kink_free(rng, (3, 4)), lambda x: T.mul(T.absolute(x), w34)),
        ("exp", _param(rng, (3, 4)), lambda x: T.mul(T.exp(x), w34)),
        ("log", Tensor(rng.uniform(0.5, 3.0, (3, 4)), requires_grad=True),
         lambda x: T.mul(T.log(x), w34)),
        ("sqrt", Tensor(rng.uniform(0.5, 3.0, (3, 4)), requires_grad=True),
         lambda x: T.mul(T.sqrt(x), w34)),
        ("relu", _kink_free(rng, (3, 4)), lambda x: T.mul(T.relu(x), w34)),
        ("sigmoid", _param(rng, (3, 4)), lambda x: T.mul(T.sigmoid(x), w34)),
        ("softplus", _param(rng, (3, 4)), lambda x: T.mul(T.softplus(x), w34)),
        ("clamp", _kink_free(rng, (3, 4), 0.3), lambda x: T.mul(T.clamp(x, -1.0, 1.0), w34)),
        ("tsum_axis", _param(rng, (3, 4)),
         lambda x, c=w(1, 4): T.mul(T.tsum(x, axis=0, keepdims=True), c)),
        ("tmean", _param(rng, (3, 4)), lambda x, c=w(3): T.mul(T.tmean(x, axis=-1), c)),
        ("matmul", _param(rng, (3, 4)),
         lambda x, a=w(4, 5), c=w(3, 5): T.mul(T.matmul(x, a), c)),
        ("transpose", _param(rng, (3, 4)), lambda x, c=w(4, 3): T.mul(T.transpose(x), c)),
        ("permute", _param(rng, (2, 3, 4)),
         lambda x, c=w(4, 2, 3): T.mul(T.permute(x, (2, 0, 1)), c)),
        ("reshape", _param(rng, (3, 4)), lambda x, c=w(2, 6): T.mul(T.reshape(x, (2, 6)), c)),
        ("concat", _param(rng, (3, 4)),
         lambda x, c=w(3, 8): T.mul(T.concat([x, T.mul(x, x)], axis=1), c)),
        ("gather_rows", _param(rng, (5, 4)),
         lambda x, c=w(4, 4): T.mul(T.gather_rows(x, np.array([0, 2, 2, 4])), c)),
        ("gather_flat", _param(rng, (3, 4)),
         lambda x, c=w(5): T.mul(T.gather_flat(x, np.array([0, 5, 5, 11, 3]), (5,)), c)),
        ("slice_last", _param(rng, (3, 6)),
         lambda x, c=w(3, 4): T.mul(T.slice_last(x, 1, 5), c)),
        ("pad_hw", _param(rng, (2, 3, 4, 2)),
         lambda x, c=w(2, 5, 6, 2): T.mul(T.pad_hw(x, 1), c)),
        ("softmax", _param(rng, (3, 4)), lambda x: T.mul(T.softmax(x, axis=-1), w34)),
        ("layernorm_pf", _param(rng, (3, 4)), lambda x: T.mul(T.layernorm_pf(x), w34)),
    ]

    report = GradCheckReport(tol=tol)
    for name, x, op in cases:
        sub = finite_diff_check(lambda x=x, op=op: T.tsum(op(x)), {name: x}, tol=tol)
        report.entries.extend(sub.entries)
    return report


def _composed_total(cfg: ExperimentConfig, sys, stats, detach: bool):
    scene = train_scene(cfg, 0)
    rng = np.random.default_rng((cfg.seed, 20))
    det, idf, loc, dis = scene_losses(cfg, sys, scene, stats, rng,
                                      distill_active=True, distill_detach=detach)
    return total_loss(det, idf, loc, dis, cfg.lam)


def gradcheck_composed(seed: int = 0, tol: float = 1e-4) -> GradCheckReport:
    """Elementwise finite differences of the full training objective over
    every trainable parameter (teacher stays frozen).

    The stop-gradients are disabled for this check: finite differences always
    measure the true sensitivity of the scalar, so a detached path would
    disagree by design. What the detaches block is verified by the routing
    audit instead.
    """
    cfg = mini_config(seed=seed)
    sys = build_system(cfg)
    sys.groups["teacher"].freeze()
    stats = dataset_stats(cfg)

    def f():
        return _composed_total(cfg, sys, stats, detach=False).total

    params = {}
    for gname in ("student", "decoder", "aux"):
        for pname, p in sys.groups[gname].named():
            params[f"{gname}.{pname}"] = p
    return finite_diff_check(f, params, tol=tol)


def routing_audit(seed: int = 0, mutated: bool = False) -> RoutingReport:
    """Nine-cell (loss x group) gradient audit on a fresh mini system.

    mutated=True removes the distillation stop-gradients; a correct
    implementation must then FAIL the audit (the mutation check).
    """
    cfg = mini_config(seed=seed)
    sys = build_system(cfg)
    sys.groups["teacher"].freeze()
    stats = dataset_stats(cfg)
    bundle = _composed_total(cfg, sys, stats, detach=not mutated)
    return verify_gradient_routing(bundle, sys.groups)
