"""Toy multi-scale detector and the flattened feature-pyramid view.

The detector is deliberately small plumbing: a strided conv backbone, 1x1
lateral projections onto a shared width, and a dense per-cell head predicting
class logits and ltrb box distances. It stands in for a real dense detector so
the distillation machinery has genuine multi-scale features to work with.

Feature maps are channel-last [H, W, C] internally; the public image format is
channel-first [3, H, W].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .instances import Instance
from .nn import Linear, kaiming_uniform, sine_pos_embed
from .tensor import ParamGroup, ShapeError, Tensor


class Conv2d:
    """3x3 (or 1x1) convolution on channel-last [B, H, W, C] tensors.

    Implemented as zero-pad + cached im2col gather + one matmul, so the whole
    layer differentiates through existing primitives.
    """

    def __init__(self, in_ch: int, out_ch: int, group: ParamGroup, rng: np.random.Generator,
                 name: str, kernel: int = 3, stride: int = 1):
        if kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.kernel = kernel
        self.stride = stride
        self.pad = (kernel - 1) // 2
        fan_in = kernel * kernel * in_ch
        self.weight = group.add(f"{name}.w", Tensor(kaiming_uniform(rng, out_ch, fan_in), requires_grad=True))
        self.bias = group.add(f"{name}.b", Tensor(np.zeros(out_ch), requires_grad=True))
        self._idx_cache: dict[tuple[int, int, int], np.ndarray] = {}

    def _gather_indices(self, b: int, h: int, w: int) -> np.ndarray:
        key = (b, h, w)
        cached = self._idx_cache.get(key)
        if cached is not None:
            return cached
        hp, wp = h + 2 * self.pad, w + 2 * self.pad
        ho, wo = h // self.stride, w // self.stride
        c = self.in_ch
        bi = np.arange(b)[:, None, None, None, None, None]
        oy = np.arange(ho)[None, :, None, None, None, None] * self.stride
        ox = np.arange(wo)[None, None, :, None, None, None] * self.stride
        ky = np.arange(self.kernel)[None, None, None, :, None, None]
        kx = np.arange(self.kernel)[None, None, None, None, :, None]
        ci = np.arange(c)[None, None, None, None, None, :]
        flat = ((bi * hp + oy + ky) * wp + ox + kx) * c + ci
        idx = flat.reshape(b * ho * wo, self.kernel * self.kernel * c)
        self._idx_cache[key] = idx
        return idx

    def __call__(self, x: Tensor) -> Tensor:
        b, h, w, c = x.shape
        if c != self.in_ch:
            raise ShapeError(f"conv expects {self.in_ch} channels, got input shape {x.shape}")
        if h % self.stride or w % self.stride:
            raise ValueError(f"spatial size {h}x{w} not divisible by stride {self.stride}")
        padded = T.pad_hw(x, self.pad) if self.pad else x
        idx = self._gather_indices(b, h, w)
        cols = T.gather_flat(padded, idx, idx.shape)
        out = T.add(T.matmul(cols, T.transpose(self.weight)), self.bias)
        return T.reshape(out, (b, h // self.stride, w // self.stride, self.out_ch))


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    num_classes: int = 3
    feat_dim: int = 32  # shared pyramid width D
    strides: tuple[int, ...] = (8, 16)
    widths: tuple[int, int, int, int] = (16, 32, 48, 48)  # backbone stage channels
    pos_dim: int = 8  # raw sine width for pyramid positions (split across x/y)

    def level_shape(self, stride: int) -> tuple[int, int]:
        return (self.image_size // stride, self.image_size // stride)

    @property
    def num_cells(self) -> int:
        return sum(h * w for h, w in (self.level_shape(s) for s in self.strides))


@dataclass
class FeaturePyramid:
    """Ordered (stride, feature [H_p, W_p, D]) levels for one image."""

    levels: list[tuple[int, Tensor]]
    image_size: int

    def __post_init__(self):
        strides = [s for s, _ in self.levels]
        if strides != sorted(strides) or len(set(strides)) != len(strides):
            raise ValueError(f"strides must be strictly increasing, got {strides}")


@dataclass
class FlatPyramid:
    """All pyramid cells stacked level-major into one matrix.

    A holds the features [L x D]; pos holds fixed positional rows (sine x, sine
    y, level tag); index maps each row back to its (level, y, x) cell.
    """

    A: Tensor
    pos: np.ndarray
    index: list[tuple[int, int, int]]
    strides: list[int]
    shapes: list[tuple[int, int]]

    @property
    def num_rows(self) -> int:
        return self.A.shape[0]


class ToyDetector:
    """Strided conv backbone + 1x1 laterals + shared dense head.

    Teacher and student differ only in backbone widths; laterals and head live
    at the shared pyramid width so parameters there are inheritable when
    shapes agree.
    """

    def __init__(self, cfg: DetectorConfig, group: ParamGroup, rng: np.random.Generator):
        if cfg.image_size % max(cfg.strides):
            raise ValueError(f"image size {cfg.image_size} not divisible by stride {max(cfg.strides)}")
        if set(cfg.strides) != {8, 16}:
            raise ValueError("backbone is wired for strides (8, 16)")
        self.cfg = cfg
        self.group = group
        w1, w2, w3, w4 = cfg.widths
        d = cfg.feat_dim
        self.conv1 = Conv2d(3, w1, group, rng, "backbone.conv1", stride=2)
        self.conv2 = Conv2d(w1, w2, group, rng, "backbone.conv2", stride=2)
        self.conv3 = Conv2d(w2, w3, group, rng, "backbone.conv3", stride=2)
        self.conv4 = Conv2d(w3, w4, group, rng, "backbone.conv4", stride=2)
        self.lat8 = Linear(w3, d, group, rng, "lateral.s8")
        self.lat16 = Linear(w4, d, group, rng, "lateral.s16")
        self.head_conv = Conv2d(d, d, group, rng, "head.conv")
        # zero bias throughout: a fresh head starts uncalibrated, so class-rate
        # and box-scale calibration is learned (and inheritable from a teacher)
        self.head_out = Conv2d(d, cfg.num_classes + 4, group, rng, "head.out")

    def backbone_forward(self, image: Tensor) -> FeaturePyramid:
        if image.shape != (3, self.cfg.image_size, self.cfg.image_size):
            raise ShapeError(
                f"expected image [3, {self.cfg.image_size}, {self.cfg.image_size}], got {image.shape}")
        x = T.reshape(T.permute(image, (1, 2, 0)), (1,) + image.shape[1:] + (3,))
        c1 = T.relu(self.conv1(x))
        c2 = T.relu(self.conv2(c1))
        c3 = T.relu(self.conv3(c2))  # stride 8
        c4 = T.relu(self.conv4(c3))  # stride 16
        h8, w8 = self.cfg.level_shape(8)
        h16, w16 = self.cfg.level_shape(16)
        p8 = T.reshape(self.lat8(c3), (h8, w8, self.cfg.feat_dim))
        p16 = T.reshape(self.lat16(c4), (h16, w16, self.cfg.feat_dim))
        return FeaturePyramid([(8, p8), (16, p16)], self.cfg.image_size)

    def det_head_forward(self, pyr: FeaturePyramid) -> "DensePredictions":
        levels = []
        for stride, feat in pyr.levels:
            h, w, d = feat.shape
            z = T.relu(self.head_conv(T.reshape(feat, (1, h, w, d))))
            out = T.reshape(self.head_out(z), (h * w, self.cfg.num_classes + 4))
            logits = T.slice_last(out, 0, self.cfg.num_classes)
            # exp keeps distances positive; stride/image scales to normalized units
            ltrb = T.mul(T.exp(T.slice_last(out, self.cfg.num_classes, self.cfg.num_classes + 4)),
                         T.constant(stride / self.cfg.image_size))
            levels.append((stride, logits, ltrb))
        return DensePredictions(levels, self.cfg.image_size)


@dataclass
class DensePredictions:
    """Per-level (stride, class logits [HW x C], ltrb [HW x 4] normalized)."""

    levels: list[tuple[int, Tensor, Tensor]]
    image_size: int

    def flat(self) -> tuple[Tensor, Tensor]:
        logits = T.concat([lg for _, lg, _ in self.levels], axis=0)
        ltrb = T.concat([lt for _, _, lt in self.levels], axis=0)
        return logits, ltrb


def cell_centers(shape: tuple[int, int], stride: int, image_size: int) -> np.ndarray:
    """Normalized (cx, cy) of every cell, row-major, as an [HW x 2] array."""
    h, w = shape
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx = (xs + 0.5) * stride / image_size
    cy = (ys + 0.5) * stride / image_size
    return np.stack([cx.ravel(), cy.ravel()], axis=1)


def all_cell_centers(strides: list[int], shapes: list[tuple[int, int]], image_size: int) -> np.ndarray:
    return np.concatenate([cell_centers(sh, st, image_size) for st, sh in zip(strides, shapes)], axis=0)


def flatten_pyramid(pyr: FeaturePyramid, pos_dim: int = 8) -> FlatPyramid:
    """Stack levels into [L x D] rows, level-major then row-major per level.

    Positional rows: sine encodings of the normalized cell center per axis
    (pos_dim/2 wide each) plus a two-wide sine tag of the level index, so
    cells at matching normalized coordinates on different levels stay distinct.
    """
    mats, pos_rows, index, strides, shapes = [], [], [], [], []
    n_levels = len(pyr.levels)
    for li, (stride, feat) in enumerate(pyr.levels):
        h, w, d = feat.shape
        mats.append(T.reshape(feat, (h * w, d)))
        centers = cell_centers((h, w), stride, pyr.image_size)
        tag = sine_pos_embed((li + 0.5) / n_levels, 2)
        pos_rows.append(np.concatenate([
            sine_pos_embed(centers[:, 0], pos_dim // 2),
            sine_pos_embed(centers[:, 1], pos_dim // 2),
            np.tile(tag, (h * w, 1)),
        ], axis=1))
        index.extend((li, y, x) for y in range(h) for x in range(w))
        strides.append(stride)
        shapes.append((h, w))
    return FlatPyramid(T.concat(mats, axis=0), np.concatenate(pos_rows, axis=0), index, strides, shapes)


def unflatten_pyramid(flat: FlatPyramid, feat_dim: int) -> list[tuple[int, np.ndarray]]:
    """Invert flatten_pyramid on values: per-level [H_p, W_p, D] arrays."""
    out = []
    offset = 0
    for stride, (h, w) in zip(flat.strides, flat.shapes):
        block = flat.A.data[offset : offset + h * w]
        out.append((stride, block.reshape(h, w, feat_dim)))
        offset += h * w
    return out


def assign_cells(centers: np.ndarray, instances: list[Instance]) -> tuple[np.ndarray, np.ndarray]:
    """FCOS-style positives: a cell is positive iff its center lies inside a
    box; overlaps go to the smallest box. Ties break on the full box tuple so
    the result is independent of instance order.

    Returns (cell -> instance idx or -1, [L x 4] normalized ltrb targets).
    """
    n_cells = centers.shape[0]
    assign = np.full(n_cells, -1, dtype=np.intp)
    ltrb = np.zeros((n_cells, 4))
    if not instances:
        return assign, ltrb
    order = sorted(range(len(instances)),
                   key=lambda i: (instances[i].w * instances[i].h, instances[i].category,
                                  instances[i].x, instances[i].y, instances[i].w, instances[i].h))
    taken = np.zeros(n_cells, dtype=bool)
    for i in order:
        x1, y1, x2, y2 = instances[i].corners()
        inside = ((centers[:, 0] > x1) & (centers[:, 0] < x2)
                  & (centers[:, 1] > y1) & (centers[:, 1] < y2) & ~taken)
        assign[inside] = i
        taken |= inside
        cx, cy = centers[inside, 0], centers[inside, 1]
        ltrb[inside] = np.stack([cx - x1, cy - y1, x2 - cx, y2 - cy], axis=1)
    return assign, ltrb


def det_loss(preds: DensePredictions, instances: list[Instance], cfg: DetectorConfig) -> Tensor:
    """Dense detection loss: all-cell BCE on class logits plus L1 on ltrb at
    positive cells, normalized by the positive count (floored at 1)."""
    if any(not inst.is_real for inst in instances):
        raise ValueError("det_loss consumes real instances only")
    logits, ltrb_pred = preds.flat()
    strides = [s for s, _, _ in preds.levels]
    shapes = [cfg.level_shape(s) for s in strides]
    centers = all_cell_centers(strides, shapes, preds.image_size)
    assign, ltrb_tgt = assign_cells(centers, instances)
    targets = np.zeros((centers.shape[0], cfg.num_classes))
    pos = np.flatnonzero(assign >= 0)
    for i in pos:
        targets[i, instances[assign[i]].category] = 1.0
    # binary cross-entropy with logits: softplus(z) - z*t, summed over cells
    bce = T.tsum(T.softplus(logits) - T.mul(logits, T.constant(targets)))
    total = bce
    if pos.size:
        diff = T.gather_rows(ltrb_pred, pos) - T.constant(ltrb_tgt[pos])
        total = total + T.tsum(T.absolute(diff))
    return total * (1.0 / max(1, pos.size))


def inherit_parameters(student: ToyDetector, teacher: ToyDetector) -> int:
    """Copy every shape-matching non-backbone parameter teacher -> student.

    Backbones may differ arbitrarily; laterals and head copy whenever their
    shapes agree. Returns the number of tensors copied.
    """
    t_params = dict(teacher.group.named())
    copied = 0
    for name, p in student.group.named():
        if name.startswith("backbone."):
            continue
        src = t_params.get(name)
        if src is not None and src.shape == p.shape:
            p.data[...] = src.data
            copied += 1
    if copied == 0:
        warnings.warn("inherit_parameters copied nothing: no shape-matching non-backbone tensors")
    return copied
