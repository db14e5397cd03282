"""Reusable verification suites: op gradients, end-to-end gradients, MWCA oracle, AP grid.

Shared by the test suite and the ``gradcheck`` / ``oracle-check`` commands.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import tensor as T
from .attention import MwcaBlock, MwcaBlockConfig
from .backbone import ModelConfig
from .detection import COCO_THRESHOLDS, Detector, average_precision, compute_loss
from .oracles import ap_by_enumeration, mwca_pre_ffn
from .sensing import Box2D
from .tensor import Tensor


def op_cases():
    """(name, builder) pairs; each builder maps rng -> (loss_fn, params)."""

    def unary(fn, shape=(3, 4), positive=False, avoid_zero=False):
        def build(rng):
            data = rng.normal(size=shape)
            if positive:
                data = np.abs(data) + 0.5
            if avoid_zero:
                data = np.where(np.abs(data) < 0.05, 0.3, data)
            x = Tensor(data, requires_grad=True)
            r = rng.normal(size=fn(Tensor(data)).shape)
            return (lambda: (fn(x) * Tensor(r)).sum()), [x]
        return build

    def binary(fn, shape=(3, 4)):
        def build(rng):
            a = Tensor(rng.normal(size=shape), requires_grad=True)
            b = Tensor(rng.normal(size=shape) + 3.0, requires_grad=True)
            r = Tensor(rng.normal(size=shape))
            return (lambda: (fn(a, b) * r).sum()), [a, b]
        return build

    def matmul(rng):
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4, 5)), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 3, 5)))
        return (lambda: (T.matmul(a, b) * r).sum()), [a, b]

    def linear(rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 3, 5)))
        return (lambda: (T.linear(x, w, b) * r).sum()), [x, w, b]

    def conv(groups, stride):
        def build(rng):
            x = Tensor(rng.normal(size=(2, 4, 6, 5)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4 // groups, 3, 3)), requires_grad=True)
            b = Tensor(rng.normal(size=4), requires_grad=True)
            out_shape = T.conv2d(x, w, b, stride, 1, groups).shape
            r = Tensor(rng.normal(size=out_shape))
            return (lambda: (T.conv2d(x, w, b, stride, 1, groups) * r).sum()), [x, w, b]
        return build

    def conv1x1(rng):
        x = Tensor(rng.normal(size=(2, 4, 5, 5)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 4, 1, 1)), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 3, 3, 3)))
        return (lambda: (T.conv2d(x, w, None, 2, 0) * r).sum()), [x, w]

    def layer_norm(rng):
        x = Tensor(rng.normal(size=(2, 5, 3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=5), requires_grad=True)
        b = Tensor(rng.normal(size=5), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 5, 3, 3)))
        return (lambda: (T.layer_norm(x, w, b, axis=1) * r).sum()), [x, w, b]

    def batch_norm(training):
        def build(rng):
            x = Tensor(rng.normal(size=(3, 4, 3, 2)), requires_grad=True)
            w = Tensor(rng.normal(size=4), requires_grad=True)
            b = Tensor(rng.normal(size=4), requires_grad=True)
            rm, rv = rng.normal(size=4), np.abs(rng.normal(size=4)) + 0.5
            r = Tensor(rng.normal(size=x.shape))
            return (lambda: (T.batch_norm(x, w, b, rm.copy(), rv.copy(), training) * r).sum()), [x, w, b]
        return build

    def concat(rng):
        a = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 1, 2)), requires_grad=True)
        r = Tensor(rng.normal(size=(2, 4, 2)))
        return (lambda: (T.concat([a, b], axis=1) * r).sum()), [a, b]

    def softmax(rng):
        x = Tensor(rng.normal(size=(3, 6)) * 2, requires_grad=True)
        r = Tensor(rng.normal(size=(3, 6)))
        return (lambda: (T.softmax(x) * r).sum()), [x]

    def upsample(rng):
        x = Tensor(rng.normal(size=(1, 2, 3, 2)), requires_grad=True)
        r = Tensor(rng.normal(size=(1, 2, 6, 4)))
        return (lambda: (T.nearest_upsample(x, 2) * r).sum()), [x]

    def reshape_transpose(rng):
        x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        r = Tensor(rng.normal(size=(4, 6)))
        return (lambda: (T.transpose(x, (2, 0, 1)).reshape(4, 6) * r).sum()), [x]

    def slice_pad(rng):
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        r = Tensor(rng.normal(size=(4, 6)))
        return (lambda: (T.pad(x[1:3, ::2], [(1, 1), (1, 2)]) * r).sum()), [x]

    def take(rng):
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        r = Tensor(rng.normal(size=(4, 3)))
        return (lambda: (T.take(x, [4, 0, 4, 2]) * r).sum()), [x]

    def reductions(rng):
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        r = Tensor(rng.normal(size=(4,)))
        return (lambda: (x.mean(axis=0) * r).sum() + x.sum() * 0.3), [x]

    return [
        ("add", binary(T.add)),
        ("sub", binary(T.sub)),
        ("multiply", binary(T.mul)),
        ("div", binary(T.div)),
        ("minimum", binary(T.minimum)),
        ("maximum", binary(T.maximum)),
        ("matmul", matmul),
        ("linear", linear),
        ("relu", unary(T.relu, avoid_zero=True)),
        ("gelu", unary(T.gelu)),
        ("sigmoid", unary(T.sigmoid)),
        ("exp", unary(T.exp)),
        ("log", unary(T.log, positive=True)),
        ("sqrt", unary(T.sqrt, positive=True)),
        ("pow", unary(lambda x: T.pow(x, 3.0))),
        ("softmax", softmax),
        ("conv_dense", conv(1, 1)),
        ("conv_strided", conv(1, 2)),
        ("conv_depthwise", conv(4, 1)),
        ("conv_depthwise_strided", conv(4, 2)),
        ("conv_grouped", conv(2, 1)),
        ("conv_pointwise_strided", conv1x1),
        ("layer_norm", layer_norm),
        ("batch_norm_train", batch_norm(True)),
        ("batch_norm_eval", batch_norm(False)),
        ("concat", concat),
        ("upsample", upsample),
        ("reshape_transpose", reshape_transpose),
        ("slice_pad", slice_pad),
        ("take", take),
        ("reductions", reductions),
    ]


def gradcheck_ops(seeds: int = 20, eps: float = 1e-5) -> dict[str, float]:
    """Worst relative error per op over ``seeds`` random instances."""
    out = {}
    for name, build in op_cases():
        worst = 0.0
        for seed in range(seeds):
            fn, params = build(np.random.default_rng(seed))
            worst = max(worst, T.gradcheck(fn, params, eps=eps))
        out[name] = worst
    return out


def gradcheck_model(modalities=("camera", "lidar", "radar"), size: int = 28, budget: int = 300, seed: int = 0,
                    eps: float = 1e-5) -> float:
    """Detector loss gradient check on the tiny configuration, in double precision."""
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    try:
        cfg = ModelConfig(variant="tiny", modalities=tuple(modalities), seed=seed)
        model = Detector(cfg)
        rng = np.random.default_rng(seed)
        for p in model.parameters():
            p.data[...] += rng.normal(size=p.shape) * 0.05
        inputs = {
            m: Tensor(rng.normal(size=(2, cfg.input_channels(m), size, size)), requires_grad=True)
            for m in cfg.modalities
        }
        boxes = [[Box2D(2.0, 3.0, 17.0, 15.0, label=0)], [Box2D(9.0, 6.0, 26.0, 25.0, label=1)]]

        def loss():
            return compute_loss(model(inputs), boxes)

        return T.gradcheck(loss, model.parameters() + list(inputs.values()), eps=eps, rng=rng, budget=budget)
    finally:
        T.set_default_dtype(prev)


def random_mwca_instance(rng, max_size: int = 28, max_dim: int = 8, max_modalities: int = 3,
                         variant: str = "mwca"):
    """A block with perturbed weights plus channel-last inputs."""
    heads = int(rng.integers(1, 3))
    dim = heads * int(rng.integers(1, max_dim // heads + 1))
    m = int(rng.integers(0, max_modalities + 1))
    h, w = (int(v) for v in rng.integers(1, max_size + 1, size=2))
    block = MwcaBlock(rng, MwcaBlockConfig(dim=dim, heads=heads, num_modalities=m, fusion_variant=variant))
    for _, p in block.named_parameters():
        p.data[...] += rng.normal(size=p.shape) * 0.3
    x = rng.normal(size=(1, h, w, dim))
    ys = [rng.normal(size=(1, h, w, dim)) for _ in range(m)]
    return block, x, ys


def mwca_oracle_errors(instances: int = 50, seed: int = 0) -> list[float]:
    """Max abs difference between the block's pre-FFN output and the loop oracle, per instance."""
    prev = T.get_default_dtype()
    T.set_default_dtype(np.float64)
    try:
        rng = np.random.default_rng(seed)
        errors = []
        for _ in range(instances):
            block, x, ys = random_mwca_instance(rng)
            got = block.fuse(Tensor(x), [Tensor(y) for y in ys]).data
            errors.append(float(np.max(np.abs(got - mwca_pre_ffn(x, ys, block)))))
        return errors
    finally:
        T.set_default_dtype(prev)


# One image, one class: every subset of a 3-box ground-truth pool and every
# ranked sequence of up to 4 detections drawn from a 5-box pool whose
# overlaps with the pool straddle the IoU thresholds.
GT_POOL = ((0, 0, 40, 40), (30, 0, 70, 40), (0, 50, 40, 90))
DET_POOL = ((0, 0, 40, 40), (4, 0, 44, 40), (10, 0, 50, 40), (20, 0, 60, 40), (0, 52, 38, 90))


def ap_grid():
    for mask in range(1, 2 ** len(GT_POOL)):
        gts = [GT_POOL[k] for k in range(len(GT_POOL)) if mask >> k & 1]
        for n in range(5):
            for seq in itertools.product(range(len(DET_POOL)), repeat=n):
                yield gts, [DET_POOL[k] for k in seq]


def ap_grid_errors() -> tuple[int, float]:
    """Instances checked and the worst |AP| or |AR| discrepancy against enumeration."""
    count, worst = 0, 0.0
    for gts, dets in ap_grid():
        scored = [(*b, 0, 1.0 - 0.1 * r) for r, b in enumerate(dets)]
        want_ap, want_ar = ap_by_enumeration([scored], [[(*b, 0) for b in gts]], COCO_THRESHOLDS)
        got = average_precision(
            [[Box2D(*map(float, d[:4]), label=0, score=d[5]) for d in scored]],
            [[Box2D(*map(float, b), label=0) for b in gts]],
        )
        worst = max(worst, abs(got.ap - want_ap), abs(got.ar - want_ar))
        count += 1
    return count, worst
