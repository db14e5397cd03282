"""Slow reference evaluations used to cross-check the vectorized code.

Nothing here reuses the reshape/transpose machinery of the fast path: each
oracle loops over the indices of the quantity it computes.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def conv2d_loops(x, w, b=None, stride=1, padding=0, groups=1) -> np.ndarray:
    bsz, cin, h, wd = x.shape
    cout, cin_g, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    cout_g = cout // groups
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for co in range(cout):
            g = co // cout_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin_g):
                        for di in range(k):
                            for dj in range(k):
                                r = i * stride + di - padding
                                c = j * stride + dj - padding
                                if 0 <= r < h and 0 <= c < wd:
                                    acc += x[n, g * cin_g + ci, r, c] * w[co, ci, di, dj]
                    out[n, co, i, j] = acc
    return out


def _token_norm(v: np.ndarray, weight: np.ndarray, bias: np.ndarray, eps: float) -> np.ndarray:
    mu = sum(v) / len(v)
    var = sum((e - mu) ** 2 for e in v) / len(v)
    return np.array([(v[c] - mu) / math.sqrt(var + eps) * weight[c] + bias[c] for c in range(len(v))])


def mwca_pre_ffn(x: np.ndarray, ys: list[np.ndarray], block) -> np.ndarray:
    """Direct per-window evaluation of the MWCA fusion for channel-last maps.

    ``x`` and every ``ys[b]`` are (B, H, W, D).  The block supplies weights:
    layer norms on queries/sources, per-modality q/k/v/o projections.  Padded
    positions are zero tokens taken *after* normalization.
    """
    cfg = block.cfg
    bsz, h, w, d = x.shape
    k = cfg.window_size
    heads = cfg.heads
    dh = d // heads
    rows, cols = -(-h // k), -(-w // k)
    out = x.copy()
    nx = block.norm_x
    for n in range(bsz):
        for pr in range(rows):
            for pc in range(cols):
                coords = [(pr * k + i, pc * k + j) for i in range(k) for j in range(k)]
                inside = [r < h and c < w for r, c in coords]
                q_tok = [
                    _token_norm(x[n, r, c], nx.weight.data, nx.bias.data, nx.eps) if ok else np.zeros(d)
                    for (r, c), ok in zip(coords, inside)
                ]
                for beta, y in enumerate(ys):
                    ny = block.norm_y[beta]
                    att = block.attn[beta]
                    s_tok = [
                        _token_norm(y[n, r, c], ny.weight.data, ny.bias.data, ny.eps) if ok else np.zeros(d)
                        for (r, c), ok in zip(coords, inside)
                    ]
                    heads_out = np.zeros((len(coords), d))
                    for hh in range(heads):
                        sl = slice(hh * dh, (hh + 1) * dh)

                        def proj(lin, t):
                            val = t @ lin.weight.data[:, sl]
                            return val + lin.bias.data[sl] if lin.bias is not None else val

                        keys = [proj(att.k, t) for t in s_tok]
                        vals = [proj(att.v, t) for t in s_tok]
                        for qi, t in enumerate(q_tok):
                            q = proj(att.q, t)
                            scores = np.array([float(q @ kv) / math.sqrt(dh) for kv in keys])
                            e = np.exp(scores - scores.max())
                            p = e / e.sum()
                            head = sum(p[j] * vals[j] for j in range(len(vals)))
                            heads_out[qi, sl] = head
                    for qi, ((r, c), ok) in enumerate(zip(coords, inside)):
                        if not ok:
                            continue
                        o = heads_out[qi] @ att.o.weight.data
                        if att.o.bias is not None:
                            o = o + att.o.bias.data
                        if cfg.fusion_variant == "mwca":
                            o = o + y[n, r, c]
                        out[n, r, c] = out[n, r, c] + o
    return out


def interpolated_ap(tp_flags: list[bool], num_gt: int) -> float:
    """101-point interpolated AP of a ranked list, by definition.

    For each recall level r, take the best precision over every cutoff whose
    recall reaches r.
    """
    if num_gt == 0:
        return float("nan")
    cutoffs = []
    tp = 0
    for i, flag in enumerate(tp_flags):
        tp += int(flag)
        cutoffs.append((tp / num_gt, tp / (i + 1)))
    total = 0.0
    for level in range(101):
        r = level / 100.0
        best = 0.0
        for recall, precision in cutoffs:
            if recall >= r and precision > best:
                best = precision
        total += best
    return total / 101.0


def _conv_bn_loops(x: np.ndarray, unit) -> np.ndarray:
    """Conv (no bias) then inference-mode batch norm, channel by channel."""
    conv, bn = unit.conv, unit.bn
    y = conv2d_loops(x, conv.weight.data, None, conv.stride, conv.padding, conv.groups)
    out = np.empty_like(y)
    for c in range(y.shape[1]):
        scale = bn.weight.data[c] / math.sqrt(bn.running_var[c] + bn.eps)
        out[:, c] = (y[:, c] - bn.running_mean[c]) * scale + bn.bias.data[c]
        if unit.act:
            out[:, c] = np.where(out[:, c] > 0, out[:, c], 0.0)
    return out


def exchange_loops(xs: list[np.ndarray], unit) -> list[np.ndarray]:
    """Resample-and-sum of every stream into every other, evaluated pixel by pixel."""
    if len(xs) == 1:
        return [x.copy() for x in xs]
    outs = []
    for i, xi in enumerate(xs):
        acc = xi.copy()
        _, _, h, w = xi.shape
        for j, xj in enumerate(xs):
            if i == j:
                continue
            y = xj
            for layer in unit.paths[f"{i}_{j}"].layers:
                y = _conv_bn_loops(y, layer)
            if j > i:
                f = 2 ** (j - i)
                for r in range(h):
                    for c in range(w):
                        acc[:, :, r, c] += y[:, :, r // f, c // f]
            else:
                acc += y
        outs.append(np.maximum(acc, 0.0))
    return outs


def _box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area - inter)


def ap_by_enumeration(dets, gts, thresholds) -> tuple[float, float]:
    """Mean AP and mean final recall over classes and thresholds, without area buckets.

    ``dets``/``gts`` are per-image lists of (x0, y0, x1, y1, label[, score]).
    Every detection is matched in global score order within its image to
    the unmatched ground truth of highest IoU (earliest on ties).
    """
    classes = sorted({g[4] for image in gts for g in image})
    aps, recalls = [], []
    for c in classes:
        for t in thresholds:
            ranked = []
            for i, image in enumerate(dets):
                for j, d in enumerate(image):
                    if d[4] == c:
                        ranked.append((-d[5], i, j, d))
            ranked.sort(key=lambda r: (r[0], r[1], r[2]))
            used = set()
            flags = []
            for _, i, _, d in ranked:
                best, best_iou = None, -1.0
                for k, g in enumerate(gts[i]):
                    if g[4] != c or (i, k) in used:
                        continue
                    o = _box_iou(d, g)
                    if o >= t and o > best_iou:
                        best, best_iou = k, o
                if best is not None:
                    used.add((i, best))
                flags.append(best is not None)
            num_gt = sum(1 for image in gts for g in image if g[4] == c)
            aps.append(interpolated_ap(flags, num_gt))
            recalls.append(sum(flags) / num_gt)
    if not aps:
        return 0.0, 0.0
    return sum(aps) / len(aps), sum(recalls) / len(recalls)
