"""Brute-force reference implementations used as independent test oracles.

Everything here works on plain nested Python lists with explicit loops and
shares no code with the package.
"""

import math


def to_lists(mask):
    return mask.bits.tolist()


def nta_iou_loop(pred, tgt, cocat):
    h, w = len(pred), len(pred[0])
    inter = union = 0
    for y in range(h):
        for x in range(w):
            wrong = pred[y][x] and not (pred[y][x] and tgt[y][x])
            nontarget = cocat[y][x] and not tgt[y][x]
            inter += wrong and nontarget
            union += wrong or nontarget
    return None if union == 0 else inter / union


def iou_loop(p, g):
    inter = union = 0
    for y in range(len(p)):
        for x in range(len(p[0])):
            inter += p[y][x] and g[y][x]
            union += p[y][x] or g[y][x]
    return 1.0 if union == 0 else inter / union


def oiou_loop(preds, gts):
    inter = union = 0
    for p, g in zip(preds, gts):
        for y in range(len(p)):
            for x in range(len(p[0])):
                inter += p[y][x] and g[y][x]
                union += p[y][x] or g[y][x]
    return inter / union


def miou_loop(preds, gts):
    total = 0.0
    for p, g in zip(preds, gts):
        total += iou_loop(p, g)
    return total / len(preds)


def precision_loop(preds, gts, thresholds):
    out = {}
    for t in thresholds:
        hits = 0
        for p, g in zip(preds, gts):
            if iou_loop(p, g) > t:
                hits += 1
        out[t] = 100.0 * hits / len(preds)
    return out


def cosine_loop(a, b, eps=1e-8):
    dot = sum(x * y for x, y in zip(a, b))
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(y * y for y in b))
    return dot / max(na * nb, eps)


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def affinity_loop(x):
    """x: list of rows. Softmax over rows of Gram / squared Frobenius norm."""
    n = len(x)
    sq = sum(v * v for row in x for v in row)
    out = []
    for a in range(n):
        row = []
        for b in range(n):
            g = sum(p * q for p, q in zip(x[a], x[b]))
            row.append(g / sq if sq > 0 else 0.0)
        out.append(softmax_row(row))
    return out


def softplus(z):
    return math.log1p(math.exp(-abs(z))) + max(z, 0.0)


def circle_area_loop(cx, cy, r, h, w):
    n = 0
    for y in range(h):
        for x in range(w):
            if (x + 0.5 - cx) ** 2 + (y + 0.5 - cy) ** 2 <= r * r:
                n += 1
    return n
