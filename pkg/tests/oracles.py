"""Independent slow reference implementations used as test oracles.

Everything here is written with plain Python loops and no shared code with
the package, so agreement is evidence of correctness rather than of
consistency.
"""

import numpy as np


def conv2d_naive(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    f, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for a in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0 if b is None else b[o]
                    for ch in range(c):
                        for ki in range(k):
                            for kj in range(k):
                                y, xx = i * stride + ki - pad, j * stride + kj - pad
                                if 0 <= y < h and 0 <= xx < wd:
                                    s += x[a, ch, y, xx] * w[o, ch, ki, kj]
                    out[a, o, i, j] = s
    return out


def depthwise_naive(x, w, stride, pad):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    s = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            y, xx = i * stride + ki - pad, j * stride + kj - pad
                            if 0 <= y < h and 0 <= xx < wd:
                                s += x[a, ch, y, xx] * w[ch, 0, ki, kj]
                    out[a, ch, i, j] = s
    return out


def clahe_naive(img, clip, grid):
    """Per-pixel CLAHE written from the textbook description.

    Tile (a, b) spans rows [a*H//gy, (a+1)*H//gy).  Its histogram is clipped
    at max(1, int(clip * n / 256)); the excess is returned in whole units to
    every bin, and the leftover units one by one to every
    (256 // leftover)-th bin.  Each tile's mapping is round(cdf * 255 / n).
    A pixel blends the four nearest tile mappings bilinearly by its distance
    to the tile centres, clamping outside the outermost centres.
    """
    h, w = img.shape
    gy, gx = grid
    ry = [(i * h) // gy for i in range(gy + 1)]
    rx = [(i * w) // gx for i in range(gx + 1)]
    maps = {}
    for a in range(gy):
        for b in range(gx):
            tile = [int(v) for row in img[ry[a]:ry[a + 1], rx[b]:rx[b + 1]] for v in row]
            n = len(tile)
            hist = [0] * 256
            for v in tile:
                hist[v] += 1
            limit = max(1, int(clip * n / 256))
            excess = 0
            for i in range(256):
                if hist[i] > limit:
                    excess += hist[i] - limit
                    hist[i] = limit
            per, left = divmod(excess, 256)
            hist = [v + per for v in hist]
            if left:
                step = max(256 // left, 1)
                i, given = 0, 0
                while i < 256 and given < left:
                    hist[i] += 1
                    given += 1
                    i += step
            cdf, acc = [], 0
            for v in hist:
                acc += v
                cdf.append(acc)
            # round half up of cdf * 255 / n, in exact integers
            maps[a, b] = [(2 * 255 * cv + n) // (2 * n) for cv in cdf]

    cy = [(ry[a] + ry[a + 1] - 1) / 2 for a in range(gy)]
    cx = [(rx[b] + rx[b + 1] - 1) / 2 for b in range(gx)]

    def neighbours(p, centres):
        if p <= centres[0]:
            return 0, 0, 0.0
        if p >= centres[-1]:
            last = len(centres) - 1
            return last, last, 0.0
        i = 0
        while centres[i + 1] <= p:
            i += 1
        return i, i + 1, (p - centres[i]) / (centres[i + 1] - centres[i])

    out = np.zeros_like(img)
    for y in range(h):
        a0, a1, ty = neighbours(y, cy)
        for x in range(w):
            b0, b1, tx = neighbours(x, cx)
            v = int(img[y, x])
            top = maps[a0, b0][v] * (1 - tx) + maps[a0, b1][v] * tx
            bot = maps[a1, b0][v] * (1 - tx) + maps[a1, b1][v] * tx
            val = top * (1 - ty) + bot * ty
            out[y, x] = min(255, max(0, int(np.floor(val + 0.5))))
    return out


def resize_naive(img, out_h, out_w):
    h, w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = min(max((i + 0.5) * h / out_h - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = min(max((j + 0.5) * w / out_w - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def auc_pairs_naive(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))
