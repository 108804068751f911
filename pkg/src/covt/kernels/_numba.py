"""numba-compiled twins of :mod:`covt.kernels._numpy`."""
import math

import numpy as np
from numba import njit


@njit(cache=True)
def linear_assignment(cost):
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    return perm


@njit(cache=True)
def pairwise_mask_cost(pred, gt, alpha, gamma, eps, clamp, symmetric):
    n, npix = pred.shape
    k = gt.shape[0]
    out = np.empty((n, k))
    gsum = np.zeros(k)
    for j in range(k):
        for q in range(npix):
            gsum[j] += gt[j, q]
    pos = np.empty(npix)
    neg = np.zeros(npix)
    for i in range(n):
        psum = 0.0
        for q in range(npix):  # focal terms depend on the prediction only
            pv = pred[i, q]
            psum += pv
            pc = min(max(pv, clamp), 1.0 - clamp)
            w = 1.0 - pc
            pos[q] = -(w * w if gamma == 2.0 else w ** gamma) * math.log(pc)
            if symmetric:
                neg[q] = -(pc * pc if gamma == 2.0 else pc ** gamma) * math.log(w)
        for j in range(k):
            inter = 0.0
            focal = 0.0
            for q in range(npix):
                g = gt[j, q]
                inter += pred[i, q] * g
                focal += pos[q] * g + neg[q] * (1.0 - g)
            out[i, j] = 1.0 - 2.0 * inter / (psum + gsum[j] + eps) + alpha * focal / npix
    return out


@njit(cache=True)
def rasterize(kind, cy, cx, sy, sx, depth, intensity, height, width, bg_depth):
    labels = np.full((height, width), -1, dtype=np.int32)
    zbuf = np.full((height, width), bg_depth)
    image = np.zeros((height, width))
    for y in range(height):
        yc = y + 0.5
        for x in range(width):
            xc = x + 0.5
            best = np.inf
            for s in range(kind.shape[0]):
                if kind[s] == 0:
                    inside = abs(yc - cy[s]) <= sy[s] and abs(xc - cx[s]) <= sx[s]
                else:
                    inside = (yc - cy[s]) ** 2 + (xc - cx[s]) ** 2 <= sy[s] * sy[s]
                if inside and depth[s] < best:
                    best = depth[s]
                    labels[y, x] = s
                    zbuf[y, x] = depth[s]
                    image[y, x] = intensity[s]
    return labels, zbuf, image


@njit(cache=True)
def label_boundaries(labels):
    h, w = labels.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            lab = labels[y, x]
            if lab < 0:
                continue
            if (y > 0 and labels[y - 1, x] != lab) or (y + 1 < h and labels[y + 1, x] != lab) \
                    or (x > 0 and labels[y, x - 1] != lab) or (x + 1 < w and labels[y, x + 1] != lab):
                out[y, x] = 1.0
    return out
