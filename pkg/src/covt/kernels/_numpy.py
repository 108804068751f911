"""Pure-numpy reference kernels. Always importable; the numba twins must agree."""
import numpy as np


def linear_assignment(cost):
    """Min-cost perfect assignment on a square matrix via shortest augmenting paths.

    Returns ``perm`` with ``perm[row] = col``. Ties resolve to the lowest column
    index at every relaxation, so results are deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cols = np.nonzero(free)[0]
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            k = int(np.argmin(minv[cols]))
            j1 = int(cols[k])
            delta = minv[j1]
            used_idx = np.nonzero(used)[0]
            u[p[used_idx]] += delta
            v[used_idx] -= delta
            minv[cols] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    perm[p[1:] - 1] = np.arange(n)
    return perm


def pairwise_mask_cost(pred, gt, alpha, gamma, eps, clamp, symmetric):
    """cost[i, j] = dice(pred_i, gt_j) + alpha * focal(pred_i, gt_j) over flattened masks."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    npix = pred.shape[1]
    inter = pred @ gt.T
    dice = 1.0 - 2.0 * inter / (pred.sum(1)[:, None] + gt.sum(1)[None, :] + eps)
    pc = np.clip(pred, clamp, 1.0 - clamp)
    pos = -((1.0 - pc) ** gamma) * np.log(pc)
    focal = pos @ gt.T
    if symmetric:
        neg = -(pc ** gamma) * np.log(1.0 - pc)
        focal = focal + neg @ (1.0 - gt).T
    return dice + alpha * focal / npix


def rasterize(kind, cy, cx, sy, sx, depth, intensity, height, width, bg_depth):
    """Z-buffered occupancy. Lower depth is nearer; equal depth keeps the earlier shape."""
    ys = np.arange(height)[:, None] + 0.5
    xs = np.arange(width)[None, :] + 0.5
    labels = np.full((height, width), -1, dtype=np.int32)
    zbuf = np.full((height, width), bg_depth, dtype=np.float64)
    image = np.zeros((height, width), dtype=np.float64)
    nearest = np.full((height, width), np.inf)
    for s in range(len(kind)):
        if kind[s] == 0:
            inside = (np.abs(ys - cy[s]) <= sy[s]) & (np.abs(xs - cx[s]) <= sx[s])
        else:
            inside = (ys - cy[s]) ** 2 + (xs - cx[s]) ** 2 <= sy[s] * sy[s]
        win = inside & (depth[s] < nearest)
        nearest[win] = depth[s]
        labels[win] = s
        zbuf[win] = depth[s]
        image[win] = intensity[s]
    return labels, zbuf, image


def label_boundaries(labels):
    """1 where a labelled pixel has an in-image 4-neighbour with a different label."""
    labels = np.asarray(labels)
    diff = np.zeros(labels.shape, dtype=bool)
    d = labels[1:, :] != labels[:-1, :]
    diff[1:, :] |= d
    diff[:-1, :] |= d
    d = labels[:, 1:] != labels[:, :-1]
    diff[:, 1:] |= d
    diff[:, :-1] |= d
    return (diff & (labels >= 0)).astype(np.float64)
