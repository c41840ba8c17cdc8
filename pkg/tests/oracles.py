"""Slow, obviously-correct reference implementations used by the tests."""
import numpy as np


def set_partitions(items):
    """Every partition of ``items`` as a list of blocks (restricted growth strings)."""
    items = list(items)
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def modularity(adj, labels):
    """Newman modularity by explicit double sum over node pairs."""
    adj = np.asarray(adj, dtype=float)
    deg = adj.sum(1)
    two_e = adj.sum()
    q = 0.0
    for i in range(len(adj)):
        for j in range(len(adj)):
            if labels[i] == labels[j]:
                q += adj[i, j] - deg[i] * deg[j] / two_e
    return q / two_e


def foreground_regions(semantic, background=0):
    """4-connected same-class components by flood fill."""
    h, w = semantic.shape
    seen = np.zeros(semantic.shape, dtype=bool)
    regions = []
    for r in range(h):
        for c in range(w):
            if semantic[r, c] == background or seen[r, c]:
                continue
            stack, region = [(r, c)], np.zeros_like(seen)
            seen[r, c] = True
            while stack:
                y, x = stack.pop()
                region[y, x] = True
                for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w and not seen[yy, xx] \
                            and semantic[yy, xx] == semantic[r, c]:
                        seen[yy, xx] = True
                        stack.append((yy, xx))
            regions.append(region)
    return regions


def nfcovering(pred, semantic):
    """Mean over gt foreground regions of the max IoU over all predicted labels."""
    best = []
    for region in foreground_regions(semantic):
        ious = []
        for lab in np.unique(pred):
            p = pred == lab
            ious.append((p & region).sum() / (p | region).sum())
        best.append(max(ious))
    return sum(best) / len(best)


def miou_accuracy(pred, gt, n_classes):
    ious = []
    for c in range(n_classes):
        inter = np.sum((pred == c) & (gt == c))
        union = np.sum((pred == c) | (gt == c))
        if union:
            ious.append(inter / union)
    return float(np.mean(ious)), float(np.mean(pred == gt))


def knn_labels(queries, feats, labels, k):
    """Sort every bank entry per query; majority vote, ties to the nearest tied label."""
    out = []
    for q in queries:
        sims = [(float(q @ f), -i) for i, f in enumerate(feats)]
        nbrs = [-i for _, i in sorted(sims, reverse=True)[:k]]
        counts = {}
        for rank, i in enumerate(nbrs):
            counts.setdefault(int(labels[i]), [0, rank])[0] += 1
        out.append(min(counts, key=lambda lab: (-counts[lab][0], counts[lab][1])))
    return np.array(out)


def warp_labels(labels, t):
    """Per-pixel loop: nearest source pixel of each view pixel centre."""
    top, left, ch, cw = t.crop
    oh, ow = t.scale
    out = np.empty((oh, ow), dtype=labels.dtype)
    for r in range(oh):
        for c in range(ow):
            cc = ow - 1 - c if t.flip_h else c
            sr = top + int(np.floor((r + 0.5) * ch / oh))
            sc = left + int(np.floor((cc + 0.5) * cw / ow))
            out[r, c] = labels[sr, sc]
    return out


def spherical_kmeans_objective(points, k, iters, seed):
    """Plain Lloyd iterations on the sphere from k random distinct points."""
    rng = np.random.default_rng(seed)
    cent = points[rng.choice(len(points), size=k, replace=False)]
    for _ in range(iters):
        assign = np.argmax(points @ cent.T, axis=1)
        for j in range(k):
            members = points[assign == j]
            if len(members):
                s = members.sum(0)
                cent[j] = s / np.linalg.norm(s)
    return float(np.max(points @ cent.T, axis=1).mean())
