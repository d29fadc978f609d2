"""Independent reference implementations used as test oracles."""
import itertools
import math

import numpy as np

from stnnet import tensor as T
from stnnet.tracking import FlowGraph


def conv_loop(x, k, b, stride=1, pad=0):
    c, h, w = x.shape
    kk, _, kh, kw = k.shape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad))
    xp[:, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((kk, ho, wo))
    for o in range(kk):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for ch in range(c):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[ch, i * stride + u, j * stride + v] * k[o, ch, u, v]
                out[o, i, j] = acc
    return out


def dense_loop(x, w, b):
    out = []
    for i in range(w.shape[0]):
        acc = b[i]
        for j in range(w.shape[1]):
            acc += w[i, j] * x[j]
        out.append(acc)
    return np.array(out)


def correlate_loop(f1, f2, d):
    c, h, w = f1.shape
    side = 2 * d + 1
    out = np.zeros((side * side, h, w))
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            ch = (dy + d) * side + (dx + d)
            for y in range(h):
                for x in range(w):
                    yy, xx = y + dy, x + dx
                    if 0 <= yy < h and 0 <= xx < w:
                        out[ch, y, x] = sum(f1[k, y, x] * f2[k, yy, xx] for k in range(c)) / c
    return out


def fd_check(loss_fn, leaf, tol=1e-4, eps=1e-5):
    """Assert analytic and central-difference gradients agree.

    Error metric: max |g_an - g_fd| / max(1, |g_an|) over components.
    """
    leaf.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = leaf.grad.copy()
    numeric = T.numerical_grad(loss_fn, leaf, eps=eps)
    err = np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic)))
    assert err < tol, f"gradient mismatch {err:.3e}"
    return err


def greedy_oracle(preds, gts, thr):
    """Confidence-ordered matching written as explicit loops over candidate pairs."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i][2], i))
    taken, tp = set(), 0
    for i in order:
        best, best_d = None, None
        for j, g in enumerate(gts):
            if j in taken:
                continue
            d = math.dist(preds[i][:2], g)
            if d <= thr and (best_d is None or d < best_d):
                best, best_d = j, d
        if best is not None:
            taken.add(best)
            tp += 1
    return tp


def max_matching(preds, gts, thr):
    """Maximum bipartite matching size, trying every injection of the smaller side."""
    ok = [[math.dist(p[:2], g) <= thr for g in gts] for p in preds]
    if len(preds) > len(gts):
        ok = [list(col) for col in zip(*ok)] if preds else []
    rows, cols = len(ok), len(ok[0]) if ok else 0
    best = 0
    for perm in itertools.permutations(range(cols), rows):
        best = max(best, sum(ok[i][j] for i, j in enumerate(perm)))
    return best


def enumerate_optimum(graph: FlowGraph) -> float:
    """Minimum cost over every set of node-disjoint paths, by brute force over link subsets."""
    n = graph.size
    single = graph.det_cost + graph.entry + graph.exit
    best = math.inf
    links = graph.links
    for r in range(len(links) + 1):
        for chosen in itertools.combinations(links, r):
            outs = [i for i, _, _ in chosen]
            ins = [j for _, j, _ in chosen]
            if len(set(outs)) < len(outs) or len(set(ins)) < len(ins):
                continue
            used = set(outs) | set(ins)
            cost = sum(c for _, _, c in chosen)
            for k in range(n):
                if k in used:
                    cost += graph.det_cost[k]
                    cost += graph.entry if k not in ins else 0.0
                    cost += graph.exit if k not in outs else 0.0
                else:
                    cost += min(0.0, single[k])
            best = min(best, cost)
    return best


def random_instance(rng, max_dets=6):
    frames = int(rng.integers(1, 5))
    total = int(rng.integers(0, max_dets + 1))
    split = np.sort(rng.integers(0, frames, size=total))
    dets = []
    for t in range(frames):
        k = int((split == t).sum())
        xy = rng.uniform(0, 30, size=(k, 2))
        conf = rng.uniform(0.02, 0.99, size=(k, 1))
        dets.append(np.hstack([xy, conf]))
    proj = [d[:, :2] + rng.normal(0, 3, size=(len(d), 2)) for d in dets[:-1]]
    return dets, proj
