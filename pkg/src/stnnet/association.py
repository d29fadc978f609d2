"""Motion offsets over point proposals and the neighbouring context loss.

Offsets follow the projection ``p' = p - o``: a proposal at ``p`` in frame
t-1 with forward offset ``o`` is predicted at ``p'`` in frame t, and the
backward offset of a frame-t proposal projects it into frame t-1.
"""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import read_csv_rows
from .layers import Dense, Layer
from .tensor import Tensor

NEIGHBOR_RADIUS = 50.0
NUM_NEIGHBORS = 8


def _pairwise(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))


def knn_neighbors(points, beta: int = NUM_NEIGHBORS) -> np.ndarray:
    """Indices of the ``beta`` nearest other points, shape [M, min(beta, M-1)].

    Equal distances resolve to the lower index.
    """
    if beta < 1:
        raise ValueError("beta must be >= 1")
    d = _pairwise(points)
    m = len(d)
    if m == 0:
        return np.zeros((0, 0), dtype=np.int64)
    np.fill_diagonal(d, np.inf)
    k = min(beta, m - 1)
    return np.argsort(d, axis=1, kind="stable")[:, :k].astype(np.int64)


def radius_neighbors(points, rho: float = NEIGHBOR_RADIUS) -> list[np.ndarray]:
    """For each point, the indices of other points within distance ``rho`` (ascending)."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    d = _pairwise(points)
    np.fill_diagonal(d, np.inf)
    return [np.nonzero(row <= rho)[0] for row in d]


def relation_vector(p_i, o_i, p_j, o_j) -> np.ndarray:
    return (np.asarray(p_j, float) - np.asarray(o_j, float)) - (np.asarray(p_i, float) - np.asarray(o_i, float))


# ---------------------------------------------------------------- point network

class PointNeighborhoodLayer(Layer):
    """Sum over neighbours of an MLP on (relative position, neighbour feature), then a pointwise MLP."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, scale: float = NEIGHBOR_RADIUS):
        self.edge = Dense(2 + cin, cout, rng)
        self.point = Dense(cin + cout, cout, rng)
        self.scale = scale
        self.cout = cout

    def __call__(self, points: np.ndarray, feats: Tensor, nbrs: np.ndarray) -> Tensor:
        m = feats.shape[0]
        if nbrs.shape[1] == 0:
            agg = Tensor(np.zeros((m, self.cout)))
        else:
            rel = (points[nbrs] - points[:, None, :]) / self.scale
            msg = T.relu(self.edge(T.concat([Tensor(rel), T.take(feats, nbrs)], axis=-1)))
            agg = T.sum_axis(msg, 1)
        return T.relu(self.point(T.concat([feats, agg], axis=-1)))


class AssociationHead(Layer):
    """Three stacked neighbourhood layers and an MLP emitting forward/backward offsets."""

    def __init__(self, cin: int, rng: np.random.Generator, hidden: int = 32, beta: int = NUM_NEIGHBORS):
        self.layers = [PointNeighborhoodLayer(cin if i == 0 else hidden, hidden, rng) for i in range(3)]
        self.mlp = Dense(hidden, hidden, rng)
        self.fwd = Dense(hidden, 2, rng, zero=True)
        self.bwd = Dense(hidden, 2, rng, zero=True)
        self.beta = beta
        self.hidden = hidden

    def __call__(self, points, feats: Tensor, nbrs: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if len(pts) == 0:
            return Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2)))
        if nbrs is None:
            nbrs = knn_neighbors(pts, self.beta)
        h = feats
        for layer in self.layers:
            h = layer(pts, h, nbrs)
        h = T.relu(self.mlp(h))
        return self.fwd(h), self.bwd(h)


def point_neighborhood_layer(head: AssociationHead, points, feats: Tensor) -> tuple[Tensor, Tensor]:
    return head(points, feats)


# ---------------------------------------------------------------- loss

def match_to_gt(proposals, gt_points, radius: float = 10.0) -> np.ndarray:
    """Greedy one-to-one matching in proposal order; -1 marks unmatched proposals."""
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 2)
    gts = np.asarray(gt_points, dtype=np.float64).reshape(-1, 2)
    out = np.full(len(props), -1, dtype=np.int64)
    if len(gts) == 0:
        return out
    free = np.ones(len(gts), dtype=bool)
    for i, p in enumerate(props):
        d = np.sqrt(((gts - p) ** 2).sum(1))
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius:
            out[i] = j
            free[j] = False
    return out


def _direction_loss(points, offsets: Tensor, targets, rho: float, use_relation: bool) -> tuple[Tensor | None, int]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(targets, dtype=np.float64).reshape(-1, 2)
    valid = np.nonzero(~np.isnan(tgt).any(axis=1))[0]
    m = len(valid)
    if m == 0:
        return None, 0
    p, g = pts[valid], tgt[valid]
    proj = T.sub(Tensor(p), T.take(offsets, valid))
    loss = T.total(T.absolute(T.sub(proj, Tensor(g))))
    if use_relation:
        nb = radius_neighbors(p, rho)
        src = np.concatenate([np.full(len(n), i) for i, n in enumerate(nb)]).astype(np.int64)
        dst = np.concatenate(nb).astype(np.int64) if nb else np.zeros(0, np.int64)
        if len(src):
            rel = T.sub(T.take(proj, dst), T.take(proj, src))
            loss = T.add(loss, T.total(T.absolute(T.sub(rel, Tensor(g[dst] - g[src])))))
    return T.mul_scalar(loss, 1.0 / (2 * m)), m


def neighboring_context_loss(prev_points, prev_offsets: Tensor, prev_targets,
                             next_points=None, next_offsets: Tensor | None = None, next_targets=None,
                             rho: float = NEIGHBOR_RADIUS, use_relation: bool = True,
                             use_cycle: bool = True) -> Tensor:
    """Temporal prediction plus relation-preservation loss, optionally in both directions.

    ``prev_targets[i]`` is the frame-t ground truth of the identity matched to
    frame-(t-1) proposal ``i`` (NaN row if unmatched); ``next_targets`` is the
    frame-(t-1) ground truth for the frame-t proposals. Unmatched proposals
    are left out, and each direction is normalised by ``2 * M`` with M its
    matched-proposal count.
    """
    terms = []
    fwd, _ = _direction_loss(prev_points, prev_offsets, prev_targets, rho, use_relation)
    if fwd is not None:
        terms.append(fwd)
    if use_cycle and next_points is not None:
        bwd, _ = _direction_loss(next_points, next_offsets, next_targets, rho, use_relation)
        if bwd is not None:
            terms.append(bwd)
    if not terms:
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return acc


# ---------------------------------------------------------------- offsets CSV

OFFSETS_HEADER = "frame,x,y,ox_fwd,oy_fwd,ox_bwd,oy_bwd"


def save_offsets(path, per_frame: Sequence[np.ndarray]) -> None:
    """``per_frame[t]`` rows: x, y, ox_fwd, oy_fwd, ox_bwd, oy_bwd."""
    lines = [OFFSETS_HEADER]
    for f, rows in enumerate(per_frame):
        for r in np.asarray(rows).reshape(-1, 6):
            lines.append(f"{f}," + ",".join(f"{v:.4f}" for v in r))
    Path(path).write_text("\n".join(lines) + "\n")


def load_offsets(path, num_frames: int | None = None) -> list[np.ndarray]:
    rows = read_csv_rows(path, OFFSETS_HEADER, (int,) + (float,) * 6)
    n = max([r[0] for r in rows], default=-1) + 1
    if num_frames is not None:
        n = max(n, num_frames)
    per = [[] for _ in range(n)]
    for r in rows:
        per[r[0]].append(r[1:])
    return [np.array(p, dtype=np.float64).reshape(-1, 6) for p in per]
