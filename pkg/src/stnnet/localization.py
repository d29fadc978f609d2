"""Point proposals: label assignment, attention fusion head, loss, decoding and NMS.

A proposal is tiled at every cell of every pyramid level. The cell
``(i, j)`` of a level with stride ``s`` is anchored at image point
``(j*s + (s-1)/2, i*s + (s-1)/2)``, i.e. the centre of the image pixels it
covers.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import read_csv_rows
from .layers import Conv, Dense, Layer
from .tensor import ShapeError, Tensor

MATCH_RADIUS = 10.0
NMS_RADIUS = 5.0
TOP_M = 128
SCORE_FLOOR = 0.01
EPS = 1e-7


def anchors(shape: tuple[int, int], stride: int) -> np.ndarray:
    """Image coordinates of a level's anchors as an [H, W, 2] (x, y) grid."""
    h, w = shape
    off = (stride - 1) / 2.0
    xs = np.arange(w) * stride + off
    ys = np.arange(h) * stride + off
    return np.stack(np.meshgrid(xs, ys), axis=-1)


@dataclass
class LevelTargets:
    labels: np.ndarray   # [H, W] in {0, 1}; doubles as the positivity mask s
    offsets: np.ndarray  # [2, H, W] (dx, dy) to the assigned point, zero on negatives
    assigned: np.ndarray  # [H, W] index of the assigned point, -1 on negatives
    stride: int


def assign_labels(points, level_shapes: Sequence[tuple[int, int]], match_radius: float = MATCH_RADIUS,
                  strides: Sequence[int] | None = None) -> list[LevelTargets]:
    if match_radius <= 0:
        raise ValueError("match_radius must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    strides = list(strides) if strides is not None else [1 << l for l in range(len(level_shapes))]
    out = []
    for shape, s in zip(level_shapes, strides):
        if shape[0] <= 0 or shape[1] <= 0:
            raise ShapeError(f"assign_labels: empty level shape {shape}")
        h, w = shape
        labels = np.zeros((h, w))
        offsets = np.zeros((2, h, w))
        assigned = np.full((h, w), -1, dtype=np.int64)
        if len(pts):
            a = anchors(shape, s)
            diff = pts[None, None, :, :] - a[:, :, None, :]
            dist = np.sqrt((diff ** 2).sum(-1))
            nearest = dist.argmin(axis=-1)  # first minimum: lowest index wins ties
            dmin = np.take_along_axis(dist, nearest[..., None], axis=-1)[..., 0]
            pos = dmin <= match_radius
            labels[pos] = 1.0
            assigned[pos] = nearest[pos]
            d = np.take_along_axis(diff, nearest[..., None, None], axis=2)[:, :, 0, :]
            offsets[0][pos] = d[..., 0][pos]
            offsets[1][pos] = d[..., 1][pos]
        out.append(LevelTargets(labels, offsets, assigned, s))
    return out


def stack_targets(per_frame: Sequence[Sequence[LevelTargets]]) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Stack per-frame targets into per-level arrays [F, H, W] and [F, 2, H, W]."""
    levels = len(per_frame[0])
    labels = [np.stack([f[l].labels for f in per_frame]) for l in range(levels)]
    offsets = [np.stack([f[l].offsets for f in per_frame]) for l in range(levels)]
    return labels, offsets


@dataclass
class ProposalBatch:
    scores: list[Tensor]        # per level [F, H, W], probabilities
    regressions: list[Tensor]   # per level [F, 2, H, W], pixels
    labels: list[np.ndarray]    # per level [F, H, W]
    offsets: list[np.ndarray]   # per level [F, 2, H, W]


def localization_loss(batch: ProposalBatch) -> Tensor:
    """Log loss on every proposal plus squared offset error on the positives.

    Summed over cells and divided by ``L * F`` (levels times frames), which
    for a single frame is the per-frame loss and for a batch its mean.
    """
    levels = len(batch.scores)
    frames = batch.scores[0].shape[0]
    acc = None
    for c_hat, r_hat, c_star, r_star in zip(batch.scores, batch.regressions, batch.labels, batch.offsets):
        if c_hat.shape != c_star.shape or r_hat.shape != r_star.shape:
            raise ShapeError(f"localization_loss: scores {c_hat.shape} vs labels {c_star.shape}, "
                             f"regressions {r_hat.shape} vs offsets {r_star.shape}")
        c = T.clip(c_hat, EPS, 1.0 - EPS)
        one_minus = T.add_scalar(T.mul_scalar(c, -1.0), 1.0)
        pos = T.total(T.mul(Tensor(c_star), T.log(c)))
        neg = T.total(T.mul(Tensor(1.0 - c_star), T.log(one_minus)))
        cls = T.mul_scalar(T.add(pos, neg), -1.0)
        mask = np.broadcast_to(c_star[:, None], r_star.shape)
        reg = T.total(T.mul(Tensor(mask), T.square(T.sub(r_hat, Tensor(r_star)))))
        term = T.add(cls, reg)
        acc = term if acc is None else T.add(acc, term)
    return T.mul_scalar(acc, 1.0 / (levels * frames))


# ---------------------------------------------------------------- attention head

class ChannelAttention(Layer):
    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 4):
        hidden = max(channels // ratio, 1)
        self.fc1 = Dense(channels, hidden, rng)
        self.fc2 = Dense(hidden, channels, rng)

    def gate(self, x: Tensor) -> Tensor:
        avg = self.fc2(T.relu(self.fc1(T.global_avg_pool(x))))
        mx = self.fc2(T.relu(self.fc1(T.global_max_pool(x))))
        return T.sigmoid(T.add(avg, mx))


class SpatialAttention(Layer):
    def __init__(self, rng: np.random.Generator, kernel: int = 7):
        self.conv = Conv(2, 1, kernel, rng)

    def gate(self, x: Tensor) -> Tensor:
        return T.sigmoid(self.conv(T.concat_channels([T.channel_mean(x), T.channel_max(x)])))


class AttentionBranch(Layer):
    """Channel then spatial gating of each pyramid level, fused at stride 1."""

    def __init__(self, widths: Sequence[int], out_channels: int, rng: np.random.Generator,
                 hidden: int = 16, out_gain: float = 1.0):
        self.channel = [ChannelAttention(c, rng) for c in widths]
        self.spatial = [SpatialAttention(rng) for _ in widths]
        self.side = [Conv(c, out_channels, 1, rng, gain=out_gain) for c in widths[1:]]
        self.mix = Conv(sum(widths), hidden, 3, rng)
        self.out = Conv(hidden, out_channels, 1, rng, gain=out_gain)

    def __call__(self, feats: Sequence[Tensor], use_attention: bool = True):
        gated = []
        for x, ca, sa in zip(feats, self.channel, self.spatial):
            if use_attention:
                x = T.scale_channels(x, ca.gate(x))
                x = T.scale_spatial(x, sa.gate(x))
            gated.append(x)
        side = [conv(x) for conv, x in zip(self.side, gated[1:])]
        up = []
        for level, x in enumerate(gated):
            for _ in range(level):
                x = T.upsample2_bilinear(x)
            up.append(x)
        fused = self.out(T.relu(self.mix(T.concat_channels(up))))
        return fused, side


class LocalizationHead(Layer):
    """Classification and regression branches over features at strides 1, 2, 4.

    Returns per-level score maps ``[N, H_l, W_l]`` and regression maps
    ``[N, 2, H_l, W_l]``: level 1 is the fused stride-1 prediction, levels
    2 and 3 come from side outputs of the gated coarse features.
    """

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, hidden: int = 16):
        self.cls = AttentionBranch(widths, 1, rng, hidden)
        self.reg = AttentionBranch(widths, 2, rng, hidden)
        self.use_attention = True

    def __call__(self, feats: Sequence[Tensor]) -> tuple[list[Tensor], list[Tensor]]:
        n, _, h, w = feats[0].shape
        for level, f in enumerate(feats):
            if f.data.ndim != 4 or f.shape[0] != n or f.shape[2:] != (h >> level, w >> level):
                raise ShapeError(f"localization head: level {level + 1} feature {f.shape} "
                                 f"does not match stride {1 << level} of {feats[0].shape}")
        c_fused, c_side = self.cls(feats, self.use_attention)
        r_fused, r_side = self.reg(feats, self.use_attention)
        scores = [T.sigmoid(T.reshape(c, (c.shape[0],) + c.shape[2:])) for c in [c_fused] + c_side]
        return scores, [r_fused] + r_side


def attention_fuse(head: LocalizationHead, f1: Tensor, f2: Tensor, f3: Tensor) -> tuple[Tensor, Tensor]:
    """Fused stride-1 class map ``[N, H, W]`` and regression map ``[N, 2, H, W]``."""
    scores, regs = head([f1, f2, f3])
    return scores[0], regs[0]


# ---------------------------------------------------------------- decoding

def nms(points: np.ndarray, scores: np.ndarray, radius: float = NMS_RADIUS,
        top_m: int = TOP_M) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order.

    Ties are broken by (y, x) so the result does not depend on input order.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    sc = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.lexsort((pts[:, 0], pts[:, 1], -sc))
    alive = np.ones(len(order), dtype=bool)
    cand = pts[order]
    keep = []
    r2 = radius * radius
    for k in range(len(order)):
        if len(keep) >= top_m:
            break
        if not alive[k]:
            continue
        keep.append(order[k])
        d2 = ((cand[k + 1:] - cand[k]) ** 2).sum(axis=1)
        alive[k + 1:] &= d2 >= r2
    return np.array(keep, dtype=np.int64)


def decode_and_nms(score_map, reg_map, nms_radius: float = NMS_RADIUS, top_m: int = TOP_M,
                   floor: float = SCORE_FLOOR, stride: int = 1) -> np.ndarray:
    """Decode a stride-1 score/regression pair into ``[n, 3]`` rows of (x, y, conf)."""
    if nms_radius <= 0:
        raise ValueError("nms_radius must be positive")
    score = np.asarray(getattr(score_map, "data", score_map), dtype=np.float64)
    reg = np.asarray(getattr(reg_map, "data", reg_map), dtype=np.float64)
    a = anchors(score.shape, stride)
    pts = np.stack([a[..., 0] + reg[0], a[..., 1] + reg[1]], axis=-1).reshape(-1, 2)
    conf = score.reshape(-1)
    ok = conf >= floor
    pts, conf = pts[ok], conf[ok]
    keep = nms(pts, conf, nms_radius, top_m)
    return np.column_stack([pts[keep], conf[keep]]) if len(keep) else np.zeros((0, 3))


# ---------------------------------------------------------------- detections CSV

DETECTIONS_HEADER = "frame,x,y,conf"


def save_detections(path, per_frame: Sequence[np.ndarray]) -> None:
    lines = [DETECTIONS_HEADER]
    for f, det in enumerate(per_frame):
        for x, y, c in np.asarray(det).reshape(-1, 3):
            lines.append(f"{f},{x:.3f},{y:.3f},{c:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_detections(path, num_frames: int | None = None) -> list[np.ndarray]:
    rows = read_csv_rows(path, DETECTIONS_HEADER, (int, float, float, float))
    n = max([r[0] for r in rows], default=-1) + 1
    if num_frames is not None:
        n = max(n, num_frames)
    per = [[] for _ in range(n)]
    for f, x, y, c in rows:
        per[f].append((x, y, c))
    return [np.array(p, dtype=np.float64).reshape(-1, 3) for p in per]
