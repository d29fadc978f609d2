"""Counting, localization and tracking scores.

Counting uses frame-weighted MAE and root-mean-square error. Localization AP
pools all frames at each distance threshold 1..25 px under greedy
confidence-ordered matching; tracking AP ranks tracklets by mean confidence
and scores them by the fraction of a ground-truth trajectory they follow.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Trajectory
from .tracking import Track

log = logging.getLogger(__name__)

DIST_THRESHOLDS = tuple(range(1, 26))
RATIO_THRESHOLDS = (0.10, 0.15, 0.20)
TRACK_MATCH_DIST = 25.0


def mae_mse(series: Sequence[tuple[Sequence[float], Sequence[float]]]) -> tuple[float, float]:
    """``series`` holds one (ground truth, estimate) pair of per-frame counts per video."""
    err = []
    for gt, est in series:
        gt, est = np.asarray(gt, dtype=np.float64), np.asarray(est, dtype=np.float64)
        if gt.shape != est.shape:
            raise ValueError(f"count series length mismatch: {gt.shape} vs {est.shape}")
        err.append(gt - est)
    err = np.concatenate(err) if err else np.zeros(0)
    if err.size == 0:
        raise ValueError("mae_mse needs at least one frame")
    return float(np.abs(err).mean()), float(np.sqrt((err ** 2).mean()))


def greedy_match(preds, gts, dist_threshold: float) -> np.ndarray:
    """Match predictions (x, y, conf) to ground truth points.

    Predictions are visited by descending confidence (ties by index); each
    takes the nearest still-free GT within ``dist_threshold``. Returns, per
    prediction in input order, the matched GT index or -1.
    """
    if dist_threshold <= 0:
        raise ValueError("dist_threshold must be positive")
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 2)
    out = np.full(len(p), -1, dtype=np.int64)
    if not len(p) or not len(g):
        return out
    dist = np.sqrt(((p[:, None, :2] - g[None, :, :]) ** 2).sum(-1))
    free = np.ones(len(g), dtype=bool)
    for i in np.argsort(-p[:, 2], kind="stable"):
        d = np.where(free, dist[i], np.inf)
        j = int(np.argmin(d))
        if d[j] <= dist_threshold:
            out[i] = j
            free[j] = False
    return out


def average_precision(conf, tp, num_gt: int) -> float:
    """All-points AP: area under the monotone envelope of the precision-recall curve."""
    if num_gt <= 0:
        log.warning("average precision undefined without ground truth; reporting 0")
        return 0.0
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.asarray(tp, dtype=np.float64)
    if not len(conf):
        return 0.0
    order = np.argsort(-conf, kind="stable")
    hits = np.cumsum(tp[order])
    precision = hits / np.arange(1, len(order) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    # each hit raises recall by exactly 1/num_gt; summing before dividing keeps a perfect ranking at 1.0
    return float(envelope[tp[order] > 0].sum() / num_gt)


def localization_ap(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], dist_threshold: float) -> float:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction frames vs {len(gts)} ground-truth frames")
    conf, tp, n_gt = [], [], 0
    for p, g in zip(preds, gts):
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        n_gt += len(np.asarray(g).reshape(-1, 2))
        conf.append(p[:, 2])
        tp.append(greedy_match(p, g, dist_threshold) >= 0)
    return average_precision(np.concatenate(conf), np.concatenate(tp), n_gt)


def localization_map(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray],
                     thresholds: Sequence[float] = DIST_THRESHOLDS) -> tuple[list[float], float]:
    aps = [localization_ap(preds, gts, t) for t in thresholds]
    return aps, float(np.mean(aps))


def _follow_ratio(track: Track, gt: Trajectory, dist: float) -> float:
    hits = 0
    for f, x, y, _ in track.points:
        q = gt.at(f)
        if q is not None and np.hypot(x - q[0], y - q[1]) <= dist:
            hits += 1
    return hits / len(gt.points)


def _track_hits(tracks: Sequence[Track], gts: Sequence[Trajectory], ratio_threshold: float,
                dist: float) -> tuple[np.ndarray, np.ndarray]:
    conf = np.array([t.mean_conf for t in tracks])
    free = np.ones(len(gts), dtype=bool)
    tp = np.zeros(len(tracks))
    if not gts:
        return conf, tp
    for i in np.argsort(-conf, kind="stable"):
        ratios = np.array([_follow_ratio(tracks[i], g, dist) if free[k] else -1.0 for k, g in enumerate(gts)])
        k = int(np.argmax(ratios))
        if ratios[k] > ratio_threshold:
            tp[i] = 1
            free[k] = False
    return conf, tp


def tracking_ap(videos: Sequence[tuple[Sequence[Track], Sequence[Trajectory]]], ratio_threshold: float,
                dist: float = TRACK_MATCH_DIST) -> float:
    """AP over one or more videos, each a (tracklets, ground-truth trajectories) pair.

    Within a video, tracklets by descending mean confidence claim the free
    GT they follow best; a tracklet is a true positive when that ratio
    strictly exceeds ``ratio_threshold``, and only true positives claim.
    Hits from all videos are then ranked together.
    """
    conf, tp, n_gt = [np.zeros(0)], [np.zeros(0)], 0
    for tracks, gts in videos:
        c, t = _track_hits(tracks, gts, ratio_threshold, dist)
        conf.append(c)
        tp.append(t)
        n_gt += len(gts)
    if n_gt == 0:
        log.warning("tracking AP undefined without ground truth trajectories; reporting 0")
        return 0.0
    return average_precision(np.concatenate(conf), np.concatenate(tp), n_gt)


def tracking_map(tracks: Sequence[Track], gts: Sequence[Trajectory],
                 thresholds: Sequence[float] = RATIO_THRESHOLDS,
                 dist: float = TRACK_MATCH_DIST) -> tuple[list[float], float]:
    """T-AP per ratio threshold and their mean for a single video."""
    return pooled_tracking_map([(tracks, gts)], thresholds, dist)


def pooled_tracking_map(videos, thresholds: Sequence[float] = RATIO_THRESHOLDS,
                        dist: float = TRACK_MATCH_DIST) -> tuple[list[float], float]:
    aps = [tracking_ap(videos, r, dist) for r in thresholds]
    return aps, float(np.mean(aps))


@dataclass
class EvalReport:
    mae: float
    mse: float
    l_ap: list[float]
    l_map: float
    t_ap: list[float]
    t_map: float

    def l_ap_at(self, threshold: int) -> float:
        return self.l_ap[DIST_THRESHOLDS.index(threshold)]

    def items(self) -> list[tuple[str, float]]:
        out = [("mae", self.mae), ("mse", self.mse), ("l_map", self.l_map)]
        out += [(f"l_ap@{t}", self.l_ap_at(t)) for t in (10, 15, 20)]
        out += [(f"l_ap_{t}", a) for t, a in zip(DIST_THRESHOLDS, self.l_ap)]
        out += [(f"t_ap@{r:.2f}", a) for r, a in zip(RATIO_THRESHOLDS, self.t_ap)]
        out.append(("t_map", self.t_map))
        return out

    def to_text(self) -> str:
        return "\n".join(f"{k}={v!r}" for k, v in self.items()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        f = lambda k: float(kv[k])
        return cls(f("mae"), f("mse"), [f(f"l_ap_{t}") for t in DIST_THRESHOLDS], f("l_map"),
                   [f(f"t_ap@{r:.2f}") for r in RATIO_THRESHOLDS], f("t_map"))

    def table(self) -> str:
        rows = [("MAE", self.mae), ("MSE", self.mse), ("L-mAP", self.l_map),
                ("L-AP@10", self.l_ap_at(10)), ("L-AP@15", self.l_ap_at(15)), ("L-AP@20", self.l_ap_at(20))]
        rows += [(f"T-AP@{r:.2f}", a) for r, a in zip(RATIO_THRESHOLDS, self.t_ap)]
        rows.append(("T-mAP", self.t_map))
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:8.4f}" for k, v in rows)


@dataclass
class VideoResult:
    gt_counts: np.ndarray
    est_counts: np.ndarray
    pred_points: list[np.ndarray]   # per frame (x, y, conf)
    gt_points: list[np.ndarray]     # per frame (x, y)
    tracks: list[Track]
    gt_trajectories: list[Trajectory]


def evaluate(videos: Sequence[VideoResult]) -> EvalReport:
    """One report pooled over videos: counts by frame, localization over all frames."""
    mae, mse = mae_mse([(v.gt_counts, v.est_counts) for v in videos])
    l_ap, l_map = localization_map([p for v in videos for p in v.pred_points],
                                   [g for v in videos for g in v.gt_points])
    t_ap, t_map = pooled_tracking_map([(v.tracks, v.gt_trajectories) for v in videos])
    return EvalReport(mae, mse, l_ap, l_map, t_ap, t_map)
