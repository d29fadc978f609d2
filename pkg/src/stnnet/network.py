"""The toy space-time network, its multi-task loss and two-stage training.

Both frames of a pair run through one backbone as a batch, so the two
branches share parameters by construction. Features at strides 1, 2, 4 are
fused top-down, fed to per-level density heads and the localization head,
and correlated across the pair to drive the association head.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .association import AssociationHead, match_to_gt, neighboring_context_loss
from .data import Augmentation, FrameAnnotations, Scene, apply_augmentation
from .density import LossWeights, build_density_pyramid, density_loss
from .layers import Conv, Layer
from .localization import (
    LocalizationHead, ProposalBatch, assign_labels, decode_and_nms, localization_loss, nms,
)
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

FULL_SCALE_LR = 1e-6  # suits a pretrained VGG backbone; far too small for the toy model


@dataclass
class ModelConfig:
    widths: tuple[int, int, int] = (16, 32, 64)
    head_hidden: int = 16
    corr_channels: int = 8
    assoc_hidden: int = 32
    max_disp: int = 4
    omega: tuple[float, float, float] = (2.0, 0.5, 0.05)
    match_radius: float = 10.0
    neighbor_radius: float = 50.0
    nms_radius: float = 5.0
    top_m: int = 128
    beta: int = 8
    batch_size: int = 4
    lr: float = 1e-4
    clip_norm: float = 10.0      # <= 0 disables clipping
    density_scale: float = 100.0  # targets are multiplied by this; counts divide it back out
    score_floor: float = 0.01
    peak_threshold: float = 0.1   # w/o loc: density peaks above this fraction of the frame max
    flip_prob: float = 0.5
    use_loc: bool = True
    use_ass: bool = True
    use_rel: bool = True
    use_cyc: bool = True
    seed: int = 0

    def validate(self) -> None:
        if any(r <= 0 for r in (self.match_radius, self.neighbor_radius, self.nms_radius)):
            raise ValueError("radii must be positive")
        if list(self.widths) != sorted(self.widths) or len(self.widths) != 3 or min(self.widths) < 1:
            raise ValueError(f"widths must be three ascending positive ints, got {self.widths}")
        if self.top_m < 1 or self.beta < 1 or self.batch_size < 1:
            raise ValueError("top_m, beta and batch_size must be >= 1")
        if self.lr <= 0 or self.density_scale <= 0:
            raise ValueError("lr and density_scale must be positive")
        LossWeights(tuple(self.omega))

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------- model

class Backbone(Layer):
    """Three groups of two 3x3 convolutions with 2x2 max pooling between groups."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        cin = 1
        self.groups = []
        for w in widths:
            self.groups.append(_Group(cin, w, rng))
            cin = w

    def __call__(self, x: Tensor) -> list[Tensor]:
        feats = []
        for i, g in enumerate(self.groups):
            if i:
                x = T.maxpool2(x)
            x = g(x)
            feats.append(x)
        return feats


class _Group(Layer):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.a = Conv(cin, cout, 3, rng)
        self.b = Conv(cout, cout, 3, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.b(T.relu(self.a(x))))


class TopDownFusion(Layer):
    def __init__(self, widths: Sequence[int], rng: np.random.Generator):
        w1, w2, w3 = widths
        self.lat2 = Conv(w2 + w3, w2, 3, rng)
        self.lat1 = Conv(w1 + w2, w1, 3, rng)

    def __call__(self, feats: Sequence[Tensor]) -> list[Tensor]:
        f1, f2, f3 = feats
        g2 = T.relu(self.lat2(T.concat_channels([f2, T.upsample2_bilinear(f3)])))
        g1 = T.relu(self.lat1(T.concat_channels([f1, T.upsample2_bilinear(g2)])))
        return [g1, g2, f3]


class STNNet(Layer):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        w = tuple(cfg.widths)
        self.backbone = Backbone(w, rng)
        self.fusion = TopDownFusion(w, rng)
        self.density = [Conv(c, 1, 1, rng) for c in w]
        self.loc = LocalizationHead(w, rng, cfg.head_hidden)
        side = (2 * cfg.max_disp + 1) ** 2
        self.corr = [Conv(side, cfg.corr_channels, 1, rng) for _ in w]
        self.assoc = AssociationHead(3 * cfg.corr_channels + w[0], rng, cfg.assoc_hidden, cfg.beta)
        self.frozen: set[str] = set()
        self.stage = 0

    def density_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters() if n.startswith("density.")}

    def features(self, frames: np.ndarray) -> list[Tensor]:
        x = np.asarray(frames, dtype=np.float64)
        if x.ndim != 3:
            raise ShapeError(f"features: expected [N,H,W] frames, got {x.shape}")
        if x.shape[1] % 4 or x.shape[2] % 4:
            raise ShapeError(f"frame shape {x.shape[1:]} not divisible by 4")
        return self.fusion(self.backbone(Tensor(x[:, None])))

    def density_maps(self, g: Sequence[Tensor]) -> list[Tensor]:
        out = []
        for head, x in zip(self.density, g):
            d = head(x)
            out.append(T.reshape(d, (d.shape[0],) + d.shape[2:]))
        return out

    def motion_features(self, g: Sequence[Tensor], src: np.ndarray, dst: np.ndarray) -> Tensor:
        """Stride-1 correlation features [P, C, H, W] for frame pairs ``src[p] -> dst[p]``."""
        maps = []
        for level, (x, conv) in enumerate(zip(g, self.corr)):
            c = T.relu(conv(T.correlate(T.take(x, src), T.take(x, dst), self.cfg.max_disp)))
            for _ in range(level):
                c = T.upsample2_bilinear(c)
            maps.append(c)
        maps.append(T.take(g[0], src))
        return T.concat_channels(maps)

    def offsets(self, motion: Tensor, index: int, points: np.ndarray) -> tuple[Tensor, Tensor]:
        feats = T.sample_bilinear(T.take(motion, np.array(index)), points)
        return self.assoc(points, feats)


def forward(model: STNNet, frame_pair: np.ndarray):
    """Run one pair ``[2, H, W]``: density pyramids, proposal maps and offsets of frame-0 detections."""
    frames = np.asarray(frame_pair, dtype=np.float64)
    if frames.shape[0] != 2:
        raise ShapeError(f"forward: expected a frame pair, got {frames.shape}")
    g = model.features(frames)
    dens = model.density_maps(g)
    scores, regs = model.loc(g)
    det = decode_and_nms(scores[0].data[0], regs[0].data[0], model.cfg.nms_radius, model.cfg.top_m,
                         model.cfg.score_floor)
    motion = model.motion_features(g, np.array([0]), np.array([1]))
    fwd, _ = model.offsets(motion, 0, det[:, :2])
    return dens, (scores, regs), (det, fwd)


# ---------------------------------------------------------------- targets

@dataclass
class FrameTargets:
    density: list[np.ndarray]
    labels: list[np.ndarray]
    offsets: list[np.ndarray]
    points: np.ndarray
    ids: np.ndarray


def frame_targets(ann: FrameAnnotations, shape: tuple[int, int], cfg: ModelConfig) -> FrameTargets:
    pts = ann.xy()
    pyr = build_density_pyramid(pts, shape)
    level_shapes = pyr.shapes
    lv = assign_labels(pts, level_shapes, cfg.match_radius)
    return FrameTargets([d * cfg.density_scale for d in pyr.levels], [l.labels for l in lv],
                        [l.offsets for l in lv], pts, ann.ids())


def association_targets(proposals: np.ndarray, own: FrameTargets, other: FrameTargets,
                        radius: float) -> np.ndarray:
    """Other-frame GT position of the identity matched to each proposal (NaN if none)."""
    out = np.full((len(proposals), 2), np.nan)
    match = match_to_gt(proposals, own.points, radius)
    where = {int(i): k for k, i in enumerate(other.ids)}
    for p, m in enumerate(match):
        if m >= 0:
            k = where.get(int(own.ids[m]))
            if k is not None:
                out[p] = other.points[k]
    return out


# ---------------------------------------------------------------- loss

@dataclass
class LossParts:
    density: Tensor
    localization: Tensor | None
    association: Tensor | None

    def total(self) -> Tensor:
        acc = self.density
        for t in (self.localization, self.association):
            if t is not None:
                acc = T.add(acc, t)
        return acc


def multi_task_loss(model: STNNet, frames: np.ndarray, targets: Sequence[FrameTargets],
                    with_association: bool) -> LossParts:
    """Batch mean of the density, localization and association terms.

    ``frames`` is ``[2K, H, W]``: rows ``k`` and ``K + k`` form pair ``k``.
    Density and localization terms average over all 2K frames; the
    association term averages over the K pairs.
    """
    cfg = model.cfg
    n = len(frames)
    k = n // 2
    g = model.features(frames)
    dens = density_loss(model.density_maps(g), [np.stack([t.density[l] for t in targets]) for l in range(3)],
                        LossWeights(tuple(cfg.omega)))
    loc = None
    scores = regs = None
    if cfg.use_loc:
        scores, regs = model.loc(g)
        labels = [np.stack([t.labels[l] for t in targets]) for l in range(3)]
        offsets = [np.stack([t.offsets[l] for t in targets]) for l in range(3)]
        loc = localization_loss(ProposalBatch(scores, regs, labels, offsets))
    ass = None
    if with_association and cfg.use_loc and cfg.use_ass:
        src = np.concatenate([np.arange(k), np.arange(k, n)])
        dst = np.concatenate([np.arange(k, n), np.arange(k)])
        motion = model.motion_features(g, src, dst)
        acc = None
        for p in range(k):
            a, b = p, k + p
            args = []
            for i, (own, other) in enumerate(((a, b), (b, a))):
                det = decode_and_nms(scores[0].data[own], regs[0].data[own], cfg.nms_radius, cfg.top_m,
                                     cfg.score_floor)
                pts = det[:, :2]
                fwd, bwd = model.offsets(motion, own, pts)
                tgt = association_targets(pts, targets[own], targets[other], cfg.match_radius)
                args += [pts, fwd if i == 0 else bwd, tgt]
            term = neighboring_context_loss(*args, rho=cfg.neighbor_radius, use_relation=cfg.use_rel,
                                            use_cycle=cfg.use_cyc)
            acc = term if acc is None else T.add(acc, term)
        ass = T.mul_scalar(acc, 1.0 / k)
    return LossParts(dens, loc, ass)


# ---------------------------------------------------------------- optimiser

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update of ``param``, ``m`` and ``v``."""
    if t < 1:
        raise ValueError("adam step counter starts at 1")
    m *= beta1
    m += (1 - beta1) * grad
    v *= beta2
    v += (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, named: Sequence[tuple[str, Tensor]], lr: float, frozen: set[str] = frozenset(),
                 clip_norm: float = 0.0):
        self.params = [(n, p) for n, p in named if n not in frozen]
        self.lr = lr
        self.clip_norm = clip_norm
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}
        self.t = 0

    def step(self) -> float:
        """Apply one update from the stored gradients; returns the pre-clip global norm."""
        for n, p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {n}")
        norm = float(np.sqrt(sum(float((p.grad ** 2).sum()) for _, p in self.params)))
        scale = self.clip_norm / norm if 0 < self.clip_norm < norm else 1.0
        self.t += 1
        for n, p in self.params:
            adam_step(p.data, p.grad * scale, self.m[n], self.v[n], self.t, self.lr)
        return norm


# ---------------------------------------------------------------- training

class PairSampler:
    """Deterministic random frame pairs with a shared flip per pair; targets are cached."""

    def __init__(self, scenes: Sequence[Scene], cfg: ModelConfig, rng: np.random.Generator):
        self.pairs = [(s, t) for s, sc in enumerate(scenes) for t in range(1, len(sc.frames))]
        if not self.pairs:
            raise ValueError("training needs at least one scene with two frames")
        self.scenes = scenes
        self.anns = [sc.annotations for sc in scenes]
        self.cfg = cfg
        self.rng = rng
        self.cache: dict[tuple[int, int, bool], tuple[np.ndarray, FrameTargets]] = {}

    def _frame(self, s: int, t: int, flip: bool):
        key = (s, t, flip)
        if key not in self.cache:
            frame = np.asarray(self.scenes[s].frames[t], dtype=np.float64)
            h, w = frame.shape
            aug = Augmentation(flip, 0, 0, w, h)
            img, ann = apply_augmentation(frame, self.anns[s][t], aug)
            self.cache[key] = (img, frame_targets(ann, img.shape, self.cfg))
        return self.cache[key]

    def batch(self, k: int) -> tuple[np.ndarray, list[FrameTargets]]:
        picks = self.rng.integers(0, len(self.pairs), size=k)
        flips = self.rng.uniform(size=k) < self.cfg.flip_prob
        first, second = [], []
        for p, flip in zip(picks, flips):
            s, t = self.pairs[int(p)]
            first.append(self._frame(s, t - 1, bool(flip)))
            second.append(self._frame(s, t, bool(flip)))
        both = first + second
        return np.stack([b[0] for b in both]), [b[1] for b in both]


@dataclass
class TrainLog:
    rows: list[tuple[int, int, float, float, float, float]] = field(default_factory=list)

    HEADER = "stage,step,total,density,localization,association"

    def add(self, stage: int, step: int, parts: LossParts) -> None:
        f = lambda t: float(t.data) if t is not None else 0.0
        self.rows.append((stage, step, f(parts.total()), f(parts.density), f(parts.localization),
                          f(parts.association)))

    def lines(self) -> list[str]:
        return [self.HEADER] + [f"{s},{i},{a!r},{b!r},{c!r},{d!r}" for s, i, a, b, c, d in self.rows]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def train(model: STNNet, scenes: Sequence[Scene], stage: int, steps: int, log_to: TrainLog | None = None,
          on_step: Callable[[int, float], None] | None = None) -> TrainLog:
    """Run ``steps`` updates of one training stage.

    Stage 1 trains density and localization; stage 2 freezes the density
    heads and adds the association term.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if not scenes:
        raise ValueError("training needs a non-empty dataset")
    cfg = model.cfg
    log_to = log_to if log_to is not None else TrainLog()
    model.frozen = model.density_names() if stage == 2 else set()
    model.stage = stage
    rng = np.random.default_rng([cfg.seed, stage])
    sampler = PairSampler(scenes, cfg, rng)
    opt = Adam(list(model.named_parameters()), cfg.lr, model.frozen, cfg.clip_norm)
    params = model.parameters()
    for step in range(steps):
        frames, targets = sampler.batch(cfg.batch_size)
        parts = multi_task_loss(model, frames, targets, with_association=stage == 2)
        loss = parts.total()
        for p in params:
            p.zero_grad()
        loss.backward()
        opt.step()
        log_to.add(stage, step, parts)
        if on_step is not None:
            on_step(step, float(loss.data))
    return log_to


# ---------------------------------------------------------------- inference

@dataclass
class Inference:
    counts: np.ndarray                 # [F]
    detections: list[np.ndarray]       # per frame [n, 3] (x, y, conf)
    projections: list[np.ndarray]      # per frame t < F-1: [n_t, 2] predicted positions in t+1
    offsets: list[np.ndarray]          # per frame [n, 4] forward and backward offsets


def density_peaks(grid: np.ndarray, threshold: float, radius: float, top_m: int) -> np.ndarray:
    """Local 3x3 maxima above ``threshold * max``; confidence is the peak over the frame max."""
    top = grid.max()
    if top <= 0:
        return np.zeros((0, 3))
    pad = np.pad(grid, 1, constant_values=-np.inf)
    h, w = grid.shape
    neigh = np.max([pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
                    for dy in (-1, 0, 1) for dx in (-1, 0, 1) if dy or dx], axis=0)
    ys, xs = np.nonzero((grid >= neigh) & (grid >= threshold * top))
    conf = grid[ys, xs] / top
    pts = np.column_stack([xs, ys]).astype(np.float64)
    keep = nms(pts, conf, radius, top_m)
    return np.column_stack([pts[keep], conf[keep]]) if len(keep) else np.zeros((0, 3))


def infer(model: STNNet, frames: np.ndarray) -> Inference:
    cfg = model.cfg
    frames = np.asarray(frames, dtype=np.float64)
    n = len(frames)
    with T.no_grad():
        g = model.features(frames)
        dens = model.density_maps(g)
        counts = dens[0].data.sum(axis=(1, 2)) / cfg.density_scale
        if cfg.use_loc:
            scores, regs = model.loc(g)
            dets = [decode_and_nms(scores[0].data[i], regs[0].data[i], cfg.nms_radius, cfg.top_m,
                                   cfg.score_floor) for i in range(n)]
        else:
            dets = [density_peaks(dens[0].data[i], cfg.peak_threshold, cfg.nms_radius, cfg.top_m)
                    for i in range(n)]
        offs = [np.zeros((len(d), 4)) for d in dets]
        if cfg.use_loc and cfg.use_ass and n > 1:
            src = np.concatenate([np.arange(n - 1), np.arange(1, n)])
            dst = np.concatenate([np.arange(1, n), np.arange(n - 1)])
            motion = model.motion_features(g, src, dst)
            for i in range(n):
                if len(dets[i]) == 0:
                    continue
                if i < n - 1:
                    fwd, _ = model.offsets(motion, i, dets[i][:, :2])
                    offs[i][:, :2] = fwd.data
                if i > 0:
                    _, bwd = model.offsets(motion, n - 1 + i - 1, dets[i][:, :2])
                    offs[i][:, 2:] = bwd.data
    proj = [dets[i][:, :2] - offs[i][:, :2] for i in range(n - 1)]
    return Inference(counts, dets, proj, offs)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"STNW"
ARCH_KEYS = ("widths", "head_hidden", "corr_channels", "assoc_hidden", "max_disp")


def _arch(cfg: ModelConfig) -> np.ndarray:
    return np.array(list(cfg.widths) + [cfg.head_hidden, cfg.corr_channels, cfg.assoc_hidden, cfg.max_disp],
                    dtype=np.float64)


def write_tensors(path, named: Sequence[tuple[str, np.ndarray]]) -> None:
    out = [MAGIC, struct.pack("<I", len(named))]
    for name, arr in named:
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    Path(path).write_bytes(b"".join(out))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = 4
    try:
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + ln].decode()
            pos += ln
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            if pos + 8 * size > len(buf):
                raise struct.error("truncated data")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except struct.error as e:
        raise ValueError(f"{path}: corrupt checkpoint ({e})") from None
    return out


def save_checkpoint(path, model: STNNet) -> None:
    named = [(n, p.data) for n, p in model.named_parameters()]
    named += [("meta.stage", np.array([float(model.stage)])), ("meta.arch", _arch(model.cfg))]
    write_tensors(path, named)


def load_checkpoint(path, cfg: ModelConfig) -> STNNet:
    tensors = read_tensors(path)
    arch = tensors.pop("meta.arch", None)
    stage = tensors.pop("meta.stage", np.array([0.0]))
    if arch is None or not np.array_equal(arch, _arch(cfg)):
        raise ValueError(f"{path}: architecture {arch} does not match config {_arch(cfg)} ({', '.join(ARCH_KEYS)})")
    model = STNNet(cfg)
    for name, p in model.named_parameters():
        if name not in tensors:
            raise ValueError(f"{path}: missing tensor {name}")
        if tensors[name].shape != p.data.shape:
            raise ValueError(f"{path}: tensor {name} has shape {tensors[name].shape}, expected {p.data.shape}")
        p.data[...] = tensors[name]
    model.stage = int(stage[0])
    if model.stage == 2:
        model.frozen = model.density_names()
    return model
