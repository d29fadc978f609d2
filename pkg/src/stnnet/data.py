"""Annotation model, file formats and the synthetic crowd-scene generator.

Coordinates follow the pixel-centre convention: pixel ``(row i, col j)``
has its centre at ``(x=j, y=i)``, so a frame of width ``W`` spans
``x`` in ``[-0.5, W - 0.5]``.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MIN_PEOPLE = 25
MAX_PEOPLE = 455


class AnnotationFormatError(ValueError):
    """Malformed annotation/prediction file; message carries the line number."""


@dataclass
class Trajectory:
    id: int
    points: list[tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        frames = [p[0] for p in self.points]
        for a, b in zip(frames, frames[1:]):
            if b != a + 1:
                raise ValueError(f"trajectory {self.id}: frames must be contiguous, got {a} -> {b}")

    @property
    def start(self) -> int:
        return self.points[0][0]

    def __len__(self) -> int:
        return len(self.points)

    def at(self, frame: int) -> tuple[float, float] | None:
        k = frame - self.start if self.points else -1
        if 0 <= k < len(self.points):
            return self.points[k][1], self.points[k][2]
        return None


@dataclass
class FrameAnnotations:
    frame_index: int
    points: list[tuple[int, float, float]] = field(default_factory=list)

    def __post_init__(self):
        ids = [p[0] for p in self.points]
        if len(set(ids)) != len(ids):
            raise ValueError(f"frame {self.frame_index}: duplicate ids")

    def xy(self) -> np.ndarray:
        return np.array([[p[1], p[2]] for p in self.points], dtype=np.float64).reshape(-1, 2)

    def ids(self) -> np.ndarray:
        return np.array([p[0] for p in self.points], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class SceneConfig:
    width: int = 960
    height: int = 540
    num_frames: int = 16
    num_people: int = 144
    num_groups: int = 4
    drift_speed: float = 1.5
    jitter_sigma: float = 0.3
    blob_sigma: float = 3.0
    blob_amplitude: float = 0.9
    clutter: float = 0.1
    margin: float = 2.0
    min_separation: float = 0.0
    seed: int = 0
    min_people: int = MIN_PEOPLE
    max_people: int = MAX_PEOPLE

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"frame must have positive area, got {self.width}x{self.height}")
        if not 1 <= self.min_people <= self.num_people <= self.max_people:
            raise ValueError(f"num_people {self.num_people} outside "
                             f"[{self.min_people}, {self.max_people}]")
        if self.num_frames < 2:
            raise ValueError("num_frames must be >= 2")
        if self.num_groups < 1:
            raise ValueError("num_groups must be >= 1")
        if 2 * self.margin >= min(self.width, self.height) - 1:
            raise ValueError("margin leaves no room inside the frame")


def _reflect(v: np.ndarray, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """Fold ``v`` into [lo, hi]; returns folded values and a flip mask (odd bounces)."""
    span = hi - lo
    u = np.mod(v - lo, 2 * span)
    flipped = u > span
    return lo + np.where(flipped, 2 * span - u, u), flipped


def render_frame(points: np.ndarray, height: int, width: int, sigma: float,
                 amplitude: float, clutter: float, rng: np.random.Generator) -> np.ndarray:
    img = clutter * rng.uniform(0.0, 1.0, size=(height, width))
    r = int(np.ceil(4 * sigma))
    for x, y in points:
        cx, cy = int(round(x)), int(round(y))
        x0, x1 = max(cx - r, 0), min(cx + r + 1, width)
        y0, y1 = max(cy - r, 0), min(cy + r + 1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        gx = np.arange(x0, x1) - x
        gy = np.arange(y0, y1) - y
        img[y0:y1, x0:x1] += amplitude * np.exp(-(gy[:, None] ** 2 + gx[None, :] ** 2) / (2 * sigma ** 2))
    return np.clip(img, 0.0, 1.0)


def _initial_positions(cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    lo_x, hi_x = cfg.margin, cfg.width - 1 - cfg.margin
    lo_y, hi_y = cfg.margin, cfg.height - 1 - cfg.margin
    pts: list[tuple[float, float]] = []
    for _ in range(cfg.num_people):
        for _attempt in range(200):
            p = (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= cfg.min_separation ** 2 for q in pts):
                break
        pts.append(p)
    return np.array(pts, dtype=np.float64).reshape(-1, 2)


def generate_scene(cfg: SceneConfig) -> tuple[list[np.ndarray], list[Trajectory]]:
    """Render a synthetic crowd clip and its ground-truth head trajectories.

    People are split into groups that share one drift velocity; each person
    adds independent Gaussian jitter per frame and bounces off the frame
    margins. Each frame shows one Gaussian blob per head over uniform noise.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.num_people
    pos = _initial_positions(cfg, rng)
    group = rng.integers(0, cfg.num_groups, size=n)
    angle = rng.uniform(0.0, 2 * np.pi, size=cfg.num_groups)
    vel = cfg.drift_speed * np.stack([np.cos(angle), np.sin(angle)], axis=1)[group]
    lo = np.array([cfg.margin, cfg.margin])
    hi = np.array([cfg.width - 1 - cfg.margin, cfg.height - 1 - cfg.margin])

    tracks = np.empty((cfg.num_frames, n, 2))
    tracks[0] = pos
    for t in range(1, cfg.num_frames):
        step = vel + rng.normal(0.0, cfg.jitter_sigma, size=(n, 2)) if cfg.jitter_sigma > 0 else vel
        nxt = tracks[t - 1] + step
        for ax in range(2):
            folded, flipped = _reflect(nxt[:, ax], lo[ax], hi[ax])
            nxt[:, ax] = folded
            vel[flipped, ax] *= -1
        tracks[t] = nxt

    frames = [render_frame(tracks[t], cfg.height, cfg.width, cfg.blob_sigma,
                           cfg.blob_amplitude, cfg.clutter, rng) for t in range(cfg.num_frames)]
    trajs = [Trajectory(i, [(t, float(tracks[t, i, 0]), float(tracks[t, i, 1]))
                            for t in range(cfg.num_frames)]) for i in range(n)]
    return frames, trajs


def frames_from_trajectories(trajs: Sequence[Trajectory], num_frames: int | None = None) -> list[FrameAnnotations]:
    if num_frames is None:
        num_frames = max((p[0] for tr in trajs for p in tr.points), default=-1) + 1
    per = [FrameAnnotations(t) for t in range(num_frames)]
    for tr in sorted(trajs, key=lambda tr: tr.id):
        for f, x, y in tr.points:
            if f < num_frames:
                per[f].points.append((tr.id, x, y))
    return per


# ---------------------------------------------------------------- annotation CSV

HEADER = "frame,id,x,y"


def save_annotations(trajs: Iterable[Trajectory], path) -> None:
    lines = [HEADER]
    for tr in sorted(trajs, key=lambda tr: tr.id):
        for f, x, y in tr.points:
            lines.append(f"{f},{tr.id},{x:.3f},{y:.3f}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv_rows(path, header: str, types: Sequence[type]) -> list[tuple]:
    """Parse a headed CSV into typed tuples; errors name the 1-based line."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0].strip() != header:
        raise AnnotationFormatError(f"{path}:1: expected header '{header}'")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = next(csv.reader(io.StringIO(line)))
        if len(parts) != len(types):
            raise AnnotationFormatError(f"{path}:{lineno}: expected {len(types)} fields, got {len(parts)}")
        try:
            row = tuple(tp(p) for tp, p in zip(types, parts))
        except ValueError as exc:
            raise AnnotationFormatError(f"{path}:{lineno}: {exc}") from None
        if any(isinstance(v, float) and not np.isfinite(v) for v in row):
            raise AnnotationFormatError(f"{path}:{lineno}: non-finite value")
        rows.append(row)
    return rows


def load_annotations(path) -> list[Trajectory]:
    rows = read_csv_rows(path, HEADER, (int, int, float, float))
    by_id: dict[int, list[tuple[int, float, float]]] = {}
    for f, i, x, y in rows:
        by_id.setdefault(i, []).append((f, x, y))
    out = []
    for i in sorted(by_id):
        pts = sorted(by_id[i])
        try:
            out.append(Trajectory(i, pts))
        except ValueError as exc:
            raise AnnotationFormatError(f"{path}: {exc}") from None
    return out


# ---------------------------------------------------------------- PGM

def write_pgm(path, img: np.ndarray) -> None:
    h, w = img.shape
    data = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only binary P5 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    return data.reshape(h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------- patches / augmentation

def _in_bounds(xy: np.ndarray, w: int, h: int) -> np.ndarray:
    return (xy[:, 0] >= -0.5) & (xy[:, 0] <= w - 0.5) & (xy[:, 1] >= -0.5) & (xy[:, 1] <= h - 0.5)


def split_frame_patches(frame: np.ndarray, annotations: FrameAnnotations | None = None):
    """Cut a frame into its 2x2 quadrants (row-major order).

    Returns four patches, or four ``(patch, annotations)`` pairs when
    annotations are given. A point on the shared edge goes to the
    lower-index patch.
    """
    h, w = frame.shape
    if h % 2 or w % 2:
        raise ValueError(f"split_frame_patches: extents must be even, got {frame.shape}")
    ph, pw = h // 2, w // 2
    patches = [frame[r * ph:(r + 1) * ph, c * pw:(c + 1) * pw].copy() for r in range(2) for c in range(2)]
    if annotations is None:
        return patches
    split = [FrameAnnotations(annotations.frame_index) for _ in range(4)]
    for pid, x, y in annotations.points:
        c = 0 if x <= pw - 0.5 else 1
        r = 0 if y <= ph - 0.5 else 1
        split[2 * r + c].points.append((pid, x - c * pw, y - r * ph))
    return list(zip(patches, split))


@dataclass(frozen=True)
class Augmentation:
    flip: bool
    x0: int
    y0: int
    width: int
    height: int


def sample_augmentation(rng: np.random.Generator, shape: tuple[int, int],
                        crop: tuple[int, int] | None = None, flip_prob: float = 0.5) -> Augmentation:
    h, w = shape
    ch, cw = crop if crop is not None else (h, w)
    if ch > h or cw > w:
        raise ValueError(f"crop {crop} larger than frame {shape}")
    flip = bool(rng.uniform() < flip_prob)
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return Augmentation(flip, x0, y0, cw, ch)


def apply_augmentation(frame: np.ndarray, annotations: FrameAnnotations, aug: Augmentation):
    h, w = frame.shape
    if aug.height > h or aug.width > w:
        raise ValueError(f"crop {(aug.height, aug.width)} larger than frame {frame.shape}")
    img = frame[:, ::-1] if aug.flip else frame
    img = img[aug.y0:aug.y0 + aug.height, aug.x0:aug.x0 + aug.width].copy()
    pts = []
    for pid, x, y in annotations.points:
        if aug.flip:
            x = w - 1 - x
        x, y = x - aug.x0, y - aug.y0
        if -0.5 <= x <= aug.width - 0.5 and -0.5 <= y <= aug.height - 0.5:
            pts.append((pid, x, y))
    return img, FrameAnnotations(annotations.frame_index, pts)


def augment(frame: np.ndarray, annotations: FrameAnnotations, rng: np.random.Generator,
            crop: tuple[int, int] | None = None, flip_prob: float = 0.5):
    """Random horizontal flip (p = ``flip_prob``) then a random ``crop`` (h, w)."""
    aug = sample_augmentation(rng, frame.shape, crop, flip_prob)
    return apply_augmentation(frame, annotations, aug)


# ---------------------------------------------------------------- scene directories

@dataclass
class Scene:
    frames: list[np.ndarray]
    trajectories: list[Trajectory]
    name: str = ""

    @property
    def annotations(self) -> list[FrameAnnotations]:
        return frames_from_trajectories(self.trajectories, len(self.frames))


def save_scene(scene: Scene, directory) -> None:
    d = Path(directory)
    (d / "frames").mkdir(parents=True, exist_ok=True)
    for t, img in enumerate(scene.frames):
        write_pgm(d / "frames" / f"{t:05d}.pgm", img)
    save_annotations(scene.trajectories, d / "annotations.csv")


def load_scene(directory) -> Scene:
    d = Path(directory)
    paths = sorted((d / "frames").glob("*.pgm"))
    if not paths:
        raise FileNotFoundError(f"{d}: no frames/*.pgm")
    frames = [read_pgm(p) for p in paths]
    ann = d / "annotations.csv"
    trajs = load_annotations(ann) if ann.exists() else []
    return Scene(frames, trajs, d.name)


def list_scenes(root) -> list[Path]:
    root = Path(root)
    if (root / "frames").is_dir():
        return [root]
    found = sorted(p for p in root.iterdir() if (p / "frames").is_dir()) if root.is_dir() else []
    if not found:
        raise FileNotFoundError(f"{root}: no scene directories found")
    return found
