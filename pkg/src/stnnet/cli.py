"""Command line entry point: synth, train, infer, track, eval, render.

Every command accepts ``--config FILE`` with ``key=value`` lines; explicit
flags override file values, unknown keys are rejected, and the resolved
configuration is logged and written next to the outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .association import load_offsets, save_offsets
from .data import (
    Scene, SceneConfig, generate_scene, list_scenes, load_scene, read_csv_rows, save_scene, write_pgm,
)
from .density import load_density_map, save_density_map
from .experiment import VARIANTS
from .localization import load_detections, save_detections
from .metrics import VideoResult, evaluate
from .network import ModelConfig, STNNet, TrainLog, infer, load_checkpoint, save_checkpoint, train
from .tensor import no_grad
from .tracking import TrackerConfig, link_from_variant, load_tracks, save_tracks

log = logging.getLogger("stnnet")


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    scenes: int = 1
    stage1_steps: int = 200
    stage2_steps: int = 100
    variant: str = "full"

    SECTIONS = ("scene", "model", "tracker")

    def keys(self) -> dict[str, tuple[object, str]]:
        """Map of ``section.name`` / ``name`` keys to (owner, attribute)."""
        out = {}
        for sec in self.SECTIONS:
            owner = getattr(self, sec)
            for f in fields(owner):
                out[f"{sec}.{f.name}"] = (owner, f.name)
        for f in fields(self):
            if f.name not in self.SECTIONS:
                out[f.name] = (self, f.name)
        return out

    def set(self, key: str, raw: str) -> None:
        keys = self.keys()
        if key not in keys:
            raise KeyError(f"unknown config key {key!r}")
        owner, name = keys[key]
        setattr(owner, name, _parse(raw, getattr(owner, name), key))

    def lines(self) -> list[str]:
        return [f"{k}={_format(getattr(o, n))}" for k, (o, n) in self.keys().items()]

    def variant_model(self) -> ModelConfig:
        if self.variant == "wo_loc":
            return replace(self.model, use_loc=False, use_ass=False)
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        return replace(self.model, **VARIANTS[self.variant])


def _parse(raw: str, current, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(current, tuple):
            kind = type(current[0])
            parts = tuple(kind(p) for p in raw.split(","))
            if len(parts) != len(current):
                raise ValueError(f"expected {len(current)} values")
            return parts
        return type(current)(raw)
    except ValueError as e:
        raise ValueError(f"bad value for {key}: {raw!r} ({e})") from None


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def read_config(path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def resolve_config(args: argparse.Namespace, overrides: dict[str, object]) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        for k, v in read_config(args.config):
            try:
                cfg.set(k, v)
            except KeyError as e:
                raise ValueError(f"{args.config}: {e.args[0]}") from None
    for key, value in overrides.items():
        if value is not None:
            cfg.set(key, _format(value))
    for line in cfg.lines():
        log.info("config %s", line)
    return cfg


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text("\n".join(cfg.lines()) + "\n")


# ---------------------------------------------------------------- counts CSV

COUNTS_HEADER = "frame,count"


def save_counts(path, counts: Sequence[float]) -> None:
    Path(path).write_text("\n".join([COUNTS_HEADER] + [f"{i},{float(c)!r}" for i, c in enumerate(counts)]) + "\n")


def load_counts(path) -> np.ndarray:
    rows = read_csv_rows(path, COUNTS_HEADER, (int, float))
    if [r[0] for r in rows] != list(range(len(rows))):
        raise ValueError(f"{path}: frames must run 0..n-1 in order")
    return np.array([r[1] for r in rows], dtype=np.float64)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> None:
    cfg = resolve_config(args, {"scene.num_people": args.people, "scene.seed": args.seed,
                                "scenes": args.scenes})
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out}: {e.strerror}") from None
    for i in range(cfg.scenes):
        sc = replace(cfg.scene, seed=cfg.scene.seed + i)
        frames, trajs = generate_scene(sc)
        target = out if cfg.scenes == 1 else out / f"scene{i:03d}"
        save_scene(Scene(frames, trajs), target)
        log.info("wrote %s: %d frames, %d people", target, len(frames), len(trajs))
    write_config(cfg, out / "config.txt")


def _load_scenes(path) -> list[Scene]:
    if not Path(path).exists():
        raise FileNotFoundError(f"{path}: no such data directory")
    return [load_scene(p) for p in list_scenes(path)]


def cmd_train(args) -> None:
    cfg = resolve_config(args, {"stage1_steps": args.steps if args.stage == "1" else None,
                                "stage2_steps": args.steps if args.stage == "2" else None,
                                "variant": args.variant, "model.seed": args.seed})
    scenes = _load_scenes(args.data)
    ckpt = Path(args.ckpt)
    mcfg = cfg.variant_model()
    if args.stage == "2":
        if not ckpt.exists():
            raise FileNotFoundError(f"{ckpt}: stage 2 needs a stage-1 checkpoint")
        model = load_checkpoint(ckpt, mcfg)
        if model.stage < 1:
            raise ValueError(f"{ckpt}: checkpoint has not completed stage 1")
    else:
        model = STNNet(mcfg)
    loss_log = TrainLog()
    t0 = time.perf_counter()
    if args.stage in ("1", "both"):
        train(model, scenes, 1, cfg.stage1_steps, loss_log)
    if args.stage in ("2", "both"):
        train(model, scenes, 2, cfg.stage2_steps, loss_log)
    save_checkpoint(ckpt, model)
    log_path = Path(args.log) if args.log else ckpt.with_suffix(".loss.csv")
    loss_log.save(log_path)
    write_config(cfg, ckpt.with_suffix(".config.txt"))
    log.info("trained %d steps in %.1fs -> %s", len(loss_log.rows), time.perf_counter() - t0, ckpt)


def cmd_infer(args) -> None:
    cfg = resolve_config(args, {"variant": args.variant})
    model = load_checkpoint(args.ckpt, cfg.variant_model())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = load_scene(args.data)
    res = infer(model, np.stack(scene.frames))
    save_counts(out / "counts.csv", res.counts)
    save_detections(out / "detections.csv", res.detections)
    save_offsets(out / "offsets.csv", [np.hstack([d[:, :2], o]) for d, o in zip(res.detections, res.offsets)])
    (out / "density").mkdir(exist_ok=True)
    for t, grid in enumerate(infer_density(model, scene)):
        save_density_map(out / "density" / f"{t:05d}.dmap", grid)
    write_config(cfg, out / "config.txt")
    log.info("inferred %d frames -> %s", len(scene.frames), out)


def infer_density(model: STNNet, scene: Scene) -> list[np.ndarray]:
    with no_grad():
        g = model.features(np.stack(scene.frames))
        d = model.density_maps(g)[0].data / model.cfg.density_scale
    return list(d)


def cmd_track(args) -> None:
    cfg = resolve_config(args, {"variant": args.variant})
    pred = Path(args.pred)
    dets = load_detections(pred / "detections.csv", args.frames)
    n = len(dets)
    projections = None
    if cfg.variant_model().use_ass:
        offs = load_offsets(pred / "offsets.csv", n)
        projections = [o[:, :2] - o[:, 2:4] for o in offs[:-1]]
    variant = "with_offsets" if projections is not None else "without_offsets"
    tracks = link_from_variant(dets, projections, variant, **cfg.tracker.kwargs())
    save_tracks(args.out, tracks)
    log.info("linked %d tracks -> %s", len(tracks), args.out)


def cmd_eval(args) -> None:
    resolve_config(args, {})
    pred = Path(args.pred)
    scenes = list_scenes(args.data)
    preds = [pred] if len(scenes) == 1 else [pred / s.name for s in scenes]
    videos = []
    for sdir, pdir in zip(scenes, preds):
        scene = load_scene(sdir)
        anns = scene.annotations
        n = len(anns)
        counts = load_counts(pdir / "counts.csv")
        if len(counts) != n:
            raise ValueError(f"{pdir / 'counts.csv'}: {len(counts)} frames, ground truth has {n}")
        dets = load_detections(pdir / "detections.csv", n)
        if len(dets) != n:
            raise ValueError(f"{pdir / 'detections.csv'}: frames beyond the {n} ground-truth frames")
        tracks = load_tracks(pdir / "tracks.csv") if (pdir / "tracks.csv").exists() else []
        videos.append(VideoResult(np.array([len(a) for a in anns], float), counts, dets,
                                  [a.xy() for a in anns], tracks, list(scene.trajectories)))
    report = evaluate(videos)
    print(report.table())
    if args.out:
        Path(args.out).write_text(report.to_text())


# ---------------------------------------------------------------- rendering

def identity_color(track_id: int) -> tuple[int, int, int]:
    d = hashlib.md5(str(track_id).encode()).digest()
    return 64 + d[0] % 192, 64 + d[1] % 192, 64 + d[2] % 192


def density_image(grid: np.ndarray) -> np.ndarray:
    top = grid.max()
    if top <= 0:
        return np.zeros(grid.shape, dtype=np.uint8)
    return np.round(np.clip(grid / top, 0, 1) * 255).astype(np.uint8)


def _line(img: np.ndarray, a, b, color) -> None:
    h, w, _ = img.shape
    steps = int(max(abs(b[0] - a[0]), abs(b[1] - a[1]))) + 1
    for s in np.linspace(0.0, 1.0, steps + 1):
        x = int(round(a[0] + s * (b[0] - a[0])))
        y = int(round(a[1] + s * (b[1] - a[1])))
        if 0 <= x < w and 0 <= y < h:
            img[y, x] = color


def tracks_image(tracks, shape: tuple[int, int], background: np.ndarray | None = None) -> np.ndarray:
    h, w = shape
    base = np.zeros((h, w)) if background is None else np.clip(background, 0, 1)
    img = np.repeat(np.round(base * 80).astype(np.uint8)[..., None], 3, axis=2)
    for tr in tracks:
        color = identity_color(tr.id)
        pts = [(x, y) for _, x, y, _ in tr.points]
        for a, b in zip(pts, pts[1:]):
            _line(img, a, b, color)
        if len(pts) == 1:
            _line(img, pts[0], pts[0], color)
    return img


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes())


def cmd_render(args) -> None:
    if bool(args.density) == bool(args.tracks):
        raise ValueError("render needs exactly one of --density or --tracks")
    if args.density:
        write_pgm(args.out, density_image(load_density_map(args.density)).astype(np.float64) / 255.0)
    else:
        tracks = load_tracks(args.tracks)
        if args.data:
            scene = load_scene(args.data)
            background = scene.frames[0]
            shape = background.shape
        else:
            background = None
            shape = (args.height, args.width)
        write_ppm(args.out, tracks_image(tracks, shape, background))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stnnet", description="Desk-scale crowd counting, localization and tracking.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic scenes")
    s.add_argument("--config")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--people", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--scenes", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="two-stage training")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--stage", choices=["1", "2", "both"], default="both")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--steps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--variant", choices=sorted(VARIANTS) + ["wo_loc"])
    s.add_argument("--log")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="counts, detections, offsets and density maps for one scene")
    s.add_argument("--config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--variant", choices=sorted(VARIANTS) + ["wo_loc"])
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("track", help="link inferred detections into tracks")
    s.add_argument("--config")
    s.add_argument("--pred", required=True, help="directory written by infer")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int)
    s.add_argument("--variant", choices=sorted(VARIANTS) + ["wo_loc"])
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("eval", help="score predictions against ground truth")
    s.add_argument("--config")
    s.add_argument("--pred", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("render", help="draw density maps (PGM) or tracks (PPM)")
    s.add_argument("--density")
    s.add_argument("--tracks")
    s.add_argument("--data", help="scene whose first frame is the track background")
    s.add_argument("--width", type=int, default=960)
    s.add_argument("--height", type=int, default=540)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_render)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as e:  # one machine-parseable line, nonzero exit
        print(f"stnnet: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
