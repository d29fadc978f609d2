"""Desk-scale experiment: synthetic scenes, two-stage training, ablations, evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .data import Scene, SceneConfig, generate_scene
from .metrics import EvalReport, VideoResult, evaluate
from .network import ModelConfig, STNNet, TrainLog, infer, train
from .tracking import TrackerConfig, link_from_variant

log = logging.getLogger(__name__)

# stage-2 variants; "wo_rel" drops the relation term from the forward-only loss
VARIANTS: dict[str, dict] = {
    "full": {},
    "wo_cyc": {"use_cyc": False},
    "wo_rel": {"use_cyc": False, "use_rel": False},
    "wo_ass": {"use_ass": False},
}


def desk_model_config(**overrides) -> ModelConfig:
    base = ModelConfig(widths=(8, 16, 32), head_hidden=8, batch_size=2, lr=1e-3, match_radius=3.0)
    return replace(base, **overrides)


@dataclass
class DeskConfig:
    width: int = 64
    height: int = 64
    frames: int = 16
    people: int = 12
    train_scenes: int = 8
    test_scenes: int = 2
    scene_seed: int = 0
    stage1_steps: int = 800
    stage2_steps: int = 300
    model: ModelConfig = field(default_factory=desk_model_config)
    tracker: TrackerConfig = field(default_factory=TrackerConfig)

    def scene_config(self, seed: int) -> SceneConfig:
        return SceneConfig(width=self.width, height=self.height, num_frames=self.frames,
                           num_people=self.people, min_people=1, seed=seed)


def make_scenes(cfg: DeskConfig) -> tuple[list[Scene], list[Scene]]:
    """Train and test scenes from disjoint seed ranges."""
    def one(seed: int) -> Scene:
        frames, trajs = generate_scene(cfg.scene_config(seed))
        return Scene(frames, trajs, f"scene{seed:05d}")

    base = 1000 * cfg.scene_seed
    return ([one(base + i) for i in range(cfg.train_scenes)],
            [one(base + 500 + i) for i in range(cfg.test_scenes)])


def copy_parameters(src: STNNet, dst: STNNet) -> None:
    theirs = dict(src.named_parameters())
    for name, p in dst.named_parameters():
        p.data[...] = theirs[name].data


def predict_video(model: STNNet, scene: Scene, tracker: TrackerConfig) -> VideoResult:
    res = infer(model, np.stack(scene.frames))
    variant = "with_offsets" if model.cfg.use_ass and model.cfg.use_loc else "without_offsets"
    tracks = link_from_variant(res.detections, res.projections, variant, **tracker.kwargs())
    anns = scene.annotations
    return VideoResult(np.array([len(a) for a in anns], dtype=np.float64), res.counts, res.detections,
                       [a.xy() for a in anns], tracks, list(scene.trajectories))


def evaluate_model(model: STNNet, scenes: Sequence[Scene], tracker: TrackerConfig) -> EvalReport:
    return evaluate([predict_video(model, s, tracker) for s in scenes])


@dataclass
class DeskResult:
    reports: dict[str, EvalReport]
    logs: dict[str, TrainLog]
    seconds: float


def run_desk(cfg: DeskConfig, variants: Sequence[str] = tuple(VARIANTS),
             progress: Callable[[str], None] | None = None) -> DeskResult:
    """Stage 1 once, then each variant's stage 2 from the same weights, then held-out evaluation."""
    say = progress or log.info
    t0 = time.perf_counter()
    train_set, test_set = make_scenes(cfg)
    base = STNNet(cfg.model)
    stage1 = train(base, train_set, 1, cfg.stage1_steps)
    say(f"stage 1 done: {cfg.stage1_steps} steps, last loss {stage1.rows[-1][2] if stage1.rows else 'n/a'}")
    reports, logs = {}, {}
    for name in variants:
        model = STNNet(replace(cfg.model, **VARIANTS[name]))
        copy_parameters(base, model)
        vlog = TrainLog(list(stage1.rows))
        train(model, train_set, 2, cfg.stage2_steps, vlog)
        reports[name] = evaluate_model(model, test_set, cfg.tracker)
        logs[name] = vlog
        r = reports[name]
        say(f"{name}: MAE {r.mae:.3f} L-mAP {r.l_map:.4f} T-mAP {r.t_map:.4f}")
    return DeskResult(reports, logs, time.perf_counter() - t0)
