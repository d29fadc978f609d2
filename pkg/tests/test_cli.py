import numpy as np
import pytest

from stnnet.cli import (
    COUNTS_HEADER, RunConfig, density_image, identity_color, load_counts, main, save_counts, tracks_image,
)
from stnnet.data import load_annotations, load_scene, read_pgm
from stnnet.density import save_density_map
from stnnet.localization import save_detections
from stnnet.metrics import EvalReport
from stnnet.tracking import Track, save_tracks

TINY = """\
# tiny model for smoke tests
scene.width=32
scene.height=32
scene.num_frames=4
scene.num_people=4
scene.min_people=1
model.widths=2,3,4
model.head_hidden=2
model.corr_channels=2
model.assoc_hidden=4
model.max_disp=1
model.batch_size=1
model.lr=0.001
model.match_radius=4
stage1_steps=3
stage2_steps=2
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY)
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


class TestSynth:
    def test_deterministic(self, tmp_path, tiny_cfg):
        assert run("synth", "--config", tiny_cfg, "--out-dir", tmp_path / "a") == 0
        assert run("synth", "--config", tiny_cfg, "--out-dir", tmp_path / "b") == 0
        for name in ["annotations.csv", "frames/00000.pgm", "frames/00003.pgm", "config.txt"]:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_default_count(self, tmp_path):
        assert run("synth", "--out-dir", tmp_path / "d") == 0
        scene = load_scene(tmp_path / "d")
        assert len(scene.trajectories) == 144
        assert scene.frames[0].shape == (540, 960)

    def test_min_count(self, tmp_path):
        assert run("synth", "--out-dir", tmp_path / "d", "--people", 25) == 0
        assert len(load_annotations(tmp_path / "d" / "annotations.csv")) == 25

    def test_below_min_fails(self, tmp_path, capsys):
        assert run("synth", "--out-dir", tmp_path / "d", "--people", 24) != 0
        assert capsys.readouterr().err.startswith("stnnet: error: ValueError:")

    def test_unknown_key(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("model.colour=blue\n")
        assert run("synth", "--config", cfg, "--out-dir", tmp_path / "d") != 0
        assert "unknown config key 'model.colour'" in capsys.readouterr().err

    def test_flags_override_file(self, tmp_path, tiny_cfg):
        assert run("synth", "--config", tiny_cfg, "--out-dir", tmp_path / "d", "--people", 6) == 0
        text = (tmp_path / "d" / "config.txt").read_text()
        assert "scene.num_people=6" in text.splitlines()

    def test_unwritable(self, tmp_path, capsys):
        (tmp_path / "file").write_text("x")
        assert run("synth", "--out-dir", tmp_path / "file" / "sub") != 0
        assert "stnnet: error:" in capsys.readouterr().err


class TestConfig:
    def test_round_trip(self):
        cfg = RunConfig()
        cfg.set("model.widths", "4,8,16")
        cfg.set("model.use_cyc", "false")
        assert cfg.model.widths == (4, 8, 16) and cfg.model.use_cyc is False
        again = RunConfig()
        for line in cfg.lines():
            k, v = line.split("=", 1)
            again.set(k, v)
        assert again.lines() == cfg.lines()

    def test_bad_value(self):
        with pytest.raises(ValueError, match="model.batch_size"):
            RunConfig().set("model.batch_size", "two")


class TestPipeline:
    def test_train_stage2_needs_checkpoint(self, tmp_path, tiny_cfg, capsys):
        run("synth", "--config", tiny_cfg, "--out-dir", tmp_path / "data")
        assert run("train", "--config", tiny_cfg, "--data", tmp_path / "data", "--stage", 2,
                   "--ckpt", tmp_path / "none.stnw") != 0
        assert "stage-1 checkpoint" in capsys.readouterr().err

    def test_missing_data(self, tmp_path, tiny_cfg, capsys):
        assert run("train", "--config", tiny_cfg, "--data", tmp_path / "nope", "--ckpt", tmp_path / "m") != 0
        assert "no such data directory" in capsys.readouterr().err

    def test_end_to_end(self, tmp_path, tiny_cfg, capsys):
        data, ckpt, pred = tmp_path / "data", tmp_path / "m.stnw", tmp_path / "pred"
        assert run("synth", "--config", tiny_cfg, "--out-dir", data) == 0
        assert run("train", "--config", tiny_cfg, "--data", data, "--stage", 1, "--ckpt", ckpt) == 0
        lines = (tmp_path / "m.loss.csv").read_text().splitlines()
        assert len(lines) == 1 + 3
        assert run("train", "--config", tiny_cfg, "--data", data, "--stage", 2, "--ckpt", ckpt,
                   "--log", tmp_path / "s2.csv") == 0
        assert len((tmp_path / "s2.csv").read_text().splitlines()) == 1 + 2
        assert run("infer", "--config", tiny_cfg, "--ckpt", ckpt, "--data", data, "--out", pred) == 0
        assert len(load_counts(pred / "counts.csv")) == 4
        assert run("track", "--pred", pred, "--out", pred / "tracks.csv", "--frames", 4) == 0
        assert run("eval", "--pred", pred, "--data", data, "--out", tmp_path / "report.txt") == 0
        report = EvalReport.from_text((tmp_path / "report.txt").read_text())
        assert 0 <= report.l_map <= 1 and "L-mAP" in capsys.readouterr().out
        assert run("render", "--density", pred / "density" / "00000.dmap", "--out", tmp_path / "d.pgm") == 0
        assert read_pgm(tmp_path / "d.pgm").shape == (32, 32)
        assert run("render", "--tracks", pred / "tracks.csv", "--data", data, "--out", tmp_path / "t.ppm") == 0
        assert (tmp_path / "t.ppm").read_bytes().startswith(b"P6\n32 32\n255\n")

    def test_ablation_variants_train(self, tmp_path, tiny_cfg):
        run("synth", "--config", tiny_cfg, "--out-dir", tmp_path / "data")
        for v in ["full", "wo_cyc", "wo_rel", "wo_ass", "wo_loc"]:
            assert run("train", "--config", tiny_cfg, "--data", tmp_path / "data", "--ckpt",
                       tmp_path / f"{v}.stnw", "--variant", v) == 0
            assert "variant=" + v in (tmp_path / f"{v}.config.txt").read_text()


def _echo_predictions(data, pred):
    scene = load_scene(data)
    anns = scene.annotations
    pred.mkdir()
    save_counts(pred / "counts.csv", [len(a) for a in anns])
    save_detections(pred / "detections.csv", [np.column_stack([a.xy(), np.ones(len(a))]) for a in anns])
    save_tracks(pred / "tracks.csv", [Track(t.id, [(f, x, y, 1.0) for f, x, y in t.points])
                                      for t in scene.trajectories])


class TestEval:
    def test_echoed_ground_truth(self, tmp_path, tiny_cfg):
        run("synth", "--config", tiny_cfg, "--out-dir", tmp_path / "data")
        _echo_predictions(tmp_path / "data", tmp_path / "pred")
        assert run("eval", "--pred", tmp_path / "pred", "--data", tmp_path / "data",
                   "--out", tmp_path / "r.txt") == 0
        r = EvalReport.from_text((tmp_path / "r.txt").read_text())
        assert (r.mae, r.mse, r.l_map, r.t_map) == (0.0, 0.0, 1.0, 1.0)

    def test_empty_predictions(self, tmp_path, tiny_cfg):
        run("synth", "--config", tiny_cfg, "--out-dir", tmp_path / "data")
        pred = tmp_path / "pred"
        pred.mkdir()
        save_counts(pred / "counts.csv", [0.0] * 4)
        (pred / "detections.csv").write_text("frame,x,y,conf\n")
        assert run("eval", "--pred", pred, "--data", tmp_path / "data", "--out", tmp_path / "r.txt") == 0
        assert EvalReport.from_text((tmp_path / "r.txt").read_text()).l_map == 0.0

    def test_format_error_has_line_number(self, tmp_path, tiny_cfg, capsys):
        run("synth", "--config", tiny_cfg, "--out-dir", tmp_path / "data")
        _echo_predictions(tmp_path / "data", tmp_path / "pred")
        (tmp_path / "pred" / "detections.csv").write_text("frame,x,y,conf\n0,1,2,0.5\n0,oops,2,0.5\n")
        assert run("eval", "--pred", tmp_path / "pred", "--data", tmp_path / "data") != 0
        assert "detections.csv:3:" in capsys.readouterr().err

    def test_counts_header(self, tmp_path):
        save_counts(tmp_path / "c.csv", [1.5, 2.0])
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == COUNTS_HEADER
        assert load_counts(tmp_path / "c.csv").tolist() == [1.5, 2.0]


class TestRender:
    def test_zero_density_black(self, tmp_path):
        assert np.all(density_image(np.zeros((4, 5))) == 0)
        save_density_map(tmp_path / "z.dmap", np.zeros((4, 4)))
        assert run("render", "--density", tmp_path / "z.dmap", "--out", tmp_path / "z.pgm") == 0
        assert np.all(read_pgm(tmp_path / "z.pgm") == 0)

    def test_peak_white(self):
        img = density_image(np.array([[0.0, 0.5], [1.0, 0.25]]))
        assert img.tolist() == [[0, 128], [255, 64]]

    def test_colors_deterministic(self):
        assert identity_color(7) == identity_color(7)
        assert identity_color(7) != identity_color(8)

    def test_pixel_probe(self, tmp_path):
        tracks = [Track(3, [(0, 10.0, 20.0, 0.9), (1, 14.4, 20.0, 0.9)])]
        img = tracks_image(tracks, (32, 32))
        c = identity_color(3)
        for x in (10, 12, 14):
            assert tuple(img[20, x]) == c
        assert tuple(img[21, 12]) == (0, 0, 0)

    def test_needs_one_source(self, tmp_path, capsys):
        assert run("render", "--out", tmp_path / "x.ppm") != 0
        assert "exactly one" in capsys.readouterr().err
