import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stnnet import tensor as T
from stnnet.layers import Layer
from stnnet.localization import (
    LocalizationHead, ProposalBatch, anchors, assign_labels, attention_fuse, decode_and_nms,
    load_detections, localization_loss, nms, save_detections, stack_targets,
)
from stnnet.tensor import ShapeError, Tensor

from .helpers import fd_check


class TestAssignLabels:
    def test_exact_hit(self):
        (lv,) = assign_labels([(5.0, 5.0)], [(12, 12)])
        assert lv.labels[5, 5] == 1.0
        assert lv.offsets[:, 5, 5].tolist() == [0.0, 0.0]

    def test_no_points(self):
        levels = assign_labels(np.zeros((0, 2)), [(8, 8), (4, 4)])
        assert all(lv.labels.sum() == 0 and np.all(lv.offsets == 0) for lv in levels)

    def test_off_centre(self):
        (lv,) = assign_labels([(5.0, 5.0)], [(16, 16)])
        # proposal at (x=12, y=10): distance sqrt(49 + 25) = 8.60 <= 10
        assert math.hypot(7, 5) <= 10
        assert lv.labels[10, 12] == 1.0
        assert lv.offsets[:, 10, 12].tolist() == [-7.0, -5.0]
        # (x=13, y=11): sqrt(64 + 36) = 10 -> still positive; (x=14, y=11) is not
        assert lv.labels[11, 13] == 1.0 and lv.labels[11, 14] == 0.0

    def test_tie_goes_to_lower_index(self):
        (lv,) = assign_labels([(0.0, 2.0), (4.0, 2.0)], [(5, 5)])
        assert lv.assigned[2, 2] == 0

    def test_stride_anchor(self):
        a = anchors((2, 3), 4)
        assert a[0, 0].tolist() == [1.5, 1.5] and a[1, 2].tolist() == [9.5, 5.5]

    def test_empty_shape(self):
        with pytest.raises(ShapeError):
            assign_labels([(1.0, 1.0)], [(0, 4)])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_targets_invert(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.uniform(-0.5, 31.5, size=(int(rng.integers(1, 8)), 2))
        for lv in assign_labels(pts, [(32, 32), (16, 16), (8, 8)]):
            a = anchors(lv.labels.shape, lv.stride)
            i, j = np.nonzero(lv.labels)
            decoded = a[i, j] + lv.offsets[:, i, j].T
            np.testing.assert_allclose(decoded, pts[lv.assigned[i, j]], atol=1e-9)
            assert np.all(lv.assigned[lv.labels == 0] == -1)


def _batch(scores, regs, labels, offsets):
    return ProposalBatch([Tensor(s) if not isinstance(s, Tensor) else s for s in scores],
                         [Tensor(r) if not isinstance(r, Tensor) else r for r in regs],
                         labels, offsets)


class TestLocalizationLoss:
    def test_perfect(self):
        pts = [(3.0, 4.0)]
        labels, offsets = stack_targets([assign_labels(pts, [(8, 8), (4, 4), (2, 2)])])
        loss = localization_loss(_batch(labels, offsets, labels, offsets))
        # clamping to [eps, 1-eps] leaves -log(1 - 1e-7) per cell
        assert float(loss.data) < 1e-5

    def test_single_negative(self):
        for levels in (1, 2, 3):
            labels = [np.zeros((1, 1, 1))] * levels
            offsets = [np.zeros((1, 2, 1, 1))] * levels
            scores = [np.full((1, 1, 1), 0.5)] + [np.full((1, 1, 1), 1e-12)] * (levels - 1)
            loss = localization_loss(_batch(scores, offsets, labels, offsets))
            expected = math.log(2) / levels + (levels - 1) * (-math.log(1 - 1e-7)) / levels
            assert float(loss.data) == pytest.approx(expected, abs=1e-9)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        labels, offsets = stack_targets([assign_labels([(2.0, 3.0), (6.0, 1.0)], [(8, 8), (4, 4)])])
        scores = [Tensor(rng.uniform(0.05, 0.95, size=l.shape), requires_grad=True) for l in labels]
        regs = [Tensor(rng.uniform(-3, 3, size=o.shape), requires_grad=True) for o in offsets]
        batch = ProposalBatch(scores, regs, labels, offsets)
        for leaf in scores + regs:
            fd_check(lambda: localization_loss(batch), leaf)

    def test_decreases_under_gradient_descent(self):
        rng = np.random.default_rng(1)
        head = LocalizationHead([4, 4, 4], rng, hidden=4)
        feats = [Tensor(rng.normal(size=(1, 4, 16 >> l, 16 >> l))) for l in range(3)]
        labels, offsets = stack_targets([assign_labels([(4.0, 5.0), (11.0, 9.0)], [(16, 16), (8, 8), (4, 4)],
                                                      match_radius=3.0)])
        losses = []
        for _ in range(50):
            scores, regs = head(feats)
            loss = localization_loss(ProposalBatch(scores, regs, labels, offsets))
            for p in head.parameters():
                p.zero_grad()
            loss.backward()
            losses.append(float(loss.data))
            for p in head.parameters():
                p.data -= 2e-4 * p.grad
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestAttentionFuse:
    def _feats(self, rng, n=2, widths=(4, 6, 8), size=8):
        return [Tensor(rng.normal(size=(n, c, size >> l, size >> l))) for l, c in enumerate(widths)]

    def test_shapes(self):
        rng = np.random.default_rng(0)
        head = LocalizationHead([4, 6, 8], rng, hidden=4)
        score, reg = attention_fuse(head, *self._feats(rng))
        assert score.shape == (2, 8, 8) and reg.shape == (2, 2, 8, 8)
        assert np.all((score.data > 0) & (score.data < 1))

    def test_gates_forced_to_one_is_plain_fusion(self):
        rng = np.random.default_rng(1)
        head = LocalizationHead([4, 6, 8], rng, hidden=4)
        feats = self._feats(rng)
        head.use_attention = False
        score, _ = attention_fuse(head, *feats)
        up = [feats[0], T.upsample2_bilinear(feats[1]),
              T.upsample2_bilinear(T.upsample2_bilinear(feats[2]))]
        plain = head.cls.out(T.relu(head.cls.mix(T.concat_channels(up))))
        np.testing.assert_allclose(score.data, 1 / (1 + np.exp(-plain.data[:, 0])), atol=1e-12)

    def test_constant_features_give_constant_scores(self):
        rng = np.random.default_rng(2)
        head = LocalizationHead([4, 6, 8], rng, hidden=4)
        feats = [Tensor(np.full((1, c, 64 >> l, 64 >> l), 0.3)) for l, c in enumerate((4, 6, 8))]
        score, _ = attention_fuse(head, *feats)
        # zero padding perturbs a border (7x7 gate on the stride-4 level reaches 12 px in);
        # away from it the stack is translation invariant
        inner = score.data[0, 20:-20, 20:-20]
        np.testing.assert_allclose(inner, inner[0, 0], atol=1e-12)

    def test_gradient_reaches_every_level(self):
        rng = np.random.default_rng(3)
        head = LocalizationHead([4, 6, 8], rng, hidden=4)
        feats = [Tensor(f.data, requires_grad=True) for f in self._feats(rng)]
        score, reg = attention_fuse(head, *feats)
        T.add(T.total(score), T.total(T.square(reg))).backward()
        assert all(np.abs(f.grad).sum() > 0 for f in feats)

    def test_attention_gradient_fd(self):
        rng = np.random.default_rng(4)
        head = LocalizationHead([2, 2, 2], rng, hidden=2)
        feats = [Tensor(rng.uniform(-1, 1, size=(1, 2, 4 >> l, 4 >> l)), requires_grad=True) for l in range(3)]

        def loss():
            s, r = attention_fuse(head, *feats)
            return T.add(T.total(T.square(s)), T.total(r))

        for leaf in feats + [head.cls.channel[0].fc1.weight, head.reg.spatial[1].conv.weight]:
            fd_check(loss, leaf)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(5)
        head = LocalizationHead([4, 6, 8], rng, hidden=4)
        feats = self._feats(rng)
        feats[1] = Tensor(np.zeros((2, 6, 3, 3)))
        with pytest.raises(ShapeError):
            attention_fuse(head, *feats)


def brute_force_nms(pts, scores, radius):
    """Greedy suppression by explicit pairwise loops."""
    order = sorted(range(len(pts)), key=lambda i: (-scores[i], pts[i][1], pts[i][0]))
    kept = []
    for i in order:
        if all(math.dist(pts[i], pts[k]) >= radius for k in kept):
            kept.append(i)
    return kept


class TestNMS:
    def test_two_close(self):
        score = np.zeros((10, 10))
        score[3, 3], score[3, 5] = 0.9, 0.8
        det = decode_and_nms(score, np.zeros((2, 10, 10)), nms_radius=5)
        assert det.tolist() == [[3.0, 3.0, 0.9]]

    def test_zero_confidence(self):
        assert decode_and_nms(np.zeros((6, 6)), np.zeros((2, 6, 6))).shape == (0, 3)

    def test_hand_set(self):
        pts = np.array([[0.0, 0.0], [4.0, 0.0], [8.0, 0.0]])
        scores = np.array([0.5, 0.9, 0.7])
        # 1 (0.9) suppresses both neighbours at distance 4 < 5
        assert nms(pts, scores, 5.0).tolist() == [1] == brute_force_nms(pts.tolist(), scores, 5.0)
        assert nms(pts, scores, 4.0).tolist() == [1, 2, 0]
        assert nms(pts, scores, 4.0).tolist() == brute_force_nms(pts.tolist(), scores, 4.0)

    def test_decode_applies_offsets(self):
        score = np.zeros((8, 8))
        score[2, 3] = 0.7
        reg = np.zeros((2, 8, 8))
        reg[:, 2, 3] = [1.25, -0.5]
        assert decode_and_nms(score, reg).tolist() == [[4.25, 1.5, 0.7]]

    def test_top_m(self):
        rng = np.random.default_rng(0)
        assert len(nms(rng.uniform(0, 500, size=(300, 2)), rng.uniform(size=300), 1.0, top_m=128)) == 128

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 100_000))
    def test_matches_oracle_and_order_invariant(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 25))
        pts = np.round(rng.uniform(0, 20, size=(n, 2)), 1)
        scores = np.round(rng.uniform(size=n), 2)
        kept = nms(pts, scores, 5.0)
        assert kept.tolist() == brute_force_nms(pts.tolist(), scores, 5.0)
        perm = rng.permutation(n)
        kept_p = nms(pts[perm], scores[perm], 5.0)
        assert perm[kept_p].tolist() == kept.tolist()
        sel = pts[kept]
        for a, b in itertools.combinations(range(len(sel)), 2):
            assert np.linalg.norm(sel[a] - sel[b]) >= 5.0
        assert np.all(np.diff(scores[kept]) <= 0)


def test_detections_round_trip(tmp_path):
    dets = [np.array([[1.0, 2.0, 0.9], [3.5, 4.25, 0.5]]), np.zeros((0, 3)), np.array([[7.0, 8.0, 0.1]])]
    save_detections(tmp_path / "d.csv", dets)
    back = load_detections(tmp_path / "d.csv")
    assert len(back) == 3
    for a, b in zip(dets, back):
        np.testing.assert_allclose(a, b)
