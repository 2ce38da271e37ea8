import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from motseg.evaluation import (
    EvalReport,
    GTInstance,
    MotionIoUAccumulator,
    ScoredInstance,
    benchmark,
    compute_ap,
    count_params,
    evaluate,
    iou,
    motion_pixel_metrics,
)
from motseg.heads import ModelConfig, MotSegNet
from oracles import oracle_ap, random_instance






class TestIoU:
    def test_box_cases(self):
        assert iou([0, 0, 1, 1], [0, 0, 1, 1]) == 1
        assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0
        assert iou([0, 0, 1, 1], [0.5, 0, 1.5, 1]) == pytest.approx(1 / 3)

    def test_mask_cases(self):
        a = np.zeros((4, 4), bool)
        assert iou(a, a, "mask") == 0
        b = a.copy()
        b[0, :2] = True
        c = a.copy()
        c[0, 1:3] = True
        assert iou(b, c, "mask") == pytest.approx(1 / 3)

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            iou([0, 0, 1, 1], [0, 0, 1, 1], "polygon")


class TestAP:
    def test_perfect(self):
        box = np.array([0.0, 0, 10, 10])
        r = compute_ap([[ScoredInstance(0.9, 1, box)]], [[GTInstance(1, box)]])
        assert (r.ap, r.ap50, r.ap75) == (100.0, 100.0, 100.0)

    def test_no_detections(self):
        r = compute_ap([[]], [[GTInstance(1, np.array([0.0, 0, 10, 10]))]])
        assert (r.ap, r.ap50, r.ap75) == (0.0, 0.0, 0.0)

    def test_crafted(self):
        g1, g2 = np.array([0.0, 0, 10, 10]), np.array([20.0, 20, 30, 30])
        dets = [[ScoredInstance(0.9, 1, g1), ScoredInstance(0.8, 1, np.array([50.0, 50, 60, 60])), ScoredInstance(0.7, 1, g2)]]
        gts = [[GTInstance(1, g1), GTInstance(1, g2)]]
        r = compute_ap(dets, gts)
        # precision 1 up to recall 0.5, then 2/3 up to recall 1
        expected = 100 * (51 * 1.0 + 50 * (2 / 3)) / 101
        assert r.ap50 == pytest.approx(expected, abs=1e-9)
        assert r.ap50 == pytest.approx(100 * oracle_ap(dets, gts, 0.5), abs=1e-9)

    def test_categories_without_gt_skipped(self):
        box = np.array([0.0, 0, 10, 10])
        dets = [[ScoredInstance(0.9, 1, box), ScoredInstance(0.8, 3, box)]]
        r = compute_ap(dets, [[GTInstance(1, box)]])
        assert set(r.per_category) == {1} and r.ap == 100.0

    def test_category_average(self):
        box = np.array([0.0, 0, 10, 10])
        dets = [[ScoredInstance(0.9, 1, box)]]
        r = compute_ap(dets, [[GTInstance(1, box), GTInstance(2, box + 20)]])
        assert r.ap50 == pytest.approx(50.0)

    def test_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dets, gts = random_instance(rng)
            r = compute_ap(dets, gts, iou_thresholds=[0.5, 0.75])
            assert r.ap50 == pytest.approx(100 * oracle_ap(dets, gts, 0.5), abs=1e-9)
            assert r.ap75 == pytest.approx(100 * oracle_ap(dets, gts, 0.75), abs=1e-9)

    def test_mask_kind(self):
        m = np.zeros((8, 8), bool)
        m[2:6, 2:6] = True
        r = compute_ap([[ScoredInstance(0.5, 1, np.zeros(4), m)]], [[GTInstance(1, np.zeros(4), m)]], "mask")
        assert r.ap == 100.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_ap([[], []], [[]])

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_duplicate_tp_monotone(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_instance(rng)
        base = compute_ap(dets, gts)
        tps = [(i, d) for i, ds in enumerate(dets) for d in ds if any(iou(d.box, g.box) >= 0.95 for g in gts[i])]
        if not tps:
            return
        i, d = tps[int(rng.integers(len(tps)))]
        lowest = min(x.score for ds in dets for x in ds)
        dup = [list(ds) for ds in dets]
        dup[i].append(ScoredInstance(lowest / 2, d.category, d.box.copy()))
        again = compute_ap(dup, gts)
        assert again.ap >= base.ap - 1e-9
        assert again.ap50 >= base.ap50 - 1e-9


class TestPixelMetrics:
    def test_identity(self):
        g = np.zeros((5, 5), bool)
        g[1:3, 1:3] = True
        assert motion_pixel_metrics(g, g) == (1.0, 1.0, 1.0)

    def test_all_background_prediction(self):
        g = np.zeros((5, 5), bool)
        g[0, 0] = True
        mov, bg, miou = motion_pixel_metrics(np.zeros_like(g), g)
        assert mov == 0 and bg == pytest.approx(24 / 25) and miou == pytest.approx(12 / 25)

    def test_table_row_consistency(self):
        # confusion counts giving moving 0.597 and background 0.994
        acc = MotionIoUAccumulator()
        acc.tp, acc.fp, acc.fn = 597, 203, 200
        acc.tn = round(0.994 * 403 / 0.006)
        mov, bg, miou = acc.result()
        assert round(100 * mov, 1) == 59.7 and round(100 * bg, 1) == 99.4
        assert miou == (mov + bg) / 2
        assert abs(100 * miou - 79.5) <= 0.1

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 6, 7)) < 0.4
        assert motion_pixel_metrics(a, b) == motion_pixel_metrics(b, a)

    def test_dataset_level_accumulation(self):
        p1, g1 = np.ones((2, 2), bool), np.ones((2, 2), bool)
        p2, g2 = np.zeros((2, 2), bool), np.eye(2, dtype=bool)
        mov, _, _ = motion_pixel_metrics([p1, p2], [g1, g2])
        assert mov == pytest.approx(4 / 6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            motion_pixel_metrics(np.zeros((2, 2)), np.zeros((3, 2)))


def _model():
    torch.manual_seed(0)
    return MotSegNet(ModelConfig(backbone_channels=(4, 4, 4, 4), blocks_per_stage=1, fpn_channels=8, num_prototypes=4))


def test_evaluate_report(small_samples):
    rep = evaluate(_model(), small_samples[:2])
    assert set(rep.heads) == {"semantic", "motion"}
    for kinds in rep.heads.values():
        for vals in kinds.values():
            assert all(0 <= v <= 100 for v in vals.values())
    assert rep.miou == pytest.approx((rep.moving_iou + rep.background_iou) / 2)
    assert not rep.has_nan()
    assert any(line.startswith("motion.miou=") for line in rep.records())
    assert "mIoU" in rep.table()


def test_report_nan_flag():
    rep = EvalReport({"motion": {"mask": {"AP": math.nan, "AP50": 0.0, "AP75": 0.0}}}, 0, 0, 0, 1, "x", 0)
    assert rep.has_nan()


def test_param_counts():
    tiny = count_params(MotSegNet(ModelConfig(backbone="tiny_conv")))
    mnet = count_params(MotSegNet(ModelConfig(backbone="mobilenet_v2_style")))
    assert tiny < mnet
    assert tiny == sum(p.numel() for p in MotSegNet(ModelConfig()).parameters()) / 1e6


def test_benchmark_stable(small_samples):
    model = _model()
    fps1, ms1 = benchmark(model, small_samples, warmup=3, runs=15)
    fps2, ms2 = benchmark(model, small_samples, warmup=3, runs=15)
    assert ms1 == pytest.approx(1000 / fps1)
    assert abs(fps1 - fps2) / max(fps1, fps2) < 0.2
