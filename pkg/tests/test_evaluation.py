"""Average precision, mAP aggregation, and report formatting."""

import json

import numpy as np
import pytest

from ovir3d.evaluation import (
    DEFAULT_THRESHOLDS,
    EvalConfig,
    SceneRecord,
    average_precision,
    evaluate,
    set_iou,
)
from ovir3d.retrieval import FinalInstance, build_index
from ovir3d.scene import (
    GroundTruthAnnotation,
    GroundTruthInstance,
    QueryEmbedding,
    ValidationError,
)

from helpers import basis_features
from oracles import ap_reference

FEATS = basis_features(16, 6, seed=0)


def seg(lo, hi):
    return np.arange(lo, hi, dtype=np.int64)


class TestSetIou:
    def test_half_overlap(self):
        assert set_iou(np.array([1, 2, 3]), np.array([2, 3, 4])) == 0.5

    def test_identical_and_disjoint(self):
        a = seg(0, 10)
        assert set_iou(a, a) == 1.0
        assert set_iou(a, seg(20, 30)) == 0.0

    def test_empty(self):
        e = np.empty(0, dtype=np.int64)
        assert set_iou(e, e) == 0.0


class TestAveragePrecision:
    def test_perfect_ranking(self):
        gts = [seg(0, 10), seg(10, 20)]
        for t in DEFAULT_THRESHOLDS:
            assert average_precision(list(gts), gts, t) == 1.0

    def test_disjoint_predictions(self):
        assert average_precision([seg(100, 120)], [seg(0, 10)], 0.25) == 0.0

    def test_no_ground_truth(self):
        assert average_precision([seg(0, 10)], [], 0.5) == 0.0

    def test_no_predictions(self):
        assert average_precision([], [seg(0, 10)], 0.5) == 0.0

    def test_junk_then_hit(self):
        # one FP at rank 1 halves the precision of the later hit
        ap = average_precision([seg(100, 120), seg(0, 10)], [seg(0, 10)], 0.5)
        assert ap == pytest.approx(0.5)

    def test_each_gt_matched_once(self):
        gt = [seg(0, 10)]
        ap = average_precision([seg(0, 10), seg(0, 10)], gt, 0.5)
        assert ap == pytest.approx(1.0)  # duplicate hit is a FP, not a second TP

    def test_tie_prefers_earliest_gt(self):
        gts = [seg(0, 10), seg(10, 20)]
        straddle = np.concatenate([seg(0, 5), seg(10, 15)])  # IoU 1/3 with both
        follow = seg(0, 10)  # exact match for the first gt only
        ap = average_precision([straddle, follow], gts, 0.3)
        # straddle takes gt 0 (earliest on ties), so follow cannot match
        assert ap == pytest.approx(0.5)

    def test_scores_must_be_sorted(self):
        with pytest.raises(ValidationError, match="non-increasing"):
            average_precision([seg(0, 10), seg(10, 20)], [seg(0, 10)], 0.5,
                              scores=[0.2, 0.9])

    def test_score_values_do_not_matter(self):
        preds = [seg(0, 10), seg(30, 45), seg(10, 20)]
        gts = [seg(0, 10), seg(10, 20)]
        a = average_precision(preds, gts, 0.5, scores=[0.9, 0.5, 0.1])
        b = average_precision(preds, gts, 0.5, scores=[0.99, 0.98, 0.97])
        assert a == b

    def test_trailing_junk_harmless_leading_junk_hurts(self):
        preds = [seg(0, 10), seg(10, 20)]
        gts = [seg(0, 10), seg(10, 20)]
        base = average_precision(preds, gts, 0.5)
        junk = seg(500, 520)
        assert average_precision(preds + [junk], gts, 0.5) == base
        assert average_precision([junk] + preds, gts, 0.5) < base

    @staticmethod
    def _random_case(rng):
        n_gt = int(rng.integers(1, 5))
        starts = np.cumsum(rng.integers(5, 20, n_gt + 1))
        gts = [seg(starts[i], starts[i + 1]) for i in range(n_gt)]
        preds = []
        for _ in range(int(rng.integers(0, 8))):
            if rng.random() < 0.6 and n_gt:
                base = gts[int(rng.integers(0, n_gt))]
                keep = rng.random(len(base)) < rng.uniform(0.3, 1.0)
                extra = seg(200, 200 + int(rng.integers(0, 6)))
                p = np.union1d(base[keep], extra)
            else:
                lo = int(rng.integers(0, 150))
                p = seg(lo, lo + int(rng.integers(1, 25)))
            if len(p):
                preds.append(p)
        return preds, gts

    def test_matches_reference_formula(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            preds, gts = self._random_case(rng)
            for t in (0.25, 0.5, 0.75):
                a = average_precision(preds, gts, t)
                b = ap_reference(preds, gts, t)
                assert abs(a - b) <= 1e-9, (a, b, t)

    def test_threshold_monotone(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            preds, gts = self._random_case(rng)
            ts = sorted(rng.uniform(0.05, 1.0, 3))
            aps = [average_precision(preds, gts, t) for t in ts]
            for lo, hi in zip(aps, aps[1:]):
                assert hi <= lo + 1e-12


def final_instance(inst_id, points, feature):
    return FinalInstance(
        id=inst_id,
        point_indices=np.asarray(points, dtype=np.int64),
        mean_feature=np.asarray(feature, dtype=np.float64),
        largest_view_feature=np.asarray(feature, dtype=np.float32),
        source_view_count=1,
        view_features=np.asarray(feature, dtype=np.float32)[None, :],
    )


def perfect_scene(name="s0"):
    gt = GroundTruthAnnotation([
        GroundTruthInstance(0, "box", seg(0, 50)),
        GroundTruthInstance(1, "cyl", seg(50, 90)),
    ])
    insts = build_index([
        final_instance(0, seg(0, 50), FEATS[0]),
        final_instance(1, seg(50, 90), FEATS[1]),
    ], k=4)
    queries = {
        "box": QueryEmbedding(FEATS[0], label="box"),
        "cyl": QueryEmbedding(FEATS[1], label="cyl"),
    }
    return SceneRecord(name=name, instances=insts, gt=gt, queries=queries)


class TestEvaluate:
    def test_perfect_scene_scores_one(self):
        report = evaluate([perfect_scene()])
        assert report.categories == ["box", "cyl"]
        for t in DEFAULT_THRESHOLDS:
            assert report.map_at[t] == 1.0
        assert report.overall_map == 1.0

    def test_category_means_over_scenes_containing_it(self):
        s1 = perfect_scene("s1")
        gt2 = GroundTruthAnnotation([GroundTruthInstance(0, "box", seg(0, 50))])
        insts2 = build_index([final_instance(0, seg(400, 420), FEATS[0])], k=4)
        s2 = SceneRecord(name="s2", instances=insts2, gt=gt2,
                         queries={"box": QueryEmbedding(FEATS[0], label="box")})
        report = evaluate([s1, s2], EvalConfig(iou_thresholds=(0.5,)))
        # box: perfect in s1, miss in s2; cyl: only present in s1
        assert report.per_category_ap[("box", 0.5)] == pytest.approx(0.5)
        assert report.per_category_ap[("cyl", 0.5)] == 1.0
        assert report.map_at[0.5] == pytest.approx(0.75)

    def test_missing_query_rejected(self):
        scene = perfect_scene()
        broken = SceneRecord(name=scene.name, instances=scene.instances,
                             gt=scene.gt, queries={"box": scene.queries["box"]})
        with pytest.raises(ValidationError, match="no query embedding"):
            evaluate([broken])

    def test_mean_strategy_supported(self):
        report = evaluate([perfect_scene()], EvalConfig(iou_thresholds=(0.5,),
                                                        strategy="mean"))
        assert report.map_at[0.5] == 1.0

    def test_to_json_layout(self):
        report = evaluate([perfect_scene()])
        doc = json.loads(report.to_json())
        assert list(doc) == ["map_at", "overall_map", "per_category", "per_scene"]
        assert set(doc["map_at"]) == {f"{t:.2f}" for t in DEFAULT_THRESHOLDS}
        assert doc["per_category"]["box"]["0.50"] == 1.0
        assert report.to_json() == report.to_json()

    def test_format_table_layout(self):
        report = evaluate([perfect_scene()])
        table = report.format_table().splitlines()
        assert table[0].split() == ["category", "mAP_25", "mAP_50", "mAP"]
        assert len(table) == 4  # header + 2 categories + mean row
        assert table[-1].startswith("mean")
        assert table[-1].split()[-1] == "1.000"

    def test_threshold_validation(self):
        with pytest.raises(ValidationError, match="outside"):
            EvalConfig(iou_thresholds=(0.5, 0.0))
        with pytest.raises(ValidationError, match="outside"):
            EvalConfig(iou_thresholds=(1.5,))
