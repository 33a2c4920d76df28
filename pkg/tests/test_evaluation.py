import numpy as np
import pytest

from causaltad.errors import ConfigError, EmptyGroundTruth
from causaltad.evaluation import (
    EvalConfig,
    average_precision,
    detection_map,
    recall_at_kx,
    tiou,
    tiou_matrix,
)
from causaltad.types import AnnotationDB, Proposal, SegmentAnnotation, VideoRecord


def prop(start, end, score, label=0):
    return Proposal(start_s=start, end_s=end, score=score, label_id=label)


def make_db(videos, num_classes=3, subset="val"):
    """videos: {vid: [(start, end, label), ...]} with duration inferred."""
    recs = {}
    for vid, segs in videos.items():
        duration = max((e for _, e, _ in segs), default=1.0) + 1.0
        recs[vid] = VideoRecord(
            duration_s=duration,
            subset=subset,
            segments=[SegmentAnnotation(s, e, l) for s, e, l in segs],
        )
    return AnnotationDB(
        num_classes=num_classes,
        class_names=[f"c{i}" for i in range(num_classes)],
        videos=recs,
    )


# ---------------------------------------------------------------------------
# Brute-force oracle: a deliberately plain re-implementation of the metrics.


def oracle_ap(preds, gts, tau):
    """preds: [(vid, Proposal)], gts: {vid: [(s, e), ...]}."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    ordered = sorted(preds, key=lambda vp: (-vp[1].score, vp[1].start_s, vp[0]))
    used = {vid: [False] * len(segs) for vid, segs in gts.items()}
    tp_flags = []
    for vid, p in ordered:
        best, best_i = 0.0, -1
        for gi, (gs, ge) in enumerate(gts.get(vid, [])):
            if used.get(vid, [])[gi]:
                continue
            ov = tiou((p.start_s, p.end_s), (gs, ge))
            if ov > best:
                best, best_i = ov, gi
        if best_i >= 0 and best >= tau:
            used[vid][best_i] = True
            tp_flags.append(True)
        else:
            tp_flags.append(False)
    ap, tp = 0.0, 0
    for rank, flag in enumerate(tp_flags, 1):
        if flag:
            tp += 1
            ap += tp / rank
    return ap / n_gt


def oracle_map(predictions, db, thresholds, subset):
    vids = [v for v, r in db.videos.items() if subset is None or r.subset == subset]
    per_threshold = []
    for tau in thresholds:
        aps = []
        for c in range(db.num_classes):
            gts = {}
            for vid in vids:
                segs = [(s.start_s, s.end_s) for s in db.videos[vid].segments if s.label_id == c]
                if segs:
                    gts[vid] = segs
            preds = [
                (vid, p)
                for vid in vids
                for p in predictions.get(vid, [])
                if p.label_id == c
            ]
            ap = oracle_ap(preds, gts, tau)
            if ap is not None:
                aps.append(ap)
        per_threshold.append(sum(aps) / len(aps))
    return per_threshold, sum(per_threshold) / len(per_threshold)


def oracle_recall(predictions, db, k, tau, subset):
    vids = [v for v, r in db.videos.items() if subset is None or r.subset == subset]
    total, matched = 0, 0
    for vid in vids:
        by_class = {}
        for s in db.videos[vid].segments:
            by_class.setdefault(s.label_id, []).append((s.start_s, s.end_s))
        for c, segs in by_class.items():
            total += len(segs)
            cand = sorted(
                [p for p in predictions.get(vid, []) if p.label_id == c],
                key=lambda p: (-p.score, p.start_s, vid),
            )[: k * len(segs)]
            used = [False] * len(segs)
            for p in cand:
                best, best_i = 0.0, -1
                for gi, seg in enumerate(segs):
                    if used[gi]:
                        continue
                    ov = tiou((p.start_s, p.end_s), seg)
                    if ov > best:
                        best, best_i = ov, gi
                if best_i >= 0 and best >= tau:
                    used[best_i] = True
                    matched += 1
    return matched / total if total else 0.0


def random_instance(seed, n_videos=4, n_classes=3, n_gt=5, n_preds=20):
    rng = np.random.default_rng(seed)
    videos = {}
    predictions = {}
    for v in range(n_videos):
        vid = f"v{v}"
        segs = []
        for _ in range(int(rng.integers(1, n_gt + 1))):
            s = float(rng.uniform(0, 20))
            segs.append((s, s + float(rng.uniform(0.5, 6)), int(rng.integers(0, n_classes))))
        videos[vid] = segs
        preds = []
        for _ in range(int(rng.integers(0, n_preds + 1))):
            s = float(rng.uniform(0, 20))
            preds.append(
                prop(s, s + float(rng.uniform(0.5, 6)), float(rng.uniform(0, 1)), int(rng.integers(0, n_classes)))
            )
        predictions[vid] = preds
    return predictions, make_db(videos, num_classes=n_classes)


def test_tiou_cases():
    assert tiou((3, 7), (3, 7)) == 1.0
    assert tiou((0, 1), (2, 3)) == 0.0
    assert tiou((10, 20), (15, 25)) == pytest.approx(5 / 15, abs=1e-12)
    m = tiou_matrix(np.array([[10.0, 20.0]]), np.array([[15.0, 25.0], [30.0, 40.0]]))
    np.testing.assert_allclose(m, [[1 / 3, 0.0]])


def test_ap_perfect_single():
    ap = average_precision([("v", prop(1, 2, 0.9))], {"v": [(1.0, 2.0)]}, 0.5)
    assert ap == 1.0


def test_ap_duplicate_prediction_still_one():
    preds = [("v", prop(1, 2, 0.9)), ("v", prop(1, 2, 0.8))]
    ap = average_precision(preds, {"v": [(1.0, 2.0)]}, 0.5)
    assert ap == 1.0


def test_ap_disjoint_zero():
    ap = average_precision([("v", prop(5, 6, 0.9))], {"v": [(1.0, 2.0)]}, 0.5)
    assert ap == 0.0


def test_ap_no_ground_truth_skipped():
    assert average_precision([("v", prop(1, 2, 0.5))], {}, 0.5) is None


def test_map_perfect_predictions():
    preds, db = random_instance(0)
    perfect = {
        vid: [prop(s.start_s, s.end_s, 0.9, s.label_id) for s in rec.segments]
        for vid, rec in db.videos.items()
    }
    report = detection_map(perfect, db, EvalConfig(thresholds=[0.3, 0.5, 0.7, 0.95]), subset="val")
    assert report.average_map == 1.0
    assert all(m == 1.0 for m in report.map_per_threshold)


def test_map_empty_predictions_zero():
    _, db = random_instance(1)
    report = detection_map({}, db, EvalConfig(), subset="val")
    assert report.average_map == 0.0


def test_map_matches_brute_force_oracle():
    thresholds = [0.1, 0.3, 0.5, 0.7]
    for seed in range(100):
        predictions, db = random_instance(seed)
        report = detection_map(
            predictions, db, EvalConfig(thresholds=thresholds), subset="val"
        )
        oracle_per_t, oracle_avg = oracle_map(predictions, db, thresholds, "val")
        np.testing.assert_allclose(report.map_per_threshold, oracle_per_t, atol=1e-9)
        assert abs(report.average_map - oracle_avg) <= 1e-9


def test_map_monotone_in_threshold():
    for seed in range(20):
        predictions, db = random_instance(seed + 500)
        report = detection_map(
            predictions, db, EvalConfig(thresholds=[0.1, 0.3, 0.5, 0.7, 0.9]), subset="val"
        )
        for a, b in zip(report.map_per_threshold, report.map_per_threshold[1:]):
            assert b <= a + 1e-12


def test_ap_invariant_under_monotone_score_transform():
    for seed in range(20):
        predictions, db = random_instance(seed + 900)
        transformed = {
            vid: [prop(p.start_s, p.end_s, 0.1 + 0.8 * p.score**2, p.label_id) for p in preds]
            for vid, preds in predictions.items()
        }
        a = detection_map(predictions, db, EvalConfig(thresholds=[0.5]), subset="val")
        b = detection_map(transformed, db, EvalConfig(thresholds=[0.5]), subset="val")
        assert a.map_per_threshold == pytest.approx(b.map_per_threshold, abs=1e-12)


def test_recall_simple_cases():
    db = make_db({"v": [(1.0, 2.0, 0)]})
    assert recall_at_kx({"v": [prop(1, 2, 0.9, 0)]}, db, k=1, tau=0.5) == 1.0
    assert recall_at_kx({"v": [prop(5, 6, 0.9, 0)]}, db, k=1, tau=0.5) == 0.0


def test_recall_top_k_truncation():
    db = make_db({"v": [(1.0, 2.0, 0), (5.0, 6.0, 0)]})
    # four predictions, k=1 -> only the top 2 by score are considered;
    # both top-scored ones miss, the matching ones rank below the cut
    preds = [
        prop(10, 11, 0.9, 0),
        prop(20, 21, 0.8, 0),
        prop(1, 2, 0.7, 0),
        prop(5, 6, 0.6, 0),
    ]
    assert recall_at_kx({"v": preds}, db, k=1, tau=0.5) == 0.0
    assert recall_at_kx({"v": preds}, db, k=2, tau=0.5) == 1.0


def test_recall_matches_brute_force():
    for seed in range(50):
        predictions, db = random_instance(seed + 2000)
        for k, tau in ((1, 0.5), (2, 0.3)):
            fast = recall_at_kx(predictions, db, k, tau, subset="val")
            slow = oracle_recall(predictions, db, k, tau, "val")
            assert abs(fast - slow) <= 1e-12


def test_empty_ground_truth_raises():
    db = make_db({"v": []})
    with pytest.raises(EmptyGroundTruth):
        detection_map({}, db, EvalConfig(), subset="val")
    with pytest.raises(EmptyGroundTruth):
        detection_map({}, make_db({"v": [(1, 2, 0)]}), EvalConfig(), subset="train")


def test_skipped_class_flagged():
    db = make_db({"v": [(1.0, 2.0, 0)]}, num_classes=2)
    preds = {"v": [prop(1, 2, 0.9, 0), prop(3, 4, 0.5, 1)]}
    report = detection_map(preds, db, EvalConfig(thresholds=[0.5]), subset="val")
    assert report.skipped_classes == ["c1"]
    assert report.map_per_threshold[0] == 1.0  # class 1 excluded from the mean


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        EvalConfig(thresholds=[]).validate()
    with pytest.raises(ConfigError):
        EvalConfig(thresholds=[1.5]).validate()
    with pytest.raises(ConfigError):
        EvalConfig(recall_at=[(0, 0.5)]).validate()


def test_report_serialization_roundtrip():
    predictions, db = random_instance(11)
    report = detection_map(predictions, db, EvalConfig(), subset="val")
    doc = report.to_dict()
    assert doc["average_map"] == report.average_map
    assert set(doc["counts"]) == {"videos", "ground_truth", "predictions"}
    table = report.to_table()
    assert "average mAP" in table
