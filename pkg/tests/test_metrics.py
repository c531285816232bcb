import numpy as np
import pytest

from panoqa import metrics
from panoqa.distortion import (
    DistortionSpec,
    Manifest,
    NOT_APPLICABLE,
    Region,
    SampleRecord,
    TYPES,
)


# ---------------------------------------------------------------------------
# logistic remapping


def test_logistic_recovers_planted_parameters():
    rng = np.random.default_rng(11)
    pred = np.sort(rng.uniform(-4.0, 4.0, size=60))
    planted = (5.0, 1.0, 0.0, 1.0)
    mos = metrics.logistic(pred, *planted)
    fit = metrics.fit_logistic(pred, mos)
    assert fit.success
    assert fit.rmse < 1e-6
    np.testing.assert_allclose(fit.params, planted, atol=1e-4)


def test_fit_never_worse_than_initialization():
    # pure noise gives the optimizer nothing to work with; the guard must
    # keep the reported fit at or below the initialization's error
    rng = np.random.default_rng(3)
    pred = rng.normal(size=40)
    mos = rng.uniform(1.0, 5.0, size=40)
    init = (mos.max(), mos.min(), pred.mean(), pred.std() / 4.0)
    init_rmse = metrics.rmse(metrics.logistic(pred, *init), mos)
    fit = metrics.fit_logistic(pred, mos)
    assert fit.rmse <= init_rmse + 1e-12


def test_constant_predictions_flagged_degenerate():
    fit = metrics.fit_logistic([2.0] * 10, np.linspace(1.0, 5.0, 10))
    assert not fit.success
    assert fit.params[3] == 1.0


def test_too_few_points_flagged_degenerate():
    fit = metrics.fit_logistic([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert not fit.success


def test_mismatched_lengths_rejected():
    with pytest.raises(ValueError):
        metrics.fit_logistic([1.0, 2.0], [1.0, 2.0, 3.0])


def test_logistic_saturated_arguments_stay_finite():
    out = metrics.logistic([-1e6, 0.0, 1e6], 5.0, 1.0, 0.0, 1e-3)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[0], 1.0, atol=1e-9)
    np.testing.assert_allclose(out[2], 5.0, atol=1e-9)


# ---------------------------------------------------------------------------
# correlation and error metrics


def test_srcc_exactly_one_for_monotone_map():
    x = np.array([0.3, -1.2, 2.5, 0.9, -0.4, 1.7])
    y = np.exp(x) + 3.0
    assert metrics.srcc(x, y) == 1.0


def test_srcc_uses_average_ranks_on_ties():
    assert metrics.srcc([1.0, 1.0, 2.0], [1.0, 1.0, 2.0]) == 1.0


def test_srcc_exactly_minus_one_for_reversed_ranks():
    x = np.arange(10.0)
    assert metrics.srcc(x, -2.0 * x + 7.0) == -1.0


def test_srcc_matches_scipy_on_general_data():
    from scipy import stats

    rng = np.random.default_rng(5)
    a = rng.normal(size=30)
    b = 0.4 * a + rng.normal(size=30)
    np.testing.assert_allclose(metrics.srcc(a, b), stats.spearmanr(a, b)[0], atol=1e-12)


def test_rmse_exactly_zero_on_identical_vectors():
    x = np.array([1.5, 2.5, 3.5, 4.0])
    assert metrics.rmse(x, x.copy()) == 0.0


def test_plcc_one_for_affine_relation():
    x = np.linspace(0.0, 1.0, 20)
    np.testing.assert_allclose(metrics.plcc(x, 3.0 * x - 2.0), 1.0, atol=1e-12)


def test_accuracy_ignores_not_applicable():
    pred = [0, 1, 2, 3]
    true = [0, NOT_APPLICABLE, 2, 0]
    # three valid labels, two matches
    assert metrics.accuracy(pred, true) == pytest.approx(2.0 / 3.0)


def test_accuracy_all_invalid_is_none():
    assert metrics.accuracy([0, 1], [NOT_APPLICABLE, NOT_APPLICABLE]) is None


# ---------------------------------------------------------------------------
# stratified reports


def make_record(idx, dist_type, level, n_regions, mos, split="test"):
    regions = tuple(
        Region(lon=-2.0 + 0.8 * (idx + i), lat=0.0) for i in range(n_regions)
    )
    spec = DistortionSpec(dist_type=dist_type, level=level, regions=regions)
    return SampleRecord(
        path=f"img{idx % 3}_r{idx:04d}.png",
        spec=spec,
        range_label=n_regions - 1,
        type_label=TYPES.index(dist_type),
        degree_label=level - 1,
        pseudo_mos=mos,
        split=split,
    )


def two_range_manifest(n_per_type=4):
    records = []
    idx = 0
    for t in TYPES:
        for k in range(n_per_type):
            level = 1 + k % 3
            mos = 5.0 - 0.8 * level - 0.1 * TYPES.index(t)
            records.append(make_record(idx, t, level, 1 + idx % 2, mos))
            idx += 1
    return Manifest(taxonomy="jufe", score_range=(1.0, 5.0), records=records)


def oracle_predictions(manifest):
    return [
        metrics.Prediction(
            score=r.pseudo_mos,
            labels={
                "range": r.range_label,
                "type": r.type_label,
                "degree": r.degree_label,
            },
        )
        for r in manifest.records
    ]


def test_perfect_oracle_report():
    man = two_range_manifest()
    report = metrics.evaluate_predictions(oracle_predictions(man), man)
    overall = report["strata"]["Overall"]
    assert overall["computable"]
    assert overall["srcc"] == 1.0
    # reported rmse is measured after the logistic remap, which can only
    # approximate the identity, so exact zero is not expected here
    assert overall["rmse"] < 1e-5
    assert overall["plcc"] > 1.0 - 1e-8
    for task in ("range", "type", "degree"):
        assert report["accuracy"][task] == 1.0
    metrics.validate_report(report)


def test_strata_cover_types_plus_overall():
    man = two_range_manifest()
    report = metrics.evaluate_predictions(oracle_predictions(man), man)
    assert sorted(report["strata"]) == sorted(list(TYPES) + ["Overall"])


def test_small_stratum_marked_not_computable():
    man = two_range_manifest(n_per_type=4)
    # drop all but two GN records so that stratum falls under the floor
    keep = [r for r in man.records if r.spec.dist_type != "GN"]
    keep += [r for r in man.records if r.spec.dist_type == "GN"][:2]
    man = Manifest(taxonomy=man.taxonomy, score_range=man.score_range, records=keep)
    report = metrics.evaluate_predictions(oracle_predictions(man), man)
    gn = report["strata"]["GN"]
    assert gn["n"] == 2
    assert not gn["computable"]
    assert "srcc" not in gn
    metrics.validate_report(report)


def test_constant_scores_marked_not_computable():
    man = two_range_manifest()
    preds = [metrics.Prediction(score=2.0, labels={}) for _ in man.records]
    report = metrics.evaluate_predictions(preds, man)
    overall = report["strata"]["Overall"]
    assert overall["n"] == len(man.records)
    assert not overall["computable"]
    metrics.validate_report(report)


def test_report_values_are_finite():
    # a weak predictor with spread must still yield finite numbers everywhere
    man = two_range_manifest()
    rng = np.random.default_rng(9)
    preds = [
        metrics.Prediction(score=float(rng.normal()), labels={}) for _ in man.records
    ]
    report = metrics.evaluate_predictions(preds, man)
    for s in report["strata"].values():
        if s["computable"]:
            assert np.isfinite(s["plcc"]) and np.isfinite(s["srcc"]) and np.isfinite(s["rmse"])


def test_four_range_strata_use_range_classes():
    records = []
    for idx in range(12):
        rc = idx % 4
        rec = make_record(idx, "GN", 1 + idx % 3, max(rc, 1), 3.0 - 0.5 * (idx % 3))
        rec.range_label = rc
        records.append(rec)
    man = Manifest(taxonomy="oiq", score_range=(1.0, 3.0), records=records)
    report = metrics.evaluate_predictions(oracle_predictions(man), man)
    assert sorted(report["strata"]) == ["Overall", "R1", "R2", "R3", "R4"]


def test_prediction_count_mismatch_rejected():
    man = two_range_manifest()
    with pytest.raises(ValueError):
        metrics.evaluate_predictions(oracle_predictions(man)[:-1], man)


def test_split_filter_and_missing_split_rejected():
    man = two_range_manifest()
    for r in man.records[:8]:
        r.split = "train"
    report = metrics.evaluate_predictions(oracle_predictions(man), man, split="train")
    assert report["n"] == 8
    with pytest.raises(ValueError):
        metrics.evaluate_predictions(oracle_predictions(man), man, split="nope")


def test_accuracy_none_when_labels_missing():
    man = two_range_manifest()
    preds = [metrics.Prediction(score=r.pseudo_mos, labels={}) for r in man.records]
    report = metrics.evaluate_predictions(preds, man)
    assert report["accuracy"]["range"] is None
    metrics.validate_report(report)


def test_selection_histogram_carried_through():
    man = two_range_manifest()
    hist = {"quality": [0] * 15}
    report = metrics.evaluate_predictions(
        oracle_predictions(man), man, selection_histogram=hist
    )
    assert report["selection_histogram"] == hist
    metrics.validate_report(report)


def test_validate_report_rejects_bad_documents():
    man = two_range_manifest()
    report = metrics.evaluate_predictions(oracle_predictions(man), man)

    import jsonschema

    bad = dict(report)
    bad["format"] = "something-else"
    with pytest.raises(jsonschema.ValidationError):
        metrics.validate_report(bad)

    bad = dict(report)
    bad["strata"] = {k: v for k, v in report["strata"].items() if k != "Overall"}
    with pytest.raises(ValueError):
        metrics.validate_report(bad)

    bad = dict(report)
    bad["strata"] = dict(report["strata"])
    bad["strata"]["GN"] = {"n": 2, "computable": True, "plcc": 0.5, "srcc": 0.5, "rmse": 0.1}
    with pytest.raises(ValueError):
        metrics.validate_report(bad)
