"""Quality metrics and evaluation reports.

Correlation metrics follow the usual IQA protocol: predictions are remapped
through a four-parameter logistic before PLCC and RMSE, while SRCC works on
the raw scores with average ranks for ties. The logistic is

    f(x) = (eta1 - eta2) / (1 + exp(-(x - eta3) / eta4)) + eta2

initialized at eta1 = max(mos), eta2 = min(mos), eta3 = mean(pred),
eta4 = std(pred) / 4 and refined by least squares; refinement can only keep or
lower the initialization's RMSE, never raise it.
"""

from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .distortion import JUFE_STYLE, OIQ_STYLE, NOT_APPLICABLE, TYPES

MIN_STRATUM = 3
REPORT_FORMAT = "panoqa-eval-report"
REPORT_VERSION = 1


def logistic(pred, eta1, eta2, eta3, eta4):
    x = np.asarray(pred, dtype=np.float64)
    z = np.clip(-(x - eta3) / eta4, -500.0, 500.0)
    return (eta1 - eta2) / (1.0 + np.exp(z)) + eta2


@dataclass
class LogisticFit:
    params: tuple
    success: bool
    rmse: float
    message: str = ""

    def apply(self, pred):
        return logistic(pred, *self.params)


def rmse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def plcc(a, b) -> float:
    return float(stats.pearsonr(np.asarray(a, float), np.asarray(b, float))[0])


def srcc(a, b) -> float:
    """Spearman rank correlation with average ranks on ties."""
    ra = stats.rankdata(np.asarray(a, dtype=np.float64))
    rb = stats.rankdata(np.asarray(b, dtype=np.float64))
    # identical or exactly mirrored rank vectors are +-1 by definition;
    # going through the dot product would shave an ulp off the exact value
    if np.array_equal(ra, rb):
        return 1.0
    if np.array_equal(ra + rb, np.full_like(ra, ra.size + 1.0)):
        return -1.0
    return float(stats.pearsonr(ra, rb)[0])


def fit_logistic(pred, mos) -> LogisticFit:
    pred = np.asarray(pred, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    if pred.shape != mos.shape or pred.ndim != 1:
        raise ValueError("pred and mos must be equal-length vectors")
    init = (float(mos.max()), float(mos.min()), float(pred.mean()), float(pred.std()) / 4.0)
    if pred.size < 4 or pred.std() == 0.0 or mos.std() == 0.0 or init[3] == 0.0:
        return LogisticFit(
            params=(init[0], init[1], init[2], 1.0),
            success=False,
            rmse=rmse(pred, mos),
            message="degenerate inputs, logistic left at initialization",
        )

    def residual(eta):
        return logistic(pred, *eta) - mos

    sol = optimize.least_squares(
        residual, x0=np.array(init), xtol=1e-8, max_nfev=2500, method="trf"
    )
    fitted = tuple(float(v) for v in sol.x)
    init_rmse = rmse(logistic(pred, *init), mos)
    fit_rmse = rmse(logistic(pred, *fitted), mos)
    if not np.isfinite(fit_rmse) or fit_rmse > init_rmse:
        return LogisticFit(
            params=init,
            success=False,
            rmse=init_rmse,
            message="refinement did not improve on initialization",
        )
    return LogisticFit(params=fitted, success=True, rmse=fit_rmse)


def accuracy(pred_labels, true_labels, ignore: int = NOT_APPLICABLE):
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    valid = true != ignore
    if valid.sum() == 0:
        return None
    return float((pred[valid] == true[valid]).mean())


# ---------------------------------------------------------------------------
# stratified evaluation


@dataclass
class Prediction:
    """Per-record model outputs aligned with a manifest's record order."""

    score: float
    labels: dict


def _stratum_key(taxonomy: str, record) -> str:
    if taxonomy == JUFE_STYLE:
        return record.spec.dist_type or "NA"
    return f"R{record.range_label + 1}"


def stratum_names(taxonomy: str) -> list:
    if taxonomy == JUFE_STYLE:
        return sorted(TYPES)
    if taxonomy == OIQ_STYLE:
        return ["R1", "R2", "R3", "R4"]
    raise ValueError(f"unknown taxonomy {taxonomy!r}")


def _quality_metrics(scores, mos) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    mos = np.asarray(mos, dtype=np.float64)
    if scores.std() == 0.0 or mos.std() == 0.0:
        # correlation against a constant vector is undefined
        return {"n": int(len(scores)), "computable": False}
    fit = fit_logistic(scores, mos)
    mapped = fit.apply(scores)
    # a collapsed fit can map every score to one constant; Pearson is
    # undefined there, so fall back to the raw scores (the map is monotone)
    plcc_basis = mapped if np.std(mapped) > 0.0 else scores
    out = {
        "n": int(len(scores)),
        "computable": True,
        "plcc": plcc(plcc_basis, mos),
        "srcc": srcc(scores, mos),
        "rmse": rmse(mapped, mos),
        "logistic": {
            "params": list(fit.params),
            "success": fit.success,
            "message": fit.message,
        },
    }
    return out


def evaluate_predictions(
    predictions: list,
    manifest,
    split: str = "test",
    selection_histogram: dict | None = None,
) -> dict:
    """Stratified report for predictions aligned with manifest.records.

    Strata: the four distortion types for the two-range taxonomy, the four
    range classes for the four-range taxonomy, plus Overall. Strata with fewer
    than MIN_STRATUM records, or with zero variance in either score vector,
    are reported but marked not computable.
    """
    records = manifest.records
    if len(predictions) != len(records):
        raise ValueError(
            f"{len(predictions)} predictions for {len(records)} records"
        )
    pairs = [
        (p, r) for p, r in zip(predictions, records) if split is None or r.split == split
    ]
    if not pairs:
        raise ValueError(f"no records in split {split!r}")

    strata: dict = {}
    names = stratum_names(manifest.taxonomy) + ["Overall"]
    for name in names:
        if name == "Overall":
            sub = pairs
        else:
            sub = [pr for pr in pairs if _stratum_key(manifest.taxonomy, pr[1]) == name]
        if len(sub) < MIN_STRATUM:
            strata[name] = {"n": len(sub), "computable": False}
            continue
        scores = np.array([p.score for p, _ in sub])
        mos = np.array([r.pseudo_mos for _, r in sub])
        strata[name] = _quality_metrics(scores, mos)

    acc = {}
    for task, key in (("range", "range_label"), ("type", "type_label"), ("degree", "degree_label")):
        have = [p for p, _ in pairs if task in p.labels]
        if len(have) != len(pairs):
            acc[task] = None
            continue
        acc[task] = accuracy(
            [p.labels[task] for p, _ in pairs], [getattr(r, key) for _, r in pairs]
        )

    report = {
        "format": REPORT_FORMAT,
        "version": REPORT_VERSION,
        "taxonomy": manifest.taxonomy,
        "score_range": list(manifest.score_range),
        "split": split,
        "n": len(pairs),
        "strata": strata,
        "accuracy": acc,
    }
    if selection_histogram is not None:
        report["selection_histogram"] = selection_histogram
    return report


REPORT_SCHEMA = {
    "type": "object",
    "required": ["format", "version", "taxonomy", "score_range", "split", "n", "strata", "accuracy"],
    "properties": {
        "format": {"const": REPORT_FORMAT},
        "version": {"type": "integer"},
        "taxonomy": {"enum": [JUFE_STYLE, OIQ_STYLE]},
        "score_range": {
            "type": "array",
            "items": {"type": "number"},
            "minItems": 2,
            "maxItems": 2,
        },
        "split": {"type": ["string", "null"]},
        "n": {"type": "integer", "minimum": 1},
        "strata": {
            "type": "object",
            "minProperties": 2,
            "additionalProperties": {
                "type": "object",
                "required": ["n", "computable"],
                "properties": {
                    "n": {"type": "integer", "minimum": 0},
                    "computable": {"type": "boolean"},
                    "plcc": {"type": "number"},
                    "srcc": {"type": "number"},
                    "rmse": {"type": "number", "minimum": 0},
                    "logistic": {"type": "object"},
                },
            },
        },
        "accuracy": {
            "type": "object",
            "additionalProperties": {"type": ["number", "null"]},
        },
        "selection_histogram": {"type": "object"},
    },
}


def validate_report(report: dict) -> None:
    """Raises jsonschema.ValidationError on a malformed report, plus a few
    semantic checks the schema cannot express."""
    import jsonschema

    jsonschema.validate(report, REPORT_SCHEMA)
    if "Overall" not in report["strata"]:
        raise ValueError("report is missing the Overall stratum")
    for name, s in report["strata"].items():
        if s["computable"]:
            for key in ("plcc", "srcc", "rmse"):
                if key not in s:
                    raise ValueError(f"stratum {name} computable but missing {key}")
            if s["n"] < MIN_STRATUM:
                raise ValueError(f"stratum {name} marked computable with n={s['n']}")
