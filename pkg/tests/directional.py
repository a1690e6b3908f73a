"""Directional end-to-end checks evaluated on a finished ``run`` report."""

from __future__ import annotations

REGULARIZED = ("ce+meep", "ce+kl")


def _rows(report, table, **match):
    return [r for r in report[table] if all(r[k] == v for k, v in match.items())]


def _one(report, table, **match):
    (row,) = _rows(report, table, **match)
    return row


def check_validation_dice(report, bound=0.80):
    vals = {r["strategy"]: r["val_dice"] for r in report["validation"]}
    return all(v is not None and v >= bound for v in vals.values()), vals


def check_ood_entropy(report, alpha=0.05):
    detail = {}
    ok = True
    for s in REGULARIZED:
        ood = _one(report, "comparison", strategy=s, domain="OOD")["mean_fg_entropy_mean"]
        idd = _one(report, "comparison", strategy=s, domain="ID")["mean_fg_entropy_mean"]
        p = _one(report, "mann_whitney", strategy=s)["p_value"]
        detail[s] = {"ood": ood, "id": idd, "p": p}
        ok &= ood > idd and p is not None and p < alpha
    return ok, detail


def check_error_entropy(report, domain="ALL"):
    detail = {}
    ok = True
    for outcome in ("FP", "FN"):
        base = _one(report, "outcomes", strategy="ce", domain=domain, outcome=outcome)["median_entropy"]
        for s in REGULARIZED:
            m = _one(report, "outcomes", strategy=s, domain=domain, outcome=outcome)["median_entropy"]
            detail[f"{s}/{outcome}"] = (m, base)
            ok &= m is not None and base is not None and m > base
    return ok, detail


def check_pearson(report, bound=-0.3):
    rs = {r["strategy"]: r["pearson_entropy_dice"] for r in _rows(report, "comparison", domain="ALL")}
    return all(r is not None and r <= bound for r in rs.values()), rs


def check_lesion_strata(report, domain="ALL"):
    detail = {}
    ok = True
    for s in {r["strategy"] for r in report["comparison"]}:
        small = _one(report, "lesion_strata", strategy=s, domain=domain, stratum="small")["median_fg_entropy"]
        large = _one(report, "lesion_strata", strategy=s, domain=domain, stratum="large")["median_fg_entropy"]
        detail[s] = (small, large)
        ok &= small is not None and large is not None and small > large
    return ok, detail


def check_ood_ece(report, key="ece_positive_prob"):
    ece = {r["strategy"]: r[key] for r in _rows(report, "comparison", domain="OOD")}
    regs = [s for s in ece if s != "ce"]
    return any(ece[s] < ece["ce"] for s in regs), ece


CHECKS = {
    "6a": check_validation_dice,
    "6b": check_ood_entropy,
    "6c": check_error_entropy,
    "6d": check_pearson,
    "6e": check_lesion_strata,
    "6f": check_ood_ece,
}
