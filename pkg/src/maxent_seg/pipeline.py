"""Experiment pipeline: dataset generation, per-strategy training, evaluation
and cross-strategy reporting. The CLI is a thin wrapper around this module."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from maxent_seg import plots
from maxent_seg.data.dataset import SchemaError, load_manifest, load_split, write_dataset
from maxent_seg.data.nifti import NiftiMeta, read_file, write_file
from maxent_seg.data.synthetic import OOD_PRESET, ShiftParams, SynthConfig
from maxent_seg.losses import LossSpec
from maxent_seg.metrics import (
    OUTCOMES,
    STRATA,
    ScanReport,
    breakdown_from_entropies,
    dice,
    ece,
    hausdorff,
    mann_whitney_u,
    mean_foreground_entropy,
    outcome_entropies,
    pearson_r,
    reliability_points,
    stratify_by_lesion_load,
)
from maxent_seg.model import (
    ModelParams,
    TrainConfig,
    lambda_grid_search,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from maxent_seg.volume import ProbMap, Volume, mask_volume_ml, threshold, zscore_normalize

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
STRATEGIES = {"ce": "none", "ce+meall": "meall", "ce+meep": "meep", "ce+kl": "kl"}
PER_SCAN_COLUMNS = (
    "scan_id",
    "domain",
    "dice",
    "hausdorff_mm",
    "mean_foreground_entropy",
    "total_lesion_load_mL",
)
DOMAINS = ("ID", "OOD", "ALL")
TEST_SPLITS = ("test_id", "test_ood")


class UsageError(ValueError):
    pass


def _default_synth() -> dict:
    return {
        "dims": [64, 64, 1],
        "spacing": [2.0, 2.0, 8.0],
        "lesion_count": [2, 8],
        "lesion_radius": [1.5, 9.0],
        "radius_jitter": 0.2,
        "bg_mean": 0.4,
        "fg_mean": 0.55,
        "fg_jitter": 0.03,
        "noise_sigma": 0.03,
        "blur_sigma": 1.0,
    }


def _default_train() -> dict:
    return {"learning_rate": 0.01, "epochs": 30, "batch_size": 8, "init_scale": 1.0}


def _default_grid() -> dict:
    return {"ce+meall": [0.03, 0.1, 0.3], "ce+meep": [1.0, 3.0, 10.0], "ce+kl": [1.0, 3.0, 10.0]}


@dataclass
class ExperimentConfig:
    seed: int = 0
    synth: dict = field(default_factory=_default_synth)
    shift: dict = field(default_factory=OOD_PRESET.to_dict)
    counts: dict = field(default_factory=lambda: {"train": 40, "val": 12, "test": 40})
    train: dict = field(default_factory=_default_train)
    seg_kind: str = "cross_entropy"
    reduction: str = "mean"
    clamp_eps: float = 1e-6
    strategies: list = field(default_factory=lambda: list(STRATEGIES))
    lambda_grid: dict = field(default_factory=_default_grid)
    dice_tolerance: float = 0.01
    normalize: str = "zscore"
    threshold: float = 0.5
    hausdorff_percentile: float = 100.0
    ece_bins: int = 10
    load_thresholds_mL: list = field(default_factory=lambda: [5.0, 15.0])
    max_grid_widenings: int = 2

    def __post_init__(self):
        if len(set(self.strategies)) != len(self.strategies):
            raise UsageError("strategy names must be unique")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise UsageError(f"unknown strategy {s!r}; choose from {sorted(STRATEGIES)}")
        if self.normalize not in ("zscore", "none"):
            raise UsageError("normalize must be 'zscore' or 'none'")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def synth_config(self) -> SynthConfig:
        return SynthConfig(**self.synth, seed=self.seed)

    def shift_params(self) -> ShiftParams:
        return ShiftParams(**self.shift)

    def loss_spec(self, strategy: str, lam: float = 0.0) -> LossSpec:
        if strategy not in STRATEGIES:
            raise UsageError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
        reg = STRATEGIES[strategy]
        return LossSpec(
            seg_kind=self.seg_kind,
            reg_kind=reg,
            lam=0.0 if reg == "none" else float(lam),
            clamp_eps=self.clamp_eps,
            reduction=self.reduction,
        )

    def train_config(self, strategy: str, lam: float = 0.0) -> TrainConfig:
        return TrainConfig(loss=self.loss_spec(strategy, lam), seed=self.seed, **self.train)


def preprocess(v: Volume, normalize: str) -> Volume:
    return zscore_normalize(v) if normalize == "zscore" else v


# ---------------------------------------------------------------- synth


def cmd_synth(cfg: ExperimentConfig, out_dir) -> dict:
    return write_dataset(out_dir, cfg.synth_config(), cfg.shift_params(), cfg.counts)


# ---------------------------------------------------------------- train


@dataclass
class TrainResult:
    strategy: str
    lam: float
    params: ModelParams
    history: object
    train_config: TrainConfig
    grid_rows: list | None = None


def _pairs(dataset_dir, split, normalize, manifest):
    return [(preprocess(img, normalize), lab) for _, img, lab in load_split(dataset_dir, split, manifest)]


def train_strategy(cfg: ExperimentConfig, dataset_dir, strategy: str, lam: float | None = None, grid=None) -> TrainResult:
    """Train one strategy; regularized strategies without ``lam`` get a grid search."""
    if strategy not in STRATEGIES:
        raise UsageError(f"unknown strategy {strategy!r}; choose from {sorted(STRATEGIES)}")
    manifest = load_manifest(dataset_dir)
    train_set = _pairs(dataset_dir, "train", cfg.normalize, manifest)
    val_set = _pairs(dataset_dir, "val", cfg.normalize, manifest)
    if STRATEGIES[strategy] == "none":
        tc = cfg.train_config(strategy)
        params, history = train(train_set, val_set, tc)
        return TrainResult(strategy, 0.0, params, history, tc)
    if lam is not None:
        tc = cfg.train_config(strategy, lam)
        params, history = train(train_set, val_set, tc)
        return TrainResult(strategy, float(lam), params, history, tc)
    grid = list(grid if grid is not None else cfg.lambda_grid[strategy])
    base = cfg.train_config(strategy, grid[0])
    res = lambda_grid_search(train_set, val_set, base, grid, cfg.dice_tolerance)
    params, history = res.models[res.best_lam]
    log.info("%s: selected lambda %g from %s", strategy, res.best_lam, grid)
    return TrainResult(strategy, res.best_lam, params, history, cfg.train_config(strategy, res.best_lam), res.rows)


def write_train_outputs(result: TrainResult, cfg: ExperimentConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "strategy": result.strategy,
        "lambda": result.lam,
        "seed": cfg.seed,
        "config_hash": cfg.config_hash(),
        "normalize": cfg.normalize,
    }
    (out / "checkpoint.json").write_bytes(save_checkpoint(result.params, result.train_config, extra))
    (out / "history.csv").write_text(result.history.to_csv())
    if result.grid_rows is not None:
        doc = {"schema_version": REPORT_SCHEMA, "strategy": result.strategy, "selected_lambda": result.lam,
               "rows": result.grid_rows}
        (out / "grid_search.json").write_text(_dumps(doc))


def read_checkpoint(path):
    blob = Path(path).read_bytes()
    params, tc = load_checkpoint(blob)
    extra = json.loads(blob).get("extra", {})
    return params, tc, extra


# ---------------------------------------------------------------- predict


def predict_dataset(params: ModelParams, dataset_dir, normalize: str) -> dict[str, ProbMap]:
    manifest = load_manifest(dataset_dir)
    out = {}
    for split in TEST_SPLITS:
        items = load_split(dataset_dir, split, manifest)
        probs = predict(params, [preprocess(img, normalize) for _, img, _ in items])
        for (s, _, _), p in zip(items, probs):
            out[s.sample_id] = p
    return out


def write_predictions(probs: dict[str, ProbMap], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = NiftiMeta.for_dtype("float64", descrip="maxent-seg foreground probability")
    for sid, p in sorted(probs.items()):
        write_file(out / f"{sid}.nii.gz", p, meta)


def read_predictions(pred_dir, dataset_dir) -> dict[str, ProbMap]:
    manifest = load_manifest(dataset_dir)
    out = {}
    for rec in manifest["samples"]:
        if rec["split"] in TEST_SPLITS:
            p, _ = read_file(Path(pred_dir) / f"{rec['sample_id']}.nii.gz", "prob")
            out[rec["sample_id"]] = p
    return out


# ---------------------------------------------------------------- eval


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return math.fsum(xs) / len(xs) if xs else None


def _median(xs):
    xs = [x for x in xs if x is not None]
    return float(np.median(xs)) if xs else None


def _pearson_or_none(xs, ys):
    pairs = [(x, y) for x, y in zip(xs, ys) if x is not None and y is not None]
    if len(pairs) < 2:
        return None
    try:
        return pearson_r([p[0] for p in pairs], [p[1] for p in pairs])
    except ValueError:
        return None


def scan_level_summary(reports: list[ScanReport], load_thresholds=(5.0, 15.0)) -> dict:
    """Every aggregate that is a function of the per-scan table alone."""
    by_domain = {"ID": [r for r in reports if r.domain == "ID"], "OOD": [r for r in reports if r.domain == "OOD"],
                 "ALL": list(reports)}
    out = {}
    for dom, rs in by_domain.items():
        ent = [r.mean_foreground_entropy for r in rs]
        dic = [r.dice for r in rs]
        strata = stratify_by_lesion_load(rs, tuple(load_thresholds))
        out[dom] = {
            "n_scans": len(rs),
            "dice_mean": _mean(dic),
            "dice_median": _median(dic),
            "hausdorff_mean": _mean([r.hausdorff_mm for r in rs]),
            "hausdorff_median": _median([r.hausdorff_mm for r in rs]),
            "n_hausdorff_undefined": sum(r.hausdorff_mm is None for r in rs),
            "mean_fg_entropy_mean": _mean(ent),
            "mean_fg_entropy_median": _median(ent),
            "n_entropy_undefined": sum(e is None for e in ent),
            "pearson_entropy_dice": _pearson_or_none(ent, dic),
            "lesion_strata": {
                k: {
                    "n_scans": len(v),
                    "median_fg_entropy": _median([r.mean_foreground_entropy for r in v]),
                    "median_dice": _median([r.dice for r in v]),
                }
                for k, v in strata.items()
            },
        }
    id_e = [r.mean_foreground_entropy for r in by_domain["ID"] if r.mean_foreground_entropy is not None]
    ood_e = [r.mean_foreground_entropy for r in by_domain["OOD"] if r.mean_foreground_entropy is not None]
    if id_e and ood_e:
        mw = mann_whitney_u(ood_e, id_e)
        out["mann_whitney_entropy_ood_vs_id"] = {"U": mw.U, "p_value": mw.p_value, "method": mw.method,
                                                  "n_ood": len(ood_e), "n_id": len(id_e)}
    else:
        out["mann_whitney_entropy_ood_vs_id"] = None
    return out


def evaluate(probs: dict[str, ProbMap], dataset_dir, cfg: ExperimentConfig, info: dict | None = None):
    """Per-scan reports plus the aggregate document for one model."""
    manifest = load_manifest(dataset_dir)
    reports = []
    voxels = {d: {"p": [], "y": [], "outcomes": {k: [] for k in OUTCOMES}} for d in DOMAINS}
    for split in TEST_SPLITS:
        for s, _, gt in load_split(dataset_dir, split, manifest):
            if s.sample_id not in probs:
                log.warning("no prediction for %s; skipped", s.sample_id)
                continue
            p = probs[s.sample_id]
            if p.dims != gt.dims:
                log.warning("dimension mismatch for %s (%s vs %s); skipped", s.sample_id, p.dims, gt.dims)
                continue
            pred = threshold(p, cfg.threshold)
            hd = None
            if pred.count and gt.count:
                hd = hausdorff(gt, pred, cfg.hausdorff_percentile)
            reports.append(ScanReport(
                scan_id=s.sample_id,
                dice=dice(gt, pred),
                hausdorff_mm=hd,
                mean_foreground_entropy=mean_foreground_entropy(p, cfg.threshold),
                total_lesion_load_mL=mask_volume_ml(gt),
                domain=s.domain,
            ))
            groups = outcome_entropies(p, gt, cfg.threshold)
            for dom in (s.domain, "ALL"):
                voxels[dom]["p"].append(p.flat())
                voxels[dom]["y"].append(gt.flat())
                for k in OUTCOMES:
                    voxels[dom]["outcomes"][k].append(groups[k])
    reports.sort(key=lambda r: r.scan_id)
    summary = scan_level_summary(reports, cfg.load_thresholds_mL)
    calibration = {}
    outcomes = {}
    for dom in DOMAINS:
        if not voxels[dom]["p"]:
            calibration[dom] = None
            outcomes[dom] = None
            continue
        p = np.concatenate(voxels[dom]["p"])
        y = np.concatenate(voxels[dom]["y"])
        calibration[dom] = {conv: ece(p, y, cfg.ece_bins, conv).to_dict() for conv in ("positive_prob", "max_prob")}
        outcomes[dom] = breakdown_from_entropies(voxels[dom]["outcomes"]).to_dict()
    aggregate = {
        "schema_version": REPORT_SCHEMA,
        **(info or {}),
        "scan_level": summary,
        "calibration": calibration,
        "outcomes": outcomes,
    }
    return reports, aggregate


def per_scan_csv(reports: list[ScanReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PER_SCAN_COLUMNS)
    for r in reports:
        w.writerow([_cell(getattr(r, c)) for c in PER_SCAN_COLUMNS])
    return buf.getvalue()


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_per_scan_csv(text: str) -> list[ScanReport]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if rows and tuple(rows[0].keys()) != PER_SCAN_COLUMNS:
        raise ValueError("per-scan CSV columns do not match the frozen schema")

    def num(s):
        return None if s == "" else float(s)

    return [
        ScanReport(r["scan_id"], float(r["dice"]), num(r["hausdorff_mm"]), num(r["mean_foreground_entropy"]),
                   float(r["total_lesion_load_mL"]), r["domain"])
        for r in rows
    ]


def reliability_csv(table: dict) -> str:
    lines = ["bin_lower,bin_upper,count,mean_confidence,fraction_positive"]
    for b in table["bins"]:
        if b["count"]:
            lines.append(f"{b['lower']!r},{b['upper']!r},{b['count']},{b['mean_confidence']!r},{b['fraction_positive']!r}")
    return "\n".join(lines) + "\n"


def write_eval_outputs(reports, aggregate, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "per_scan.csv").write_text(per_scan_csv(reports))
    (out / "aggregate.json").write_text(_dumps(aggregate))
    series = {}
    for dom in ("ID", "OOD"):
        cal = aggregate["calibration"].get(dom)
        if cal is None:
            continue
        table = cal["positive_prob"]
        (out / f"reliability_{dom.lower()}.csv").write_text(reliability_csv(table))
        series[f"{dom} (ECE {table['ece']:.4f})"] = [
            (b["mean_confidence"], b["fraction_positive"]) for b in table["bins"] if b["count"]
        ]
    title = f"Reliability: {aggregate.get('strategy', 'model')}"
    (out / "reliability.svg").write_text(plots.reliability_svg(series, title))


def _dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False) + "\n"


# ---------------------------------------------------------------- report


def load_eval(eval_dir) -> tuple[dict, list[ScanReport]]:
    d = Path(eval_dir)
    agg = json.loads((d / "aggregate.json").read_text())
    reports = read_per_scan_csv((d / "per_scan.csv").read_text())
    return agg, reports


def build_report(evals: list[tuple[dict, list[ScanReport]]]) -> dict:
    """Cross-strategy comparison, outcome-entropy and lesion-strata tables."""
    if not evals:
        raise UsageError("report needs at least one evaluation")
    versions = {agg.get("schema_version") for agg, _ in evals}
    if versions != {REPORT_SCHEMA}:
        raise SchemaError(f"schema version mismatch between inputs: {sorted(map(str, versions))}")
    comparison, outcome_rows, strata_rows, tests = [], [], [], []
    for agg, _ in evals:
        name = agg.get("strategy", "model")
        lam = agg.get("lambda")
        sl = agg["scan_level"]
        for dom in DOMAINS:
            s = sl[dom]
            cal = agg["calibration"].get(dom)
            comparison.append({
                "strategy": name,
                "lambda": lam,
                "domain": dom,
                "n_scans": s["n_scans"],
                "dice_mean": s["dice_mean"],
                "hausdorff_mean": s["hausdorff_mean"],
                "ece_positive_prob": None if cal is None else cal["positive_prob"]["ece"],
                "ece_max_prob": None if cal is None else cal["max_prob"]["ece"],
                "mean_fg_entropy_mean": s["mean_fg_entropy_mean"],
                "pearson_entropy_dice": s["pearson_entropy_dice"],
            })
            oc = agg["outcomes"].get(dom) or {}
            for k in OUTCOMES:
                st = oc.get(k, {})
                outcome_rows.append({"strategy": name, "domain": dom, "outcome": k, "count": st.get("count", 0),
                                     "median_entropy": st.get("median"), "q1": st.get("q1"), "q3": st.get("q3")})
            for k in STRATA:
                st = s["lesion_strata"][k]
                strata_rows.append({"strategy": name, "domain": dom, "stratum": k, "n_scans": st["n_scans"],
                                    "median_fg_entropy": st["median_fg_entropy"], "median_dice": st["median_dice"]})
        mw = sl.get("mann_whitney_entropy_ood_vs_id")
        tests.append({"strategy": name, "U": None if mw is None else mw["U"],
                      "p_value": None if mw is None else mw["p_value"]})
    return {
        "schema_version": REPORT_SCHEMA,
        "comparison": comparison,
        "outcomes": outcome_rows,
        "lesion_strata": strata_rows,
        "mann_whitney": tests,
    }


def _table_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = list(rows[0])
    w.writerow(cols)
    for r in rows:
        w.writerow([_cell(r[c]) for c in cols])
    return buf.getvalue()


def write_report(report: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(_dumps(report))
    (out / "comparison.csv").write_text(_table_csv(report["comparison"]))
    (out / "outcomes.csv").write_text(_table_csv(report["outcomes"]))
    (out / "lesion_strata.csv").write_text(_table_csv(report["lesion_strata"]))


# ---------------------------------------------------------------- full run


def ood_ece(aggregate: dict) -> float:
    return aggregate["calibration"]["OOD"]["positive_prob"]["ece"]


def _widen(grid: list[float]) -> list[float]:
    return [grid[0] / 3.0, *grid, grid[-1] * 3.0]


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Synthesize, train every strategy, evaluate and report under ``out_dir``.

    Grid-search widening: when no regularized strategy beats plain CE on OOD
    ECE, every regularized grid is extended by one step of factor 3 at each
    end and those strategies are retrained, at most ``max_grid_widenings``
    times.
    """
    out = Path(out_dir)
    data_dir = out / "dataset"
    cmd_synth(cfg, data_dir)
    grids = {s: list(cfg.lambda_grid.get(s, [])) for s in cfg.strategies}
    aggregates, validation = {}, {}
    widenings = 0
    pending = list(cfg.strategies)
    while True:
        for strategy in pending:
            result = train_strategy(cfg, data_dir, strategy, grid=grids[strategy] or None)
            run_dir = out / "runs" / strategy
            write_train_outputs(result, cfg, run_dir)
            validation[strategy] = {"strategy": strategy, "lambda": result.lam,
                                    "val_dice": result.history.records[-1].val_dice}
            probs = predict_dataset(result.params, data_dir, cfg.normalize)
            info = {"strategy": strategy, "lambda": result.lam, "seed": cfg.seed, "config_hash": cfg.config_hash()}
            reports, agg = evaluate(probs, data_dir, cfg, info)
            write_eval_outputs(reports, agg, run_dir / "eval")
            aggregates[strategy] = agg
        regs = [s for s in cfg.strategies if STRATEGIES[s] != "none"]
        if "ce" not in aggregates or not regs or widenings >= cfg.max_grid_widenings:
            break
        if any(ood_ece(aggregates[s]) < ood_ece(aggregates["ce"]) for s in regs):
            break
        widenings += 1
        for s in regs:
            grids[s] = _widen(grids[s])
        pending = regs
        log.info("no regularized strategy beats CE on OOD ECE; widening grids (%d)", widenings)
    evals = [load_eval(out / "runs" / s / "eval") for s in cfg.strategies]
    report = build_report(evals)
    report["validation"] = [validation[s] for s in cfg.strategies]
    report["grid_widenings"] = widenings
    report["lambda_grids"] = grids
    report["config_hash"] = cfg.config_hash()
    report["seed"] = cfg.seed
    write_report(report, out / "report")
    return report
