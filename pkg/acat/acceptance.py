"""
Measured acceptance battery.

Runs on the artifacts of a completed pipeline and reports measured values
next to their targets in ``reports/acceptance.json``. Nothing here trains;
failed targets are reported, not raised.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Optional

import numpy as np

from config import ACCEPTANCE_REPORT_FILE, EVAL_SUMMARY_FILE, REPORTS_DIR
from counterfactual import latent_shift, min_probability_curve, optimize_counterfactual, shift_grid
from pipeline import ABLATION_SUMMARY_FILE, AcatPipeline
from synth_data import LesionClass

logger = logging.getLogger(__name__)

CHANCE_LEVEL = 1.0 / 6.0
DESCENT_TARGET = 1.0
LOW_PROBABILITY = 0.2
LOW_PROBABILITY_TARGET = 0.7
REGULARIZATION_TARGET = 1.0
PROGRESSIVE_TARGET = 0.8
POINTING_TARGET = 0.5


def _rate(flags: List[bool]) -> Optional[float]:
    return float(np.mean(flags)) if flags else None


def _check(rate: Optional[float], target: float, **extra) -> Dict[str, Any]:
    return dict(extra, rate=rate, target=target, passed=rate is not None and rate >= target)


def measure_counterfactuals(pipeline: AcatPipeline, run: int = 0, max_samples: int = 50) -> Dict[str, Any]:
    """
    Descent, regularization and progressive-versus-one-step properties on lesion samples.

    Args:
        pipeline: Pipeline whose baseline and autoencoder for ``run`` are trained
        run: Run index
        max_samples: Number of lesion samples (lowest indices first)
    """
    cfg = pipeline.config
    dataset = pipeline.dataset
    f = pipeline.baseline(run).freeze()
    ae = pipeline.autoencoder(run).freeze()
    search = cfg.counterfactual
    free = search.model_copy(update={"alpha": 0.0})
    grid = shift_grid(cfg.attribution.latent_shift_start, cfg.attribution.latent_shift_count, "both")
    chosen = [s.index for s in dataset.samples if s.label != LesionClass.NONE][:max_samples]

    def measure(index: int) -> Dict[str, Any]:
        volume = dataset.samples[index].volume
        trace = optimize_counterfactual(f, ae, volume, search)
        unregularized = optimize_counterfactual(f, ae, volume, free)
        shifted = latent_shift(f, ae, volume, grid, target_class=search.target_class)
        source = shifted.source_class
        progressive_min, _ = min_probability_curve(trace, source)
        one_step_min, _ = min_probability_curve(shifted)
        objectives = trace.objectives()
        return {
            "index": index,
            "source_class": source,
            "descent": bool(objectives[-1] <= objectives[0]),
            "progressive_min": progressive_min,
            "one_step_min": one_step_min,
            "displacement": trace.latent_displacement(),
            "unregularized_displacement": unregularized.latent_displacement(),
        }

    with ThreadPoolExecutor(max_workers=pipeline.threads) as pool:
        samples = list(pool.map(measure, chosen))
    # Probability targets exclude samples already predicted as the target class.
    eligible = [s for s in samples if s["source_class"] != search.target_class]
    return {
        "run": run,
        "n_samples": len(samples),
        "n_eligible": len(eligible),
        "counterfactual_descent": _check(_rate([s["descent"] for s in samples]), DESCENT_TARGET),
        "source_probability_below_0_2": _check(
            _rate([s["progressive_min"] < LOW_PROBABILITY for s in eligible]), LOW_PROBABILITY_TARGET,
            steps=search.steps),
        "regularization_bound": _check(
            _rate([s["displacement"] <= s["unregularized_displacement"] + 1e-6 for s in samples]),
            REGULARIZATION_TARGET, alpha=search.alpha),
        "progressive_vs_one_step": _check(
            _rate([s["progressive_min"] <= s["one_step_min"] for s in eligible]), PROGRESSIVE_TARGET),
        "samples": samples,
    }


def _summary_values(summary: Dict[str, Any], metric: str) -> Dict[str, float]:
    return {report["label"]: report["value"] for report in summary["reports"] if report["metric"] == metric}


def _ordered(values: Dict[str, float], order: List[str]) -> Optional[bool]:
    present = [values[m] for m in order if m in values]
    if len(present) < 2:
        return None
    return all(a >= b for a, b in zip(present, present[1:]))


def check_reports(pipeline: AcatPipeline) -> Dict[str, Any]:
    """Direction checks read from the aggregated evaluation (and ablation, when present) reports."""
    store = pipeline.store
    summary = store.load_json(REPORTS_DIR, EVAL_SUMMARY_FILE)
    checks: Dict[str, Any] = {}
    ranking = ["counterfactual", "gradient", "grad_cam"]

    intervals = summary["pointing_game_intervals"]
    pointing = {method: interval["score"] for method, interval in intervals.items()}
    counterfactual = intervals.get("counterfactual")
    checks["pointing_game"] = {
        "intervals": intervals,
        "beats_chance": counterfactual is not None and counterfactual["low"] > CHANCE_LEVEL,
        "meets_target": counterfactual is not None and counterfactual["score"] >= POINTING_TARGET,
        "ordering": _ordered(pointing, ranking),
    }
    dice = _summary_values(summary, "dice")
    checks["dice_ranking"] = {"values": dice, "ordering": _ordered(dice, ranking)}

    accuracy = _summary_values(summary, "test_accuracy")
    checks["accuracy_direction"] = {
        "baseline": accuracy.get("baseline"), "acat": accuracy.get("acat"),
        "passed": "baseline" in accuracy and "acat" in accuracy and accuracy["acat"] >= accuracy["baseline"],
    }
    reduced = _summary_values(summary, "variance_reduced_fraction").get("acat")
    checks["variance_direction"] = {"fraction_of_layers": reduced, "passed": reduced is not None and reduced > 0.5}

    ablation_dir = f"{REPORTS_DIR}/ablation"
    if store.file_exists(ablation_dir, ABLATION_SUMMARY_FILE):
        reports = store.load_json(ablation_dir, ABLATION_SUMMARY_FILE)["reports"]
        by_label = {report["label"]: report for report in reports}
        chain = [by_label[name] for name in ("full", "no_fusion", "no_fusion_late", "no_fusion_late_middle")
                 if name in by_label]
        steps = []
        for before, after in zip(chain, chain[1:]):
            allowance = before["standard_error"] or 0.0
            steps.append(after["value"] <= before["value"] + allowance)
        checks["ablation_direction"] = {"means": [r["value"] for r in chain], "passed": all(steps) if steps else None}
        dropout = [r for r in reports if r["label"].startswith("dropout_p")]
        if dropout and "full" in by_label:
            checks["dropout_control"] = {
                "means": {r["label"]: r["value"] for r in dropout},
                "acat": by_label["full"]["value"],
                "passed": all(r["value"] <= by_label["full"]["value"] for r in dropout),
            }
    return checks


def run_acceptance(pipeline: AcatPipeline, run: int = 0, max_samples: int = 50) -> Dict[str, Any]:
    """Run the pipeline (resuming completed stages), measure, and write the acceptance report."""
    pipeline.run_all()
    report = {"counterfactuals": measure_counterfactuals(pipeline, run, max_samples),
              "reports": check_reports(pipeline)}
    pipeline.store.save_json(REPORTS_DIR, ACCEPTANCE_REPORT_FILE, report)
    cf = report["counterfactuals"]
    logger.info(f"📈 Acceptance: descent {cf['counterfactual_descent']['rate']}, "
                f"p<0.2 {cf['source_probability_below_0_2']['rate']}, "
                f"regularization {cf['regularization_bound']['rate']}, "
                f"progressive {cf['progressive_vs_one_step']['rate']}")
    return report
