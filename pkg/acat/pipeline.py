"""
Resumable ACAT pipeline: data, baseline, autoencoder, saliency maps, ACAT, evaluation.

Every stage writes its outputs and a ``stage.json`` record into its own
directory under the run root. A stage is skipped when the key in its record
(SHA-256 over the stage's config subsection, the checksums of its inputs,
the seed and the pipeline version) is unchanged and every recorded output is
still present with its recorded checksum. A stage that executes forces every
later stage reading its outputs to execute as well.

Run root layout::

    config.json
    data/                        dataset archive
    run-K/baseline/              checkpoint + training_log.csv
    run-K/autoencoder/
    run-K/saliency/<method>/     maps (+ traces/ for counterfactuals)
    run-K/acat/
    run-K/reports/               per-run metrics and confusion matrices
    reports/                     eval_report.csv, eval_summary.json
    reports/ablation/
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path as FilePath
from typing import Any, Callable, Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

# Local imports - Configuration
from config import (
    ABLATION_REPORT_FILE,
    DATA_DIR,
    DEFAULT_OUTPUT_DIR,
    EVAL_REPORT_FILE,
    EVAL_SUMMARY_FILE,
    MANIFEST_FILE,
    PIPELINE_VERSION,
    REPORTS_DIR,
    RUN_CONFIG_FILE,
    STAGE_RECORD_FILE,
    TRAINING_LOG_FILE,
    WEIGHTS_FILE,
)
from errors import RunConfigError, StageError

# Local imports - Models
from models import RunConfig, StageRecord, TrainingLog
from models.config_models import SALIENCY_METHODS

# Local imports - Pipeline modules
from artifact_store import ArtifactStore
from attention import build_acat_model, load_acat_model
from counterfactual import (
    SaliencyMap,
    latent_shift_map,
    norec_config,
    saliency_from_counterfactuals,
    shift_grid,
)
from evaluation import (
    AcatExperiment,
    binomial_interval,
    classification_metrics,
    confusion_frame,
    dropout_control,
    iou_dice,
    pointing_hits,
    predict_probabilities,
    preactivation_variance,
    reports_to_frame,
    run_ablation_suite,
    saliency_method_suite,
    summarize,
    write_csv,
)
from nets import build_autoencoder, classifier_from_config, load_model, train_model
from saliency_baselines import attribution_map
from saliency_io import (
    load_saliency_directory,
    read_saliency_map,
    scan_map_files,
    write_map_manifest,
    write_saliency_map,
)
from serialization import save_checkpoint
from synth_data import LesionClass, SynthDataset, generate_dataset, load_dataset_archive, split_indices, write_dataset_archive
from utils.file_utils import config_hash
from utils.seeding import derive_run_seeds, stage_seed

logger = logging.getLogger(__name__)

AUTOENCODER_METHODS = ("counterfactual", "norec", "latent_shift")
METRICS_FILE = "metrics.json"
VARIANCE_FILE = "preactivation_variance.csv"
ABLATION_SUMMARY_FILE = "ablation_summary.json"


def load_run_config(path: Optional[str] = None, seed: Optional[int] = None,
                    output_dir: Optional[str] = None) -> RunConfig:
    """
    Load and validate a run config.

    Args:
        path: JSON config file; the built-in defaults when omitted
        seed: Overrides the master seed and the dataset seed
        output_dir: Overrides the output directory

    Returns:
        Validated RunConfig

    Raises:
        RunConfigError: On unreadable JSON or schema violations (unknown keys included)
    """
    try:
        payload: Dict[str, Any] = {}
        if path:
            with open(path, "r", encoding="utf-8") as handle:
                payload = json.load(handle)
        config = RunConfig.model_validate(payload)
    except FileNotFoundError:
        raise
    except (ValidationError, json.JSONDecodeError) as e:
        raise RunConfigError(f"invalid run config {path or '<defaults>'}: {e}") from e
    if seed is not None:
        config = config.model_copy(update={
            "seed": seed,
            "dataset": config.dataset.model_copy(update={"seed": seed}),
        })
    if output_dir is not None:
        config = config.model_copy(update={"output_dir": output_dir})
    return config


def _section(**parts) -> Dict[str, Any]:
    return {name: part.model_dump(mode="json") if isinstance(part, BaseModel) else part
            for name, part in parts.items()}


def training_log_frame(log: TrainingLog) -> pd.DataFrame:
    return pd.DataFrame([record.model_dump() for record in log.epochs], columns=["epoch", "loss", "accuracy"])


def compute_saliency(method: str, f, ae, volume: np.ndarray, config: RunConfig) -> Tuple[SaliencyMap, list]:
    """
    One saliency map of ``volume`` for ``f`` by any supported method.

    Returns:
        (map, counterfactual traces; empty for methods without a search)
    """
    cf, attribution = config.counterfactual, config.attribution
    if method == "counterfactual":
        return saliency_from_counterfactuals(f, ae, volume, cf)
    if method == "norec":
        return saliency_from_counterfactuals(f, ae, volume, norec_config(cf, attribution.norec_step_size),
                                             method="norec")
    if method == "latent_shift":
        grid = shift_grid(attribution.latent_shift_start, attribution.latent_shift_count,
                          attribution.latent_shift_sign)
        saliency, _ = latent_shift_map(f, ae, volume, grid, target_class=cf.target_class)
        return saliency, []
    return attribution_map(f, volume, attribution.model_copy(update={"method": method})), []


def _mean_per_class(breakdowns: Sequence[Dict[str, Optional[float]]]) -> Dict[str, Optional[float]]:
    keys = sorted({key for breakdown in breakdowns for key in breakdown})
    merged = {}
    for key in keys:
        defined = [b[key] for b in breakdowns if b.get(key) is not None]
        merged[key] = float(np.mean(defined)) if defined else None
    return merged


class AcatPipeline:
    """
    Runs the stages of one RunConfig against one output directory.

    Args:
        config: Validated run configuration
        output_dir: Run root; defaults to ``config.output_dir``, then ``DEFAULT_OUTPUT_DIR``
        threads: Worker threads for per-sample work
        force: Re-execute stages even when their records are current
    """

    def __init__(self, config: RunConfig, output_dir: Optional[str] = None, threads: Optional[int] = None,
                 force: bool = False):
        self.config = config
        self.store = ArtifactStore(output_dir or config.output_dir or DEFAULT_OUTPUT_DIR)
        self.threads = threads or config.threads
        self.force = force
        self.executed: Set[str] = set()
        self.run_seeds = derive_run_seeds(config.seed, config.n_runs)
        self._dataset: Optional[SynthDataset] = None
        self.store.save_json("", RUN_CONFIG_FILE, self.config_payload())

    def config_payload(self) -> Dict[str, Any]:
        """The config without location and thread settings, which never change results."""
        return self.config.model_dump(mode="json", exclude={"output_dir", "threads"})

    # ---- directories -------------------------------------------------------

    @staticmethod
    def run_dir(run: int, name: str) -> str:
        return f"run-{run}/{name}"

    def saliency_dir(self, run: int, method: str, source: str = "baseline") -> str:
        suffix = "" if source == "baseline" else f"-{source}"
        return self.run_dir(run, f"saliency/{method}{suffix}")

    # ---- stage bookkeeping -------------------------------------------------

    def stage_record(self, directory: str) -> Optional[StageRecord]:
        if not self.store.file_exists(directory, STAGE_RECORD_FILE):
            return None
        return StageRecord.model_validate(self.store.load_json(directory, STAGE_RECORD_FILE))

    def _input_checksums(self, stage: str, upstream: Sequence[str]) -> Dict[str, str]:
        checksums = {}
        for directory in upstream:
            record = self.stage_record(directory)
            if record is None:
                raise StageError(f"{stage}: missing input {self.store.get_file_path(directory, STAGE_RECORD_FILE)} "
                                 f"(run the stage that produces {directory} first)")
            for name, digest in record.outputs.items():
                checksums[f"{directory}/{name}"] = digest
        return checksums

    def _is_current(self, directory: str, key: str) -> bool:
        record = self.stage_record(directory)
        if record is None or record.key != key:
            return False
        for name, digest in record.outputs.items():
            if not self.store.file_exists(directory, name) or self.store.checksum(directory, name) != digest:
                return False
        return True

    def _run_stage(self, stage: str, directory: str, section: Dict[str, Any], upstream: Sequence[str],
                   seed: Optional[int], action: Callable[[str], List[str]]) -> StageRecord:
        inputs = self._input_checksums(stage, upstream)
        section_hash = config_hash(section)
        key = config_hash({"stage": stage, "config": section_hash, "inputs": inputs,
                           "seed": seed, "version": PIPELINE_VERSION})
        upstream_rerun = any(directory_ in self.executed for directory_ in upstream)
        if not self.force and not upstream_rerun and self._is_current(directory, key):
            logger.info(f"⏭️ {stage}: {directory} is up to date, skipping")
            return self.stage_record(directory)

        logger.info(f"🚀 {stage}: running into {directory}")
        self.store.delete_file(directory, STAGE_RECORD_FILE)
        try:
            outputs = action(directory)
        except StageError:
            raise
        except Exception as e:
            logger.error(f"Stage {stage} failed: {str(e)}")
            raise StageError(f"stage '{stage}' failed: {e}") from e

        record = StageRecord(
            stage=stage, key=key, seed=seed, version=PIPELINE_VERSION, config_hash=section_hash, inputs=inputs,
            outputs={name: self.store.checksum(directory, name) for name in sorted(set(outputs))},
        )
        self.store.save_json(directory, STAGE_RECORD_FILE, record)
        self.executed.add(directory)
        logger.info(f"✅ {stage}: {len(record.outputs)} outputs recorded in {directory}")
        return record

    # ---- shared inputs -----------------------------------------------------

    @property
    def dataset(self) -> SynthDataset:
        if self._dataset is None:
            self._dataset = load_dataset_archive(self.store, DATA_DIR)
        return self._dataset

    def splits(self, run: int) -> Dict[str, np.ndarray]:
        return split_indices(len(self.dataset), self.run_seeds[run])

    def eval_positives(self, run: int) -> List[int]:
        """Lesion samples of a run's test split, optionally capped."""
        positives = sorted(self.dataset.positives(self.splits(run)["test"]))
        limit = self.config.evaluation.max_eval_positives
        return positives[:limit] if limit else positives

    def training_methods(self) -> List[str]:
        """Methods whose maps are needed for every sample (ACAT training inputs)."""
        methods = [self.config.acat.saliency_method]
        return methods + [m for m in self.config.evaluation.method_ablation if m not in methods]

    def baseline(self, run: int):
        return load_model(self.store, self.run_dir(run, "baseline"))

    def autoencoder(self, run: int):
        return load_model(self.store, self.run_dir(run, "autoencoder"))

    def acat_model(self, run: int):
        return load_acat_model(self.store, self.run_dir(run, "acat"))

    def training_maps(self, run: int, method: Optional[str] = None) -> np.ndarray:
        """Maps for every sample, [N, S, 1, H, W]."""
        method = method or self.config.acat.saliency_method
        directory = self.saliency_dir(run, method)
        maps = load_saliency_directory(self.store, directory)
        missing = [i for i in range(len(self.dataset)) if i not in maps]
        if missing:
            raise StageError(f"{self.store.get_file_path(directory, '')} lacks maps for {len(missing)} samples; "
                             f"regenerate it as a training input")
        return np.stack([maps[i].values for i in range(len(self.dataset))])

    def _save_model(self, model, log: TrainingLog, directory: str, seed: int) -> List[str]:
        save_checkpoint(model, self.store, directory, extra={"seed": seed})
        write_csv(self.store, directory, TRAINING_LOG_FILE, training_log_frame(log))
        return [MANIFEST_FILE, WEIGHTS_FILE, TRAINING_LOG_FILE]

    # ---- stages ------------------------------------------------------------

    def gen_data(self) -> StageRecord:
        spec = self.config.dataset

        def action(directory: str) -> List[str]:
            self._dataset = generate_dataset(spec, self.threads)
            return write_dataset_archive(self._dataset, self.store, directory)

        return self._run_stage("gen-data", DATA_DIR, _section(dataset=spec), [], spec.seed, action)

    def train_baseline(self, run: int) -> StageRecord:
        cfg = self.config
        seed = stage_seed(self.run_seeds[run], "train-baseline")

        def action(directory: str) -> List[str]:
            train = self.dataset.batch(self.splits(run)["train"])
            model = classifier_from_config(cfg.classifier, cfg.dataset.image_size, seed, name="baseline")
            log = train_model(model, train, cfg.baseline_training.epochs, seed, "cross_entropy",
                              cfg.baseline_training, "baseline")
            return self._save_model(model, log, directory, seed)

        return self._run_stage("train-baseline", self.run_dir(run, "baseline"),
                               _section(classifier=cfg.classifier, training=cfg.baseline_training),
                               [DATA_DIR], seed, action)

    def train_autoencoder(self, run: int) -> StageRecord:
        cfg = self.config
        seed = stage_seed(self.run_seeds[run], "train-ae")

        def action(directory: str) -> List[str]:
            train = self.dataset.batch(self.splits(run)["train"])
            model = build_autoencoder(cfg.autoencoder, cfg.dataset.image_size, seed)
            log = train_model(model, train, cfg.autoencoder_training.epochs, seed, "reconstruction",
                              cfg.autoencoder_training, "autoencoder")
            return self._save_model(model, log, directory, seed)

        return self._run_stage("train-ae", self.run_dir(run, "autoencoder"),
                               _section(autoencoder=cfg.autoencoder, training=cfg.autoencoder_training),
                               [DATA_DIR], seed, action)

    def gen_saliency(self, run: int, method: str, source: str = "baseline") -> StageRecord:
        """
        Saliency maps of one method for one run.

        Training-input methods cover every sample; other methods cover the
        test-split lesion samples used by evaluation. ``source="acat"`` explains
        the trained ACAT model (bound to each sample's training map) instead of
        the baseline.
        """
        if method not in SALIENCY_METHODS:
            raise ValueError(f"unknown saliency method '{method}'; expected one of {SALIENCY_METHODS}")
        if source not in ("baseline", "acat"):
            raise ValueError(f"unknown classifier source '{source}'")
        cfg = self.config
        needs_autoencoder = method in AUTOENCODER_METHODS
        scope = "all" if source == "baseline" and method in self.training_methods() else "test_positives"
        upstream = [DATA_DIR, self.run_dir(run, "baseline")]
        if needs_autoencoder:
            upstream.append(self.run_dir(run, "autoencoder"))
        if source == "acat":
            upstream += [self.run_dir(run, "acat"), self.saliency_dir(run, cfg.acat.saliency_method)]
        seed = stage_seed(self.run_seeds[run], f"gen-saliency/{method}")
        stage = "gen-counterfactuals" if method == "counterfactual" else "gen-saliency"

        def action(directory: str) -> List[str]:
            dataset = self.dataset
            indices = list(range(len(dataset))) if scope == "all" else self.eval_positives(run)
            ae = self.autoencoder(run).freeze() if needs_autoencoder else None
            if source == "acat":
                acat = self.acat_model(run).freeze()
                bound_maps = self.training_maps(run)

                def classifier_for(index: int):
                    return acat.bind(bound_maps[index])
            else:
                baseline = self.baseline(run).freeze()

                def classifier_for(index: int):
                    return baseline

            def compute(index: int):
                return compute_saliency(method, classifier_for(index), ae, dataset.samples[index].volume, cfg)

            logger.info(f"🔧 Computing {len(indices)} {method} maps with {self.threads} thread(s)")
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(compute, indices))
            written = []
            for index, (saliency, traces) in zip(indices, results):
                written += write_saliency_map(self.store, directory, index, saliency, traces)
            spec = dataset.spec
            shape = (spec.n_slices, 1, spec.image_size, spec.image_size)
            written.append(write_map_manifest(self.store, directory, method, source, indices, shape))
            return written

        section = _section(method=method, source=source, scope=scope, counterfactual=cfg.counterfactual,
                           attribution=cfg.attribution, max_eval_positives=cfg.evaluation.max_eval_positives)
        return self._run_stage(stage, self.saliency_dir(run, method, source), section, upstream, seed, action)

    def train_acat(self, run: int) -> StageRecord:
        cfg = self.config
        seed = stage_seed(self.run_seeds[run], "train-acat")
        upstream = [DATA_DIR, self.run_dir(run, "baseline"), self.saliency_dir(run, cfg.acat.saliency_method)]

        def action(directory: str) -> List[str]:
            train_indices = self.splits(run)["train"]
            maps = self.training_maps(run)
            train = self.dataset.batch(train_indices).with_saliency(maps[train_indices])
            model = build_acat_model(self.baseline(run), cfg.acat, seed, name="acat")
            log = train_model(model, train, cfg.acat.training.epochs, seed, "cross_entropy", cfg.acat.training, "acat")
            return self._save_model(model, log, directory, seed)

        return self._run_stage("train-acat", self.run_dir(run, "acat"),
                               _section(acat=cfg.acat, classifier=cfg.classifier), upstream, seed, action)

    def evaluate_run(self, run: int) -> StageRecord:
        """Classification, localization and pre-activation variance metrics of one run."""
        cfg = self.config
        methods = cfg.evaluation.saliency_methods
        run_seed = self.run_seeds[run]
        upstream = [DATA_DIR, self.run_dir(run, "baseline"), self.run_dir(run, "acat"),
                    self.saliency_dir(run, cfg.acat.saliency_method)]
        upstream += [self.saliency_dir(run, m) for m in methods if m != cfg.acat.saliency_method]

        def action(directory: str) -> List[str]:
            dataset = self.dataset
            test_indices = self.splits(run)["test"]
            test = dataset.batch(test_indices).with_saliency(self.training_maps(run)[test_indices])
            models = {"baseline": self.baseline(run), "acat": self.acat_model(run)}
            rows: List[Dict[str, Any]] = []
            classification = {}

            logger.info(f"Step 1: Classification metrics on {len(test)} test volumes")
            for label, model in models.items():
                report = classification_metrics(predict_probabilities(model, test), test.labels,
                                                cfg.classifier.num_classes, test.tiers)
                classification[label] = report.model_dump(mode="json")
                write_csv(self.store, directory, f"confusion_{label}.csv", confusion_frame(report))
                per_class = {f"class_{k}": v for k, v in enumerate(report.per_class_accuracy)}
                rows.append({"metric": "test_accuracy", "label": label, "value": report.accuracy,
                             "per_class": per_class})
                for name in ("sensitivity", "specificity"):
                    value = getattr(report, name)
                    if value is None:
                        logger.warning(f"⚠️ {label} {name} is undefined on this test split")
                    else:
                        rows.append({"metric": name, "label": label, "value": value})
                for tier, value in report.per_tier_accuracy.items():
                    if value is not None:
                        rows.append({"metric": f"tier_{tier}_accuracy", "label": label, "value": value})

            logger.info("Step 2: Localization of each saliency method")
            positives = self.eval_positives(run)
            pointing = {}
            for method in methods:
                maps = load_saliency_directory(self.store, self.saliency_dir(run, method))
                chosen = [i for i in positives if i in maps]
                if not chosen:
                    logger.warning(f"⚠️ No test lesion samples with {method} maps in run {run}")
                    continue
                hits = pointing_hits([maps[i] for i in chosen], [dataset.samples[i].regions for i in chosen],
                                     dataset.geometry)
                overlaps = np.array([iou_dice(maps[i], dataset.samples[i].mask) for i in chosen])
                pointing[method] = {"hits": int(sum(hits)), "trials": len(hits)}
                rows += [
                    {"metric": "pointing_game", "label": method, "value": sum(hits) / len(hits)},
                    {"metric": "iou", "label": method, "value": float(overlaps[:, 0].mean())},
                    {"metric": "dice", "label": method, "value": float(overlaps[:, 1].mean())},
                ]

            logger.info(f"Step 3: Pre-activation variance under noise sigma {cfg.evaluation.noise_sigma}")
            noise_seed = stage_seed(run_seed, "preactivation-noise")
            variances = {label: preactivation_variance(model, test, cfg.evaluation.noise_sigma, noise_seed)
                         for label, model in models.items()}
            frame = pd.DataFrame({"layer": list(range(len(variances["baseline"]))),
                                  "baseline": variances["baseline"], "acat": variances["acat"]})
            write_csv(self.store, directory, VARIANCE_FILE, frame)
            reduced = [a <= b for a, b in zip(variances["acat"], variances["baseline"])]
            rows.append({"metric": "variance_reduced_fraction", "label": "acat", "value": float(np.mean(reduced))})

            self.store.save_json(directory, METRICS_FILE, {
                "seed": run_seed, "rows": rows, "pointing": pointing, "classification": classification,
            })
            return [METRICS_FILE, VARIANCE_FILE] + [f"confusion_{label}.csv" for label in models]

        return self._run_stage("evaluate", self.run_dir(run, "reports"), _section(evaluation=cfg.evaluation),
                               upstream, run_seed, action)

    def aggregate(self) -> StageRecord:
        """Mean and standard error of every per-run metric; pooled pointing-game intervals."""
        upstream = [self.run_dir(run, "reports") for run in range(self.config.n_runs)]

        def action(directory: str) -> List[str]:
            grouped: Dict[Tuple[str, str], List[Dict[str, Any]]] = {}
            pooled: Dict[str, List[int]] = {}
            for run_dir in upstream:
                metrics = self.store.load_json(run_dir, METRICS_FILE)
                for row in metrics["rows"]:
                    grouped.setdefault((row["metric"], row["label"]), []).append(dict(row, seed=metrics["seed"]))
                for method, counts in metrics["pointing"].items():
                    totals = pooled.setdefault(method, [0, 0])
                    totals[0] += counts["hits"]
                    totals[1] += counts["trials"]

            run_hash = config_hash(self.config_payload())
            reports = []
            for (metric, label), entries in grouped.items():
                per_class = _mean_per_class([entry.get("per_class", {}) for entry in entries])
                reports.append(summarize(metric, label, [e["value"] for e in entries], [e["seed"] for e in entries],
                                         run_hash, per_class))
            write_csv(self.store, directory, EVAL_REPORT_FILE, reports_to_frame(reports))

            intervals = {}
            for method, (hits, trials) in pooled.items():
                low, high = binomial_interval(hits, trials)
                intervals[method] = {"hits": hits, "trials": trials, "score": hits / trials, "low": low, "high": high}
            self.store.save_json(directory, EVAL_SUMMARY_FILE, {
                "config_hash": run_hash,
                "seeds": self.run_seeds,
                "reports": [report.model_dump(mode="json") for report in reports],
                "pointing_game_intervals": intervals,
            })
            for report in reports:
                if report.metric in ("test_accuracy", "pointing_game"):
                    se = f" ± {report.standard_error:.4f}" if report.standard_error is not None else ""
                    logger.info(f"📈 {report.metric} [{report.label}]: {report.value:.4f}{se}")
            return [EVAL_REPORT_FILE, EVAL_SUMMARY_FILE]

        return self._run_stage("aggregate", REPORTS_DIR, _section(evaluation=self.config.evaluation), upstream,
                               self.config.seed, action)

    def ablate(self) -> StageRecord:
        """Ablation suite, plus dropout control and the saliency-method suite when configured."""
        cfg = self.config
        extra_methods = [m for m in cfg.evaluation.method_ablation if m != cfg.acat.saliency_method]
        upstream = [DATA_DIR]
        for run in range(cfg.n_runs):
            upstream += [self.run_dir(run, "baseline"), self.saliency_dir(run, cfg.acat.saliency_method)]
            upstream += [self.saliency_dir(run, m) for m in extra_methods]

        def action(directory: str) -> List[str]:
            seeds = self.run_seeds
            experiment = AcatExperiment(
                dataset=self.dataset,
                saliency={seed: self.training_maps(run) for run, seed in enumerate(seeds)},
                classifier=cfg.classifier,
                acat=cfg.acat,
                baseline_training=cfg.baseline_training,
                baselines={seed: self.baseline(run) for run, seed in enumerate(seeds)},
            )
            reports = run_ablation_suite(experiment, seeds)
            if cfg.evaluation.run_dropout_control:
                reports += dropout_control(experiment, cfg.evaluation.dropout_p_values, seeds)
            if extra_methods:
                maps_by_method = {m: {seed: self.training_maps(run, m) for run, seed in enumerate(seeds)}
                                  for m in extra_methods}
                reports += saliency_method_suite(experiment, maps_by_method, seeds)
            write_csv(self.store, directory, ABLATION_REPORT_FILE, reports_to_frame(reports))
            self.store.save_json(directory, ABLATION_SUMMARY_FILE,
                                 {"reports": [report.model_dump(mode="json") for report in reports]})
            return [ABLATION_REPORT_FILE, ABLATION_SUMMARY_FILE]

        section = _section(acat=cfg.acat, classifier=cfg.classifier, baseline_training=cfg.baseline_training,
                           evaluation=cfg.evaluation)
        return self._run_stage("ablate", f"{REPORTS_DIR}/ablation", section, upstream, cfg.seed, action)

    # ---- drivers -----------------------------------------------------------

    def run_stages(self, run: int) -> List[StageRecord]:
        """Every per-run stage in dependency order."""
        logger.info(f"Run {run + 1}/{self.config.n_runs} (seed {self.run_seeds[run]})")
        records = [self.train_baseline(run), self.train_autoencoder(run)]
        training_methods = self.training_methods()
        records += [self.gen_saliency(run, method) for method in training_methods]
        records.append(self.train_acat(run))
        records += [self.gen_saliency(run, method) for method in self.config.evaluation.saliency_methods
                    if method not in training_methods]
        records.append(self.evaluate_run(run))
        return records

    def run_all(self) -> List[StageRecord]:
        """The whole pipeline for every run seed, then aggregation and (when configured) ablation."""
        records = [self.gen_data()]
        for run in range(self.config.n_runs):
            records += self.run_stages(run)
        records.append(self.aggregate())
        evaluation = self.config.evaluation
        if evaluation.run_ablation or evaluation.run_dropout_control or evaluation.method_ablation:
            records.append(self.ablate())
        return records

    def evaluate_maps(self, maps_dir: str) -> Dict[str, Any]:
        """
        Pointing game and IoU/Dice of externally supplied ``NNNN.f32`` maps against this run's dataset.

        Raises:
            FileNotFoundError: When the directory does not exist
            StageError: When it holds no maps, or none for a lesion sample
        """
        path = FilePath(maps_dir)
        if not path.is_dir():
            raise FileNotFoundError(f"Saliency map directory not found: {path}")
        external = ArtifactStore(str(path))
        indices = scan_map_files(external, "")
        if not indices:
            raise StageError(f"evaluate: no saliency maps (NNNN.f32) in {path}")
        dataset = self.dataset
        known = [i for i in indices if i < len(dataset)]
        if len(known) < len(indices):
            logger.warning(f"⚠️ Ignoring {len(indices) - len(known)} maps with indices beyond the dataset")
        positives = [i for i in known if dataset.samples[i].label != LesionClass.NONE]
        if not positives:
            raise StageError(f"evaluate: none of the {len(indices)} maps in {path} belongs to a lesion sample")
        spec = dataset.spec
        shape = (spec.n_slices, 1, spec.image_size, spec.image_size)
        maps = {i: read_saliency_map(external, "", i, shape) for i in positives}
        hits = pointing_hits([maps[i] for i in positives], [dataset.samples[i].regions for i in positives],
                             dataset.geometry)
        overlaps = np.array([iou_dice(maps[i], dataset.samples[i].mask) for i in positives])
        low, high = binomial_interval(sum(hits), len(hits))
        summary = {
            "maps": str(path),
            "n_maps": len(positives),
            "pointing_game": sum(hits) / len(hits),
            "pointing_game_interval": [low, high],
            "iou": float(overlaps[:, 0].mean()),
            "dice": float(overlaps[:, 1].mean()),
        }
        self.store.save_json(f"{REPORTS_DIR}/external", f"{path.name}.json", summary)
        logger.info(f"📈 External maps {path.name}: pointing game {summary['pointing_game']:.4f} "
                    f"[{low:.3f}, {high:.3f}], dice {summary['dice']:.4f}")
        return summary
