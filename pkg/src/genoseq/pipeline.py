"""End-to-end orchestration: parse, impute, chunk, train per trait, evaluate.

The stages run in a fixed order and every stage draws its seed from the
master seed by name (see :func:`genoseq.linalg.derive_seed`), so a run is
a pure function of (input files, config) and two runs with the same
config export byte-identical reports.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import mf, rnn
from .data import (GenotypeMatrix, PhenotypeTable, SequenceBatch, SplitIndices,
                   build_sequences, parse_genotype_csv, parse_phenotype_csv,
                   split_dataset)
from .errors import ConfigError, DataError, DivergenceError
from .linalg import derive_seed

log = logging.getLogger("genoseq.pipeline")

REPORT_VERSION = "genoseq-report-v1"
GENOTYPE_MODES = ("imputed", "observed")


@dataclass(frozen=True)
class RnnSettings:
    """Architecture plus trainer knobs for the per-trait models."""

    cell: str = "relu_identity"
    hidden: int = 16
    learning_rate: float = 0.05
    epochs: int = 100
    clip_norm: float | None | str = "default"  # "default" resolves per cell
    batch_mode: str = "full_batch"

    def resolved_clip(self, cell: str | None = None) -> float | None:
        if self.clip_norm == "default":
            return rnn.default_clip_norm(cell or self.cell)
        return self.clip_norm

    def train_config(self, seed: int, cell: str | None = None) -> rnn.TrainConfig:
        return rnn.TrainConfig(learning_rate=self.learning_rate, epochs=self.epochs,
                               clip_norm=self.resolved_clip(cell), seed=seed,
                               batch_mode=self.batch_mode)

    def to_dict(self) -> dict:
        return {"cell": self.cell, "hidden": self.hidden,
                "learning_rate": self.learning_rate, "epochs": self.epochs,
                "clip_norm": self.clip_norm, "batch_mode": self.batch_mode}


@dataclass(frozen=True)
class PipelineConfig:
    mf: mf.MfConfig = field(default_factory=mf.MfConfig)
    rnn: RnnSettings = field(default_factory=RnnSettings)
    chunk_width: int = 20
    normalization: str = "scaled"
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    traits: tuple[int, ...] = (0,)
    success_tolerance: float = 0.1
    genotype_mode: str = "imputed"

    def __post_init__(self):
        if self.chunk_width < 1:
            raise ConfigError(f"chunk_width must be >= 1, got {self.chunk_width}")
        if not self.traits:
            raise ConfigError("at least one trait index is required")
        if self.success_tolerance < 0:
            raise ConfigError(f"success_tolerance must be >= 0, got {self.success_tolerance}")
        if self.genotype_mode not in GENOTYPE_MODES:
            raise ConfigError(f"genotype_mode must be one of {GENOTYPE_MODES}")

    def to_dict(self) -> dict:
        return {"mf": self.mf.to_dict(), "rnn": self.rnn.to_dict(),
                "chunk_width": self.chunk_width, "normalization": self.normalization,
                "ratios": list(self.ratios), "seed": self.seed,
                "traits": list(self.traits),
                "success_tolerance": self.success_tolerance,
                "genotype_mode": self.genotype_mode}


class SplitMetrics(NamedTuple):
    correlation: float | None
    mse: float
    success_pct: float


@dataclass
class TraitResult:
    trait: int
    cell: str
    status: str = "ok"          # or "failed"
    error: str | None = None
    curve: rnn.TrainingCurve | None = None
    metrics: dict = field(default_factory=dict)  # split name -> SplitMetrics
    n_samples: dict = field(default_factory=dict)


@dataclass
class RunReport:
    """Everything one pipeline run produced, recomputable from config+seeds.

    ``stage_seconds`` is informational only and excluded from exports so
    repeated runs serialize byte-identically.
    """

    config: dict
    seeds: dict
    mf_curve: mf.CostCurve | None = None
    mf_accuracy: tuple | None = None
    trait_results: list[TraitResult] = field(default_factory=list)
    split_sizes: dict = field(default_factory=dict)
    excluded_samples: list[int] = field(default_factory=list)
    stage_seconds: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        doc = {"version": REPORT_VERSION, "config": self.config, "seeds": self.seeds,
               "split_sizes": self.split_sizes,
               "excluded_samples": list(self.excluded_samples)}
        if self.mf_curve is not None:
            doc["mf"] = {"n_observed": self.mf_curve.n_observed,
                         "curve": self.mf_curve.to_rows()}
            if self.mf_accuracy is not None:
                missing_pct, full_pct = self.mf_accuracy
                doc["mf"]["accuracy"] = {"missing_pct": missing_pct, "full_pct": full_pct}
        doc["traits"] = []
        for tr in self.trait_results:
            entry = {"trait": tr.trait, "cell": tr.cell, "status": tr.status,
                     "n_samples": tr.n_samples}
            if tr.error is not None:
                entry["error"] = tr.error
            if tr.curve is not None:
                entry["curve"] = tr.curve.to_rows()
            entry["metrics"] = {split: {"correlation": m.correlation, "mse": m.mse,
                                        "success_pct": m.success_pct}
                                for split, m in tr.metrics.items()}
            doc["traits"].append(entry)
        return doc


def evaluate_split(model: rnn.RnnParams, batch: SequenceBatch, success_tolerance: float,
                   target_range: float | None = None) -> SplitMetrics:
    """Correlation, MSE, and tolerance-band success rate on one split.

    A prediction counts as a success when |pred - actual| is within
    success_tolerance times the target range; the range should come from
    the training split (pass it in), else this batch's own range is used.
    Constant targets make the correlation undefined (None); the other
    metrics are still returned.
    """
    if len(batch) == 0:
        raise DataError("cannot evaluate an empty batch")
    preds = rnn.predict(model, batch)
    actual = batch.targets
    corr = rnn.pearson_correlation(preds, actual) if len(batch) >= 2 else None
    mse = rnn.loss_mse(preds, actual)
    if target_range is None:
        target_range = float(actual.max() - actual.min())
    band = success_tolerance * target_range
    per_sample = np.max(np.abs(preds - actual), axis=1)
    success_pct = 100.0 * float(np.mean(per_sample <= band))
    return SplitMetrics(corr, mse, success_pct)


def _prepare(geno: GenotypeMatrix, phenos: PhenotypeTable, cfg: PipelineConfig,
             report: RunReport, truth: GenotypeMatrix | None):
    """Imputation (or observed-row filtering) stage; returns the hole-free data."""
    t0 = time.perf_counter()
    if cfg.genotype_mode == "imputed":
        mf_cfg = mf.with_seed(cfg.mf, derive_seed(cfg.seed, "mf"))
        factors, curve = mf.mf_fit(geno, mf_cfg)
        report.mf_curve = curve
        if truth is not None:
            holes = ~geno.observed
            missing_pct, _ = mf.imputation_accuracy(truth, mf.impute(geno, factors), holes)
            _, full_pct = mf.imputation_accuracy(truth, mf.rounded_reconstruction(geno, factors), holes)
            report.mf_accuracy = (missing_pct, full_pct)
        effective = mf.impute(geno, factors)
        effective_phenos = phenos
        kept = np.arange(geno.samples)
    else:
        keep = geno.observed.all(axis=1)
        kept = np.nonzero(keep)[0]
        if kept.size == 0:
            raise DataError("observed mode: no sample is fully observed")
        effective = GenotypeMatrix(geno.codes[keep], geno.observed[keep], geno.snp_ids)
        effective_phenos = PhenotypeTable(phenos.values[keep], phenos.observed[keep],
                                          phenos.trait_names)
        report.excluded_samples = np.nonzero(~keep)[0].tolist()
    report.stage_seconds["impute"] = time.perf_counter() - t0
    return effective, effective_phenos, kept


def _train_trait(trait: int, geno: GenotypeMatrix, phenos: PhenotypeTable,
                 split: SplitIndices, cfg: PipelineConfig) -> TraitResult:
    result = TraitResult(trait=trait, cell=cfg.rnn.cell)
    batch_all = build_sequences(geno, phenos, trait, cfg.chunk_width, cfg.normalization)
    parts = {"train": batch_all.subset_by_samples(split.train),
             "validation": batch_all.subset_by_samples(split.validation),
             "test": batch_all.subset_by_samples(split.test)}
    result.n_samples = {k: len(v) for k, v in parts.items()}
    if len(parts["train"]) == 0:
        result.status = "failed"
        result.error = "no training samples with an observed trait value"
        return result

    seed = derive_seed(cfg.seed, f"rnn/trait{trait}")
    params = rnn.rnn_init(cfg.rnn.cell, cfg.chunk_width, cfg.rnn.hidden, 1, seed)
    tcfg = cfg.rnn.train_config(seed)
    val = parts["validation"] if len(parts["validation"]) else None
    try:
        trained, curve = rnn.train(params, parts["train"], val, tcfg)
    except DivergenceError as e:
        result.status = "failed"
        result.error = str(e)
        result.curve = getattr(e, "curve", None)
        return result
    result.curve = curve
    train_targets = parts["train"].targets
    target_range = float(train_targets.max() - train_targets.min())
    for name, part in parts.items():
        if len(part):
            result.metrics[name] = evaluate_split(trained, part, cfg.success_tolerance,
                                                  target_range)
    return result


def run_pipeline(geno_path, pheno_path, cfg: PipelineConfig,
                 truth_path=None, threads: int = 1) -> RunReport:
    """Execute every stage on the given files and assemble the report.

    Ground-truth metrics appear only when ``truth_path`` is supplied
    (synthetic runs). A divergence while training one trait marks that
    trait's entry failed and the remaining traits still run. Traits are
    independent units; ``threads`` > 1 trains them concurrently, with the
    report assembled in trait order either way.
    """
    report = RunReport(config=cfg.to_dict(), seeds={"master": cfg.seed})
    t0 = time.perf_counter()
    geno = parse_genotype_csv(geno_path)
    phenos = parse_phenotype_csv(pheno_path)
    truth = parse_genotype_csv(truth_path) if truth_path is not None else None
    report.stage_seconds["parse"] = time.perf_counter() - t0
    if geno.samples != phenos.samples:
        raise DataError(f"genotype has {geno.samples} samples, phenotypes {phenos.samples}")
    for t in cfg.traits:
        if not 0 <= t < phenos.traits:
            raise ConfigError(f"trait index {t} out of range for {phenos.traits} traits")

    geno, phenos, _ = _prepare(geno, phenos, cfg, report, truth)

    split_seed = derive_seed(cfg.seed, "split")
    split = split_dataset(geno.samples, cfg.ratios, split_seed)
    report.seeds["split"] = split_seed
    report.seeds["mf"] = derive_seed(cfg.seed, "mf")
    report.split_sizes = {"train": int(split.train.size),
                          "validation": int(split.validation.size),
                          "test": int(split.test.size)}

    t0 = time.perf_counter()
    for trait in cfg.traits:
        report.seeds[f"rnn/trait{trait}"] = derive_seed(cfg.seed, f"rnn/trait{trait}")
    if threads > 1 and len(cfg.traits) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda t: _train_trait(t, geno, phenos, split, cfg),
                                    cfg.traits))
    else:
        results = [_train_trait(t, geno, phenos, split, cfg) for t in cfg.traits]
    for result in results:
        if result.status == "failed":
            log.warning("trait %d failed: %s", result.trait, result.error)
        report.trait_results.append(result)
    report.stage_seconds["train"] = time.perf_counter() - t0
    for stage, secs in report.stage_seconds.items():
        log.info("stage %s took %.3f s", stage, secs)
    return report


@dataclass
class CellComparison:
    """Epoch-aligned training curves for several cells on identical data."""

    curves: dict[str, rnn.TrainingCurve]
    final_losses: dict[str, float]
    diverged: dict[str, str]
    ordering: list[str]  # cells sorted by final loss, best first

    def to_json_dict(self) -> dict:
        return {"final_losses": self.final_losses,
                "ordering": self.ordering,
                "diverged": self.diverged,
                "curves": {c: curve.to_rows() for c, curve in self.curves.items()}}


def compare_on_batch(batch: SequenceBatch, cells, hidden: int, settings: RnnSettings,
                     seed: int, threads: int = 1) -> CellComparison:
    """Train each cell on the same batch with a matched budget.

    The data, epochs, and learning rate are identical; initializations are
    cell-appropriate (an identity recurrence cannot share values with a
    gaussian one) but all derive from the same seed. A diverging cell
    keeps its partial curve and is marked; the others complete. Cells are
    independent units and may train concurrently (``threads`` > 1).
    """
    if len(cells) < 2:
        raise ConfigError("cell comparison needs at least two cells")
    init_seed = derive_seed(seed, "compare/init")

    def run_one(cell: str):
        params = rnn.rnn_init(cell, batch.chunk_width, hidden, batch.targets.shape[1],
                              init_seed)
        # start every cell at the mean-prediction plateau: with a zero
        # output bias the first epochs chase the target mean, and that
        # transient drifts the hidden biases of integrating cells
        params.b_o[:] = batch.targets.mean(axis=0)
        tcfg = settings.train_config(init_seed, cell)
        try:
            _, curve = rnn.train(params, batch, None, tcfg)
        except DivergenceError as e:
            return getattr(e, "curve", rnn.TrainingCurve()), float("inf"), str(e)
        return curve, curve.final_train_loss(), None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(run_one, cells))
    else:
        outcomes = [run_one(c) for c in cells]

    curves, finals, diverged = {}, {}, {}
    for cell, (curve, final, err) in zip(cells, outcomes):
        curves[cell] = curve
        finals[cell] = final
        if err is not None:
            diverged[cell] = err
    ordering = sorted(cells, key=lambda c: finals[c])
    return CellComparison(curves, finals, diverged, ordering)


def compare_cells(geno_path, pheno_path, cfg: PipelineConfig, cells) -> CellComparison:
    """Fig-style training-error comparison on the pipeline's own data."""
    geno = parse_genotype_csv(geno_path)
    phenos = parse_phenotype_csv(pheno_path)
    report = RunReport(config=cfg.to_dict(), seeds={"master": cfg.seed})
    geno, phenos, _ = _prepare(geno, phenos, cfg, report, None)
    split = split_dataset(geno.samples, cfg.ratios, derive_seed(cfg.seed, "split"))
    batch = build_sequences(geno, phenos, cfg.traits[0], cfg.chunk_width, cfg.normalization)
    train_batch = batch.subset_by_samples(split.train)
    return compare_on_batch(train_batch, cells, cfg.rnn.hidden, cfg.rnn, cfg.seed)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def export_report(report: RunReport, dir_path, formats=("json", "csv")) -> dict:
    """Write the report and curve files plus a hash manifest; returns the manifest.

    Stage timings are not exported, so identical runs produce identical
    bytes and the manifest hashes match.
    """
    formats = set(formats)
    if not formats:
        raise ConfigError("no export formats requested")
    unknown = formats - {"json", "csv"}
    if unknown:
        raise ConfigError(f"unknown export formats: {sorted(unknown)}")
    out = Path(dir_path)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if "json" in formats:
        path = out / "report.json"
        path.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        written.append(path)
    if "csv" in formats:
        if report.mf_curve is not None:
            path = out / "mf_cost.csv"
            report.mf_curve.to_csv(path)
            written.append(path)
        for tr in report.trait_results:
            if tr.curve is not None:
                path = out / f"trait{tr.trait}_curve.csv"
                tr.curve.to_csv(path)
                written.append(path)
        path = out / "metrics.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("trait,split,correlation,mse,success_pct\n")
            for tr in report.trait_results:
                for split_name, m in tr.metrics.items():
                    corr = repr(float(m.correlation)) if m.correlation is not None else "NA"
                    fh.write(f"{tr.trait},{split_name},{corr},{float(m.mse)!r},"
                             f"{float(m.success_pct)!r}\n")
        written.append(path)

    manifest = {"files": [{"name": p.name, "sha256": _sha256(p)}
                          for p in sorted(written, key=lambda p: p.name)]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return manifest


def config_with_seed(cfg: PipelineConfig, seed: int) -> PipelineConfig:
    return replace(cfg, seed=seed)
