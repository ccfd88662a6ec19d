"""End-to-end identification of essential exogenous nodes.

Stages run in order: load, screening, nfivae, cci, stability, skeleton.
Each stage is timed and any failure is re-raised as ``StageFailure`` after
the outputs gathered so far have been written.
"""

import json
import logging
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import networkx
import numpy as np
import pandas as pd
import scipy
import sklearn
import torch

from api.schemas import CONFIG_VERSION, PipelineConfig
from common import __version__
from common.errors import ConfigError, DataError, ExoNodesError, StageFailure
from ml_models.nfivae_model import (
    LatentEstimate,
    NfIvaeConfig,
    TrainingResult,
    infer_latents,
    save_checkpoint,
    train_nfivae,
)
from services.cci_service import (
    CciTable,
    StabilityReport,
    compute_cci,
    select_confounders,
    stability_analysis,
)
from services.dataset_service import SubjectDataset, load_dataset
from services.pc_service import Skeleton, pc_skeleton
from services.screening_service import CandidateSet, screen_candidates

LOGGER = logging.getLogger(__name__)

SCREENING_EMPTY = "SCREENING_EMPTY"
REPORT_FILE = "report.json"
CHECKPOINT_FILE = "nfivae.npz"
LATENTS_FILE = "latents.csv"
TRAINING_LOG_COLUMNS = ["epoch", "elbo", "score_matching", "total"]


@dataclass
class Provenance:
    config_hash: str
    config: dict
    seeds: dict
    versions: dict
    timings: Dict[str, float] = field(default_factory=dict)
    latent_dim: Optional[int] = None

    def to_dict(self, include_timings: bool = True) -> dict:
        data = {
            "config_hash": self.config_hash,
            "config": self.config,
            "seeds": self.seeds,
            "versions": self.versions,
            "latent_dim": self.latent_dim,
        }
        if include_timings:
            data["timings"] = dict(self.timings)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "Provenance":
        return cls(
            config_hash=data["config_hash"],
            config=data["config"],
            seeds=data["seeds"],
            versions=data["versions"],
            timings={k: float(v) for k, v in data.get("timings", {}).items()},
            latent_dim=data.get("latent_dim"),
        )


@dataclass
class ConfounderReport:
    study_nodes: List[str]
    candidate_pool: List[str]
    provenance: Provenance
    candidates: CandidateSet = field(default_factory=CandidateSet)
    cci: Optional[CciTable] = None
    selected: List[str] = field(default_factory=list)
    stability: Optional[StabilityReport] = None
    skeleton_before: Optional[Skeleton] = None
    skeleton_after: Optional[Skeleton] = None
    training_log: List[dict] = field(default_factory=list)
    identifiability: dict = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def to_dict(self, include_timings: bool = True) -> dict:
        return {
            "format_version": CONFIG_VERSION,
            "study_nodes": list(self.study_nodes),
            "candidate_pool": list(self.candidate_pool),
            "selected": list(self.selected),
            "notes": list(self.notes),
            "candidates": self.candidates.to_dict(),
            "support_counts": self.candidates.support_counts(),
            "cci": self.cci.to_dict() if self.cci is not None else None,
            "stability": self.stability.to_dict() if self.stability is not None else None,
            "skeleton_before": self.skeleton_before.to_dict() if self.skeleton_before else None,
            "skeleton_after": self.skeleton_after.to_dict() if self.skeleton_after else None,
            "identifiability": dict(self.identifiability),
            "training_log": list(self.training_log),
            "provenance": self.provenance.to_dict(include_timings),
        }

    def to_json(self, include_timings: bool = True) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2)

    @classmethod
    def from_dict(cls, data: dict) -> "ConfounderReport":
        return cls(
            study_nodes=list(data["study_nodes"]),
            candidate_pool=list(data["candidate_pool"]),
            provenance=Provenance.from_dict(data["provenance"]),
            candidates=CandidateSet.from_dict(data["candidates"]),
            cci=CciTable.from_dict(data["cci"]) if data.get("cci") is not None else None,
            selected=list(data["selected"]),
            stability=(StabilityReport.from_dict(data["stability"])
                       if data.get("stability") is not None else None),
            skeleton_before=(Skeleton.from_dict(data["skeleton_before"])
                             if data.get("skeleton_before") else None),
            skeleton_after=(Skeleton.from_dict(data["skeleton_after"])
                            if data.get("skeleton_after") else None),
            training_log=list(data.get("training_log", [])),
            identifiability=dict(data.get("identifiability", {})),
            notes=list(data.get("notes", [])),
        )

    @classmethod
    def from_json(cls, text: str) -> "ConfounderReport":
        return cls.from_dict(json.loads(text))


def library_versions() -> dict:
    return {
        "exonodes": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
        "torch": torch.__version__,
        "networkx": networkx.__version__,
    }


def new_provenance(cfg: PipelineConfig) -> Provenance:
    return Provenance(
        config_hash=cfg.config_hash(),
        config=cfg.model_dump(mode="json"),
        seeds={"tests": cfg.seed, "nfivae": cfg.nfivae.seed},
        versions=library_versions(),
    )


@contextmanager
def _stage(name: str, timings: Dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    LOGGER.info("Stage started", extra={"stage": name})
    try:
        yield
    except ExoNodesError as exc:
        LOGGER.error("Stage failed", extra={"stage": name, "error": type(exc).__name__})
        raise StageFailure(name, exc) from exc
    finally:
        timings[name] = round(time.perf_counter() - start, 6)
    LOGGER.info("Stage finished", extra={"stage": name, "seconds": timings[name]})


def obtain_dataset(cfg: PipelineConfig, dataset: Optional[SubjectDataset] = None) -> SubjectDataset:
    if dataset is not None:
        return dataset
    if not cfg.paths.dataset:
        raise ConfigError("no dataset directory configured (paths.dataset / --dataset)")
    return load_dataset(cfg.paths.dataset)


def resolve_networks(dataset: SubjectDataset, cfg: PipelineConfig) -> Tuple[List[str], List[str]]:
    """In-study nodes Z and candidate pool L, with L drawn from outside Z's network"""
    study = dataset.nodes_in(cfg.networks.study)
    if not study:
        raise ConfigError(f"in-study network '{cfg.networks.study}' has no nodes")
    if cfg.networks.candidates:
        if cfg.networks.study in cfg.networks.candidates:
            raise ConfigError("candidate networks must not include the in-study network")
        pool = dataset.nodes_in(cfg.networks.candidates)
    else:
        pool = [node for node in dataset.nodes if node not in study]
    if not pool:
        raise ConfigError("candidate pool is empty")
    return study, pool


def run_screening(dataset: SubjectDataset, cfg: PipelineConfig) -> CandidateSet:
    study, pool = resolve_networks(dataset, cfg)
    return screen_candidates(dataset, study, pool, cfg.alpha, cfg=cfg.null_config(),
                             n_jobs=cfg.workers, fdr=cfg.fdr)


def _sized_config(cfg: PipelineConfig, candidates: Optional[CandidateSet]) -> NfIvaeConfig:
    # one latent per screened candidate; the configured size applies only without screening
    if candidates is None:
        return cfg.nfivae_config()
    if not candidates.candidates:
        raise ConfigError("screening admitted no candidates to size the NF-iVAE")
    return cfg.nfivae_config(latent_dim=len(candidates))


def run_training(dataset: SubjectDataset, cfg: PipelineConfig,
                 candidates: Optional[CandidateSet] = None) -> Tuple[TrainingResult, LatentEstimate]:
    study, _ = resolve_networks(dataset, cfg)
    x, subject_index = dataset.stacked(study)
    trained = train_nfivae(x, subject_index, _sized_config(cfg, candidates),
                           n_subjects=dataset.n_subjects)
    return trained, infer_latents(trained.model, x, subject_index)


def run_stability(dataset: SubjectDataset, cfg: PipelineConfig,
                  nodes: Optional[List[str]] = None,
                  candidates: Optional[CandidateSet] = None) -> StabilityReport:
    """Rank every offered node (the whole candidate pool by default)"""
    study, pool = resolve_networks(dataset, cfg)
    x, subject_index = dataset.stacked(study)
    signals = {node: dataset.pooled(node) for node in (nodes or pool)}
    return stability_analysis(
        x, subject_index, signals, _sized_config(cfg, candidates),
        n_runs=cfg.stability.n_runs, k=cfg.stability.k, base_seed=cfg.nfivae.seed,
        assignment=cfg.cci_assignment, n_jobs=cfg.workers, n_subjects=dataset.n_subjects,
    )


def run_skeleton(dataset: SubjectDataset, nodes: List[str], cfg: PipelineConfig) -> Skeleton:
    """PC skeleton on the reference subject, truncated to ``skeleton.max_samples`` rows"""
    reference = cfg.skeleton.reference_subject
    if reference >= dataset.n_subjects:
        raise DataError(
            f"reference subject {reference} out of range for {dataset.n_subjects} subjects"
        )
    limit = cfg.skeleton.max_samples
    data = {node: dataset.series(reference, node)[:limit] for node in nodes}
    return pc_skeleton(data, alpha=cfg.skeleton.alpha, cfg=cfg.null_config(), n_jobs=cfg.workers)


def run_pipeline(cfg: PipelineConfig, dataset: Optional[SubjectDataset] = None,
                 write: bool = True) -> ConfounderReport:
    provenance = new_provenance(cfg)
    timings = provenance.timings
    output = Path(cfg.paths.output)
    report = ConfounderReport(study_nodes=[], candidate_pool=[], provenance=provenance)
    trained: Optional[TrainingResult] = None
    latents: Optional[LatentEstimate] = None

    try:
        with _stage("load", timings):
            dataset = obtain_dataset(cfg, dataset)
            report.study_nodes, report.candidate_pool = resolve_networks(dataset, cfg)

        with _stage("screening", timings):
            report.candidates = run_screening(dataset, cfg)

        if not report.candidates.candidates:
            LOGGER.warning("No candidate passed screening", extra={"stage": "screening"})
            report.notes.append(SCREENING_EMPTY)
        else:
            with _stage("nfivae", timings):
                trained, latents = run_training(dataset, cfg, report.candidates)
                provenance.latent_dim = trained.model.latent_dim
                report.training_log = trained.log.to_dict(orient="records")
                report.identifiability = dict(trained.diagnostics)
                if not trained.diagnostics.get("assumption_met", True):
                    LOGGER.warning("Identifiability assumption not met",
                                   extra={"stage": "nfivae", **trained.diagnostics})

            with _stage("cci", timings):
                signals = {node: dataset.pooled(node) for node in report.candidates.nodes}
                report.cci = compute_cci(latents, signals, assignment=cfg.cci_assignment)
                report.selected = select_confounders(report.candidates, report.cci,
                                                     cfg.cci_threshold)

            if cfg.stability.enabled:
                with _stage("stability", timings):
                    report.stability = run_stability(dataset, cfg, candidates=report.candidates)
                    provenance.seeds["stability"] = list(report.stability.seeds)

        with _stage("skeleton", timings):
            report.skeleton_before = run_skeleton(dataset, report.study_nodes, cfg)
            if report.selected:
                report.skeleton_after = run_skeleton(
                    dataset, report.study_nodes + report.selected, cfg
                )
            else:
                report.skeleton_after = Skeleton.from_dict(report.skeleton_before.to_dict())
    except StageFailure as failure:
        report.notes.append(f"FAILED:{failure.stage}")
        if write:
            emit_report(report, output, trained=trained, latents=latents)
        raise

    LOGGER.info(
        "Pipeline finished",
        extra={"stage": "pipeline", "selected": ",".join(report.selected) or "-",
               "config_hash": provenance.config_hash[:12]},
    )
    if write:
        emit_report(report, output, trained=trained, latents=latents)
    return report


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from exc


def emit_report(report: ConfounderReport, directory: Union[str, Path],
                trained: Optional[TrainingResult] = None,
                latents: Optional[LatentEstimate] = None) -> List[Path]:
    """Write the report and its tables; the file set is the same for every run"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {directory}: {exc.strerror}") from exc

    empty_cci = CciTable()
    stability = report.stability or StabilityReport(frequencies={}, k=0, n_runs=0)
    files = {
        REPORT_FILE: report.to_json() + "\n",
        "candidates.csv": report.candidates.to_frame().to_csv(index=False),
        "cci.csv": (report.cci or empty_cci).to_frame().to_csv(index=False),
        "stability.csv": stability.to_frame().to_csv(index=False),
        "training_log.csv": pd.DataFrame(report.training_log,
                                         columns=TRAINING_LOG_COLUMNS).to_csv(index=False),
        "skeleton_before.txt": report.skeleton_before.to_edge_list() if report.skeleton_before else "",
        "skeleton_after.txt": report.skeleton_after.to_edge_list() if report.skeleton_after else "",
    }
    written = []
    for name, text in files.items():
        _write_text(directory / name, text)
        written.append(directory / name)

    plot = directory / "stability_plot.dat"
    try:
        stability.write_plot_data(plot)
    except OSError as exc:
        raise DataError(f"cannot write {plot}: {exc.strerror}") from exc
    written.append(plot)

    if trained is not None:
        save_checkpoint(trained.model, directory / CHECKPOINT_FILE)
        written.append(directory / CHECKPOINT_FILE)
    if latents is not None:
        latents.to_frame().to_csv(directory / LATENTS_FILE, index=False, float_format="%.17g")
        written.append(directory / LATENTS_FILE)
    LOGGER.info("Report written", extra={"stage": "emit", "directory": str(directory),
                                         "files": len(written)})
    return written
