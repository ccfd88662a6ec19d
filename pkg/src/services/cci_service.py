"""Correlation coefficient index between inferred latents and candidate signals.

The CCI of a candidate is the largest absolute Pearson correlation between
its pooled (subject x time) signal and any latent dimension. Candidates
whose CCI exceeds the threshold are reported as confounders. The stability
analysis retrains the latent model under fresh seeds and counts how often
each node lands in the top-k CCI ranking.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.optimize import linear_sum_assignment

from common.errors import (
    ConfigError,
    DegenerateSignal,
    DimensionMismatch,
    NumericalError,
    StabilityInvalid,
    UnknownNode,
)
from ml_models.nfivae_model import LatentEstimate, NfIvaeConfig, infer_latents, train_nfivae
from services.screening_service import CandidateSet

LOGGER = logging.getLogger(__name__)

INDEPENDENT = "independent"
ONE_TO_ONE = "one_to_one"
MAX_FAILED_FRACTION = 0.1
CCI_COLUMNS = ["candidate", "latent_dim", "cci"]
STABILITY_COLUMNS = ["node", "frequency"]


@dataclass(frozen=True)
class CciEntry:
    latent_dim: int
    cci: float


@dataclass
class CciTable:
    entries: Dict[str, CciEntry] = field(default_factory=dict)

    def __getitem__(self, node: str) -> CciEntry:
        return self.entries[node]

    def __contains__(self, node: str) -> bool:
        return node in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def ranking(self) -> List[str]:
        """Nodes by decreasing CCI, ties broken by name"""
        return sorted(self.entries, key=lambda node: (-self.entries[node].cci, node))

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"candidate": node, "latent_dim": self.entries[node].latent_dim,
             "cci": self.entries[node].cci}
            for node in self.ranking()
        ]
        return pd.DataFrame(rows, columns=CCI_COLUMNS)

    def to_dict(self) -> dict:
        return {
            node: {"latent_dim": self.entries[node].latent_dim, "cci": self.entries[node].cci}
            for node in self.ranking()
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CciTable":
        return cls({node: CciEntry(int(v["latent_dim"]), float(v["cci"])) for node, v in data.items()})


def _abs_correlations(latents: np.ndarray, signal: np.ndarray) -> np.ndarray:
    centred = latents - latents.mean(axis=0)
    sig = signal - signal.mean()
    denom = np.linalg.norm(centred, axis=0) * np.linalg.norm(sig)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.abs(centred.T @ sig) / denom
    # a collapsed latent dimension carries no correlation
    return np.clip(np.nan_to_num(r, nan=0.0, posinf=0.0), 0.0, 1.0)


def compute_cci(latents: Union[LatentEstimate, np.ndarray], candidates: Mapping[str, np.ndarray],
                assignment: str = INDEPENDENT) -> CciTable:
    values = latents.values if isinstance(latents, LatentEstimate) else np.asarray(latents, dtype=float)
    values = values.reshape(len(values), -1)
    if assignment not in (INDEPENDENT, ONE_TO_ONE):
        raise ConfigError(f"unknown CCI assignment '{assignment}'")

    names = list(candidates)
    scores = np.zeros((len(names), values.shape[1]))
    for row, node in enumerate(names):
        signal = np.asarray(candidates[node], dtype=float).ravel()
        if signal.shape[0] != values.shape[0]:
            raise DimensionMismatch(
                f"candidate {node}: {signal.shape[0]} rows, latents have {values.shape[0]}"
            )
        if not np.ptp(signal) > 0.0:
            raise DegenerateSignal(f"candidate {node} has zero variance")
        scores[row] = _abs_correlations(values, signal)

    table = CciTable()
    if assignment == INDEPENDENT:
        for row, node in enumerate(names):
            best = int(np.argmax(scores[row]))
            table.entries[node] = CciEntry(best, float(scores[row, best]))
        return table

    # unassigned candidates (more candidates than latent dims) get latent_dim -1
    rows, cols = linear_sum_assignment(scores, maximize=True)
    matched = dict(zip(rows.tolist(), cols.tolist()))
    for row, node in enumerate(names):
        dim = matched.get(row)
        table.entries[node] = (CciEntry(dim, float(scores[row, dim])) if dim is not None
                               else CciEntry(-1, 0.0))
    return table


def select_confounders(S: Union[CandidateSet, Sequence[str]], table: CciTable,
                       threshold: float) -> List[str]:
    nodes = S.nodes if isinstance(S, CandidateSet) else list(S)
    missing = [node for node in nodes if node not in table]
    if missing:
        raise UnknownNode(f"no CCI entry for candidates {missing}")
    return [node for node in nodes if table[node].cci > threshold]


@dataclass
class StabilityReport:
    frequencies: Dict[str, float]
    k: int
    n_runs: int
    seeds: List[int] = field(default_factory=list)
    failures: List[Tuple[int, str]] = field(default_factory=list)

    def ranking(self) -> List[str]:
        return sorted(self.frequencies, key=lambda node: (-self.frequencies[node], node))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"node": node, "frequency": self.frequencies[node]} for node in self.ranking()],
            columns=STABILITY_COLUMNS,
        )

    def write_plot_data(self, path: Union[str, Path]) -> None:
        lines = [f"# frequency of inclusion in the top {self.k} rankings over {self.n_runs} runs",
                 "# node frequency"]
        lines += [f"{node} {self.frequencies[node]:.6f}" for node in self.ranking()]
        Path(path).write_text("\n".join(lines) + "\n")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "n_runs": self.n_runs,
            "seeds": list(self.seeds),
            "frequencies": {node: self.frequencies[node] for node in self.ranking()},
            "failures": [{"seed": seed, "reason": reason} for seed, reason in self.failures],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StabilityReport":
        return cls(
            frequencies={node: float(f) for node, f in data["frequencies"].items()},
            k=int(data["k"]),
            n_runs=int(data["n_runs"]),
            seeds=[int(s) for s in data.get("seeds", [])],
            failures=[(int(f["seed"]), f["reason"]) for f in data.get("failures", [])],
        )


def top_k(table: CciTable, k: int) -> List[str]:
    return table.ranking()[:k]


def _stability_run(x: np.ndarray, subject_index: np.ndarray, signals: Mapping[str, np.ndarray],
                   cfg: NfIvaeConfig, seed: int, k: int, assignment: str,
                   n_subjects: int) -> Tuple[int, Optional[List[str]], Optional[str]]:
    run_cfg = cfg.model_copy(update={"seed": seed})
    try:
        trained = train_nfivae(x, subject_index, run_cfg, n_subjects=n_subjects)
        latents = infer_latents(trained.model, x, subject_index)
        table = compute_cci(latents, signals, assignment=assignment)
    except NumericalError as exc:
        return seed, None, f"{type(exc).__name__}: {exc}"
    return seed, top_k(table, k), None


def stability_analysis(x: np.ndarray, subject_index: np.ndarray,
                       signals: Mapping[str, np.ndarray], cfg: NfIvaeConfig, n_runs: int,
                       k: int = 5, base_seed: int = 0, seeds: Optional[Sequence[int]] = None,
                       assignment: str = INDEPENDENT, n_jobs: int = 1,
                       n_subjects: Optional[int] = None) -> StabilityReport:
    """Top-k membership frequency of every offered node across retrained runs.

    Run ``r`` uses seed ``base_seed + r`` unless ``seeds`` pins them. Runs
    that fail numerically are recorded; more than 10% failures invalidates
    the report.
    """
    if n_runs < 2:
        raise ConfigError(f"stability analysis needs at least 2 runs, got {n_runs}")
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    run_seeds = list(seeds) if seeds is not None else [base_seed + r for r in range(n_runs)]
    if len(run_seeds) != n_runs:
        raise ConfigError(f"{len(run_seeds)} seeds given for {n_runs} runs")
    n_subjects = int(n_subjects or np.max(subject_index) + 1)

    LOGGER.info(
        "Stability analysis",
        extra={"stage": "stability", "runs": n_runs, "k": k, "nodes": len(signals),
               "workers": n_jobs},
    )
    outcomes = Parallel(n_jobs=n_jobs)(
        delayed(_stability_run)(x, subject_index, signals, cfg, seed, k, assignment, n_subjects)
        for seed in run_seeds
    )

    failures = [(seed, reason) for seed, _, reason in outcomes if reason is not None]
    for seed, reason in failures:
        LOGGER.warning("Stability run failed",
                       extra={"stage": "stability", "seed": seed, "reason": reason})
    if len(failures) > MAX_FAILED_FRACTION * n_runs:
        raise StabilityInvalid(f"{len(failures)} of {n_runs} stability runs failed")

    completed = [ranked for _, ranked, reason in outcomes if reason is None]
    counts = {node: 0 for node in signals}
    for ranked in completed:
        for node in ranked:
            counts[node] += 1
    return StabilityReport(
        frequencies={node: counts[node] / len(completed) for node in signals},
        k=k,
        n_runs=len(completed),
        seeds=run_seeds,
        failures=failures,
    )
