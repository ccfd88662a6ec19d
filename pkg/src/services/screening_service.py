"""Candidate confounder screening.

For every pair of in-network nodes and every external candidate, the
per-subject unconditional p-values are compared with the p-values obtained
after conditioning on the candidate. A candidate is admitted for a pair when
the two p-value samples differ under a two-sample KS test and conditioning
raises the mean p-value.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import special
from scipy.stats import false_discovery_control
from threadpoolctl import threadpool_limits

from common.errors import (
    ConfigError,
    DataError,
    InsufficientSubjects,
    InvalidProfile,
    SubjectSkipped,
)
from common.seeding import derive_seed
from services.dataset_service import SubjectDataset
from services.kernel_tests import NullConfig, cond_independence_test, uncond_independence_test

LOGGER = logging.getLogger(__name__)

Pair = Tuple[str, str]

MAX_SKIP_FRACTION = 0.2
MIN_SUBJECTS = 10
CANDIDATE_COLUMNS = ["candidate", "pair_a", "pair_b", "ks_pvalue", "mean_unc", "mean_cond"]


@dataclass
class TestProfile:
    pair: Pair
    candidate: str
    u_unc: np.ndarray
    u_cond: np.ndarray
    skipped: List[SubjectSkipped] = field(default_factory=list)

    __test__ = False


@dataclass(frozen=True)
class PairEvidence:
    pair: Pair
    ks_statistic: float
    ks_pvalue: float
    mean_unc: float
    mean_cond: float


@dataclass
class CandidateSet:
    candidates: Dict[str, List[PairEvidence]] = field(default_factory=dict)
    n_tested: int = 0

    @property
    def nodes(self) -> List[str]:
        return sorted(self.candidates)

    def __len__(self) -> int:
        return len(self.candidates)

    def support_counts(self) -> Dict[str, int]:
        return {node: len(pairs) for node, pairs in sorted(self.candidates.items())}

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "candidate": node,
                "pair_a": ev.pair[0],
                "pair_b": ev.pair[1],
                "ks_pvalue": ev.ks_pvalue,
                "mean_unc": ev.mean_unc,
                "mean_cond": ev.mean_cond,
            }
            for node in self.nodes
            for ev in self.candidates[node]
        ]
        return pd.DataFrame(rows, columns=CANDIDATE_COLUMNS)

    def to_dict(self) -> dict:
        return {
            "n_tested": self.n_tested,
            "candidates": {
                node: [
                    {
                        "pair": list(ev.pair),
                        "ks_statistic": ev.ks_statistic,
                        "ks_pvalue": ev.ks_pvalue,
                        "mean_unc": ev.mean_unc,
                        "mean_cond": ev.mean_cond,
                    }
                    for ev in self.candidates[node]
                ]
                for node in self.nodes
            },
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CandidateSet":
        return cls(
            candidates={
                node: [
                    PairEvidence(
                        pair=tuple(ev["pair"]),
                        ks_statistic=ev["ks_statistic"],
                        ks_pvalue=ev["ks_pvalue"],
                        mean_unc=ev["mean_unc"],
                        mean_cond=ev["mean_cond"],
                    )
                    for ev in evidence
                ]
                for node, evidence in data["candidates"].items()
            },
            n_tested=data.get("n_tested", 0),
        )


def ks_two_sample(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-sample KS statistic and its asymptotic Kolmogorov p-value"""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise DataError("ks_two_sample needs two nonempty samples")
    points = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, points, side="right") / a.size
    cdf_b = np.searchsorted(b, points, side="right") / b.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    effective = a.size * b.size / (a.size + b.size)
    pvalue = float(np.clip(special.kolmogorov(np.sqrt(effective) * d), 0.0, 1.0))
    return d, pvalue


def _canonical(dataset: SubjectDataset, pair: Pair) -> Pair:
    a, b = pair
    if a == b:
        raise ConfigError(f"pair needs two distinct nodes, got ({a}, {b})")
    return (a, b) if dataset.node_index(a) < dataset.node_index(b) else (b, a)


def _pvalues(dataset: SubjectDataset, pair: Pair, candidate: Optional[str],
             cfg: NullConfig) -> Tuple[np.ndarray, List[SubjectSkipped]]:
    """One p-value per subject; NaN where the subject had to be skipped"""
    a, b = pair
    pvalues = np.full(dataset.n_subjects, np.nan)
    skipped = []
    with threadpool_limits(limits=1):
        for j, subject_id in enumerate(dataset.subject_ids):
            label = "unc" if candidate is None else f"cond:{candidate}"
            sub_cfg = cfg.with_seed(derive_seed(cfg.seed, label, subject_id, a, b))
            x, y = dataset.series(j, a), dataset.series(j, b)
            try:
                if candidate is None:
                    result = uncond_independence_test(x, y, sub_cfg)
                else:
                    result = cond_independence_test(x, y, dataset.series(j, candidate), sub_cfg)
            except DataError as exc:
                skipped.append(SubjectSkipped(subject_id, f"{type(exc).__name__}: {exc}"))
                LOGGER.warning(
                    "Skipping subject",
                    extra={"stage": "screening", "subject": subject_id, "pair": f"{a}-{b}",
                           "candidate": candidate, "reason": type(exc).__name__},
                )
                continue
            pvalues[j] = result.pvalue
    return pvalues, skipped


def _build_profile(pair: Pair, candidate: str, unc: np.ndarray, unc_skipped: List[SubjectSkipped],
                   cond: np.ndarray, cond_skipped: List[SubjectSkipped]) -> TestProfile:
    keep = ~(np.isnan(unc) | np.isnan(cond))
    skipped = list(unc_skipped) + [s for s in cond_skipped if s not in unc_skipped]
    if unc.size and (1.0 - keep.mean()) > MAX_SKIP_FRACTION:
        raise InvalidProfile(
            f"pair {pair} | {candidate}: {int((~keep).sum())} of {unc.size} subjects skipped"
        )
    return TestProfile(pair=pair, candidate=candidate, u_unc=unc[keep], u_cond=cond[keep],
                       skipped=skipped)


def collect_pair_profiles(dataset: SubjectDataset, z_pair: Pair, candidate: str,
                          cfg: NullConfig = NullConfig()) -> TestProfile:
    pair = _canonical(dataset, z_pair)
    dataset.node_index(candidate)
    unc, unc_skipped = _pvalues(dataset, pair, None, cfg)
    cond, cond_skipped = _pvalues(dataset, pair, candidate, cfg)
    return _build_profile(pair, candidate, unc, unc_skipped, cond, cond_skipped)


def _evidence(profile: TestProfile) -> PairEvidence:
    d, pvalue = ks_two_sample(profile.u_unc, profile.u_cond)
    return PairEvidence(
        pair=profile.pair,
        ks_statistic=d,
        ks_pvalue=pvalue,
        mean_unc=float(np.mean(profile.u_unc)),
        mean_cond=float(np.mean(profile.u_cond)),
    )


def screen_candidates(dataset: SubjectDataset, Z: Sequence[str], L: Sequence[str], alpha: float,
                      cfg: NullConfig = NullConfig(), n_jobs: int = 1,
                      fdr: bool = False) -> CandidateSet:
    """Admit l for (z_i, z_k) iff KS p < alpha and mean(u_unc) < mean(u_cond)"""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    z_nodes = sorted(set(Z), key=dataset.node_index)
    l_nodes = sorted(set(L), key=dataset.node_index)
    overlap = set(z_nodes) & set(l_nodes)
    if overlap:
        raise ConfigError(f"in-study and candidate nodes overlap: {sorted(overlap)}")
    if not l_nodes:
        return CandidateSet()
    if dataset.n_subjects < MIN_SUBJECTS:
        raise InsufficientSubjects(
            f"screening needs at least {MIN_SUBJECTS} subjects, got {dataset.n_subjects}"
        )

    pairs = [_canonical(dataset, pair) for pair in combinations(z_nodes, 2)]
    grid = [(pair, candidate) for pair in pairs for candidate in l_nodes]
    LOGGER.info(
        "Screening candidates",
        extra={"stage": "screening", "pairs": len(pairs), "candidates": len(l_nodes),
               "subjects": dataset.n_subjects, "workers": n_jobs},
    )

    parallel = Parallel(n_jobs=n_jobs)
    unconditional = parallel(delayed(_pvalues)(dataset, pair, None, cfg) for pair in pairs)
    conditional = parallel(
        delayed(_pvalues)(dataset, pair, candidate, cfg) for pair, candidate in grid
    )
    unc_by_pair = dict(zip(pairs, unconditional))

    evidence = []
    for (pair, candidate), (cond, cond_skipped) in zip(grid, conditional):
        unc, unc_skipped = unc_by_pair[pair]
        profile = _build_profile(pair, candidate, unc, unc_skipped, cond, cond_skipped)
        evidence.append((candidate, _evidence(profile)))

    ks_pvalues = np.array([ev.ks_pvalue for _, ev in evidence])
    if fdr and ks_pvalues.size:
        ks_pvalues = false_discovery_control(ks_pvalues, method="bh")

    result = CandidateSet(n_tested=len(evidence))
    for (candidate, ev), ks_p in zip(evidence, ks_pvalues):
        if ks_p < alpha and ev.mean_unc < ev.mean_cond:
            admitted = PairEvidence(ev.pair, ev.ks_statistic, float(ks_p), ev.mean_unc, ev.mean_cond)
            result.candidates.setdefault(candidate, []).append(admitted)

    LOGGER.info(
        "Screening finished",
        extra={"stage": "screening", "admitted": ",".join(result.nodes) or "-",
               "tested": result.n_tested},
    )
    return result
