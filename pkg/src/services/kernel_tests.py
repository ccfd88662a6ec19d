"""Kernel independence tests.

RBF Gram construction with the median heuristic, the unconditional trace
statistic T_UI = Tr(Kx Ky) / n and the conditional statistic
T_CI = Tr(Kx|z Ky|z) / n. Null distributions are eigenvalue-weighted
chi-square mixtures sampled by Monte Carlo, a moment-matched gamma, or
(unconditional only) a permutation oracle.
"""

import logging
import warnings
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, ClassVar, Optional, Sequence, Union

import numpy as np
from scipy import linalg, stats
from scipy.spatial.distance import pdist, squareform

from common.errors import (
    ConfigError,
    DataError,
    DegenerateSample,
    NonFiniteData,
    NullEstimationFailure,
    SingularRegularization,
)

LOGGER = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, Sequence[float], "SampleVector"]

SYMMETRY_TOL = 1e-10
ROW_SUM_TOL = 1e-8
EIGEN_TOL = -1e-8


class SpectrumTruncationWarning(UserWarning):
    """Retained eigenvalues capture less than 99% of the Gram trace"""


class NullMethod(str, Enum):
    SPECTRAL = "spectral"
    GAMMA = "gamma"
    PERMUTATION = "permutation"


class SpectrumSource(str, Enum):
    PRODUCT_OF_MARGINALS = "product-of-marginals"
    WW_TRANSPOSE = "ww-transpose"


@dataclass(frozen=True)
class NullConfig:
    method: NullMethod = NullMethod.SPECTRAL
    n_draws: int = 1000
    eps: float = 1e-3
    n_perm: int = 1000
    seed: int = 0
    max_eigenvalues: Optional[int] = 50
    truncation: float = 1e-8
    standardize: bool = True

    def with_seed(self, seed: int) -> "NullConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True, eq=False)
class SampleVector:
    """Observations of one node for one subject"""

    MIN_LENGTH: ClassVar[int] = 8

    values: np.ndarray
    standardized: bool = False

    @classmethod
    def from_values(cls, values: ArrayLike, standardize: bool = True,
                    min_length: int = MIN_LENGTH) -> "SampleVector":
        arr = np.asarray(values, dtype=float).ravel()
        if arr.size < min_length:
            raise DataError(f"sample has {arr.size} values, need at least {min_length}")
        if not np.all(np.isfinite(arr)):
            bad = int(np.flatnonzero(~np.isfinite(arr))[0])
            raise NonFiniteData(f"non-finite value at position {bad}", row=bad)
        if standardize:
            if np.ptp(arr) == 0:
                raise DegenerateSample("cannot standardize a constant sample")
            arr = stats.zscore(arr)
        return cls(values=arr, standardized=standardize)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True, eq=False)
class CenteredGram:
    matrix: np.ndarray
    bandwidth: float
    centered: bool = True

    def is_valid(self) -> bool:
        m = self.matrix
        if not np.allclose(m, m.T, atol=SYMMETRY_TOL, rtol=0.0):
            return False
        if self.centered and np.max(np.abs(m.sum(axis=1)), initial=0.0) > ROW_SUM_TOL:
            return False
        return bool(np.linalg.eigvalsh(m).min(initial=0.0) >= EIGEN_TOL)


@dataclass(frozen=True)
class NullSpectrum:
    eigenvalues: np.ndarray
    source: SpectrumSource


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float
    null_method: NullMethod
    n: int
    spectrum: Optional[NullSpectrum] = field(default=None, repr=False, compare=False)

    __test__ = False  # keeps pytest from collecting the dataclass


def _as_matrix(x: ArrayLike) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, np.newaxis]
    return arr


def _standardize_columns(arr: np.ndarray) -> np.ndarray:
    """z-score each column; constant columns become zeros"""
    centered = arr - arr.mean(axis=0)
    std = arr.std(axis=0)
    std[std == 0] = 1.0
    return centered / std


def _prepare(x: ArrayLike, cfg: NullConfig) -> np.ndarray:
    if isinstance(x, SampleVector) and (x.standardized or not cfg.standardize):
        return x.values
    return SampleVector.from_values(x, standardize=cfg.standardize).values


def _prepare_conditioning(z: ArrayLike, cfg: NullConfig) -> np.ndarray:
    """Conditioning variables may span several columns"""
    arr = _as_matrix(z)
    if not np.all(np.isfinite(arr)):
        row = int(np.argwhere(~np.isfinite(arr))[0][0])
        raise NonFiniteData(f"non-finite conditioning value at position {row}", row=row)
    if np.all(np.ptp(arr, axis=0) == 0):
        raise DegenerateSample("conditioning set is constant")
    return _standardize_columns(arr) if cfg.standardize else arr


def median_bandwidth(x: ArrayLike) -> float:
    """Median pairwise distance between distinct samples (RBF length scale)"""
    data = _as_matrix(x)
    if data.shape[0] < 2:
        raise DataError("median bandwidth needs at least two samples")
    dists = pdist(data)
    positive = dists[dists > 0]
    if positive.size == 0:
        raise DegenerateSample("all sample values are identical")
    width = float(np.median(dists))
    if width <= 0:
        # heavy ties; fall back to the distances that carry information
        width = float(np.median(positive))
    return width


def _double_center(k: np.ndarray) -> np.ndarray:
    kc = k - k.mean(axis=0, keepdims=True) - k.mean(axis=1, keepdims=True) + k.mean()
    return (kc + kc.T) / 2.0


def centered_gram(x: ArrayLike, bandwidth: float) -> CenteredGram:
    if bandwidth <= 0:
        raise ConfigError(f"bandwidth must be positive, got {bandwidth}")
    data = _as_matrix(x)
    sq = squareform(pdist(data, "sqeuclidean"))
    k = np.exp(-sq / (2.0 * bandwidth ** 2))
    return CenteredGram(matrix=_double_center(k), bandwidth=float(bandwidth), centered=True)


def joint_gram(x: ArrayLike, z: ArrayLike) -> CenteredGram:
    """Centered Gram on the column concatenation (x, z)"""
    joint = _standardize_columns(np.column_stack([_as_matrix(x), _as_matrix(z)]))
    return centered_gram(joint, median_bandwidth(joint))


def _conditioning_operator(z: ArrayLike, eps: float) -> np.ndarray:
    """R_z = eps * (K_z + eps I)^-1; identity when z is constant"""
    if eps <= 0:
        raise ConfigError(f"eps must be positive, got {eps}")
    zs = _standardize_columns(_as_matrix(z))
    n = zs.shape[0]
    try:
        kz = centered_gram(zs, median_bandwidth(zs)).matrix
    except DegenerateSample:
        return np.eye(n)
    system = kz + eps * np.eye(n)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", linalg.LinAlgWarning)
            rz = eps * linalg.solve(system, np.eye(n), assume_a="pos")
    except (linalg.LinAlgError, linalg.LinAlgWarning) as exc:
        raise SingularRegularization(f"K_z + eps*I is numerically singular (eps={eps})") from exc
    if not np.all(np.isfinite(rz)):
        raise SingularRegularization(f"non-finite regularizer (eps={eps})")
    return (rz + rz.T) / 2.0


def conditional_gram(x: ArrayLike, z: ArrayLike, eps: float = 1e-3) -> CenteredGram:
    """K_{x|z} = R_z K_(x,z) R_z"""
    if len(np.asarray(x)) != len(np.asarray(z)):
        raise DataError("x and z must have equal length")
    rz = _conditioning_operator(z, eps)
    kjoint = joint_gram(x, z)
    kxz = rz @ kjoint.matrix @ rz
    return CenteredGram(matrix=(kxz + kxz.T) / 2.0, bandwidth=kjoint.bandwidth, centered=True)


def _eigenvalues(k: np.ndarray, max_count: Optional[int], truncation: float) -> np.ndarray:
    vals = np.clip(np.linalg.eigvalsh(k), 0.0, None)[::-1]
    if vals.size == 0 or vals[0] <= 0:
        return vals[:0]
    vals = vals[vals >= truncation * vals[0]]
    return vals[:max_count] if max_count else vals


def _eigen_features(k: np.ndarray, max_count: Optional[int], truncation: float):
    """psi_i = sqrt(lambda_i) * V_i from the EVD of k, plus retained trace share"""
    vals, vecs = np.linalg.eigh(k)
    vals = np.clip(vals, 0.0, None)[::-1]
    vecs = vecs[:, ::-1]
    total = vals.sum()
    if total <= 0:
        return np.zeros((k.shape[0], 0)), 1.0
    keep = vals >= truncation * vals[0]
    if max_count:
        keep[max_count:] = False
    kept = vals[keep]
    return vecs[:, keep] * np.sqrt(kept), float(kept.sum() / total)


def _spectral_pvalue(statistic: float, weights: np.ndarray, n_draws: int,
                     rng: np.random.Generator) -> float:
    if weights.size == 0 or not np.any(weights > 0):
        raise NullEstimationFailure("null spectrum is empty")
    chunk = max(1, 2_000_000 // weights.size)
    null = np.empty(n_draws)
    for start in range(0, n_draws, chunk):
        stop = min(start + chunk, n_draws)
        draws = rng.chisquare(1.0, size=(stop - start, weights.size))
        null[start:stop] = draws @ weights
    if np.ptp(null) == 0:
        raise NullEstimationFailure("all null draws are identical")
    exceed = int(np.count_nonzero(null >= statistic))
    return (1.0 + exceed) / (1.0 + n_draws)


def _gamma_pvalue(statistic: float, mean: float, var: float) -> float:
    if not (mean > 0 and var > 0):
        raise NullEstimationFailure(f"gamma moments degenerate (mean={mean}, var={var})")
    shape = mean ** 2 / var
    scale = var / mean
    return float(np.clip(stats.gamma.sf(statistic, a=shape, scale=scale), 0.0, 1.0))


def permutation_pvalue(statistic_fn: Callable[[np.ndarray, np.ndarray], float],
                       x: ArrayLike, y: ArrayLike, n_perm: int = 1000, seed: int = 0) -> float:
    """(1 + #{permuted >= observed}) / (1 + n_perm), permuting y"""
    if n_perm < 100:
        raise ConfigError(f"n_perm must be at least 100, got {n_perm}")
    x_arr = np.asarray(x, dtype=float)
    y_arr = np.asarray(y, dtype=float)
    rng = np.random.default_rng(seed)
    observed = statistic_fn(x_arr, y_arr)
    exceed = 0
    for _ in range(n_perm):
        if statistic_fn(x_arr, y_arr[rng.permutation(y_arr.shape[0])]) >= observed:
            exceed += 1
    return (1.0 + exceed) / (1.0 + n_perm)


def uncond_independence_test(x: ArrayLike, y: ArrayLike,
                             cfg: NullConfig = NullConfig()) -> TestResult:
    xs = _prepare(x, cfg)
    ys = _prepare(y, cfg)
    n = xs.shape[0]
    if ys.shape[0] != n:
        raise DataError(f"length mismatch: {n} vs {ys.shape[0]}")

    bw_x, bw_y = median_bandwidth(xs), median_bandwidth(ys)
    kx = centered_gram(xs, bw_x).matrix
    ky = centered_gram(ys, bw_y).matrix
    statistic = max(float(np.sum(kx * ky)) / n, 0.0)

    method = NullMethod(cfg.method)
    spectrum = None
    if method is NullMethod.PERMUTATION:
        def statistic_fn(_, y_perm):
            return float(np.sum(kx * centered_gram(y_perm, bw_y).matrix)) / n

        pvalue = permutation_pvalue(statistic_fn, xs, ys, n_perm=cfg.n_perm, seed=cfg.seed)
    elif method is NullMethod.GAMMA:
        mean = np.trace(kx) * np.trace(ky) / n ** 2
        var = 2.0 * np.sum(kx ** 2) * np.sum(ky ** 2) / n ** 4
        pvalue = _gamma_pvalue(statistic, mean, var)
    else:
        lam_x = _eigenvalues(kx, cfg.max_eigenvalues, cfg.truncation)
        lam_y = _eigenvalues(ky, cfg.max_eigenvalues, cfg.truncation)
        prod = np.outer(lam_x, lam_y).ravel()
        if prod.size:
            prod = np.sort(prod[prod >= cfg.truncation * prod.max()])[::-1]
        spectrum = NullSpectrum(prod, SpectrumSource.PRODUCT_OF_MARGINALS)
        rng = np.random.default_rng(cfg.seed)
        pvalue = _spectral_pvalue(statistic, prod / n ** 2, cfg.n_draws, rng)

    return TestResult(statistic=statistic, pvalue=float(pvalue), null_method=method, n=n,
                      spectrum=spectrum)


def cond_independence_test(x: ArrayLike, y: ArrayLike, z: ArrayLike,
                           cfg: NullConfig = NullConfig()) -> TestResult:
    method = NullMethod(cfg.method)
    if method is NullMethod.PERMUTATION:
        raise ConfigError("permutation null is only defined for the unconditional test")
    xs = _prepare(x, cfg)
    ys = _prepare(y, cfg)
    zs = _prepare_conditioning(z, cfg)
    n = xs.shape[0]
    if ys.shape[0] != n or zs.shape[0] != n:
        raise DataError("x, y and z must have equal length")

    rz = _conditioning_operator(zs, cfg.eps)
    kxz = rz @ joint_gram(xs, zs).matrix @ rz
    kyz = rz @ joint_gram(ys, zs).matrix @ rz
    kxz = (kxz + kxz.T) / 2.0
    kyz = (kyz + kyz.T) / 2.0
    statistic = max(float(np.sum(kxz * kyz)) / n, 0.0)

    psi_x, share_x = _eigen_features(kxz, cfg.max_eigenvalues, cfg.truncation)
    psi_y, share_y = _eigen_features(kyz, cfg.max_eigenvalues, cfg.truncation)
    if min(share_x, share_y) < 0.99:
        warnings.warn(
            f"retained eigenvalues capture {min(share_x, share_y):.3f} of the trace",
            SpectrumTruncationWarning,
            stacklevel=2,
        )

    # rows of ww are the stacked outer products psi_x(t) psi_y(t)^T
    ww = (psi_x[:, :, np.newaxis] * psi_y[:, np.newaxis, :]).reshape(n, -1)
    ww_prod = ww @ ww.T if ww.shape[1] > n else ww.T @ ww

    spectrum = None
    if method is NullMethod.GAMMA:
        mean = np.trace(ww_prod) / n
        var = 2.0 * np.sum(ww_prod ** 2) / n ** 2
        pvalue = _gamma_pvalue(statistic, mean, var)
    else:
        lam = _eigenvalues(ww_prod, None, cfg.truncation)
        spectrum = NullSpectrum(lam, SpectrumSource.WW_TRANSPOSE)
        rng = np.random.default_rng(cfg.seed)
        pvalue = _spectral_pvalue(statistic, lam / n, cfg.n_draws, rng)

    return TestResult(statistic=statistic, pvalue=float(pvalue), null_method=method, n=n,
                      spectrum=spectrum)
