"""Precomputed CDF table of FC peak heights over a grid of adjacent correlations."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import interpolate, optimize

from . import rng
from .config import settings
from .covariance import kronecker_cov
from .errors import InvalidInputError, SmoothingError
from .mcdlm import PValue, sample_local_maxima

logger = logging.getLogger(__name__)

_LAMBDAS = np.logspace(-10, 2, 13)


def default_rho_grid() -> np.ndarray:
    step = settings.LOOKUP_RHO_STEP
    grid = np.arange(settings.LOOKUP_RHO_MIN, settings.LOOKUP_RHO_MAX + step / 2, step)
    return np.round(grid, 10)


@dataclass(frozen=True, eq=False)
class LookupTable:
    dim: int
    rho_grid: np.ndarray
    u_grid: np.ndarray
    cdf: np.ndarray  # (len(rho_grid), len(u_grid))
    seed: int
    samples_per_rho: int
    smoothed: bool = False
    lam_rho: Optional[float] = None
    lam_u: Optional[float] = None

    def __post_init__(self):
        rho = np.asarray(self.rho_grid, dtype=np.float64)
        u = np.asarray(self.u_grid, dtype=np.float64)
        f = np.asarray(self.cdf, dtype=np.float64)
        if rho.size < 2 or np.any(np.diff(rho) <= 0):
            raise InvalidInputError("rho grid needs at least two increasing values")
        if u.size < 2 or np.any(np.diff(u) <= 0):
            raise InvalidInputError("u grid needs at least two increasing values")
        if f.shape != (rho.size, u.size):
            raise InvalidInputError(f"CDF matrix must be {rho.size}x{u.size}, got {f.shape}")
        if np.any(f < 0) or np.any(f > 1):
            raise InvalidInputError("CDF values must lie in [0, 1]")
        for name, arr in (("rho_grid", rho), ("u_grid", u), ("cdf", f)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.cdf.shape

    def query(self, rho: float, u: float) -> PValue:
        return query(self, rho, u)


def build_table(
    dim: int,
    samples_per_rho: Optional[int] = None,
    seed: Optional[int] = None,
    n_u: Optional[int] = None,
    rho_grid: Optional[Sequence[float]] = None,
    threads: Optional[int] = None,
) -> LookupTable:
    """Sample every grid row, pool the heights and evaluate each row's CDF on a common u grid."""
    if dim not in (1, 2, 3):
        raise InvalidInputError(f"Lookup tables cover D in {{1, 2, 3}}, got {dim}")
    samples_per_rho = int(samples_per_rho or settings.LOOKUP_SAMPLES_PER_RHO)
    seed = settings.DEFAULT_SEED if seed is None else int(seed)
    n_u = int(n_u or settings.LOOKUP_U_POINTS)
    grid = default_rho_grid() if rho_grid is None else np.asarray(rho_grid, dtype=np.float64)
    if n_u < 2:
        raise InvalidInputError("The u grid needs at least two points")

    def row(i: int) -> np.ndarray:
        cov = kronecker_cov(float(grid[i]), dim)
        samples = sample_local_maxima(
            cov, target_n=samples_per_rho, seed=rng.derive_seed(seed, rng.LOOKUP, i), threads=1
        )
        return samples.heights

    with ThreadPoolExecutor(max_workers=settings.resolved_threads(threads)) as pool:
        rows = list(pool.map(row, range(grid.size)))

    pooled = np.unique(np.concatenate(rows))
    if pooled.size > n_u:
        gen = rng.stream(seed, rng.SUBSAMPLE)
        pooled = np.sort(gen.choice(pooled, size=n_u, replace=False))
    cdf = np.vstack([np.searchsorted(h, pooled, side="right") / h.size for h in rows])
    logger.info(f"Built {grid.size}x{pooled.size} lookup table for D={dim}")
    return LookupTable(dim, grid, pooled, cdf, seed, samples_per_rho)


def _roughest(lines: np.ndarray, count: int) -> np.ndarray:
    """Indices of the ``count`` lines with the largest squared second differences"""
    rough = np.sum(np.diff(lines, n=2, axis=1) ** 2, axis=1)
    if not np.any(rough > 0):
        raise SmoothingError("Table is flat along the smoothing axis; nothing to cross-validate")
    return np.argsort(rough, kind="stable")[::-1][:count]


def cv_lambda(x: np.ndarray, lines: np.ndarray, folds: Optional[int] = None) -> float:
    """Smoothing parameter minimising interleaved k-fold squared prediction error."""
    folds = folds or settings.LOOKUP_CV_FOLDS
    if x.size < 2 * folds:
        raise SmoothingError(f"{x.size} grid points are too few for {folds}-fold cross-validation")
    picked = lines[_roughest(lines, settings.LOOKUP_CV_LINES)]
    idx = np.arange(x.size)
    errors = []
    for lam in _LAMBDAS:
        sse = 0.0
        for f in range(folds):
            test = idx % folds == f
            for y in picked:
                spline = interpolate.make_smoothing_spline(x[~test], y[~test], lam=lam)
                sse += float(np.sum((spline(x[test]) - y[test]) ** 2))
        errors.append(sse)
    errors = np.asarray(errors)
    if not np.all(np.isfinite(errors)):
        raise SmoothingError("Cross-validation produced non-finite errors")
    return float(_LAMBDAS[int(np.argmin(errors))])


def smoother_matrix(x: np.ndarray, lam: float) -> np.ndarray:
    """Linear operator S with S @ y equal to the smoothing spline of y evaluated at x"""
    eye = np.eye(x.size)
    return np.column_stack([interpolate.make_smoothing_spline(x, eye[:, j], lam=lam)(x) for j in range(x.size)])


def smooth_table(
    table: LookupTable, lam_rho: Optional[float] = None, lam_u: Optional[float] = None
) -> LookupTable:
    """Cubic smoothing splines along rho then along u, then an isotonic projection per row.

    Smoothing parameters not given are chosen by cross-validation.
    """
    f = np.array(table.cdf)
    if lam_rho is None:
        lam_rho = cv_lambda(table.rho_grid, f.T)
    f = smoother_matrix(table.rho_grid, lam_rho) @ f
    if lam_u is None:
        lam_u = cv_lambda(table.u_grid, f)
    f = np.vstack([interpolate.make_smoothing_spline(table.u_grid, y, lam=lam_u)(table.u_grid) for y in f])
    f = np.vstack([optimize.isotonic_regression(y, increasing=True).x for y in f])
    f = np.clip(f, 0.0, 1.0)
    logger.info(f"Smoothed lookup table with lam_rho={lam_rho:.3g}, lam_u={lam_u:.3g}")
    return replace(table, cdf=f, smoothed=True, lam_rho=lam_rho, lam_u=lam_u)


def query(table: LookupTable, rho: float, u: float) -> PValue:
    """1 - F(u; rho) by bilinear interpolation.

    Heights outside the u grid are clamped and flagged as censored; above the
    grid the p-value is floored at 1/(N+1).
    """
    lo, hi = table.rho_grid[0], table.rho_grid[-1]
    if not (lo - 1e-12 <= rho <= hi + 1e-12):
        raise InvalidInputError(f"rho={rho} outside the table range [{lo}, {hi}]")
    rho = min(max(rho, lo), hi)
    i = int(np.clip(np.searchsorted(table.rho_grid, rho, side="right") - 1, 0, table.rho_grid.size - 2))
    w = (rho - table.rho_grid[i]) / (table.rho_grid[i + 1] - table.rho_grid[i])

    censored = bool(u < table.u_grid[0] or u > table.u_grid[-1])
    uc = min(max(u, table.u_grid[0]), table.u_grid[-1])
    f_lo = np.interp(uc, table.u_grid, table.cdf[i])
    f_hi = np.interp(uc, table.u_grid, table.cdf[i + 1])
    p = 1.0 - ((1.0 - w) * f_lo + w * f_hi)
    if censored and u > table.u_grid[-1]:
        p = max(p, 1.0 / (table.samples_per_rho + 1))
    return PValue(float(min(1.0, max(0.0, p))), censored)
