"""Monte Carlo sampler of local-maximum heights over a neighborhood covariance."""

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Literal, NamedTuple, Optional, Tuple

import numpy as np
from scipy import special, stats

from . import rng
from .config import settings
from .covariance import NeighborhoodCov
from .errors import DegenerateCovarianceError, InvalidInputError, NotPSDError
from .lattice import Field

logger = logging.getLogger(__name__)

_JITTERS = (0.0, 1e-12, 1e-10, 1e-8)
_NEG_EIG_TOL = -1e-8


@dataclass(frozen=True)
class SamplingModel:
    kind: Literal["gaussian", "t"] = "gaussian"
    nu: Optional[int] = None

    def __post_init__(self):
        if self.kind == "t" and (self.nu is None or self.nu < 1):
            raise InvalidInputError("Student t sampling needs nu >= 1")
        if self.kind not in ("gaussian", "t"):
            raise InvalidInputError(f"Unknown sampling model: {self.kind}")

    @classmethod
    def gaussian(cls) -> "SamplingModel":
        return cls("gaussian")

    @classmethod
    def student_t(cls, nu: int) -> "SamplingModel":
        return cls("t", int(nu))

    @property
    def label(self) -> str:
        return "gaussian" if self.kind == "gaussian" else f"t({self.nu})"

    @classmethod
    def parse(cls, label: str) -> "SamplingModel":
        label = label.strip().lower()
        if label in ("gaussian", "normal"):
            return cls.gaussian()
        m = re.fullmatch(r"t\(?(\d+)\)?", label)
        if m:
            return cls.student_t(int(m.group(1)))
        raise InvalidInputError(f"Cannot parse sampling model '{label}'")


class PValue(NamedTuple):
    value: float
    censored: bool


@dataclass(frozen=True, eq=False)
class PeakSampleSet:
    """Accepted centre heights, sorted ascending, with the attempt count."""

    heights: np.ndarray
    n_attempted: int
    seed: int
    model: str = "gaussian"
    cov_fingerprint: str = ""
    kind: Literal["mcdlm", "reference"] = "mcdlm"

    def __post_init__(self):
        h = np.sort(np.asarray(self.heights, dtype=np.float64).reshape(-1))
        h.flags.writeable = False
        object.__setattr__(self, "heights", h)
        if self.n_attempted < h.size:
            raise InvalidInputError("Accepted count cannot exceed attempts")

    @property
    def n_accepted(self) -> int:
        return int(self.heights.size)

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_attempted if self.n_attempted else float("nan")

    def cdf(self, u):
        return empirical_cdf(self, u)

    def pvalue(self, u) -> PValue:
        return peak_pvalue(self, u)


def matrix_sqrt(matrix: np.ndarray) -> np.ndarray:
    """Factor L with L @ L.T == matrix.

    Cholesky is retried with growing diagonal jitter; a near-singular matrix
    falls back to the eigen square root with eigenvalues clipped at zero.
    """
    m = np.asarray(matrix, dtype=np.float64)
    for jitter in _JITTERS:
        try:
            factor = np.linalg.cholesky(m + jitter * np.eye(m.shape[0]))
        except np.linalg.LinAlgError:
            continue
        if jitter:
            logger.warning(f"Cholesky needed diagonal jitter {jitter:g}")
        return factor
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() < _NEG_EIG_TOL:
        raise NotPSDError(f"Covariance is not PSD (min eigenvalue {w.min():.3g}); repair it first")
    logger.warning(f"Falling back to eigen square root (min eigenvalue {w.min():.3g})")
    return v * np.sqrt(np.clip(w, 0.0, None))


def default_target_n(cov: NeighborhoodCov) -> int:
    """Smaller budget for very smooth covariances, where each draw is near-degenerate"""
    if cov.size > 1 and float(np.max(cov.matrix[0, 1:])) >= settings.SMOOTH_RHO_THRESHOLD:
        return settings.TARGET_N_SMOOTH
    return settings.TARGET_N_DEFAULT


def _run_chunk(
    factor: np.ndarray, model: SamplingModel, seed: int, index: int, size: int, limit: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Accepted attempt positions and heights within one chunk.

    The stream always produces a full chunk so a chunk's draws never depend on
    ``limit``; only the first ``limit`` attempts are examined.
    """
    gen = rng.stream(seed, rng.SAMPLE, index)
    z = gen.standard_normal((size, factor.shape[0])) @ factor.T
    if model.kind == "t":
        z /= np.sqrt(gen.chisquare(model.nu, size) / model.nu)[:, None]
    z = z[:limit]
    accepted = np.flatnonzero(z[:, 0] > z[:, 1:].max(axis=1))
    return accepted, z[accepted, 0]


def sample_local_maxima(
    cov: NeighborhoodCov,
    model: Optional[SamplingModel] = None,
    target_n: Optional[int] = None,
    max_m: Optional[int] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    chunk_size: Optional[int] = None,
) -> PeakSampleSet:
    """Draw neighborhood vectors until ``target_n`` centres are strict maxima.

    Attempts are split into fixed-size chunks, chunk ``c`` reading its own
    random stream; chunks run in parallel waves and are merged in chunk order,
    so the heights depend on (cov, model, seed, target_n, max_m, chunk_size)
    but never on the thread count.
    """
    model = model or SamplingModel.gaussian()
    target_n = int(target_n) if target_n is not None else default_target_n(cov)
    max_m = int(max_m) if max_m is not None else settings.MAX_M_FACTOR * target_n
    seed = settings.DEFAULT_SEED if seed is None else int(seed)
    chunk = int(chunk_size or settings.CHUNK_SIZE)
    if target_n < 1:
        raise InvalidInputError("target_N must be at least 1")
    if max_m < target_n:
        raise InvalidInputError("max_M must be at least target_N")
    if chunk < 1:
        raise InvalidInputError("Chunk size must be positive")

    factor = matrix_sqrt(cov.matrix)
    workers = settings.resolved_threads(threads)
    n_chunks = math.ceil(max_m / chunk)

    heights: List[np.ndarray] = []
    got = 0
    attempted = 0
    with ThreadPoolExecutor(max_workers=workers) as pool:
        next_chunk = 0
        while next_chunk < n_chunks and got < target_n:
            wave = range(next_chunk, min(n_chunks, next_chunk + workers))
            futures = [
                pool.submit(_run_chunk, factor, model, seed, c, chunk, min(chunk, max_m - c * chunk))
                for c in wave
            ]
            for c, fut in zip(wave, futures):
                if got >= target_n:
                    break
                pos, h = fut.result()
                limit = min(chunk, max_m - c * chunk)
                need = target_n - got
                if h.size >= need:
                    heights.append(h[:need])
                    attempted += int(pos[need - 1]) + 1
                    got = target_n
                else:
                    heights.append(h)
                    attempted += limit
                    got += h.size
            next_chunk = wave.stop

    if got == 0:
        raise DegenerateCovarianceError(f"No local maxima in {attempted} attempts; the covariance is degenerate")
    if got < target_n:
        logger.warning(f"Attempt budget exhausted: {got} of {target_n} maxima after {attempted} draws")
    logger.info(f"Sampled {got} maxima from {attempted} draws ({model.label}, {cov.nbhd.kind}, k={cov.size - 1})")
    return PeakSampleSet(
        heights=np.concatenate(heights),
        n_attempted=attempted,
        seed=seed,
        model=model.label,
        cov_fingerprint=cov.fingerprint(),
    )


def empirical_cdf(samples: PeakSampleSet, u):
    """Fraction of heights <= u; scalar or array ``u``"""
    if samples.n_accepted == 0:
        raise InvalidInputError("Empty sample set")
    out = np.searchsorted(samples.heights, u, side="right") / samples.n_accepted
    return float(out) if np.ndim(out) == 0 else out


def peak_pvalues(samples: PeakSampleSet, u) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorised p-values and censoring flags.

    Heights at or beyond the largest sample get 1/(N+1) and ``censored=True``.
    """
    u = np.asarray(u, dtype=np.float64)
    p = 1.0 - np.asarray(empirical_cdf(samples, u), dtype=np.float64)
    censored = u >= samples.heights[-1]
    p = np.where(censored, 1.0 / (samples.n_accepted + 1), p)
    return p, censored


def peak_pvalue(samples: PeakSampleSet, u: float) -> PValue:
    p, censored = peak_pvalues(samples, u)
    return PValue(float(p), bool(censored))


def gaussianize_values(values, nu: float) -> np.ndarray:
    if nu is None or nu < 1:
        raise InvalidInputError("Gaussianization needs nu >= 1")
    t = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise InvalidInputError("Cannot Gaussianize non-finite values")
    a = np.abs(t)
    # lower tail in log space; sign restored afterwards
    with np.errstate(divide="ignore"):
        z = np.array(-special.ndtri_exp(stats.t.logcdf(-a, nu)), dtype=np.float64)
    far = ~np.isfinite(z)
    if np.any(far):
        # the t tail underflowed; use the large-deviation form, increasing in |t|
        z[far] = np.sqrt(nu * np.log1p(a[far] ** 2 / nu))
    return np.sign(t) * z


def gaussianize_t(field: Field, nu: float) -> Field:
    """Voxelwise Z = -Phi^-1(F_t(-T)); strictly increasing, so peaks are preserved"""
    return Field(field.lattice, gaussianize_values(field.values, nu))
