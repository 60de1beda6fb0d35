"""One-sample t analysis of subject volumes with peak-level p-values."""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from . import rng
from .config import settings
from .covariance import NeighborhoodCov, empirical_cov, lag_covariances, psd_repair
from .errors import InvalidInputError
from .lattice import BoundaryPolicy, Field, Neighborhood, find_peaks, neighbor_presence, rho_to_fwhm
from .lookup import LookupTable, query
from .mcdlm import PeakSampleSet, SamplingModel, gaussianize_values, peak_pvalues, sample_local_maxima
from .schemas import PeakRecord
from .validate import BHResult, bh_adjust

logger = logging.getLogger(__name__)

Method = Literal["mcdlm_t", "mcdlm_gaussianized", "lookup_if_isotropic", "external"]
METHODS = ("mcdlm_t", "mcdlm_gaussianized", "lookup_if_isotropic", "external")

OUTSIDE_MASK = 0.0
ANISOTROPY_TOLERANCE = 0.02


@dataclass(frozen=True, eq=False)
class StudyData:
    subjects: Tuple[Field, ...]
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if len(subjects) < 2:
            raise InvalidInputError("A study needs at least 2 subjects")
        lattice = subjects[0].lattice
        if any(s.lattice != lattice for s in subjects[1:]):
            raise InvalidInputError("All subjects must share one lattice")
        object.__setattr__(self, "subjects", subjects)
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=bool)
            if m.shape != lattice.sizes:
                raise InvalidInputError("Mask shape does not match the subject lattice")
            if not m.any():
                raise InvalidInputError("Mask is empty")
            m.flags.writeable = False
            object.__setattr__(self, "mask", m)

    @property
    def lattice(self):
        return self.subjects[0].lattice

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def inside(self) -> np.ndarray:
        return np.ones(self.lattice.sizes, dtype=bool) if self.mask is None else self.mask


class TMap(NamedTuple):
    field: Field
    nu: int


def one_sample_t(study: StudyData) -> TMap:
    """t = mean * sqrt(n) / sd with the unbiased SD; off-mask voxels hold 0.0"""
    stack = np.stack([s.array for s in study.subjects])
    inside = study.inside
    mean = stack.mean(axis=0)
    sd = stack.std(axis=0, ddof=1)
    if np.any(sd[inside] <= 0):
        bad = int(np.sum(sd[inside] <= 0))
        raise InvalidInputError(f"Zero variance across subjects at {bad} in-mask voxel(s)")
    t = np.full(inside.shape, OUTSIDE_MASK)
    t[inside] = mean[inside] * np.sqrt(study.n) / sd[inside]
    return TMap(Field(study.lattice, t), study.n - 1)


def axis_correlations(study: StudyData) -> Tuple[float, ...]:
    """Lag-1 correlation along each axis of the standardized subject residuals"""
    dim = study.lattice.dim
    lags = [tuple(int(d == a) for d in range(dim)) for a in range(dim)]
    zero = (0,) * dim
    cov = lag_covariances(study.subjects, lags + [zero], mask=study.mask)
    return tuple(cov[lag] / cov[zero] for lag in lags)


@dataclass
class PeakAnalysis:
    peaks: List[PeakRecord]
    tmap: TMap
    cov: NeighborhoodCov
    axis_rhos: Tuple[float, ...]
    method: str
    samples: Optional[PeakSampleSet] = None
    bh: Optional[BHResult] = None
    notes: List[str] = field(default_factory=list)

    @property
    def axis_fwhm(self) -> Tuple[float, ...]:
        return tuple(rho_to_fwhm(r, s) for r, s in zip(self.axis_rhos, self.tmap.field.lattice.steps))


def _isotropic_rho(rhos: Sequence[float]) -> Optional[float]:
    if max(rhos) - min(rhos) > ANISOTROPY_TOLERANCE:
        return None
    return float(np.mean(rhos))


def _neighbor_groups(
    peaks: Sequence[PeakRecord], nbhd: Neighborhood, study: StudyData
) -> Dict[Optional[Tuple[bool, ...]], List[int]]:
    """Peak indices keyed by in-lattice neighbour pattern; interior peaks under None"""
    groups: Dict[Optional[Tuple[bool, ...]], List[int]] = {}
    for i, p in enumerate(peaks):
        key = None
        if p.boundary:
            present = neighbor_presence(p.location, nbhd, study.lattice.sizes, study.mask)
            if not present.all():
                key = tuple(bool(x) for x in present)
        groups.setdefault(key, []).append(i)
    return groups


def _grouped_pvalues(
    cov: NeighborhoodCov,
    model: SamplingModel,
    values: np.ndarray,
    groups: Mapping[Optional[Tuple[bool, ...]], List[int]],
    pvals: np.ndarray,
    censored: np.ndarray,
    *,
    target_n: Optional[int],
    max_m: Optional[int],
    seed: Optional[int],
    threads: Optional[int],
) -> Optional[PeakSampleSet]:
    """Fill ``pvals`` and ``censored`` per neighbour pattern and return the interior sample set.

    Interior peaks are compared with maxima of the full neighborhood. Each
    boundary pattern gets maxima of its own sub-covariance, drawn from a
    child seed of ``seed``.
    """
    seed = settings.DEFAULT_SEED if seed is None else int(seed)
    interior = None
    if None in groups:
        idx = np.asarray(groups[None], dtype=np.int64)
        interior = sample_local_maxima(cov, model, target_n=target_n, max_m=max_m, seed=seed, threads=threads)
        pvals[idx], censored[idx] = peak_pvalues(interior, values[idx])
    for j, key in enumerate(sorted(k for k in groups if k is not None), start=1):
        idx = np.asarray(groups[key], dtype=np.int64)
        keep = np.asarray(key, dtype=bool)
        if not keep.any():
            # nothing to beat, so the height follows the marginal law
            v = values[idx]
            pvals[idx] = stats.t.sf(v, model.nu) if model.kind == "t" else stats.norm.sf(v)
            censored[idx] = False
            continue
        sub = cov.select(cov.nbhd.restrict(keep))
        child = sample_local_maxima(
            sub, model, target_n=target_n, max_m=max_m, seed=rng.derive_seed(seed, rng.BOUNDARY, j), threads=threads
        )
        pvals[idx], censored[idx] = peak_pvalues(child, values[idx])
        logger.info(f"{idx.size} boundary peak(s) with {sub.nbhd.size} in-lattice neighbours")
    return interior


def analyze_peaks(
    study: StudyData,
    nbhd: Neighborhood,
    method: Method = "mcdlm_t",
    *,
    boundary_policy: BoundaryPolicy = "exclude",
    isotropic: bool = False,
    table: Optional[LookupTable] = None,
    external: Optional[Mapping[Tuple[int, ...], float]] = None,
    target_n: Optional[int] = None,
    max_m: Optional[int] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    alpha: Optional[float] = None,
) -> PeakAnalysis:
    """Estimate the neighborhood covariance, find t-map peaks and attach p-values.

    ``lookup_if_isotropic`` uses the table only when the axis correlations
    agree within 0.02, the neighborhood is FC and the table covers the lattice
    dimension; otherwise it falls back to ``mcdlm_gaussianized``. The selected
    method's p-values are BH-adjusted into ``pvalues["bh"]``.

    Under the ``reduced`` boundary policy a boundary peak is compared with
    maxima of the sub-neighborhood that lies inside the lattice and mask.
    The lookup table has no such rows, so those peaks use
    ``mcdlm_gaussianized`` and a note says so.
    """
    if method not in METHODS:
        raise InvalidInputError(f"Unknown method '{method}'; choose from {', '.join(METHODS)}")
    if nbhd.dim != study.lattice.dim:
        raise InvalidInputError("Neighborhood and study dimensions differ")
    notes: List[str] = []

    cov = psd_repair(empirical_cov(study.subjects, nbhd, isotropic=isotropic, mask=study.mask))
    rhos = axis_correlations(study)
    tmap = one_sample_t(study)
    peaks = find_peaks(tmap.field, nbhd, boundary_policy, study.mask)
    if not peaks:
        raise InvalidInputError("The t map has no peaks")
    heights = np.array([p.height for p in peaks])
    logger.info(f"t map with nu={tmap.nu}: {len(peaks)} peaks, axis rho={tuple(round(r, 3) for r in rhos)}")

    used = method
    if method == "lookup_if_isotropic":
        rho = _isotropic_rho(rhos)
        reason = None
        if table is None:
            reason = "no lookup table supplied"
        elif rho is None:
            reason = f"axis correlations {tuple(round(r, 3) for r in rhos)} are anisotropic"
        elif nbhd.kind != "fc" or table.dim != study.lattice.dim:
            reason = "table covers a different neighborhood or dimension"
        elif not table.rho_grid[0] <= rho <= table.rho_grid[-1]:
            reason = f"rho={rho:.3f} outside the table range"
        if reason:
            logger.warning(f"Lookup unavailable ({reason}); using mcdlm_gaussianized")
            notes.append(reason)
            used = "mcdlm_gaussianized"

    samples = None
    censored = np.zeros(len(peaks), dtype=bool)
    pvals = np.full(len(peaks), np.nan)
    labels = [used] * len(peaks)
    sampling = dict(target_n=target_n, max_m=max_m, seed=seed, threads=threads)
    if used != "external":
        groups = _neighbor_groups(peaks, nbhd, study)
        z = heights if used == "mcdlm_t" else gaussianize_values(heights, tmap.nu)
    if used == "mcdlm_t":
        samples = _grouped_pvalues(cov, SamplingModel.student_t(tmap.nu), z, groups, pvals, censored, **sampling)
    elif used == "mcdlm_gaussianized":
        samples = _grouped_pvalues(cov, SamplingModel.gaussian(), z, groups, pvals, censored, **sampling)
    elif used == "lookup_if_isotropic":
        for i in groups.pop(None, []):
            r = query(table, rho, float(z[i]))
            pvals[i], censored[i] = r.value, r.censored
        if groups:
            # the table only covers the full FC neighborhood
            moved = [i for idx in groups.values() for i in idx]
            note = f"{len(moved)} boundary peak(s) use mcdlm_gaussianized"
            logger.warning(note)
            notes.append(note)
            _grouped_pvalues(cov, SamplingModel.gaussian(), z, groups, pvals, censored, **sampling)
            for i in moved:
                labels[i] = "mcdlm_gaussianized"
    else:
        external = external or {}
        for i, p in enumerate(peaks):
            pvals[i] = external.get(tuple(p.location), np.nan)
        missing = int(np.isnan(pvals).sum())
        if missing:
            logger.warning(f"{missing} peak(s) have no external p-value")

    records = []
    for i, p in enumerate(peaks):
        pv, cens = {}, {}
        if np.isfinite(pvals[i]):
            pv[labels[i]] = float(pvals[i])
            cens[labels[i]] = bool(censored[i])
        records.append(p.model_copy(update={"pvalues": pv, "censored": cens}))

    have = np.isfinite(pvals)
    bh = None
    if have.any():
        bh = bh_adjust(pvals[have], settings.FDR_ALPHA if alpha is None else alpha)
        for j, i in enumerate(np.flatnonzero(have)):
            records[i].pvalues["bh"] = float(bh.adjusted[j])
        logger.info(f"BH rejected {bh.n_rejected} of {int(have.sum())} peaks")

    return PeakAnalysis(records, tmap, cov, rhos, used, samples, bh, notes)
