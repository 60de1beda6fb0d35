"""Neighborhood covariance: analytic kernels, Kronecker form, empirical estimation, PSD repair."""

import hashlib
import itertools
import logging
import math
from dataclasses import dataclass, replace
from functools import reduce
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from .config import settings
from .errors import InvalidInputError, NumericError
from .lattice import Field, Neighborhood, build_neighborhood, center_index, offset_to_index
from .schemas import KernelSpec, LatticeSpec

logger = logging.getLogger(__name__)

Provenance = Literal["kronecker", "discrete_kernel", "continuous_kernel", "empirical", "mixture"]
Standardize = Literal["voxel", "global", "none"]

_MAX_WINDOW = 10_000_000


@dataclass(frozen=True, eq=False)
class NeighborhoodCov:
    """Covariance of (centre, neighbours); row/column 0 is the centre voxel."""

    nbhd: Neighborhood
    matrix: np.ndarray
    provenance: Provenance
    psd_repaired: bool = False
    clipped: float = 0.0

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        k1 = self.nbhd.size + 1
        if m.shape != (k1, k1):
            raise InvalidInputError(f"Covariance must be {k1}x{k1}, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidInputError("Covariance entries must be finite")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.nbhd.key).encode())
        h.update(np.ascontiguousarray(self.matrix).tobytes())
        return h.hexdigest()[:16]

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())

    def select(self, sub: Neighborhood) -> "NeighborhoodCov":
        """Restrict to a sub-neighborhood, e.g. PC out of FC"""
        positions = {o: i + 1 for i, o in enumerate(self.nbhd.key)}
        try:
            idx = [0] + [positions[o] for o in sub.key]
        except KeyError as e:
            raise InvalidInputError(f"Offset {e.args[0]} is not part of this covariance") from None
        return replace(self, nbhd=sub, matrix=self.matrix[np.ix_(idx, idx)])

    def adjacent_correlations(self) -> Tuple[float, ...]:
        """Per-axis lag-1 correlation, averaged over the +e_d and -e_d slots present"""
        dim = self.nbhd.dim
        out = []
        for d in range(dim):
            vals = []
            for i, o in enumerate(self.nbhd.key):
                if abs(o[d]) == 1 and sum(abs(x) for x in o) == 1:
                    vals.append(self.matrix[0, i + 1])
            out.append(float(np.mean(vals)) if vals else float("nan"))
        return tuple(out)


def standardize_matrix(m: np.ndarray) -> np.ndarray:
    """Rescale to unit diagonal and symmetrize"""
    d = np.sqrt(np.diag(m))
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise NumericError("Covariance has a non-positive variance and cannot be standardized")
    out = m / np.outer(d, d)
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 1.0)
    return out


def kronecker_matrix(rho: float, dim: int) -> np.ndarray:
    """A^{(x)D} over the full 3^D block, indexed by base-3 offsets (first axis fastest)."""
    if not 0.0 < rho < 1.0:
        raise InvalidInputError(f"rho must lie in (0, 1), got {rho}")
    if dim < 1:
        raise InvalidInputError(f"Dimension must be >= 1, got {dim}")
    a = np.array([[1.0, rho, rho ** 4], [rho, 1.0, rho], [rho ** 4, rho, 1.0]])
    return reduce(np.kron, [a] * dim)


def _slot_order(nbhd: Neighborhood) -> List[int]:
    return [center_index(nbhd.dim)] + [offset_to_index(o) for o in nbhd.key]


def kronecker_cov(rho: float, dim: int, nbhd: Optional[Neighborhood] = None) -> NeighborhoodCov:
    """Isotropic separable covariance rho^{||s-t||^2}, centre moved to slot 0.

    ``nbhd`` defaults to the fully connected neighborhood; any sub-neighborhood
    (PC included) selects the matching rows and columns.
    """
    nbhd = nbhd or build_neighborhood("fc", dim)
    if nbhd.dim != dim:
        raise InvalidInputError("Neighborhood dimension does not match")
    full = kronecker_matrix(rho, dim)
    order = _slot_order(nbhd)
    return NeighborhoodCov(nbhd, full[np.ix_(order, order)], "kronecker")


def kernel_window(eta: float, step: float = 1.0) -> int:
    return max(1, math.ceil(settings.KERNEL_WINDOW_SIGMAS * eta / step))


def kernel_weights(eta: float, step: float = 1.0) -> np.ndarray:
    """Truncated 1D Gaussian kernel on the lattice, peak normalised to 1"""
    w = kernel_window(eta, step)
    if 2 * w + 1 > _MAX_WINDOW:
        raise InvalidInputError(f"Kernel window of {2 * w + 1} voxels is too wide to evaluate")
    m = np.arange(-w, w + 1, dtype=np.float64) * step
    return np.exp(-0.5 * (m / eta) ** 2)


def lattice_correlation_1d(eta: float, step: float = 1.0, max_lag: int = 2) -> np.ndarray:
    """Normalized lattice sum sum_l K(l) K(l - lag) / sum_l K(l)^2 for lag = 0..max_lag"""
    k = kernel_weights(eta, step)
    norm = float(np.dot(k, k))
    if not (norm > 0 and math.isfinite(norm)):
        raise NumericError(f"Kernel with bandwidth {eta} has degenerate weights")
    out = np.zeros(max_lag + 1)
    for lag in range(max_lag + 1):
        if lag < k.size:
            out[lag] = np.dot(k[lag:], k[: k.size - lag]) / norm
    return out


def continuous_correlation_1d(eta: float, step: float = 1.0, max_lag: int = 2) -> np.ndarray:
    lags = np.arange(max_lag + 1, dtype=np.float64) * step
    return np.exp(-(lags ** 2) / (4.0 * eta ** 2))


def axis_correlations(kernel: KernelSpec, lattice: LatticeSpec, max_lag: int = 2) -> np.ndarray:
    """(D, max_lag+1) table of per-axis correlations at integer lags"""
    etas = kernel.etas_for(lattice.dim)
    fn = lattice_correlation_1d if kernel.discrete else continuous_correlation_1d
    return np.vstack([fn(etas[d], lattice.steps[d], max_lag) for d in range(lattice.dim)])


def separable_matrix(nbhd: Neighborhood, table: np.ndarray) -> np.ndarray:
    """Sigma[i, j] = prod_d table[d, |o_j[d] - o_i[d]|] over the centre-first slots"""
    slots = nbhd.with_center()
    lags = np.abs(slots[:, None, :] - slots[None, :, :])
    m = np.ones(lags.shape[:2])
    for d in range(nbhd.dim):
        m *= table[d][lags[:, :, d]]
    return m


def kernel_cov(kernel: KernelSpec, lattice: LatticeSpec, nbhd: Neighborhood) -> NeighborhoodCov:
    """Analytic neighborhood correlation of white noise smoothed by ``kernel``."""
    if nbhd.dim != lattice.dim:
        raise InvalidInputError("Neighborhood and lattice dimensions differ")
    table = axis_correlations(kernel, lattice)
    provenance = "discrete_kernel" if kernel.discrete else "continuous_kernel"
    return NeighborhoodCov(nbhd, standardize_matrix(separable_matrix(nbhd, table)), provenance)


def discrete_adjacent_rho(eta: float, step: float = 1.0) -> float:
    return float(lattice_correlation_1d(eta, step, max_lag=1)[1])


def eta_for_rho(rho: float, step: float = 1.0, discrete: bool = True) -> float:
    """Kernel bandwidth whose adjacent-voxel correlation equals ``rho``"""
    if not 0.0 < rho < 1.0:
        raise InvalidInputError(f"rho must lie in (0, 1), got {rho}")
    eta_c = step / (2.0 * math.sqrt(-math.log(rho)))
    if not discrete:
        return eta_c
    lo, hi = 0.05 * step, 2.0 * eta_c
    while discrete_adjacent_rho(hi, step) < rho:
        hi *= 2.0
    return float(optimize.brentq(lambda e: discrete_adjacent_rho(e, step) - rho, lo, hi, xtol=1e-12))


def mixture_cov(sigma1: NeighborhoodCov, sigma2: NeighborhoodCov) -> NeighborhoodCov:
    """Covariance of the voxelwise average of two independent fields, restandardized"""
    if sigma1.nbhd != sigma2.nbhd or sigma1.size != sigma2.size:
        raise InvalidInputError("Mixture components must share a neighborhood")
    m = 0.25 * (sigma1.matrix + sigma2.matrix)
    return NeighborhoodCov(
        sigma1.nbhd,
        standardize_matrix(m),
        "mixture",
        psd_repaired=sigma1.psd_repaired or sigma2.psd_repaired,
    )


def psd_repair(cov: NeighborhoodCov, floor: Optional[float] = None) -> NeighborhoodCov:
    """Clip eigenvalues below ``floor`` (default 1e-10) and restandardize."""
    floor = settings.PSD_FLOOR if floor is None else floor
    m = cov.matrix
    scale = max(1.0, float(np.max(np.abs(m))))
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-8 * scale):
        raise InvalidInputError("Covariance matrix is not symmetric")
    sym = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(sym)
    low = w < floor
    if not low.any():
        return replace(cov, matrix=sym)
    clipped = float(np.max(np.abs(w[low])))
    logger.warning(f"Clipped {int(low.sum())} eigenvalue(s) to {floor:g}; largest magnitude {clipped:.3g}")
    repaired = (v * np.where(low, floor, w)) @ v.T
    return replace(cov, matrix=standardize_matrix(repaired), psd_repaired=True, clipped=clipped)


def conditional_cov(cov: NeighborhoodCov, given: Sequence[int]) -> Tuple[np.ndarray, List[int]]:
    """Covariance of the remaining slots given ``given``: S_BB - S_BA S_AA^-1 S_AB"""
    given = list(given)
    rest = [i for i in range(cov.size) if i not in given]
    s = cov.matrix
    s_aa = s[np.ix_(given, given)]
    s_ab = s[np.ix_(given, rest)]
    s_bb = s[np.ix_(rest, rest)]
    return s_bb - s_ab.T @ np.linalg.solve(s_aa, s_ab), rest


# --- empirical estimation -------------------------------------------------


def _canonical_lag(lag: Tuple[int, ...]) -> Tuple[int, ...]:
    """Representative of {lag, -lag}: first non-zero component positive"""
    for x in lag:
        if x != 0:
            return lag if x > 0 else tuple(-y for y in lag)
    return lag


def _overlap(lag: Sequence[int], shape: Sequence[int]) -> Optional[Tuple[tuple, tuple]]:
    a, b = [], []
    for d, n in zip(lag, shape):
        if abs(d) >= n:
            return None
        if d >= 0:
            a.append(slice(0, n - d))
            b.append(slice(d, n))
        else:
            a.append(slice(-d, n))
            b.append(slice(0, n + d))
    return tuple(a), tuple(b)


def standardize_fields(stack: np.ndarray, how: Standardize, inside: np.ndarray) -> np.ndarray:
    """Standardize a (n, *shape) stack; voxels outside ``inside`` are zeroed"""
    x = np.array(stack, dtype=np.float64)
    if how == "voxel":
        x -= x.mean(axis=0)
        sd = x.std(axis=0, ddof=1)
        if np.any(sd[inside] <= 0):
            raise InvalidInputError("Zero variance across fields at an in-mask voxel")
        x /= np.where(sd > 0, sd, 1.0)
    elif how == "global":
        vals = x[:, inside]
        x -= vals.mean()
        sd = vals.std(ddof=1)
        if sd <= 0:
            raise InvalidInputError("Fields are constant")
        x /= sd
    elif how != "none":
        raise InvalidInputError(f"Unknown standardization: {how}")
    x[:, ~inside] = 0.0
    return x


def _lag_sums(x: np.ndarray, inside: np.ndarray, lag: Tuple[int, ...]) -> Tuple[float, int]:
    ov = _overlap(lag, inside.shape)
    if ov is None:
        return 0.0, 0
    a, b = ov
    pair = inside[a] & inside[b]
    count = int(pair.sum()) * x.shape[0]
    total = 0.0
    for i in range(x.shape[0]):  # fixed field order keeps the sum reproducible
        total += float(np.sum((x[i][a] * x[i][b])[pair]))
    return total, count


def _lags_with_norm(norm2: float, steps: Sequence[float], tol: float = 1e-9) -> List[Tuple[int, ...]]:
    radius = [int(math.floor(math.sqrt(norm2) / s + 1e-9)) for s in steps]
    found = set()
    for lag in itertools.product(*[range(-r, r + 1) for r in radius]):
        n2 = sum((l * s) ** 2 for l, s in zip(lag, steps))
        if abs(n2 - norm2) <= tol * max(1.0, norm2):
            found.add(_canonical_lag(lag))
    return sorted(found)


def lag_covariances(
    fields: Sequence[Field],
    lags: Iterable[Tuple[int, ...]],
    isotropic: bool = False,
    standardize: Standardize = "voxel",
    mask: Optional[np.ndarray] = None,
) -> Dict[Tuple[int, ...], float]:
    """Pooled products Z_i(s') Z_i(s' + lag) averaged over fields and in-lattice pairs."""
    if len(fields) < 2:
        raise InvalidInputError("Covariance estimation needs at least 2 fields")
    lattice = fields[0].lattice
    for f in fields[1:]:
        if f.lattice != lattice:
            raise InvalidInputError("All fields must share one lattice")
    inside = np.ones(lattice.sizes, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if inside.shape != tuple(lattice.sizes):
        raise InvalidInputError("Mask shape does not match the lattice")
    x = standardize_fields(np.stack([f.array for f in fields]), standardize, inside)

    wanted = sorted({_canonical_lag(tuple(int(v) for v in lag)) for lag in lags})
    cache: Dict[Tuple[int, ...], Tuple[float, int]] = {}

    def sums(lag):
        if lag not in cache:
            cache[lag] = _lag_sums(x, inside, lag)
        return cache[lag]

    out = {}
    for lag in wanted:
        if isotropic:
            norm2 = sum((l * s) ** 2 for l, s in zip(lag, lattice.steps))
            group = _lags_with_norm(norm2, lattice.steps)
        else:
            group = [lag]
        total = sum(sums(g)[0] for g in group)
        count = sum(sums(g)[1] for g in group)
        if count == 0:
            raise InvalidInputError(f"Lattice too small to observe lag {lag}")
        out[lag] = total / count
    return out


def empirical_cov(
    fields: Sequence[Field],
    nbhd: Neighborhood,
    isotropic: bool = False,
    standardize: Standardize = "voxel",
    mask: Optional[np.ndarray] = None,
) -> NeighborhoodCov:
    """Block-Toeplitz neighborhood covariance estimated from stationary fields.

    Each entry is the pooled lag covariance for the displacement between the
    two slots; with ``isotropic`` every lag of the same physical length is
    pooled. Pairs with an endpoint outside ``mask`` are dropped.
    """
    if fields and nbhd.dim != fields[0].lattice.dim:
        raise InvalidInputError("Neighborhood and field dimensions differ")
    slots = nbhd.with_center()
    diffs = {tuple(int(v) for v in (slots[j] - slots[i])) for i in range(len(slots)) for j in range(len(slots))}
    cov = lag_covariances(fields, diffs, isotropic=isotropic, standardize=standardize, mask=mask)
    k1 = len(slots)
    m = np.empty((k1, k1))
    for i in range(k1):
        for j in range(k1):
            m[i, j] = cov[_canonical_lag(tuple(int(v) for v in (slots[j] - slots[i])))]
    logger.info(f"Estimated {k1}x{k1} covariance from {len(fields)} fields (isotropic={isotropic})")
    return NeighborhoodCov(nbhd, standardize_matrix(m), "empirical")
