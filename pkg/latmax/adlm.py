"""Closed-form peak height distribution for partially connected neighborhoods.

Under a separable Gaussian correlation the neighbours along different axes are
conditionally independent given the centre, so the probability that the
centre at height z beats its neighbours factors into one term per axis. The
per-axis term is Q(rho_d, z) for two neighbours, Phi(h_d z) for one, and 1 for
none.
"""

import logging
import math
import threading
import warnings
from functools import lru_cache
from typing import Optional, Sequence, Set, Tuple

import numpy as np
from scipy import integrate, special, stats

from .config import settings
from .errors import InvalidInputError, QuadratureError
from .schemas import AdlmParams, LatticeSpec

logger = logging.getLogger(__name__)

_warned_rhos: Set[float] = set()
_warned_lock = threading.Lock()


def _check_rho(rho: float) -> None:
    if not (0.0 <= rho < 1.0) or not math.isfinite(rho):
        raise InvalidInputError(f"rho must lie in [0, 1), got {rho}")


def _near_degenerate(rho: float) -> bool:
    if rho > settings.ADLM_RHO_LIMIT:
        with _warned_lock:
            first = rho not in _warned_rhos
            _warned_rhos.add(rho)
        if first:
            logger.warning(f"rho={rho} is too close to 1; using the small-h limit Q = alpha/pi")
        return True
    return False


def _h_alpha(rho: float) -> Tuple[float, float]:
    return math.sqrt((1 - rho) / (1 + rho)), math.asin(math.sqrt((1 - rho * rho) / 2))


def q_factor(rho: float, z: float) -> float:
    """Q(rho, z) by adaptive quadrature of its angular integral."""
    _check_rho(rho)
    h, alpha = _h_alpha(rho)
    if _near_degenerate(rho):
        return alpha / math.pi
    if z == -math.inf:
        return 0.0
    if z == math.inf:
        return 1.0
    c = 0.5 * (h * z) ** 2

    def integrand(theta):
        s = math.sin(theta)
        return math.exp(-c / (s * s)) if s > 0 else 0.0

    if c == 0.0:
        inner = alpha
    else:
        inner, _ = integrate.quad(integrand, 0.0, alpha, epsabs=settings.Q_EPSABS, limit=200)
    q = 1.0 - 2.0 * stats.norm.sf(h * max(z, 0.0)) + inner / math.pi
    return min(1.0, max(0.0, q))


def q_factor_many(rho: float, z) -> np.ndarray:
    """Vectorised Q via Owen's T: Q = Phi(h z) - 2 T(h z, cot alpha)"""
    _check_rho(rho)
    h, alpha = _h_alpha(rho)
    z = np.asarray(z, dtype=np.float64)
    if rho > settings.ADLM_RHO_LIMIT:
        return np.full(z.shape, alpha / math.pi)
    hz = h * z
    q = special.ndtr(hz) - 2.0 * special.owens_t(hz, 1.0 / math.tan(alpha))
    return np.clip(q, 0.0, 1.0)


def axis_factor(rho: float, present: int, z) -> np.ndarray:
    """Conditional probability that ``present`` neighbours on one axis lie below z"""
    z = np.asarray(z, dtype=np.float64)
    if present == 2:
        return q_factor_many(rho, z)
    if present == 1:
        h, _ = _h_alpha(rho)
        return special.ndtr(h * z)
    return np.ones(z.shape)


def _quad(fn, a, b, epsabs):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            value, err = integrate.quad(fn, a, b, epsabs=epsabs, epsrel=0.0, limit=500)
        except integrate.IntegrationWarning as e:
            raise QuadratureError(f"Quadrature on [{a}, {b}] did not converge: {e}") from None
    if not math.isfinite(value) or err > 10 * epsabs:
        raise QuadratureError(f"Quadrature on [{a}, {b}] missed tolerance (error {err:.2g})")
    return value


class AdlmDistribution:
    """Normalized height distribution of PC maxima for one parameter set.

    The normalization constant is computed once; the survival curve is
    tabulated lazily on a dense grid for vectorised p-values.
    """

    def __init__(self, params: AdlmParams):
        self.params = params
        self.lower = settings.ADLM_LOWER
        self.upper = settings.ADLM_UPPER
        for rho in params.rhos:
            _check_rho(rho)
            _near_degenerate(rho)
        self.normalizer = _quad(self.unnormalized, self.lower, self.upper, settings.NORM_EPSABS)
        if self.normalizer <= 0:
            raise QuadratureError("Normalizing constant vanished")
        self._grid: Optional[np.ndarray] = None
        self._surv: Optional[np.ndarray] = None

    def __repr__(self) -> str:
        return f"<AdlmDistribution(rhos={self.params.rhos}, profile={self.params.profile})>"

    def unnormalized(self, z):
        out = stats.norm.pdf(z)
        for rho, present in zip(self.params.rhos, self.params.profile):
            out = out * axis_factor(rho, present, z)
        return float(out) if np.ndim(out) == 0 else out

    def density(self, z):
        return self.unnormalized(z) / self.normalizer

    def survival(self, u: float) -> float:
        if u <= self.lower:
            return 1.0
        if u >= self.upper:
            return 0.0
        tail = _quad(self.unnormalized, u, self.upper, settings.NORM_EPSABS)
        return min(1.0, max(0.0, tail / self.normalizer))

    def _curve(self) -> Tuple[np.ndarray, np.ndarray]:
        if self._grid is None:
            grid = np.linspace(self.lower, self.upper, settings.ADLM_GRID_POINTS)
            cum = integrate.cumulative_trapezoid(self.unnormalized(grid), grid, initial=0.0)
            self._surv = np.clip(1.0 - cum / cum[-1], 0.0, 1.0)
            self._grid = grid
        return self._grid, self._surv

    def survival_many(self, u) -> np.ndarray:
        """Survival at many heights from the tabulated curve"""
        grid, surv = self._curve()
        return np.interp(np.asarray(u, dtype=np.float64), grid, surv, left=1.0, right=0.0)

    def pvalue(self, u: float) -> float:
        return self.survival(u)


@lru_cache(maxsize=128)
def distribution(params: AdlmParams) -> AdlmDistribution:
    return AdlmDistribution(params)


def adlm_density(params: AdlmParams, z):
    return distribution(params).density(z)


def adlm_survival(params: AdlmParams, u: float) -> float:
    return distribution(params).survival(u)


def adlm_pvalue(params: AdlmParams, u: float) -> float:
    """P(Z(s) > u | s is a PC local maximum)"""
    return distribution(params).pvalue(u)


def adlm_pvalues(params: AdlmParams, u) -> np.ndarray:
    return distribution(params).survival_many(u)


def boundary_profile_for(
    location: Sequence[int], lattice: LatticeSpec, mask: Optional[np.ndarray] = None
) -> Tuple[int, ...]:
    """Per-axis count of PC neighbours inside the lattice (and mask)"""
    if len(location) != lattice.dim:
        raise InvalidInputError("Location dimension does not match the lattice")
    profile = []
    for d in range(lattice.dim):
        count = 0
        for sign in (-1, 1):
            nb = list(location)
            nb[d] += sign
            if 0 <= nb[d] < lattice.sizes[d] and (mask is None or bool(mask[tuple(nb)])):
                count += 1
        profile.append(count)
    return tuple(profile)
