"""Synthetic smoothed Gaussian, t and nonseparable mixture fields, and reference peak pools."""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from . import rng
from .config import settings
from .covariance import kernel_weights
from .errors import InvalidInputError
from .lattice import BoundaryPolicy, Field, Neighborhood, find_peaks
from .mcdlm import PeakSampleSet
from .schemas import KernelSpec, LatticeSpec, SimSpec

logger = logging.getLogger(__name__)


def axis_kernels(kernel: KernelSpec, lattice: LatticeSpec) -> List[np.ndarray]:
    etas = kernel.etas_for(lattice.dim)
    return [kernel_weights(etas[d], lattice.steps[d]) for d in range(lattice.dim)]


def smooth_and_standardize(noise: np.ndarray, weights: Sequence[np.ndarray], pad: Sequence[int]) -> np.ndarray:
    """Smooth padded white noise, crop ``pad`` voxels per side and rescale to unit variance.

    The variance at each cropped voxel is the kernel mass that falls inside the
    padded grid, sum_l K(s - l)^2, so the rescaling is exact.
    """
    x = np.asarray(noise, dtype=np.float64)
    var = np.ones(())
    for d, w in enumerate(weights):
        x = ndimage.correlate1d(x, w, axis=d, mode="constant", cval=0.0)
        axis_var = ndimage.correlate1d(np.ones(x.shape[d]), w * w, mode="constant", cval=0.0)
        var = np.multiply.outer(var, axis_var)
    crop = tuple(slice(p, n - p) for p, n in zip(pad, x.shape))
    return x[crop] / np.sqrt(var[crop])


def _padded_shape(spec: SimSpec) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    pad = spec.resolved_padding()
    return tuple(n + 2 * p for n, p in zip(spec.lattice.sizes, pad)), pad


def _gaussian(spec: SimSpec, kernel: KernelSpec, gen: np.random.Generator) -> np.ndarray:
    shape, pad = _padded_shape(spec)
    return smooth_and_standardize(gen.standard_normal(shape), axis_kernels(kernel, spec.lattice), pad)


def gaussian_field(spec: SimSpec, index: int) -> Field:
    gen = rng.stream(spec.seed, rng.SIMULATE, index)
    return Field(spec.lattice, _gaussian(spec, spec.kernel, gen))


def t_field(spec: SimSpec, index: int) -> Field:
    """eps / sqrt(sum_{j<=nu} Z_j^2 / nu) from nu + 1 independent smoothed fields"""
    gen = rng.stream(spec.seed, rng.SIMULATE, index)
    eps = _gaussian(spec, spec.kernel, gen)
    ss = np.zeros_like(eps)
    for _ in range(spec.nu):
        ss += _gaussian(spec, spec.kernel, gen) ** 2
    return Field(spec.lattice, eps / np.sqrt(ss / spec.nu))


def mixture_field(spec: SimSpec, index: int) -> Field:
    gen = rng.stream(spec.seed, rng.SIMULATE, index)
    a = _gaussian(spec, spec.kernel, gen)
    b = _gaussian(spec, spec.kernel_b, gen)
    # two independent unit-variance fields; their scaled sum has unit variance again
    return Field(spec.lattice, (a + b) / np.sqrt(2.0))


def _generate(spec: SimSpec, make: Callable[[SimSpec, int], Field], threads: Optional[int]) -> Iterator[Field]:
    """Yield fields in index order, computing one wave of ``threads`` at a time"""
    workers = settings.resolved_threads(threads)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, spec.n_fields, workers):
            stop = min(spec.n_fields, start + workers)
            yield from pool.map(lambda i: make(spec, i), range(start, stop))


def simulate_gaussian(spec: SimSpec, threads: Optional[int] = None) -> Iterator[Field]:
    if spec.model != "gaussian":
        raise InvalidInputError(f"simulate_gaussian needs a gaussian model, got {spec.model}")
    return _generate(spec, gaussian_field, threads)


def simulate_t(spec: SimSpec, threads: Optional[int] = None) -> Iterator[Field]:
    if spec.model != "t":
        raise InvalidInputError(f"simulate_t needs a t model, got {spec.model}")
    if spec.nu is None or spec.nu < 1:
        raise InvalidInputError("t-fields need nu >= 1")
    return _generate(spec, t_field, threads)


def simulate_nonseparable(spec: SimSpec, threads: Optional[int] = None) -> Iterator[Field]:
    if spec.model != "mixture":
        raise InvalidInputError(f"simulate_nonseparable needs a mixture model, got {spec.model}")
    if spec.lattice.dim != 2:
        raise InvalidInputError("The nonseparable mixture is defined on 2D lattices")
    return _generate(spec, mixture_field, threads)


def simulate(spec: SimSpec, threads: Optional[int] = None) -> Iterator[Field]:
    """Dispatch on ``spec.model``"""
    if spec.model == "t":
        return simulate_t(spec, threads)
    if spec.model == "mixture":
        return simulate_nonseparable(spec, threads)
    return simulate_gaussian(spec, threads)


@dataclass(frozen=True, eq=False)
class ReferenceDistribution:
    """Pooled peak heights, ascending, with the field and voxel each came from."""

    heights: np.ndarray
    pvalues: np.ndarray
    field_index: np.ndarray
    locations: np.ndarray
    n_fields: int

    @property
    def size(self) -> int:
        return int(self.heights.size)

    def survival(self, u) -> np.ndarray:
        """Fraction of pooled heights strictly above u"""
        return (self.size - np.searchsorted(self.heights, u, side="right")) / self.size

    def as_sample_set(self, seed: int = 0, model: str = "reference") -> PeakSampleSet:
        return PeakSampleSet(self.heights, n_attempted=self.size, seed=seed, model=model, kind="reference")


def reference_distribution(
    fields: Iterable[Field],
    nbhd: Neighborhood,
    boundary_policy: BoundaryPolicy = "exclude",
    mask: Optional[np.ndarray] = None,
) -> ReferenceDistribution:
    """Pool peak heights over fields; p_i = #{j : g_j > g_i} / n."""
    heights, index, locs = [], [], []
    n_fields = 0
    for i, field in enumerate(fields):
        n_fields += 1
        for peak in find_peaks(field, nbhd, boundary_policy, mask):
            heights.append(peak.height)
            index.append(i)
            locs.append(peak.location)
    if n_fields == 0:
        raise InvalidInputError("Reference distribution needs at least one field")
    if not heights:
        raise InvalidInputError(f"No peaks found in {n_fields} field(s)")

    g = np.asarray(heights, dtype=np.float64)
    order = np.argsort(g, kind="stable")
    g = g[order]
    p = (g.size - np.searchsorted(g, g, side="right")) / g.size
    logger.info(f"Pooled {g.size} peaks from {n_fields} fields ({nbhd.kind}, {boundary_policy})")
    return ReferenceDistribution(
        heights=g,
        pvalues=p,
        field_index=np.asarray(index, dtype=np.int64)[order],
        locations=np.asarray(locs, dtype=np.int64)[order],
        n_fields=n_fields,
    )
