"""Lattice geometry: neighborhoods, fields and discrete local maxima."""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Literal, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidInputError
from .schemas import LatticeSpec, PeakRecord

logger = logging.getLogger(__name__)

NeighborhoodKind = Literal["pc", "fc", "custom"]
BoundaryPolicy = Literal["exclude", "reduced"]

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def offset_to_index(offset: Sequence[int]) -> int:
    """Flat base-3 index of an offset in {-1,0,1}^D, first axis least significant."""
    return sum((3 ** i) * (int(a) + 1) for i, a in enumerate(offset))


def index_to_offset(index: int, dim: int) -> Tuple[int, ...]:
    if not 0 <= index < 3 ** dim:
        raise InvalidInputError(f"Index {index} outside the 3^{dim} block")
    digits = []
    for _ in range(dim):
        index, r = divmod(index, 3)
        digits.append(r - 1)
    return tuple(digits)


def center_index(dim: int) -> int:
    return (3 ** dim - 1) // 2


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Neighbour displacements around a centre voxel, in canonical base-3 order."""

    kind: NeighborhoodKind
    offsets: np.ndarray  # (k, D) int

    def __post_init__(self):
        offs = np.asarray(self.offsets, dtype=np.int64)
        if offs.ndim != 2 or offs.shape[0] == 0:
            raise InvalidInputError("A neighborhood needs at least one offset")
        if np.any(np.abs(offs) > 1):
            raise InvalidInputError("Offsets must have entries in {-1, 0, 1}")
        if np.any(np.all(offs == 0, axis=1)):
            raise InvalidInputError("The zero offset is the centre, not a neighbour")
        order = np.argsort([offset_to_index(o) for o in offs], kind="stable")
        offs = offs[order]
        if len({tuple(o) for o in offs}) != len(offs):
            raise InvalidInputError("Neighborhood offsets must be distinct")
        object.__setattr__(self, "offsets", _readonly(offs))

    @property
    def dim(self) -> int:
        return int(self.offsets.shape[1])

    @property
    def size(self) -> int:
        return int(self.offsets.shape[0])

    @property
    def key(self) -> Tuple[Tuple[int, ...], ...]:
        return tuple(tuple(int(x) for x in o) for o in self.offsets)

    def with_center(self) -> np.ndarray:
        """Offsets of the (k+1) covariance slots, centre first"""
        return np.vstack([np.zeros((1, self.dim), dtype=np.int64), self.offsets])

    def flat_indices(self) -> np.ndarray:
        return np.array([offset_to_index(o) for o in self.offsets], dtype=np.int64)

    def restrict(self, keep: Iterable[bool]) -> "Neighborhood":
        keep = np.asarray(list(keep), dtype=bool)
        if not keep.any():
            raise InvalidInputError("Restricted neighborhood would be empty")
        return Neighborhood("custom", self.offsets[keep])

    def __eq__(self, other) -> bool:
        return isinstance(other, Neighborhood) and self.key == other.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __repr__(self) -> str:
        return f"<Neighborhood(kind={self.kind}, dim={self.dim}, size={self.size})>"


def build_neighborhood(kind: str, dim: int, offsets: Optional[Iterable[Sequence[int]]] = None) -> Neighborhood:
    """PC (2D offsets), FC (3^D - 1 offsets) or custom neighborhood in canonical order."""
    if dim < 1:
        raise InvalidInputError(f"Dimension must be >= 1, got {dim}")
    kind = kind.lower()
    if kind == "pc":
        offs = []
        for d in range(dim):
            for sign in (-1, 1):
                o = [0] * dim
                o[d] = sign
                offs.append(o)
    elif kind == "fc":
        offs = [list(o) for o in itertools.product((-1, 0, 1), repeat=dim) if any(o)]
    elif kind == "custom":
        if offsets is None:
            raise InvalidInputError("A custom neighborhood needs explicit offsets")
        offs = [list(o) for o in offsets]
        if any(len(o) != dim for o in offs):
            raise InvalidInputError(f"Custom offsets must have {dim} components")
    else:
        raise InvalidInputError(f"Unsupported neighborhood kind: {kind}")
    return Neighborhood(kind, np.array(offs, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class Field:
    """Real values on a lattice, stored flat in row-major order (last axis fastest)."""

    lattice: LatticeSpec
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if vals.size != self.lattice.n_voxels:
            raise InvalidInputError(
                f"Field has {vals.size} values, lattice needs {self.lattice.n_voxels}"
            )
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("Field values must be finite")
        object.__setattr__(self, "values", _readonly(vals))

    @property
    def array(self) -> np.ndarray:
        return self.values.reshape(self.lattice.sizes)

    @classmethod
    def from_array(cls, arr, steps: Optional[Sequence[float]] = None) -> "Field":
        arr = np.asarray(arr, dtype=np.float64)
        lattice = LatticeSpec(
            dim=arr.ndim,
            sizes=arr.shape,
            steps=tuple(steps) if steps is not None else (1.0,) * arr.ndim,
        )
        return cls(lattice, arr)


def _shifted(padded: np.ndarray, offset: Sequence[int]) -> np.ndarray:
    """View of ``padded`` (padded by 1 on every side) displaced by ``offset``"""
    slices = tuple(slice(1 + o, padded.shape[d] - 1 + o) for d, o in enumerate(offset))
    return padded[slices]


def peak_mask(
    field: Field,
    nbhd: Neighborhood,
    boundary_policy: BoundaryPolicy = "exclude",
    mask: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Boolean arrays (is_peak, boundary) shaped like the field.

    A voxel is a peak when its value strictly exceeds every in-lattice,
    in-mask neighbour. ``boundary`` marks voxels with at least one neighbour
    outside the lattice or mask.
    """
    if field.values.size == 0:
        raise InvalidInputError("Cannot search an empty field for peaks")
    if nbhd.dim != field.lattice.dim:
        raise InvalidInputError(
            f"Neighborhood is {nbhd.dim}-dimensional, field is {field.lattice.dim}-dimensional"
        )
    if boundary_policy not in ("exclude", "reduced"):
        raise InvalidInputError(f"Unknown boundary policy: {boundary_policy}")

    arr = field.array
    inside = np.ones(arr.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if inside.shape != arr.shape:
        raise InvalidInputError("Mask shape does not match the field")

    values = np.pad(np.where(inside, arr, -np.inf), 1, mode="constant", constant_values=-np.inf)
    valid = np.pad(inside, 1, mode="constant", constant_values=False)

    is_peak = inside.copy()
    boundary = np.zeros(arr.shape, dtype=bool)
    for offset in nbhd.offsets:
        present = _shifted(valid, offset)
        is_peak &= np.where(present, arr > _shifted(values, offset), True)
        boundary |= ~present
    if boundary_policy == "exclude":
        is_peak &= ~boundary
    return is_peak, boundary & inside


def neighbor_presence(
    location: Sequence[int], nbhd: Neighborhood, sizes: Sequence[int], mask: Optional[np.ndarray] = None
) -> np.ndarray:
    """Which offsets of ``nbhd`` land inside the lattice (and mask) around ``location``"""
    pos = np.asarray(location, dtype=np.int64) + nbhd.offsets
    present = np.all((pos >= 0) & (pos < np.asarray(sizes, dtype=np.int64)), axis=1)
    if mask is not None:
        inside = np.asarray(mask, dtype=bool)
        present[present] = inside[tuple(pos[present].T)]
    return present


def find_peaks(
    field: Field,
    nbhd: Neighborhood,
    boundary_policy: BoundaryPolicy = "exclude",
    mask: Optional[np.ndarray] = None,
) -> List[PeakRecord]:
    """Discrete local maxima of ``field`` in row-major order."""
    is_peak, boundary = peak_mask(field, nbhd, boundary_policy, mask)
    arr = field.array
    locations = np.argwhere(is_peak)
    logger.debug(f"Found {len(locations)} peaks ({nbhd.kind}, {boundary_policy})")
    return [
        PeakRecord(
            location=tuple(int(i) for i in loc),
            height=float(arr[tuple(loc)]),
            kind=nbhd.kind,
            boundary=bool(boundary[tuple(loc)]),
        )
        for loc in locations
    ]


def fwhm_to_rho(fwhm: float, step: float = 1.0) -> float:
    """Adjacent-voxel correlation exp(-v^2 / (4 eta^2)) of a Gaussian kernel of given FWHM"""
    if not (fwhm > 0 and math.isfinite(fwhm)):
        raise InvalidInputError(f"FWHM must be positive, got {fwhm}")
    eta = fwhm / FWHM_PER_SIGMA
    return math.exp(-(step ** 2) / (4.0 * eta ** 2))


def rho_to_fwhm(rho: float, step: float = 1.0) -> float:
    if not 0.0 < rho < 1.0:
        raise InvalidInputError(f"rho must lie in (0, 1), got {rho}")
    eta = step / (2.0 * math.sqrt(-math.log(rho)))
    return eta * FWHM_PER_SIGMA


def fwhm_to_eta(fwhm: float) -> float:
    return fwhm / FWHM_PER_SIGMA


def eta_to_fwhm(eta: float) -> float:
    return eta * FWHM_PER_SIGMA
