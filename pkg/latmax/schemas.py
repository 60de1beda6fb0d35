import math
from typing import Dict, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, conint, field_validator, model_validator

from .config import settings


class LatticeSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    dim: conint(ge=1)
    sizes: Tuple[int, ...]
    steps: Tuple[float, ...] = ()

    @model_validator(mode="before")
    @classmethod
    def fill_steps(cls, data):
        if isinstance(data, dict) and not data.get("steps") and data.get("dim"):
            data = {**data, "steps": (1.0,) * int(data["dim"])}
        return data

    @field_validator("sizes")
    @classmethod
    def validate_sizes(cls, v):
        if any(n < 1 for n in v):
            raise ValueError("Every axis needs at least one voxel")
        return tuple(v)

    @field_validator("steps")
    @classmethod
    def validate_steps(cls, v):
        if any(not (s > 0 and math.isfinite(s)) for s in v):
            raise ValueError("Lattice steps must be positive and finite")
        return tuple(float(s) for s in v)

    @model_validator(mode="after")
    def check_lengths(self):
        if len(self.sizes) != self.dim or len(self.steps) != self.dim:
            raise ValueError(f"sizes and steps must both have {self.dim} entries")
        return self

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.sizes

    @property
    def n_voxels(self) -> int:
        return math.prod(self.sizes)

    @classmethod
    def cube(cls, dim: int, size: int, step: float = 1.0) -> "LatticeSpec":
        return cls(dim=dim, sizes=(size,) * dim, steps=(step,) * dim)


class KernelSpec(BaseModel):
    """Gaussian smoothing kernel; bandwidths share the units of the lattice steps.

    ``isotropic`` and ``elliptical`` evaluate correlations as finite lattice
    sums of kernel products; ``continuous`` uses the closed form
    exp(-(s-t)' Lambda (s-t) / 2) with Lambda = diag(1 / (2 eta_d^2)).
    """

    model_config = ConfigDict(frozen=True)

    kind: Literal["isotropic", "elliptical", "continuous"]
    etas: Tuple[float, ...] = Field(..., min_length=1)

    @field_validator("etas")
    @classmethod
    def validate_etas(cls, v):
        if any(not (e > 0 and math.isfinite(e)) for e in v):
            raise ValueError("Kernel bandwidths must be positive and finite")
        return tuple(float(e) for e in v)

    @model_validator(mode="after")
    def check_isotropic(self):
        if self.kind == "isotropic" and len(self.etas) != 1:
            raise ValueError("An isotropic kernel takes exactly one bandwidth")
        return self

    @property
    def discrete(self) -> bool:
        return self.kind != "continuous"

    def etas_for(self, dim: int) -> Tuple[float, ...]:
        if len(self.etas) == 1:
            return self.etas * dim
        if len(self.etas) != dim:
            raise ValueError(f"Kernel has {len(self.etas)} bandwidths, lattice has {dim} axes")
        return self.etas

    @classmethod
    def isotropic(cls, eta: float) -> "KernelSpec":
        return cls(kind="isotropic", etas=(eta,))

    @classmethod
    def elliptical(cls, etas) -> "KernelSpec":
        return cls(kind="elliptical", etas=tuple(etas))

    @classmethod
    def continuous(cls, etas) -> "KernelSpec":
        return cls(kind="continuous", etas=tuple(etas))

    def swapped(self) -> "KernelSpec":
        """Same kernel with the bandwidths of the axes reversed"""
        return self.model_copy(update={"etas": tuple(reversed(self.etas))})


class SimSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    lattice: LatticeSpec
    kernel: KernelSpec
    model: Literal["gaussian", "t", "mixture"] = "gaussian"
    nu: Optional[int] = None
    kernel_b: Optional[KernelSpec] = None
    n_fields: conint(ge=1) = 1
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED)
    padding: Optional[conint(ge=0)] = None

    @model_validator(mode="after")
    def check_model(self):
        if self.model == "t" and (self.nu is None or self.nu < 1):
            raise ValueError("t-fields need nu >= 1 degrees of freedom")
        if self.model == "mixture" and self.kernel_b is None:
            object.__setattr__(self, "kernel_b", self.kernel.swapped())
        self.kernel.etas_for(self.lattice.dim)
        return self

    def resolved_padding(self) -> Tuple[int, ...]:
        """Per-axis padding: ceil(4 eta / v) unless overridden"""
        if self.padding is not None:
            return (self.padding,) * self.lattice.dim
        etas = [self.kernel.etas_for(self.lattice.dim)]
        if self.kernel_b is not None:
            etas.append(self.kernel_b.etas_for(self.lattice.dim))
        return tuple(
            max(math.ceil(settings.PADDING_SIGMAS * e[d] / self.lattice.steps[d]) for e in etas)
            for d in range(self.lattice.dim)
        )


class AdlmParams(BaseModel):
    """Adjacent-voxel correlations per axis plus the neighbour-count profile.

    ``profile[d]`` is the number of in-lattice PC neighbours along axis d
    (2 for interior voxels).
    """

    model_config = ConfigDict(frozen=True)

    rhos: Tuple[float, ...] = Field(..., min_length=1)
    profile: Tuple[int, ...] = ()

    @field_validator("rhos")
    @classmethod
    def validate_rhos(cls, v):
        if any(not (0.0 <= r < 1.0) for r in v):
            raise ValueError("Adjacent correlations must lie in [0, 1)")
        return tuple(float(r) for r in v)

    @model_validator(mode="after")
    def fill_profile(self):
        if not self.profile:
            object.__setattr__(self, "profile", (2,) * len(self.rhos))
        if len(self.profile) != len(self.rhos):
            raise ValueError("profile needs one entry per axis")
        if any(p not in (0, 1, 2) for p in self.profile):
            raise ValueError("profile entries must be 0, 1 or 2")
        return self

    @property
    def dim(self) -> int:
        return len(self.rhos)

    @property
    def h(self) -> Tuple[float, ...]:
        return tuple(math.sqrt((1 - r) / (1 + r)) for r in self.rhos)

    @property
    def alpha(self) -> Tuple[float, ...]:
        return tuple(math.asin(math.sqrt((1 - r * r) / 2)) for r in self.rhos)

    @classmethod
    def isotropic(cls, rho: float, dim: int) -> "AdlmParams":
        return cls(rhos=(rho,) * dim)

    @classmethod
    def from_kernel(
        cls, kernel: "KernelSpec", lattice: LatticeSpec, profile: Tuple[int, ...] = ()
    ) -> "AdlmParams":
        """Adjacent correlations of a smoothing kernel (lattice sum unless the kernel is continuous)"""
        from .covariance import axis_correlations

        rhos = axis_correlations(kernel, lattice, max_lag=1)[:, 1]
        return cls(rhos=tuple(float(r) for r in rhos), profile=profile)


class PeakRecord(BaseModel):
    location: Tuple[int, ...]
    height: float
    kind: str
    boundary: bool = False
    pvalues: Dict[str, float] = Field(default_factory=dict)
    censored: Dict[str, bool] = Field(default_factory=dict)

    @field_validator("pvalues")
    @classmethod
    def validate_pvalues(cls, v):
        for name, p in v.items():
            if not (0.0 <= p <= 1.0):
                raise ValueError(f"p-value for {name} outside [0, 1]: {p}")
        return v


class VolumeHeader(BaseModel):
    magic: Literal["LATMAX-VOL"] = "LATMAX-VOL"
    version: Literal[1] = 1
    D: conint(ge=1)
    sizes: Tuple[int, ...]
    steps: Tuple[float, ...]
    dtype: Literal["f64le"] = "f64le"
    order: Literal["row-major"] = "row-major"


class SampleSetHeader(BaseModel):
    magic: Literal["LATMAX-SAMPLES"] = "LATMAX-SAMPLES"
    version: Literal[1] = 1
    kind: Literal["mcdlm", "reference"] = "mcdlm"
    count: conint(ge=0)
    n_accepted: conint(ge=0)
    n_attempted: conint(ge=0)
    seed: int
    model: str
    cov_fingerprint: str = ""
    dtype: Literal["f64le"] = "f64le"


class TableHeader(BaseModel):
    magic: Literal["LATMAX-TABLE"] = "LATMAX-TABLE"
    version: Literal[1] = 1
    D: conint(ge=1, le=3)
    rho_grid: Tuple[float, ...]
    n_u: conint(ge=2)
    seed: int
    samples_per_rho: conint(ge=1)
    smoothed: bool = False
    lam_rho: Optional[float] = None
    lam_u: Optional[float] = None
    dtype: Literal["f64le"] = "f64le"
    order: Literal["row-major"] = "row-major"
